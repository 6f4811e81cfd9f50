// SPDX-License-Identifier: MIT OR Apache-2.0

//! Head QK/OV matrices, their SVD components, and composition scores
//! between them.

mod matrices;
mod scores;
mod svd;

pub use matrices::{build, build_ov, build_qk, BuildOptions, HeadMatrix, LowRank, MatrixKind};
pub use scores::{
    composition_score, composition_score_low_rank, z_statistics, Analyzer, ComponentRef, CompositionKind,
    CompositionReport, DecomposedSide, HeadRef, ScanDirection, ScanEntry, ScanResult, OUTLIER_Z,
};
pub use svd::{component_matrix, svd, SvdFactors, DEGENERACY_TOL};

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};

    fn unit(d: usize, seed: usize) -> Array1<f64> {
        let v = Array1::from_iter((0..d).map(|i| ((i * 31 + seed * 17) as f64 * 0.7).sin()));
        let n = v.dot(&v).sqrt();
        v / n
    }

    fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
        a.view().insert_axis(ndarray::Axis(1)).dot(&b.view().insert_axis(ndarray::Axis(0)))
    }

    #[test]
    fn identity_score() {
        let i = Array2::<f64>::eye(768);
        let cs = composition_score(&i, &i).unwrap();
        assert!((cs - 1.0 / 768f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn rank_one_alignment() {
        let (u, v, w) = (unit(16, 1), unit(16, 2), unit(16, 3));
        assert!((composition_score(&outer(&u, &v), &outer(&v, &w)).unwrap() - 1.0).abs() < 1e-12);
        let mut z = unit(16, 4);
        z = &z - &(&v * z.dot(&v));
        z /= z.dot(&z).sqrt();
        assert!(composition_score(&outer(&u, &v), &outer(&z, &w)).unwrap() < 1e-12);
    }

    #[test]
    fn zero_and_shape_errors() {
        let z = Array2::<f64>::zeros((4, 4));
        let i = Array2::<f64>::eye(4);
        assert!(matches!(composition_score(&z, &i), Err(crate::ChannelError::UndefinedScore)));
        assert!(composition_score(&i, &Array2::eye(3)).is_err());
    }

    #[test]
    fn low_rank_score_matches_dense() {
        let a = LowRank::new(
            Array2::from_shape_fn((12, 3), |(i, j)| ((i + 2 * j) as f64).cos()),
            Array2::from_shape_fn((3, 12), |(i, j)| ((3 * i + j) as f64 * 0.4).sin()),
        )
        .unwrap();
        let b = LowRank::new(
            Array2::from_shape_fn((12, 2), |(i, j)| ((i * j) as f64 * 0.3).sin() + 0.1),
            Array2::from_shape_fn((2, 12), |(i, j)| ((i + j) as f64 * 0.9).cos()),
        )
        .unwrap();
        let dense = composition_score(&a.dense(), &b.dense()).unwrap();
        let fast = composition_score_low_rank(&a, &b).unwrap();
        assert!((dense - fast).abs() < 1e-12);
        assert!((a.frobenius() - crate::linalg::frobenius(&a.dense())).abs() < 1e-10);
        let fast_t = composition_score_low_rank(&a, &b.transpose()).unwrap();
        let dense_t = composition_score(&a.dense(), &b.dense().t().to_owned()).unwrap();
        assert!((fast_t - dense_t).abs() < 1e-12);
    }

    #[test]
    fn reference_parsing() {
        let c: ComponentRef = "8.6.2".parse().unwrap();
        assert_eq!(c, ComponentRef::new(8, 6, 2));
        assert_eq!(c.to_string(), "8.6.2");
        assert_eq!("9.9".parse::<HeadRef>().unwrap(), HeadRef::new(9, 9));
        assert!("8.6".parse::<ComponentRef>().is_err());
        assert!("a.b.c".parse::<ComponentRef>().is_err());
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(json, "\"8.6.2\"");
        assert_eq!(serde_json::from_str::<ComponentRef>(&json).unwrap(), c);
    }

    #[test]
    fn z_statistics_population() {
        let (m, s, z) = z_statistics(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.25f64.sqrt()).abs() < 1e-15);
        for (v, zi) in [1.0, 2.0, 3.0, 4.0].iter().zip(&z) {
            assert!((zi - (v - m) / s).abs() < 1e-15);
        }
        let (_, s, z) = z_statistics(&[3.0, 3.0]);
        assert_eq!(s, 0.0);
        assert_eq!(z, vec![0.0, 0.0]);
    }
}
