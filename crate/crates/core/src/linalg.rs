// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small dense linear-algebra helpers shared by the analysis modules.
//! Analysis runs in `f64`; the runtime stays in `f32`.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{ChannelError, Result};

pub fn to_f64(m: &Array2<f32>) -> Array2<f64> {
    m.mapv(f64::from)
}

pub fn to_f32(m: &Array2<f64>) -> Array2<f32> {
    m.mapv(|v| v as f32)
}

pub fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn to_nalgebra(m: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

pub fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Thin QR: `a = q · r` with `q` column-orthonormal (`n × k`) and `r` `k × k`.
pub fn thin_qr(a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let qr = to_nalgebra(a.view()).qr();
    (from_nalgebra(&qr.q()), from_nalgebra(&qr.r()))
}

/// Full SVD `a = u · diag(s) · vᵀ`, singular values descending.
pub struct Decomposition {
    pub u: Array2<f64>,
    pub s: Array1<f64>,
    pub v: Array2<f64>,
}

pub fn svd(a: &Array2<f64>) -> Result<Decomposition> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(ChannelError::NonConvergence("matrix has non-finite entries".into()));
    }
    let m = to_nalgebra(a.view());
    let svd = nalgebra::SVD::try_new(m, true, true, 1e-15, 10_000)
        .ok_or_else(|| ChannelError::NonConvergence(format!("{}×{} matrix", a.nrows(), a.ncols())))?;
    let u = svd.u.as_ref().expect("requested u");
    let vt = svd.v_t.as_ref().expect("requested v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]).then(i.cmp(&j)));
    let k = order.len();
    let s = Array1::from_iter(order.iter().map(|&i| svd.singular_values[i]));
    let u_out = Array2::from_shape_fn((u.nrows(), k), |(r, c)| u[(r, order[c])]);
    let v_out = Array2::from_shape_fn((vt.ncols(), k), |(r, c)| vt[(order[c], r)]);
    Ok(Decomposition { u: u_out, s, v: v_out })
}

/// Largest absolute deviation of `qᵀq` from the identity.
pub fn orthonormality_error(q: &Array2<f64>) -> f64 {
    let g = q.t().dot(q);
    g.indexed_iter()
        .map(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_sorted_and_reconstructs() {
        let a = ndarray::array![[3.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]];
        let d = svd(&a).unwrap();
        assert_eq!(d.s.to_vec(), vec![5.0, 3.0, 1.0]);
        let rebuilt = d.u.dot(&Array2::from_diag(&d.s)).dot(&d.v.t());
        assert!(frobenius(&(rebuilt - &a)) < 1e-12);
    }

    #[test]
    fn qr_orthonormal() {
        let a = ndarray::array![[1.0, 2.0], [3.0, 4.0], [5.0, 7.0]];
        let (q, r) = thin_qr(&a);
        assert_eq!(q.shape(), &[3, 2]);
        assert!(orthonormality_error(&q) < 1e-12);
        assert!(frobenius(&(q.dot(&r) - &a)) < 1e-12);
    }

    #[test]
    fn non_finite_input_reported() {
        let a = ndarray::array![[f64::NAN, 0.0], [0.0, 1.0]];
        assert!(matches!(svd(&a), Err(ChannelError::NonConvergence(_))));
    }
}
