// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation-space experiments along channel directions: α sweeps,
//! duplicate-signal additions, grid traversal with region-map steering,
//! and minimal-pair subspace patching.

mod grid;
mod patch;
mod sweep;

use ndarray::Array1;

pub use grid::{
    build_region_map, default_components, region_contiguity, steered_accuracy, traverse_grid, write_traversal_csv,
    ExampleOutcome, GridPoint3, GridRecord, GridSpec, Objective, RegionMap, Steering, Traversal, MOVER,
};
pub use patch::{patch_dataset, subspace_patch, PatchResult, PatchSite, PatchSpec, PatchSummary};
pub use sweep::{
    add_duplicate_signal, alpha_range, detect_crossover, duplicate_sweep, head_outputs, run_scale_sweep,
    write_curve_csv, Crossover, CurvePoint, DuplicateChannel, NameRole, ScaleSweep, SweepMetric, SweepPosition,
};

use crate::composition::{Analyzer, ComponentRef};
use crate::error::Result;

/// Write direction of an OV component as an `f32` residual vector.
pub fn direction_f32(analyzer: &Analyzer<'_>, c: ComponentRef) -> Result<Array1<f32>> {
    Ok(analyzer.write_direction(c)?.mapv(|v| v as f32))
}

/// Mean and population standard deviation (zeros for empty input).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&x, &[2.0, 4.0, 8.0, 16.0, 32.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[5.0, 3.0, 2.0, 1.0, 0.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&x, &[1.0; 5]), 0.0);
        // scipy.stats.spearmanr([1,2,3,4,5], [1,3,2,5,4]) = 0.8
        assert!((spearman(&x, &[1.0, 3.0, 2.0, 5.0, 4.0]) - 0.8).abs() < 1e-12);
        // ties: spearmanr([1,2,2,3], [1,2,3,4]) = 0.9486832980505138
        assert!((spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]) - 0.948_683_298_050_513_8).abs() < 1e-12);
    }

    #[test]
    fn alpha_grid() {
        let a = alpha_range(-100.0, 100.0, 10.0);
        assert_eq!(a.len(), 21);
        assert_eq!(a[0], -100.0);
        assert_eq!(a[20], 100.0);
        assert_eq!(alpha_range(-100.0, 100.0, 20.0).len(), 11);
    }

    #[test]
    fn crossover_detection() {
        let curve = |f: fn(f64) -> f64| -> Vec<CurvePoint> {
            alpha_range(-100.0, 100.0, 10.0)
                .into_iter()
                .map(|a| CurvePoint {
                    alpha: a,
                    metric_mean: f(a),
                    metric_std: 0.0,
                    n: 1,
                })
                .collect()
        };
        let up = curve(|a| a / 200.0);
        let down = curve(|a| -a / 200.0);
        let flat = curve(|a| 0.3 + a * 1e-5);
        assert!(detect_crossover(&up, &down, 0.8, 0.1).detected);
        assert!(!detect_crossover(&up, &up, 0.8, 0.1).detected);
        assert!(!detect_crossover(&flat, &down, 0.8, 0.1).detected);
    }
}
