// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sign-normalized truncated SVD of head matrices.

use ndarray::{s, Array1, Array2, ArrayView1};

use super::matrices::{HeadMatrix, LowRank};
use crate::error::{ChannelError, Result};
use crate::linalg::{self, thin_qr};

/// Relative gap below which two neighbouring singular values count as tied.
pub const DEGENERACY_TOL: f64 = 1e-6;

/// `W ≈ Σᵢ σᵢ · leftᵢ ⊗ rightᵢ` keeping the top `retain` triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// `d × k`, column-orthonormal (read directions).
    pub left: Array2<f64>,
    pub sigma: Array1<f64>,
    /// `d × k`, column-orthonormal (write directions).
    pub right: Array2<f64>,
    /// Largest-magnitude entry of every right column is positive.
    pub sign_normalized: bool,
    /// Components whose singular value is tied with a neighbour.
    pub unstable: Vec<bool>,
}

impl SvdFactors {
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(ChannelError::OutOfRange {
                what: "component",
                index: i,
                limit: self.len(),
            });
        }
        Ok(())
    }

    pub fn write_direction(&self, i: usize) -> Result<ArrayView1<'_, f64>> {
        self.check(i)?;
        Ok(self.right.column(i))
    }

    pub fn read_direction(&self, i: usize) -> Result<ArrayView1<'_, f64>> {
        self.check(i)?;
        Ok(self.left.column(i))
    }

    /// Component `i` as a rank-1 factor pair `(σᵢ·leftᵢ) (rightᵢ)ᵀ`.
    pub fn component_low_rank(&self, i: usize) -> Result<LowRank> {
        self.check(i)?;
        let left = (&self.left.column(i) * self.sigma[i]).insert_axis(ndarray::Axis(1));
        let right = self.right.column(i).to_owned().insert_axis(ndarray::Axis(0));
        LowRank::new(left, right)
    }

    /// Sum of the components whose multiplier is given, each scaled by it.
    pub fn reconstruct_scaled(&self, multipliers: &[f64]) -> Array2<f64> {
        let scaled: Array1<f64> = self
            .sigma
            .iter()
            .enumerate()
            .map(|(i, s)| s * multipliers.get(i).copied().unwrap_or(1.0))
            .collect();
        let mut left = self.left.clone();
        for (mut col, s) in left.columns_mut().into_iter().zip(scaled.iter()) {
            col *= *s;
        }
        left.dot(&self.right.t())
    }

    pub fn reconstruct(&self) -> Array2<f64> {
        self.reconstruct_scaled(&[])
    }
}

/// Dense rank-1 matrix `σᵢ · leftᵢ ⊗ rightᵢ`.
pub fn component_matrix(f: &SvdFactors, i: usize) -> Result<Array2<f64>> {
    Ok(f.component_low_rank(i)?.dense())
}

/// Truncated SVD keeping `hm.retain` triplets, signs normalized.
///
/// Factored matrices go through thin QR of both factors and an `r × r`
/// SVD, so a 768×768 rank-64 head costs a 64×64 decomposition.
pub fn svd(hm: &HeadMatrix) -> Result<SvdFactors> {
    let (u, s, v) = match hm.factors() {
        Some(lr) => {
            check_finite(&lr.left)?;
            check_finite(&lr.right)?;
            let (qa, ra) = thin_qr(&lr.left);
            let (qb, rb) = thin_qr(&lr.right.t().to_owned());
            let core = linalg::svd(&ra.dot(&rb.t()))?;
            (qa.dot(&core.u), core.s, qb.dot(&core.v))
        }
        None => {
            let d = linalg::svd(&hm.dense())?;
            (d.u, d.s, d.v)
        }
    };
    let k = hm.retain.min(s.len());
    let mut left = u.slice(s![.., ..k]).to_owned();
    let mut right = v.slice(s![.., ..k]).to_owned();
    let sigma = s.slice(s![..k]).mapv(|x| x.max(0.0));
    normalize_signs(&mut left, &mut right);
    let unstable = degenerate_flags(s.as_slice().expect("contiguous"), k);
    Ok(SvdFactors {
        left,
        sigma,
        right,
        sign_normalized: true,
        unstable,
    })
}

fn check_finite(m: &Array2<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ChannelError::NonConvergence("matrix has non-finite entries".into()))
    }
}

/// Flip each pair so the right column's largest-magnitude entry is
/// positive (ties resolve to the lowest index).
fn normalize_signs(left: &mut Array2<f64>, right: &mut Array2<f64>) {
    for i in 0..right.ncols() {
        let col = right.column(i);
        let mut best = 0;
        for (j, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = j;
            }
        }
        if col[best] < 0.0 {
            right.column_mut(i).mapv_inplace(|v| -v);
            left.column_mut(i).mapv_inplace(|v| -v);
        }
    }
}

/// Tie flags for the first `k` values of a descending spectrum. The value
/// just past the cut is included so a tie across the boundary is caught.
fn degenerate_flags(s: &[f64], k: usize) -> Vec<bool> {
    let mut flags = vec![false; k];
    let scale = s.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    for i in 0..k {
        let Some(&next) = s.get(i + 1) else { break };
        let gap = (s[i] - next).abs();
        let tol = DEGENERACY_TOL * s[i].abs().max(next.abs()).max(DEGENERACY_TOL * scale);
        if gap <= tol {
            flags[i] = true;
            if i + 1 < k {
                flags[i + 1] = true;
            }
        }
    }
    flags
}
