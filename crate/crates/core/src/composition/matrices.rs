// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-head QK and OV matrices.
//!
//! Row-vector convention throughout: a residual row `x` passes through a
//! head's value/output path as `x · read_v · write_o`, and the query/key
//! bilinear form is `x_q · read_q · read_kᵀ · x_kᵀ`.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ChannelError, Result};
use crate::linalg::{frobenius, to_f64};
use crate::model_io::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Qk,
    Ov,
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatrixKind::Qk => "QK",
            MatrixKind::Ov => "OV",
        })
    }
}

/// A `d × d` matrix kept as `left · right` (`d × r` times `r × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    pub left: Array2<f64>,
    pub right: Array2<f64>,
}

impl LowRank {
    pub fn new(left: Array2<f64>, right: Array2<f64>) -> Result<Self> {
        if left.ncols() != right.nrows() {
            return Err(ChannelError::Shape(format!(
                "low-rank factors {:?} and {:?} do not chain",
                left.shape(),
                right.shape()
            )));
        }
        Ok(Self { left, right })
    }

    pub fn dense(&self) -> Array2<f64> {
        self.left.dot(&self.right)
    }

    pub fn transpose(&self) -> Self {
        Self {
            left: self.right.t().to_owned(),
            right: self.left.t().to_owned(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.left.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.right.ncols()
    }

    /// ‖left · right‖_F computed from the small Gram matrices.
    pub fn frobenius(&self) -> f64 {
        let gl = self.left.t().dot(&self.left);
        let gr = self.right.dot(&self.right.t());
        (&gl * &gr).sum().max(0.0).sqrt()
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.left *= factor;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Repr {
    Dense(Array2<f64>),
    Factored(LowRank),
}

/// A head's `d × d` QK or OV matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMatrix {
    pub kind: MatrixKind,
    pub layer: usize,
    pub head: usize,
    pub folded_ln: bool,
    /// Number of singular triplets an SVD keeps (the head dimension).
    pub retain: usize,
    repr: Repr,
}

/// Toggles for building head matrices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Fold the pre-attention layer-norm gain into the read side(s).
    pub fold_ln: bool,
    /// Include the `1/√d_head` attention scaling in QK.
    pub attn_scale: bool,
}

impl HeadMatrix {
    /// Wrap an arbitrary dense matrix (fixtures, full-rank tests).
    pub fn from_dense(kind: MatrixKind, layer: usize, head: usize, matrix: Array2<f64>, retain: usize) -> Self {
        Self {
            kind,
            layer,
            head,
            folded_ln: false,
            retain,
            repr: Repr::Dense(matrix),
        }
    }

    pub fn from_factors(kind: MatrixKind, layer: usize, head: usize, factors: LowRank) -> Self {
        Self {
            kind,
            layer,
            head,
            folded_ln: false,
            retain: factors.left.ncols(),
            repr: Repr::Factored(factors),
        }
    }

    pub fn dense(&self) -> Array2<f64> {
        match &self.repr {
            Repr::Dense(m) => m.clone(),
            Repr::Factored(lr) => lr.dense(),
        }
    }

    pub fn factors(&self) -> Option<&LowRank> {
        match &self.repr {
            Repr::Factored(lr) => Some(lr),
            Repr::Dense(_) => None,
        }
    }

    /// Low-rank view; dense matrices become `I · M`.
    pub fn low_rank(&self) -> LowRank {
        match &self.repr {
            Repr::Factored(lr) => lr.clone(),
            Repr::Dense(m) => LowRank {
                left: Array2::eye(m.nrows()),
                right: m.clone(),
            },
        }
    }

    pub fn dim(&self) -> usize {
        match &self.repr {
            Repr::Dense(m) => m.nrows(),
            Repr::Factored(lr) => lr.nrows(),
        }
    }

    pub fn frobenius(&self) -> f64 {
        match &self.repr {
            Repr::Dense(m) => frobenius(m),
            Repr::Factored(lr) => lr.frobenius(),
        }
    }
}

/// The head's value-then-output map `read_v · write_o`.
pub fn build_ov(model: &Model, layer: usize, head: usize, opts: BuildOptions) -> Result<HeadMatrix> {
    let hw = model.head(layer, head)?;
    let mut left = to_f64(&hw.read_v);
    if opts.fold_ln {
        fold_rows(&mut left, &hw.ln_gain);
    }
    let mut hm = HeadMatrix::from_factors(MatrixKind::Ov, layer, head, LowRank::new(left, to_f64(&hw.write_o))?);
    hm.folded_ln = opts.fold_ln;
    Ok(hm)
}

/// The query/key bilinear form `read_q · read_kᵀ`.
pub fn build_qk(model: &Model, layer: usize, head: usize, opts: BuildOptions) -> Result<HeadMatrix> {
    let hw = model.head(layer, head)?;
    let mut left = to_f64(&hw.read_q);
    let mut key = to_f64(&hw.read_k);
    if opts.fold_ln {
        fold_rows(&mut left, &hw.ln_gain);
        fold_rows(&mut key, &hw.ln_gain);
    }
    if opts.attn_scale {
        left /= (model.config.d_head as f64).sqrt();
    }
    let mut hm = HeadMatrix::from_factors(MatrixKind::Qk, layer, head, LowRank::new(left, key.t().to_owned())?);
    hm.folded_ln = opts.fold_ln;
    Ok(hm)
}

pub fn build(model: &Model, kind: MatrixKind, layer: usize, head: usize, opts: BuildOptions) -> Result<HeadMatrix> {
    match kind {
        MatrixKind::Ov => build_ov(model, layer, head, opts),
        MatrixKind::Qk => build_qk(model, layer, head, opts),
    }
}

/// `diag(gain) · m`
fn fold_rows(m: &mut Array2<f64>, gain: &ndarray::Array1<f32>) {
    for (mut row, &g) in m.rows_mut().into_iter().zip(gain.iter()) {
        row *= f64::from(g);
    }
}
