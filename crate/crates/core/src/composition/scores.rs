// SPDX-License-Identifier: MIT OR Apache-2.0

//! Composition scores between heads and between individual SVD components.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::matrices::{build, BuildOptions, HeadMatrix, LowRank, MatrixKind};
use super::svd::{svd, SvdFactors};
use crate::error::{ChannelError, Result};
use crate::linalg::frobenius;
use crate::model_io::Model;

/// z-score at or above which a component is a channel candidate.
pub const OUTLIER_Z: f64 = 5.0;

/// `‖W1·W2‖_F / (‖W1‖_F · ‖W2‖_F)`
pub fn composition_score(w1: &Array2<f64>, w2: &Array2<f64>) -> Result<f64> {
    if w1.ncols() != w2.nrows() {
        return Err(ChannelError::Shape(format!(
            "cannot compose {:?} with {:?}",
            w1.shape(),
            w2.shape()
        )));
    }
    let (n1, n2) = (frobenius(w1), frobenius(w2));
    if n1 == 0.0 || n2 == 0.0 {
        return Err(ChannelError::UndefinedScore);
    }
    Ok(frobenius(&w1.dot(w2)) / (n1 * n2))
}

/// Same score on factored matrices, never forming a `d × d` product.
pub fn composition_score_low_rank(a: &LowRank, b: &LowRank) -> Result<f64> {
    if a.ncols() != b.nrows() {
        return Err(ChannelError::Shape(format!(
            "cannot compose {}×{} with {}×{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let (n1, n2) = (a.frobenius(), b.frobenius());
    if n1 == 0.0 || n2 == 0.0 {
        return Err(ChannelError::UndefinedScore);
    }
    // ‖L M R‖² = Σ (LᵀL M) ∘ (M RRᵀ) with M = a.right · b.left
    let m = a.right.dot(&b.left);
    let gl = a.left.t().dot(&a.left).dot(&m);
    let gr = m.dot(&b.right.dot(&b.right.t()));
    let product = (&gl * &gr).sum().max(0.0).sqrt();
    Ok(product / (n1 * n2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadRef {
    pub layer: usize,
    pub head: usize,
}

impl HeadRef {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.head)
    }
}

impl FromStr for HeadRef {
    type Err = ChannelError;

    fn from_str(s: &str) -> Result<Self> {
        let parts = parse_indices(s, 2)?;
        Ok(Self::new(parts[0], parts[1]))
    }
}

/// Component `index` of a head's OV SVD, written `L.H.C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ComponentRef {
    pub layer: usize,
    pub head: usize,
    pub index: usize,
}

impl ComponentRef {
    pub fn new(layer: usize, head: usize, index: usize) -> Self {
        Self { layer, head, index }
    }

    pub fn head_ref(&self) -> HeadRef {
        HeadRef::new(self.layer, self.head)
    }
}

impl fmt::Display for ComponentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.layer, self.head, self.index)
    }
}

impl FromStr for ComponentRef {
    type Err = ChannelError;

    fn from_str(s: &str) -> Result<Self> {
        let parts = parse_indices(s, 3)?;
        Ok(Self::new(parts[0], parts[1], parts[2]))
    }
}

impl Serialize for ComponentRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ComponentRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn parse_indices(s: &str, n: usize) -> Result<Vec<usize>> {
    let parts: Vec<usize> = s
        .trim()
        .split('.')
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| ChannelError::Config(format!("cannot parse {s:?} as {n} dot-separated indices")))?;
    if parts.len() != n {
        return Err(ChannelError::Config(format!(
            "{s:?} has {} indices, expected {n}",
            parts.len()
        )));
    }
    Ok(parts)
}

/// Which read of the target head the source writes into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompositionKind {
    Query,
    Key,
    Value,
}

impl FromStr for CompositionKind {
    type Err = ChannelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "query" | "q" => Ok(Self::Query),
            "key" | "k" => Ok(Self::Key),
            "value" | "v" => Ok(Self::Value),
            other => Err(ChannelError::Config(format!("unknown composition kind {other:?}"))),
        }
    }
}

impl fmt::Display for CompositionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Query => "query",
            Self::Key => "key",
            Self::Value => "value",
        })
    }
}

impl CompositionKind {
    /// Target matrix kind read by this composition.
    pub fn target_matrix(self) -> MatrixKind {
        match self {
            Self::Query | Self::Key => MatrixKind::Qk,
            Self::Value => MatrixKind::Ov,
        }
    }
}

/// Which side of the pair is split into components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecomposedSide {
    #[default]
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanDirection {
    Upstream,
    Downstream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub source: HeadRef,
    pub target: HeadRef,
    /// Set when the non-decomposed side is itself a single component.
    pub fixed_component: Option<ComponentRef>,
    pub kind: CompositionKind,
    pub decomposed: DecomposedSide,
    pub checkpoint: String,
    pub fold_ln: bool,
    pub full_score: f64,
    pub component_scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub z_scores: Vec<f64>,
    pub outlier_threshold: f64,
    pub outliers: Vec<usize>,
    pub unstable: Vec<usize>,
}

impl CompositionReport {
    /// Index of the highest-scoring component.
    pub fn top(&self) -> usize {
        argmax(&self.component_scores)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Mean, population standard deviation, and z-scores.
pub fn z_statistics(values: &[f64]) -> (f64, f64, Vec<f64>) {
    if values.is_empty() {
        return (0.0, 0.0, Vec::new());
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let z = values
        .iter()
        .map(|v| if std > 0.0 { (v - mean) / std } else { 0.0 })
        .collect();
    (mean, std, z)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub head: HeadRef,
    pub score: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub component: ComponentRef,
    pub direction: ScanDirection,
    pub kind: CompositionKind,
    pub mean: f64,
    pub std: f64,
    /// Descending by score.
    pub entries: Vec<ScanEntry>,
}

impl ScanResult {
    /// 0-based rank of `head`, if it was scanned.
    pub fn rank_of(&self, head: HeadRef) -> Option<usize> {
        self.entries.iter().position(|e| e.head == head)
    }
}

type MatrixKey = (MatrixKind, usize, usize);

/// Composition analyses over one model with cached head matrices and SVDs.
pub struct Analyzer<'m> {
    model: &'m Model,
    options: BuildOptions,
    matrices: Mutex<HashMap<MatrixKey, Arc<HeadMatrix>>>,
    spectra: Mutex<HashMap<MatrixKey, Arc<SvdFactors>>>,
}

impl<'m> Analyzer<'m> {
    pub fn new(model: &'m Model, options: BuildOptions) -> Self {
        Self {
            model,
            options,
            matrices: Mutex::new(HashMap::new()),
            spectra: Mutex::new(HashMap::new()),
        }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn options(&self) -> BuildOptions {
        self.options
    }

    pub fn matrix(&self, kind: MatrixKind, head: HeadRef) -> Result<Arc<HeadMatrix>> {
        let key = (kind, head.layer, head.head);
        if let Some(m) = self.matrices.lock().expect("cache lock").get(&key) {
            return Ok(m.clone());
        }
        let m = Arc::new(build(self.model, kind, head.layer, head.head, self.options)?);
        self.matrices.lock().expect("cache lock").insert(key, m.clone());
        Ok(m)
    }

    pub fn spectrum(&self, kind: MatrixKind, head: HeadRef) -> Result<Arc<SvdFactors>> {
        let key = (kind, head.layer, head.head);
        if let Some(f) = self.spectra.lock().expect("cache lock").get(&key) {
            return Ok(f.clone());
        }
        let f = Arc::new(svd(self.matrix(kind, head)?.as_ref())?);
        self.spectra.lock().expect("cache lock").insert(key, f.clone());
        Ok(f)
    }

    /// SVDs of every head of the given kind, computed in parallel.
    pub fn precompute(&self, kind: MatrixKind) -> Result<()> {
        let cfg = &self.model.config;
        let heads: Vec<HeadRef> = (0..cfg.n_layers)
            .flat_map(|l| (0..cfg.n_heads_per_layer).map(move |h| HeadRef::new(l, h)))
            .collect();
        heads
            .par_iter()
            .map(|&h| self.spectrum(kind, h).map(|_| ()))
            .collect::<Result<Vec<()>>>()?;
        Ok(())
    }

    pub fn ov_spectrum(&self, head: HeadRef) -> Result<Arc<SvdFactors>> {
        self.spectrum(MatrixKind::Ov, head)
    }

    /// Unit vector the OV component writes into (row-vector convention).
    pub fn write_direction(&self, c: ComponentRef) -> Result<Array1<f64>> {
        let f = self.ov_spectrum(c.head_ref())?;
        let v = f.write_direction(c.index)?.to_owned();
        Ok(v)
    }

    /// Unit vector the OV component reads from.
    pub fn read_direction(&self, c: ComponentRef) -> Result<Array1<f64>> {
        let f = self.ov_spectrum(c.head_ref())?;
        let v = f.read_direction(c.index)?.to_owned();
        Ok(v)
    }

    pub fn component(&self, kind: MatrixKind, c: ComponentRef) -> Result<LowRank> {
        self.spectrum(kind, c.head_ref())?.component_low_rank(c.index)
    }

    /// Target-side matrix for a composition kind (QKᵀ for keys).
    fn target_side(&self, head: HeadRef, kind: CompositionKind) -> Result<LowRank> {
        let m = self.matrix(kind.target_matrix(), head)?.low_rank();
        Ok(if kind == CompositionKind::Key { m.transpose() } else { m })
    }

    fn target_component(&self, c: ComponentRef, kind: CompositionKind) -> Result<LowRank> {
        let m = self.component(kind.target_matrix(), c)?;
        Ok(if kind == CompositionKind::Key { m.transpose() } else { m })
    }

    /// Per-component scores between the source head's OV and the target's
    /// QK, QKᵀ, or OV. `target_component` narrows the target to one of
    /// its components (e.g. `3.0 → 7.9.6`).
    pub fn component_scores(
        &self,
        source: HeadRef,
        target: HeadRef,
        kind: CompositionKind,
        side: DecomposedSide,
        target_component: Option<usize>,
    ) -> Result<CompositionReport> {
        if source.layer >= target.layer {
            return Err(ChannelError::LayerOrder {
                source_layer: source.layer,
                target_layer: target.layer,
            });
        }
        let fixed = target_component.map(|i| ComponentRef::new(target.layer, target.head, i));
        let target_full = match fixed {
            Some(c) => self.target_component(c, kind)?,
            None => self.target_side(target, kind)?,
        };
        let source_full = self.matrix(MatrixKind::Ov, source)?.low_rank();
        let full_score = composition_score_low_rank(&source_full, &target_full)?;

        let (scores, unstable_flags) = match side {
            DecomposedSide::Source => {
                let f = self.ov_spectrum(source)?;
                let scores = (0..f.len())
                    .map(|i| composition_score_low_rank(&f.component_low_rank(i)?, &target_full))
                    .collect::<Result<Vec<f64>>>()?;
                (scores, f.unstable.clone())
            }
            DecomposedSide::Target => {
                if fixed.is_some() {
                    return Err(ChannelError::Config(
                        "target-side decomposition cannot also fix a target component".into(),
                    ));
                }
                let f = self.spectrum(kind.target_matrix(), target)?;
                let scores = (0..f.len())
                    .map(|i| {
                        let c = self.target_component(ComponentRef::new(target.layer, target.head, i), kind)?;
                        composition_score_low_rank(&source_full, &c)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                (scores, f.unstable.clone())
            }
        };
        let (mean, std, z_scores) = z_statistics(&scores);
        let outliers = z_scores
            .iter()
            .enumerate()
            .filter(|(_, z)| **z >= OUTLIER_Z)
            .map(|(i, _)| i)
            .collect();
        let unstable = unstable_flags
            .iter()
            .enumerate()
            .filter(|(_, u)| **u)
            .map(|(i, _)| i)
            .collect();
        Ok(CompositionReport {
            source,
            target,
            fixed_component: fixed,
            kind,
            decomposed: side,
            checkpoint: self.model.checkpoint_id.clone(),
            fold_ln: self.options.fold_ln,
            full_score,
            component_scores: scores,
            mean,
            std,
            z_scores,
            outlier_threshold: OUTLIER_Z,
            outliers,
            unstable,
        })
    }

    /// Rank heads by how strongly they compose with one component.
    ///
    /// Downstream: `CS(component of OV_c, QK_h | QK_hᵀ | OV_h)` over later
    /// layers. Upstream: `CS(OV_h, component)` over earlier layers, where
    /// the component is taken from `c`'s QK for query/key scans and from
    /// its OV for value scans.
    pub fn scan_channel(&self, c: ComponentRef, direction: ScanDirection, kind: CompositionKind) -> Result<ScanResult> {
        let cfg = &self.model.config;
        cfg.check_head(c.layer, c.head)?;
        let layers: Vec<usize> = match direction {
            ScanDirection::Downstream => (c.layer + 1..cfg.n_layers).collect(),
            ScanDirection::Upstream => (0..c.layer).collect(),
        };
        let heads: Vec<HeadRef> = layers
            .iter()
            .flat_map(|&l| (0..cfg.n_heads_per_layer).map(move |h| HeadRef::new(l, h)))
            .collect();
        let scores = match direction {
            ScanDirection::Downstream => {
                let comp = self.component(MatrixKind::Ov, c)?;
                heads
                    .par_iter()
                    .map(|&h| composition_score_low_rank(&comp, &self.target_side(h, kind)?))
                    .collect::<Result<Vec<f64>>>()?
            }
            ScanDirection::Upstream => {
                let comp = self.target_component(c, kind)?;
                heads
                    .par_iter()
                    .map(|&h| composition_score_low_rank(&self.matrix(MatrixKind::Ov, h)?.low_rank(), &comp))
                    .collect::<Result<Vec<f64>>>()?
            }
        };
        let (mean, std, z) = z_statistics(&scores);
        let mut entries: Vec<ScanEntry> = heads
            .into_iter()
            .zip(scores)
            .zip(z)
            .map(|((head, score), z)| ScanEntry { head, score, z })
            .collect();
        entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.head.cmp(&b.head)));
        Ok(ScanResult {
            component: c,
            direction,
            kind,
            mean,
            std,
            entries,
        })
    }
}
