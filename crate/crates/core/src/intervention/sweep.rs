// SPDX-License-Identifier: MIT OR Apache-2.0

//! One-dimensional sweeps along a component's write direction, and
//! duplicate-channel additions.

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{direction_f32, mean_std, spearman};
use crate::composition::{Analyzer, ComponentRef, HeadRef};
use crate::error::{ChannelError, Result};
use crate::runtime::{final_attention_row, greedy_next, logit_of, FinalOutput, Hook, HookPoint, Outputs, Positions};
use crate::tasks::{inhibition_from_row, IoiExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepPosition {
    #[default]
    Final,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSweep {
    pub component: ComponentRef,
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub position: SweepPosition,
    #[serde(default)]
    pub dataset: String,
}

impl ScaleSweep {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(ChannelError::Intervention("sweep has no α values".into()));
        }
        if self.alphas.iter().any(|a| !a.is_finite()) || self.alphas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ChannelError::Intervention("α values must be finite and strictly increasing".into()));
        }
        Ok(())
    }
}

/// `lo, lo+step, …, hi` (inclusive when `hi` lands on the grid).
pub fn alpha_range(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| lo + step * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "metric")]
pub enum SweepMetric {
    /// Mover attention to IO minus attention to S1.
    Inhibition { mover: HeadRef },
    /// `logit(IO) − logit(S)`.
    LogitDiff,
    /// Greedy prediction equals IO.
    Accuracy,
}

impl SweepMetric {
    fn evaluate(&self, out: &FinalOutput, ex: &IoiExample) -> Result<f64> {
        match *self {
            Self::Inhibition { mover } => {
                let row = final_attention_row(out, mover.layer, mover.head, ex.ids.len())?;
                inhibition_from_row(row.view(), ex)
            }
            Self::LogitDiff => Ok(f64::from(logit_of(out, ex.answer) - logit_of(out, ex.s_token))),
            Self::Accuracy => Ok(if greedy_next(out) == ex.answer { 1.0 } else { 0.0 }),
        }
    }

    fn records(&self) -> Vec<Hook> {
        match *self {
            Self::Inhibition { mover } => vec![Hook::record_at(
                HookPoint::attn_pattern(mover.layer, mover.head),
                Positions::Final,
            )],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub metric_mean: f64,
    pub metric_std: f64,
    pub n: usize,
}

/// For every α, replace the component's head output with `α·w` and
/// average the metric over `examples`.
pub fn run_scale_sweep(
    analyzer: &Analyzer<'_>,
    sweep: &ScaleSweep,
    examples: &[IoiExample],
    metric: SweepMetric,
) -> Result<Vec<CurvePoint>> {
    sweep.validate()?;
    if examples.is_empty() {
        return Err(ChannelError::Intervention("sweep over an empty dataset".into()));
    }
    let model = analyzer.model();
    let c = sweep.component;
    if let SweepMetric::Inhibition { mover } = metric {
        if mover.layer < c.layer {
            return Err(ChannelError::LayerOrder {
                source_layer: c.layer,
                target_layer: mover.layer,
            });
        }
    }
    let w = direction_f32(analyzer, c)?;
    let point = HookPoint::head_output(c.layer, c.head);
    let per_example: Vec<Vec<f64>> = examples
        .par_iter()
        .map(|ex| {
            let cache = match sweep.position {
                SweepPosition::Final => Some(model.prefix_cache(&ex.ids, c.layer, &[])?),
                SweepPosition::All => None,
            };
            sweep
                .alphas
                .iter()
                .map(|&a| {
                    let v: Array1<f32> = &w * a as f32;
                    let mut hooks = match sweep.position {
                        SweepPosition::Final => vec![Hook::replace(point, Positions::Final, v)],
                        SweepPosition::All => vec![Hook::replace(point, Positions::All, v)],
                    };
                    hooks.extend(metric.records());
                    let out = match &cache {
                        Some(cache) => model.continue_final(cache, &hooks)?,
                        None => model.forward_final(&ex.ids, &hooks)?,
                    };
                    metric.evaluate(&out, ex)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(sweep
        .alphas
        .iter()
        .enumerate()
        .map(|(i, &alpha)| {
            let vals: Vec<f64> = per_example.iter().map(|v| v[i]).collect();
            let (metric_mean, metric_std) = mean_std(&vals);
            CurvePoint {
                alpha,
                metric_mean,
                metric_std,
                n: vals.len(),
            }
        })
        .collect())
}

pub fn write_curve_csv(path: &std::path::Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["alpha", "metric_mean", "metric_std"])?;
    for p in curve {
        w.write_record([p.alpha.to_string(), p.metric_mean.to_string(), p.metric_std.to_string()])?;
    }
    w.flush().map_err(|e| ChannelError::io(path, e))?;
    Ok(())
}

/// Order-dependent reversal between the IO-first and S1-first curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossover {
    pub rho_io_first: f64,
    pub rho_s1_first: f64,
    pub range_io_first: f64,
    pub range_s1_first: f64,
    pub min_abs_rho: f64,
    pub min_range: f64,
    pub detected: bool,
}

/// Opposite monotone trends: Spearman ρ of opposite sign, each at least
/// `min_abs_rho` in magnitude, and each curve moving by at least
/// `min_range`.
pub fn detect_crossover(io_first: &[CurvePoint], s1_first: &[CurvePoint], min_abs_rho: f64, min_range: f64) -> Crossover {
    let trend = |c: &[CurvePoint]| {
        let a: Vec<f64> = c.iter().map(|p| p.alpha).collect();
        let m: Vec<f64> = c.iter().map(|p| p.metric_mean).collect();
        let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (spearman(&a, &m), if m.is_empty() { 0.0 } else { hi - lo })
    };
    let (rho_io_first, range_io_first) = trend(io_first);
    let (rho_s1_first, range_s1_first) = trend(s1_first);
    let detected = rho_io_first * rho_s1_first < 0.0
        && rho_io_first.abs() >= min_abs_rho
        && rho_s1_first.abs() >= min_abs_rho
        && range_io_first >= min_range
        && range_s1_first >= min_range;
    Crossover {
        rho_io_first,
        rho_s1_first,
        range_io_first,
        range_s1_first,
        min_abs_rho,
        min_range,
        detected,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NameRole {
    Io,
    S1,
}

/// Where and along what the duplicate signal is added.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicateChannel {
    pub components: Vec<ComponentRef>,
    /// Residual stream entering this layer receives the addition.
    pub layer: usize,
}

impl Default for DuplicateChannel {
    fn default() -> Self {
        Self {
            components: vec![ComponentRef::new(3, 0, 1), ComponentRef::new(3, 0, 2)],
            layer: 7,
        }
    }
}

impl DuplicateChannel {
    /// `(w₁ + … + w_k)/√k`
    pub fn direction(&self, analyzer: &Analyzer<'_>) -> Result<Array1<f32>> {
        if self.components.is_empty() {
            return Err(ChannelError::Intervention("duplicate channel has no components".into()));
        }
        let mut sum = Array1::<f32>::zeros(analyzer.model().config.d_model);
        for &c in &self.components {
            sum += &direction_f32(analyzer, c)?;
        }
        Ok(sum / (self.components.len() as f32).sqrt())
    }
}

/// Add `α·direction` to the residual entering `channel.layer` at the
/// example's IO or S1 position; `extra` hooks (e.g. records) follow.
pub fn add_duplicate_signal(
    analyzer: &Analyzer<'_>,
    channel: &DuplicateChannel,
    ex: &IoiExample,
    role: NameRole,
    alpha: f64,
    extra: &[Hook],
) -> Result<FinalOutput> {
    let pos = match role {
        NameRole::Io => ex.io_pos,
        NameRole::S1 => ex.s1_pos,
    };
    if pos >= ex.ids.len() {
        return Err(ChannelError::Intervention(format!("{role:?} position {pos} missing from prompt")));
    }
    let dir = channel.direction(analyzer)?;
    let mut hooks = vec![Hook::add(
        HookPoint::ResidPre(channel.layer),
        Positions::At(vec![pos]),
        dir * alpha as f32,
    )];
    hooks.extend_from_slice(extra);
    analyzer.model().forward_final(&ex.ids, &hooks)
}

/// Mean inhibition score for each α, adding at `role`.
pub fn duplicate_sweep(
    analyzer: &Analyzer<'_>,
    channel: &DuplicateChannel,
    examples: &[IoiExample],
    role: NameRole,
    alphas: &[f64],
    mover: HeadRef,
) -> Result<Vec<CurvePoint>> {
    let rec = [Hook::record_at(HookPoint::attn_pattern(mover.layer, mover.head), Positions::Final)];
    alphas
        .iter()
        .map(|&alpha| {
            let vals = examples
                .par_iter()
                .map(|ex| {
                    let out = add_duplicate_signal(analyzer, channel, ex, role, alpha, &rec)?;
                    let row = final_attention_row(&out, mover.layer, mover.head, ex.ids.len())?;
                    inhibition_from_row(row.view(), ex)
                })
                .collect::<Result<Vec<f64>>>()?;
            let (metric_mean, metric_std) = mean_std(&vals);
            Ok(CurvePoint {
                alpha,
                metric_mean,
                metric_std,
                n: vals.len(),
            })
        })
        .collect()
}

/// Recorded output of one head at every position of `ids`.
pub fn head_outputs(analyzer: &Analyzer<'_>, head: HeadRef, ids: &[u32]) -> Result<ndarray::Array2<f32>> {
    let point = HookPoint::head_output(head.layer, head.head);
    let out = analyzer.model().forward(ids, &[Hook::record(point)])?;
    Ok(out
        .recording(point)
        .ok_or_else(|| ChannelError::NotRecorded(point.to_string()))?
        .values
        .clone())
}
