// SPDX-License-Identifier: MIT OR Apache-2.0

//! Declarative hook plans: where to look, which positions, what to do.

use std::fmt;

use ndarray::{Array1, Array2, ArrayViewMut1};

use crate::error::{ChannelError, Result};
use crate::model_io::ModelConfig;

/// Named location in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HookPoint {
    /// Residual stream entering block `layer`.
    ResidPre(usize),
    /// One head's additive contribution to the residual stream (value-
    /// weighted sum mapped through its output slice; the layer's shared
    /// output bias is excluded).
    HeadOutput { layer: usize, head: usize },
    /// Post-softmax attention pattern; rows are query positions.
    AttnPattern { layer: usize, head: usize },
    Logits,
}

impl HookPoint {
    pub fn head_output(layer: usize, head: usize) -> Self {
        Self::HeadOutput { layer, head }
    }

    pub fn attn_pattern(layer: usize, head: usize) -> Self {
        Self::AttnPattern { layer, head }
    }

    /// Layer the point belongs to; `None` for logits.
    pub fn layer(&self) -> Option<usize> {
        match *self {
            Self::ResidPre(l) => Some(l),
            Self::HeadOutput { layer, .. } | Self::AttnPattern { layer, .. } => Some(layer),
            Self::Logits => None,
        }
    }

    pub(crate) fn validate(&self, config: &ModelConfig) -> Result<()> {
        match *self {
            Self::ResidPre(l) if l >= config.n_layers => Err(ChannelError::OutOfRange {
                what: "layer",
                index: l,
                limit: config.n_layers,
            }),
            Self::HeadOutput { layer, head } | Self::AttnPattern { layer, head } => {
                config.check_head(layer, head)
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ResidPre(l) => write!(f, "blocks.{l}.hook_resid_pre"),
            Self::HeadOutput { layer, head } => write!(f, "blocks.{layer}.attn.hook_result.{head}"),
            Self::AttnPattern { layer, head } => write!(f, "blocks.{layer}.attn.hook_pattern.{head}"),
            Self::Logits => write!(f, "hook_logits"),
        }
    }
}

/// Which sequence positions a hook touches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Positions {
    All,
    At(Vec<usize>),
    /// Resolves to `len(ids) - 1` at run time.
    Final,
}

impl Positions {
    pub fn resolve(&self, seq_len: usize) -> Result<Vec<usize>> {
        match self {
            Self::All => Ok((0..seq_len).collect()),
            Self::Final => Ok(vec![seq_len - 1]),
            Self::At(ps) => {
                if let Some(&bad) = ps.iter().find(|&&p| p >= seq_len) {
                    return Err(ChannelError::Hook(format!(
                        "position {bad} outside sequence of length {seq_len}"
                    )));
                }
                Ok(ps.clone())
            }
        }
    }
}

/// Value supplied to a replace action.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    /// Broadcast to every selected position.
    Row(Array1<f32>),
    /// One row per selected position, in selector order.
    Rows(Array2<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum HookAction {
    Record,
    Replace(Activation),
    Add(Array1<f32>),
    /// Set the component along a unit `direction` to `values` (one value
    /// broadcast, or one per selected position), leaving the orthogonal
    /// complement untouched.
    SetProjection { direction: Array1<f32>, values: Vec<f32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hook {
    pub point: HookPoint,
    pub positions: Positions,
    pub action: HookAction,
}

impl Hook {
    pub fn new(point: HookPoint, positions: Positions, action: HookAction) -> Self {
        Self { point, positions, action }
    }

    pub fn record(point: HookPoint) -> Self {
        Self::new(point, Positions::All, HookAction::Record)
    }

    pub fn record_at(point: HookPoint, positions: Positions) -> Self {
        Self::new(point, positions, HookAction::Record)
    }

    pub fn replace(point: HookPoint, positions: Positions, value: Array1<f32>) -> Self {
        Self::new(point, positions, HookAction::Replace(Activation::Row(value)))
    }

    pub fn add(point: HookPoint, positions: Positions, value: Array1<f32>) -> Self {
        Self::new(point, positions, HookAction::Add(value))
    }

    pub fn is_record(&self) -> bool {
        matches!(self.action, HookAction::Record)
    }
}

/// Captured activations: one row per recorded position.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub point: HookPoint,
    pub positions: Vec<usize>,
    pub values: Array2<f32>,
}

impl Recording {
    pub fn row_at(&self, position: usize) -> Option<ndarray::ArrayView1<'_, f32>> {
        self.positions
            .iter()
            .position(|&p| p == position)
            .map(|i| self.values.row(i))
    }
}

/// A hook whose positions have been resolved against a sequence.
pub(crate) struct ResolvedHook<'a> {
    pub hook: &'a Hook,
    pub positions: Vec<usize>,
}

pub(crate) fn resolve_hooks<'a>(
    hooks: &'a [Hook],
    config: &ModelConfig,
    seq_len: usize,
) -> Result<Vec<ResolvedHook<'a>>> {
    hooks
        .iter()
        .map(|hook| {
            hook.point.validate(config)?;
            let positions = hook.positions.resolve(seq_len)?;
            let width = match hook.point {
                HookPoint::ResidPre(_) | HookPoint::HeadOutput { .. } => config.d_model,
                HookPoint::AttnPattern { .. } => seq_len,
                HookPoint::Logits => config.vocab_size,
            };
            check_action(&hook.action, width, positions.len(), &hook.point)?;
            Ok(ResolvedHook { hook, positions })
        })
        .collect()
}

fn check_action(action: &HookAction, width: usize, count: usize, point: &HookPoint) -> Result<()> {
    let mismatch = |what: String| Err(ChannelError::Hook(format!("{point}: {what}")));
    match action {
        HookAction::Record => Ok(()),
        HookAction::Replace(Activation::Row(v)) | HookAction::Add(v) if v.len() != width => {
            mismatch(format!("vector of length {} where {width} is required", v.len()))
        }
        HookAction::Replace(Activation::Rows(m)) if m.ncols() != width || m.nrows() != count => mismatch(format!(
            "replacement of shape {:?} where ({count}, {width}) is required",
            m.shape()
        )),
        HookAction::SetProjection { direction, values } => {
            if direction.len() != width {
                return mismatch(format!("direction of length {} where {width} is required", direction.len()));
            }
            if values.len() != 1 && values.len() != count {
                return mismatch(format!("{} projection values for {count} positions", values.len()));
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

/// Apply a modifying action to one row (`index` is the row's rank within
/// the hook's selected positions).
pub(crate) fn apply_to_row(action: &HookAction, mut row: ArrayViewMut1<'_, f32>, index: usize) {
    match action {
        HookAction::Record => {}
        HookAction::Replace(Activation::Row(v)) => row.assign(v),
        HookAction::Replace(Activation::Rows(m)) => row.assign(&m.row(index)),
        HookAction::Add(v) => row += v,
        HookAction::SetProjection { direction, values } => {
            let target = if values.len() == 1 { values[0] } else { values[index] };
            let current = row.dot(direction);
            row.scaled_add(target - current, direction);
        }
    }
}
