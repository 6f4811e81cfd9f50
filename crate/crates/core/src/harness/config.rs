// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration and preset resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RECIPES;
use crate::error::{ChannelError, Result};
use crate::intervention::Objective;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    #[default]
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = ChannelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "desk" => Ok(Self::Desk),
            _ => Err(ChannelError::Config(format!("unknown preset {s:?} (expected full or desk)"))),
        }
    }
}

/// Flat run configuration. Optional fields override the preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Directory holding `model.safetensors`; `None` means the reference
    /// checkpoint (env override or cache).
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub fold_ln: bool,
    #[serde(default)]
    pub ioi_per_order: Option<usize>,
    #[serde(default)]
    pub sweep_examples: Option<usize>,
    #[serde(default)]
    pub sweep_step: Option<f64>,
    #[serde(default)]
    pub laundry_ns: Option<Vec<usize>>,
    #[serde(default)]
    pub laundry_count: Option<usize>,
    #[serde(default)]
    pub steer_ns: Option<Vec<usize>>,
    #[serde(default)]
    pub grid_step: Option<f64>,
    #[serde(default)]
    pub calibration: Option<usize>,
    #[serde(default)]
    pub evaluation: Option<usize>,
    #[serde(default)]
    pub objective: Option<Objective>,
    #[serde(default)]
    pub patch_pairs: Option<usize>,
    #[serde(default)]
    pub dup_sequences: Option<usize>,
    #[serde(default)]
    pub dup_length: Option<usize>,
    #[serde(default)]
    pub dup_copies: Option<usize>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            checkpoint: None,
            seed: 0,
            preset: Preset::Desk,
            out_dir: default_out(),
            fold_ln: false,
            ioi_per_order: None,
            sweep_examples: None,
            sweep_step: None,
            laundry_ns: None,
            laundry_count: None,
            steer_ns: None,
            grid_step: None,
            calibration: None,
            evaluation: None,
            objective: None,
            patch_pairs: None,
            dup_sequences: None,
            dup_length: None,
            dup_copies: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ChannelError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !RECIPES.contains(&self.name.as_str()) {
            return Err(ChannelError::UnknownRecipe {
                name: self.name.clone(),
                valid: RECIPES.join(", "),
            });
        }
        self.resolve().map(|_| ())
    }

    /// Concrete parameters after applying the preset and overrides.
    pub fn resolve(&self) -> Result<Params> {
        let full = self.preset == Preset::Full;
        let p = Params {
            ioi_per_order: self.ioi_per_order.unwrap_or(100),
            sweep_examples: self.sweep_examples.unwrap_or(if full { 200 } else { 50 }),
            sweep_step: self.sweep_step.unwrap_or(if full { 10.0 } else { 20.0 }),
            alpha_max: 100.0,
            laundry_ns: self.laundry_ns.clone().unwrap_or_else(|| (3..=10).collect()),
            laundry_count: self.laundry_count.unwrap_or(crate::tasks::DEFAULT_COUNT),
            steer_ns: self.steer_ns.clone().unwrap_or_else(|| (3..=8).collect()),
            grid_step: self.grid_step.unwrap_or(if full { 10.0 } else { 20.0 }),
            calibration: self.calibration.unwrap_or(if full { 100 } else { 50 }),
            evaluation: self.evaluation.unwrap_or(if full { 250 } else { 200 }),
            objective: self.objective.unwrap_or(Objective::Accuracy),
            patch_pairs: self.patch_pairs.unwrap_or(100),
            dup_sequences: self.dup_sequences.unwrap_or(crate::tasks::DEFAULT_SEQUENCES),
            dup_length: self.dup_length.unwrap_or(crate::tasks::DEFAULT_LENGTH),
            dup_copies: self.dup_copies.unwrap_or(crate::tasks::DEFAULT_DUPLICATES),
        };
        p.check()?;
        Ok(p)
    }

    /// `<out_dir>/<name>-seed<seed>-<preset>`
    pub fn run_dir(&self) -> PathBuf {
        let preset = match self.preset {
            Preset::Full => "full",
            Preset::Desk => "desk",
        };
        self.out_dir.join(format!("{}-seed{}-{preset}", self.name, self.seed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub ioi_per_order: usize,
    pub sweep_examples: usize,
    pub sweep_step: f64,
    pub alpha_max: f64,
    pub laundry_ns: Vec<usize>,
    pub laundry_count: usize,
    pub steer_ns: Vec<usize>,
    pub grid_step: f64,
    pub calibration: usize,
    pub evaluation: usize,
    pub objective: Objective,
    pub patch_pairs: usize,
    pub dup_sequences: usize,
    pub dup_length: usize,
    pub dup_copies: usize,
}

impl Params {
    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(ChannelError::Config(m.into()));
        if self.ioi_per_order == 0 || self.sweep_examples == 0 || self.patch_pairs == 0 {
            return bad("example counts must be positive");
        }
        if !(self.sweep_step > 0.0 && self.grid_step > 0.0) {
            return bad("α steps must be positive");
        }
        if self.laundry_ns.iter().chain(&self.steer_ns).any(|&n| !(2..=crate::tasks::OBJECTS.len()).contains(&n)) {
            return bad("object counts must lie in 2..=22");
        }
        if self.calibration == 0 || self.evaluation == 0 || self.laundry_count == 0 {
            return bad("laundry counts must be positive");
        }
        if self.dup_sequences < 2 || self.dup_copies == 0 {
            return bad("duplicate runs need at least 2 sequences and 1 copy each");
        }
        Ok(())
    }

    /// `−alpha_max, …, alpha_max` at `step`.
    pub fn axis(&self, step: f64) -> Vec<f64> {
        crate::intervention::alpha_range(-self.alpha_max, self.alpha_max, step)
    }
}
