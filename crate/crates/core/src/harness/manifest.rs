// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifests: everything needed to re-run and judge a recipe.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Params};
use crate::error::{ChannelError, Result};
use crate::model_io::fetch::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.json";

/// One acceptance threshold and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// Human-readable target, e.g. `0.70 ± 0.10`.
    pub target: String,
    pub measured: f64,
    pub pass: bool,
}

impl Check {
    pub fn within(name: impl Into<String>, measured: f64, center: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            target: format!("{center} ± {tol}"),
            measured,
            pass: (measured - center).abs() <= tol,
        }
    }

    pub fn at_least(name: impl Into<String>, measured: f64, min: f64) -> Self {
        Self {
            name: name.into(),
            target: format!("≥ {min}"),
            measured,
            pass: measured >= min,
        }
    }

    pub fn at_most(name: impl Into<String>, measured: f64, max: f64) -> Self {
        Self {
            name: name.into(),
            target: format!("≤ {max}"),
            measured,
            pass: measured <= max,
        }
    }

    pub fn range(name: impl Into<String>, measured: f64, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            target: format!("[{lo}, {hi}]"),
            measured,
            pass: (lo..=hi).contains(&measured),
        }
    }

    /// A boolean condition; `measured` is 1 or 0.
    pub fn holds(name: impl Into<String>, target: impl Into<String>, ok: bool) -> Self {
        Self {
            name: name.into(),
            target: target.into(),
            measured: if ok { 1.0 } else { 0.0 },
            pass: ok,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub recipe: String,
    pub config: ExperimentConfig,
    pub params: Params,
    pub checkpoint: String,
    pub code_version: String,
    pub started_at: String,
    pub wall_clock_secs: f64,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    /// Result files relative to the run directory.
    pub files: Vec<PathBuf>,
}

impl RunManifest {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failed_checks(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(ChannelError::MissingManifest(dir.to_path_buf()));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| ChannelError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn code_version() -> String {
    concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string()
}
