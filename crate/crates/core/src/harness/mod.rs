// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named experiment recipes, run manifests, and summary reports.

mod config;
mod manifest;
mod recipes;
mod report;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

pub use config::{ExperimentConfig, Params, Preset};
pub use manifest::{code_version, Check, RunManifest, MANIFEST_FILE};
pub use recipes::{
    control_component, duplicate_points, laundry_split, mean_inhibition, top_query_component, Context,
    INHIBITION_HEADS, SEPARABILITY_THRESHOLD,
};
pub use report::{report, Report, ReportRow};

use crate::error::{ChannelError, Result};
use crate::model_io::{HubSource, Model};
use crate::tokenizer::Tokenizer;

pub const RECIPES: [&str; 10] = [
    "compose-scan",
    "edit-inhibition",
    "keep-only",
    "ioi-sweep",
    "duplicate-add",
    "subspace-patch",
    "ll-baseline",
    "ll-traverse",
    "ll-steer",
    "duplicate-separability",
];

/// Exit status for a run whose acceptance checks failed under `--assert`.
pub const ASSERTION_EXIT_CODE: i32 = 3;

/// Load the configured checkpoint and run the recipe.
pub fn run(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    let model = match &config.checkpoint {
        Some(dir) => Model::load_dir(dir)?,
        None => crate::model_io::load_reference_model(&HubSource::gpt2_small())?,
    };
    run_with_model(config, Arc::new(model), Tokenizer::gpt2())
}

/// Run a recipe against an already loaded model; writes the manifest last.
pub fn run_with_model(config: &ExperimentConfig, model: Arc<Model>, tok: &Tokenizer) -> Result<RunManifest> {
    config.validate()?;
    let params = config.resolve()?;
    let dir = config.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| ChannelError::io(&dir, e))?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let clock = Instant::now();
    tracing::info!(recipe = %config.name, dir = %dir.display(), "starting run");

    let mut ctx = Context {
        model: model.clone(),
        tok,
        config,
        params: params.clone(),
        dir: dir.clone(),
        metrics: BTreeMap::new(),
        checks: Vec::new(),
        files: Vec::new(),
    };
    recipes::dispatch(&config.name, &mut ctx)?;

    let manifest = RunManifest {
        recipe: config.name.clone(),
        config: config.clone(),
        params,
        checkpoint: model.checkpoint_id.clone(),
        code_version: code_version(),
        started_at,
        wall_clock_secs: clock.elapsed().as_secs_f64(),
        metrics: ctx.metrics,
        checks: ctx.checks,
        files: ctx.files,
    };
    manifest.write(&dir)?;
    Ok(manifest)
}

/// Re-run the configuration recorded in a manifest directory.
pub fn rerun(dir: &std::path::Path, out_dir: PathBuf) -> Result<RunManifest> {
    let mut config = RunManifest::read(dir)?.config;
    config.out_dir = out_dir;
    run(&config)
}
