// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model artifacts: fetching, the tensor container, and typed weights.

pub mod arch;
pub mod container;
pub mod fetch;
pub mod weights;

use std::path::{Path, PathBuf};

pub use arch::{ArchitectureMap, Role};
pub use container::{load_tensors, DType, TensorEntry, TensorStore};
pub use fetch::{fetch_artifact, CacheManifest, HubSource};
pub use weights::{extract_head_weights, HeadWeights, Model, ModelConfig};

use crate::error::{ChannelError, Result};

/// Points at a directory holding `model.safetensors` (+ `config.json`);
/// takes precedence over the cache.
pub const CHECKPOINT_DIR_ENV: &str = "CHANNELS_CHECKPOINT_DIR";

/// Materialize every file of `source` locally and return the directory that
/// holds them.
pub fn fetch_all(source: &HubSource, cache_dir: &Path) -> Result<PathBuf> {
    let mut dir = None;
    for file in &source.files {
        let path = fetch_artifact(source, file, cache_dir)?;
        dir = path.parent().map(Path::to_path_buf);
    }
    dir.ok_or_else(|| ChannelError::InvalidSource("file list is empty".into()))
}

/// Resolve the reference checkpoint directory: the env override if set,
/// otherwise the cache (fetching unless offline).
pub fn reference_checkpoint_dir(source: &HubSource) -> Result<PathBuf> {
    if let Some(dir) = std::env::var_os(CHECKPOINT_DIR_ENV) {
        let dir = PathBuf::from(dir);
        if dir.join("model.safetensors").exists() {
            return Ok(dir);
        }
        return Err(ChannelError::MissingTensor(format!(
            "{} has no model.safetensors",
            dir.display()
        )));
    }
    fetch_all(source, &fetch::default_cache_dir())
}

/// Load the reference model from [`reference_checkpoint_dir`].
pub fn load_reference_model(source: &HubSource) -> Result<Model> {
    Model::load_dir(reference_checkpoint_dir(source)?)
}
