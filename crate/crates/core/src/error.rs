// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, ChannelError>;

#[derive(Debug, thiserror::Error)]
pub enum ChannelError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    // -- artifact fetching --
    #[error("network failure fetching {url}: {message}")]
    Network { url: String, message: String },

    #[error("artifact {file} not found at {url}")]
    NotFound { file: String, url: String },

    #[error("checksum mismatch for {file}: expected {expected}, got {actual}")]
    ChecksumMismatch {
        file: String,
        expected: String,
        actual: String,
    },

    #[error("offline mode is enabled and {file} is not cached")]
    Offline { file: String },

    #[error("invalid artifact source: {0}")]
    InvalidSource(String),

    // -- tensor container --
    #[error("malformed tensor container header: {0}")]
    MalformedHeader(String),

    #[error("tensor spans overlap: {first} and {second}")]
    OverlappingSpans { first: String, second: String },

    #[error("tensor container truncated: {0}")]
    Truncated(String),

    #[error("tensor {0} missing from checkpoint")]
    MissingTensor(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{what} index {index} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    // -- tokenizer --
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    UnknownToken { id: u32, vocab_size: usize },

    #[error("tokenizer asset error: {0}")]
    Tokenizer(String),

    // -- runtime --
    #[error("sequence of length {len} exceeds context window {n_ctx}")]
    ContextOverflow { len: usize, n_ctx: usize },

    #[error("hook error: {0}")]
    Hook(String),

    #[error("{0} was not recorded during the forward pass")]
    NotRecorded(String),

    // -- composition / linear algebra --
    #[error("composition score undefined for a zero matrix")]
    UndefinedScore,

    #[error("SVD did not converge: {0}")]
    NonConvergence(String),

    #[error("source layer {source_layer} must precede target layer {target_layer}")]
    LayerOrder {
        source_layer: usize,
        target_layer: usize,
    },

    // -- editor --
    #[error("invalid edit: {0}")]
    InvalidEdit(String),

    // -- tasks / interventions --
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("intervention error: {0}")]
    Intervention(String),

    #[error("metric error: {0}")]
    Metric(String),

    // -- harness --
    #[error("unknown recipe {name:?}; valid recipes: {valid}")]
    UnknownRecipe { name: String, valid: String },

    #[error("no manifest found in {0}")]
    MissingManifest(PathBuf),

    #[error("acceptance check failed: {0}")]
    AssertionFailed(String),
}

impl ChannelError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether retrying the failed operation could succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Network { .. })
    }
}
