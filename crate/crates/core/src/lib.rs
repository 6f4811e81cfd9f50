// SPDX-License-Identifier: MIT OR Apache-2.0

//! Discover, edit, and causally test low-rank communication channels
//! between attention heads of GPT-2-style transformers.
//!
//! - [`model_io`]: artifact fetching, tensor container, typed weights
//! - [`tokenizer`]: byte-level BPE compatible with the GPT-2 vocabulary
//! - [`runtime`]: hooked forward pass
//! - [`composition`]: QK/OV matrices, SVD components, composition scores
//! - [`editor`]: singular-value weight edits
//! - [`intervention`]: activation-space sweeps, additions, traversals, patching
//! - [`tasks`]: IOI, Laundry List, and duplicate-token datasets and metrics
//! - [`harness`]: experiment recipes, manifests, and reporting

pub mod composition;
pub mod editor;
pub mod error;
pub mod harness;
pub mod intervention;
pub mod linalg;
pub mod model_io;
pub mod runtime;
pub mod tasks;
pub mod tokenizer;

pub use error::{ChannelError, Result};
