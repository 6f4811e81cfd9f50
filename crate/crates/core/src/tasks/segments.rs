// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt assembly from word-boundary segments with tracked token positions.

use crate::error::{ChannelError, Result};
use crate::tokenizer::Tokenizer;

/// Accumulates text pieces and the token index at which each one starts.
pub(crate) struct PromptBuilder<'t> {
    tok: &'t Tokenizer,
    text: String,
    ids: Vec<u32>,
}

impl<'t> PromptBuilder<'t> {
    pub fn new(tok: &'t Tokenizer) -> Self {
        Self {
            tok,
            text: String::new(),
            ids: Vec::new(),
        }
    }

    /// Append free text; returns the token index where it starts.
    pub fn push(&mut self, piece: &str) -> usize {
        let start = self.ids.len();
        self.text.push_str(piece);
        self.ids.extend(self.tok.encode(piece));
        start
    }

    /// Append a piece that must be exactly one token; returns its index.
    pub fn push_single(&mut self, piece: &str) -> Result<usize> {
        let ids = self.tok.encode(piece);
        if ids.len() != 1 {
            return Err(ChannelError::Dataset(format!(
                "{piece:?} is {} tokens, expected one",
                ids.len()
            )));
        }
        let at = self.ids.len();
        self.text.push_str(piece);
        self.ids.push(ids[0]);
        Ok(at)
    }

    /// Finish, checking that re-tokenizing the whole text reproduces the
    /// piecewise ids (so every recorded position is valid).
    pub fn finish(self) -> Result<(String, Vec<u32>)> {
        let whole = self.tok.encode(&self.text);
        if whole != self.ids {
            return Err(ChannelError::Dataset(format!(
                "position integrity check failed for {:?}",
                self.text
            )));
        }
        Ok((self.text, self.ids))
    }
}
