// SPDX-License-Identifier: MIT OR Apache-2.0

//! Random-token sequences with a few inserted repeats.

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ChannelError, Result};
use crate::tokenizer::Tokenizer;

pub const DEFAULT_LENGTH: usize = 100;
pub const DEFAULT_DUPLICATES: usize = 10;
pub const DEFAULT_SEQUENCES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicateSeqExample {
    pub ids: Vec<u32>,
    /// `(first occurrence, copy)` positions; the first always precedes.
    pub duplicates: Vec<(usize, usize)>,
}

impl DuplicateSeqExample {
    /// Whether the token at `pos` repeats an earlier one.
    pub fn is_duplicate(&self, pos: usize) -> bool {
        self.duplicates.iter().any(|&(_, c)| c == pos)
    }
}

/// Ids whose decoded form is a single space-led word of ASCII letters.
pub fn printable_ids(tok: &Tokenizer) -> Vec<u32> {
    (0..tok.vocab_size() as u32)
        .filter(|&id| {
            let Ok(bytes) = tok.decode_bytes(&[id]) else { return false };
            let Ok(s) = std::str::from_utf8(&bytes) else { return false };
            match s.strip_prefix(' ') {
                Some(word) => word.len() >= 2 && word.bytes().all(|b| b.is_ascii_alphabetic()),
                None => false,
            }
        })
        .collect()
}

/// `count` sequences of `length` distinct ids from `pool`, each with
/// `n_duplicates` copies inserted after their source.
pub fn gen_duplicate_seqs(
    pool: &[u32],
    length: usize,
    n_duplicates: usize,
    count: usize,
    n_ctx: usize,
    seed: u64,
) -> Result<Vec<DuplicateSeqExample>> {
    if length + n_duplicates > n_ctx {
        return Err(ChannelError::Dataset(format!(
            "{length} tokens plus {n_duplicates} duplicates exceed the context window {n_ctx}"
        )));
    }
    if n_duplicates > length || pool.len() < length {
        return Err(ChannelError::Dataset(format!(
            "cannot draw {length} distinct tokens with {n_duplicates} duplicates from a pool of {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let base: Vec<u32> = pool.choose_multiple(&mut rng, length).copied().collect();
            // (id, base index of the source if this entry is a copy)
            let mut seq: Vec<(u32, Option<usize>)> = base.iter().map(|&t| (t, None)).collect();
            let sources = (0..length).choose_multiple(&mut rng, n_duplicates);
            for src in sources {
                let at = seq
                    .iter()
                    .position(|&(t, copy)| copy.is_none() && t == base[src])
                    .expect("source present");
                let insert = rng.gen_range(at + 1..=seq.len());
                seq.insert(insert, (base[src], Some(src)));
            }
            let ids: Vec<u32> = seq.iter().map(|&(t, _)| t).collect();
            let mut duplicates: Vec<(usize, usize)> = seq
                .iter()
                .enumerate()
                .filter_map(|(pos, &(t, copy))| {
                    copy.map(|_| (ids.iter().position(|&x| x == t).expect("source present"), pos))
                })
                .collect();
            duplicates.sort_unstable();
            Ok(DuplicateSeqExample { ids, duplicates })
        })
        .collect()
}
