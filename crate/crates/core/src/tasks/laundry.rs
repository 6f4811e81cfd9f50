// SPDX-License-Identifier: MIT OR Apache-2.0

//! Leave-one-out list recall: N objects are listed, N−1 are repeated in a
//! shuffled order, and the prompt ends where the missing one belongs.
//!
//! "Today, I need to buy the pen, the cup, and the ball. First, I will buy
//! the ball, then the pen, and finally the" → " cup"

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::segments::PromptBuilder;
use crate::error::{ChannelError, Result};
use crate::tokenizer::Tokenizer;

pub const OBJECTS: [&str; 22] = [
    "pencil", "notebook", "pen", "cup", "plate", "jug", "mug", "puzzle", "textbook", "leash", "necklace", "bracelet",
    "bottle", "ball", "envelope", "lighter", "bowl", "apple", "pear", "banana", "orange", "steak",
];

pub const FIRST_STARTS: [&str; 4] = [" Today,", " Tonight,", " Tomorrow,", ""];
pub const SECOND_STARTS: [&str; 4] = [" First,", "", " When I go,", " I think"];

pub const DEFAULT_COUNT: usize = 250;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaundryExample {
    pub n: usize,
    pub text: String,
    pub ids: Vec<u32>,
    /// Objects in first-sentence order.
    pub objects: Vec<String>,
    /// Index into `objects` of the one left out of the second sentence.
    pub missing_index: usize,
    /// Indices into `objects` in second-sentence order.
    pub second_order: Vec<usize>,
    /// Token position of each object in the first sentence.
    pub first_positions: Vec<usize>,
    /// Token position of each second-sentence mention, in second order.
    pub second_positions: Vec<usize>,
    pub end_pos: usize,
    pub answer: u32,
    /// Token id of every object, in first-sentence order.
    pub object_tokens: Vec<u32>,
    pub first_start: String,
    pub second_start: String,
}

/// Build one prompt from explicit choices.
pub fn render_laundry(
    tok: &Tokenizer,
    objects: &[&str],
    missing_index: usize,
    second_order: &[usize],
    first_start: &str,
    second_start: &str,
) -> Result<LaundryExample> {
    let n = objects.len();
    if missing_index >= n || second_order.len() + 1 != n || second_order.contains(&missing_index) {
        return Err(ChannelError::Dataset("second list must be the first list minus the missing object".into()));
    }
    let mut b = PromptBuilder::new(tok);
    // a prompt opening with an empty start has no leading space
    let opener = format!("{first_start} I need to buy");
    b.push(opener.trim_start());
    let mut first_positions = Vec::with_capacity(n);
    for (i, obj) in objects.iter().enumerate() {
        if i > 0 {
            b.push(if n > 2 { "," } else { "" });
            if i == n - 1 {
                b.push(" and");
            }
        }
        b.push(" the");
        first_positions.push(b.push_single(&format!(" {obj}"))?);
    }
    b.push(".");
    b.push(&format!("{second_start} I will buy the"));
    let mut second_positions = Vec::with_capacity(n - 1);
    for (k, &idx) in second_order.iter().enumerate() {
        if k > 0 {
            b.push(", then the");
        }
        second_positions.push(b.push_single(&format!(" {}", objects[idx]))?);
    }
    b.push(", and finally the");
    let (text, ids) = b.finish()?;
    let object_tokens: Vec<u32> = first_positions.iter().map(|&p| ids[p]).collect();
    Ok(LaundryExample {
        n,
        end_pos: ids.len() - 1,
        answer: object_tokens[missing_index],
        object_tokens,
        text,
        ids,
        objects: objects.iter().map(|s| s.to_string()).collect(),
        missing_index,
        second_order: second_order.to_vec(),
        first_positions,
        second_positions,
        first_start: first_start.to_string(),
        second_start: second_start.to_string(),
    })
}

/// `count` prompts with `n` objects each, deterministic under `seed`.
pub fn gen_laundry(tok: &Tokenizer, n: usize, count: usize, seed: u64) -> Result<Vec<LaundryExample>> {
    if !(2..=OBJECTS.len()).contains(&n) {
        return Err(ChannelError::OutOfRange {
            what: "object count",
            index: n,
            limit: OBJECTS.len() + 1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let objects: Vec<&str> = OBJECTS.choose_multiple(&mut rng, n).copied().collect();
            let missing = rng.gen_range(0..n);
            let mut order: Vec<usize> = (0..n).filter(|&i| i != missing).collect();
            order.shuffle(&mut rng);
            let s1 = FIRST_STARTS[rng.gen_range(0..FIRST_STARTS.len())];
            let s2 = SECOND_STARTS[rng.gen_range(0..SECOND_STARTS.len())];
            render_laundry(tok, &objects, missing, &order, s1, s2)
        })
        .collect()
}
