// SPDX-License-Identifier: MIT OR Apache-2.0

//! Indirect-object prompts: "Then, John and Mary went to the store. John
//! gave a drink to" with the answer " Mary".

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::segments::PromptBuilder;
use crate::error::{ChannelError, Result};
use crate::tokenizer::Tokenizer;

pub const DEFAULT_TEMPLATE: &str = "Then, {N1} and {N2} went to the store. {S} gave a drink to";

/// Common English first names; only single-token forms are used.
pub const NAME_POOL: &[&str] = &[
    "John", "Mary", "James", "Michael", "David", "Robert", "William", "Richard", "Thomas", "Charles", "Daniel",
    "Matthew", "Mark", "Paul", "Steven", "Andrew", "Kevin", "Brian", "George", "Edward", "Ryan", "Jacob", "Eric",
    "Jonathan", "Stephen", "Justin", "Scott", "Brandon", "Frank", "Benjamin", "Gregory", "Samuel", "Patrick",
    "Alexander", "Jack", "Dennis", "Jerry", "Tyler", "Aaron", "Henry", "Adam", "Peter", "Nathan", "Zachary",
    "Kyle", "Walter", "Harold", "Jeremy", "Ethan", "Carl", "Keith", "Roger", "Gerald", "Christian", "Terry",
    "Sean", "Arthur", "Austin", "Noah", "Jesse", "Joe", "Bryan", "Billy", "Jordan", "Albert", "Dylan", "Bruce",
    "Willie", "Gabriel", "Alan", "Juan", "Logan", "Wayne", "Ralph", "Roy", "Eugene", "Randy", "Vincent",
    "Russell", "Louis", "Philip", "Bobby", "Johnny", "Bradley", "Patricia", "Jennifer", "Linda", "Elizabeth",
    "Barbara", "Susan", "Jessica", "Sarah", "Karen", "Lisa", "Nancy", "Betty", "Margaret", "Sandra", "Ashley",
    "Kimberly", "Emily", "Donna", "Michelle", "Carol", "Amanda", "Dorothy", "Melissa", "Deborah", "Stephanie",
    "Rebecca", "Sharon", "Laura", "Cynthia", "Kathleen", "Amy", "Angela", "Shirley", "Anna", "Brenda",
    "Pamela", "Emma", "Nicole", "Helen", "Samantha", "Katherine", "Christine", "Debra", "Rachel", "Carolyn",
    "Janet", "Catherine", "Maria", "Heather", "Diane", "Ruth", "Julie", "Olivia", "Joyce", "Virginia",
    "Victoria", "Kelly", "Lauren", "Christina", "Joan", "Evelyn", "Judith", "Megan", "Andrea", "Cheryl",
    "Hannah", "Jacqueline", "Martha", "Gloria", "Teresa", "Ann", "Sara", "Madison", "Frances", "Kathryn",
    "Janice", "Jean", "Abigail", "Alice", "Julia", "Judy", "Sophia", "Grace", "Denise", "Amber", "Doris",
    "Marilyn", "Danielle", "Beverly", "Isabella", "Theresa", "Diana", "Natalie", "Brittany", "Charlotte",
    "Marie", "Kayla", "Alexis", "Lori",
];

/// Names from `pool` whose leading-space form is a single token.
pub fn single_token_names<'a>(tok: &Tokenizer, pool: &[&'a str]) -> Vec<&'a str> {
    pool.iter().copied().filter(|n| tok.is_single_token(&format!(" {n}"))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoiExample {
    pub text: String,
    pub ids: Vec<u32>,
    pub io_name: String,
    pub s_name: String,
    pub io_first: bool,
    pub io_pos: usize,
    pub s1_pos: usize,
    pub s2_pos: usize,
    pub end_pos: usize,
    /// Token id of the indirect object (the correct continuation).
    pub answer: u32,
    /// Token id of the subject name.
    pub s_token: u32,
    /// Examples sharing a pair id differ only in name order.
    pub pair_id: usize,
}

impl IoiExample {
    /// Position of the first name in the sentence.
    pub fn first_name_pos(&self) -> usize {
        self.io_pos.min(self.s1_pos)
    }
}

/// Render one prompt. The template holds `{N1}`, `{N2}` (the two names in
/// order of mention) and `{S}` (the repeated subject), each preceded by a
/// space.
pub fn render_ioi(
    tok: &Tokenizer,
    template: &str,
    io: &str,
    s: &str,
    io_first: bool,
    pair_id: usize,
) -> Result<IoiExample> {
    if io == s {
        return Err(ChannelError::Dataset(format!("IO and S are both {io:?}")));
    }
    let (n1, n2) = if io_first { (io, s) } else { (s, io) };
    let mut b = PromptBuilder::new(tok);
    let mut rest = template;
    let mut slots = [None; 3];
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .map(|c| open + c)
            .ok_or_else(|| ChannelError::Config(format!("unclosed placeholder in {template:?}")))?;
        let literal = &rest[..open];
        let literal = literal
            .strip_suffix(' ')
            .ok_or_else(|| ChannelError::Config(format!("placeholder not preceded by a space in {template:?}")))?;
        if !literal.is_empty() {
            b.push(literal);
        }
        let (slot, name) = match &rest[open + 1..close] {
            "N1" => (0, n1),
            "N2" => (1, n2),
            "S" => (2, s),
            other => return Err(ChannelError::Config(format!("unknown placeholder {{{other}}}"))),
        };
        slots[slot] = Some(b.push_single(&format!(" {name}"))?);
        rest = &rest[close + 1..];
    }
    if !rest.is_empty() {
        b.push(rest);
    }
    let [Some(p1), Some(p2), Some(ps2)] = slots else {
        return Err(ChannelError::Config(format!("template {template:?} must use {{N1}}, {{N2}} and {{S}}")));
    };
    let (text, ids) = b.finish()?;
    let (io_pos, s1_pos) = if io_first { (p1, p2) } else { (p2, p1) };
    Ok(IoiExample {
        answer: ids[io_pos],
        s_token: ids[s1_pos],
        end_pos: ids.len() - 1,
        text,
        ids,
        io_name: io.to_string(),
        s_name: s.to_string(),
        io_first,
        io_pos,
        s1_pos,
        s2_pos: ps2,
        pair_id,
    })
}

/// `count_per_order` IO-first prompts followed by their order-swapped
/// S1-first partners (same names, same pair ids).
pub fn gen_ioi(
    tok: &Tokenizer,
    count_per_order: usize,
    seed: u64,
    name_pool: &[&str],
    template: &str,
) -> Result<Vec<IoiExample>> {
    let names = single_token_names(tok, name_pool);
    if names.len() < 2 {
        return Err(ChannelError::Dataset(format!(
            "name pool has {} single-token names, need at least 2",
            names.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut io_first = Vec::with_capacity(count_per_order);
    let mut s_first = Vec::with_capacity(count_per_order);
    for pair in 0..count_per_order {
        let chosen: Vec<&str> = names.choose_multiple(&mut rng, 2).copied().collect();
        let (io, s) = (chosen[0], chosen[1]);
        io_first.push(render_ioi(tok, template, io, s, true, pair)?);
        s_first.push(render_ioi(tok, template, io, s, false, pair)?);
    }
    io_first.extend(s_first);
    Ok(io_first)
}

/// `(io_first, s_first)` index pairs sharing a pair id.
pub fn minimal_pairs(examples: &[IoiExample]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, a) in examples.iter().enumerate().filter(|(_, e)| e.io_first) {
        if let Some(j) = examples.iter().position(|b| !b.io_first && b.pair_id == a.pair_id) {
            out.push((i, j));
        }
    }
    out
}
