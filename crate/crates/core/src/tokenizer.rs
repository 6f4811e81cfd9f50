// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE compatible with the GPT-2 `vocab.json` / `merges.txt`.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{ChannelError, Result};

const BUNDLED_VOCAB: &str = include_str!("../assets/gpt2/vocab.json");
const BUNDLED_MERGES: &str = include_str!("../assets/gpt2/merges.txt");

pub const END_OF_TEXT: &str = "<|endoftext|>";

/// Token string ↔ id maps plus the byte ↔ unicode remap table.
#[derive(Debug, Clone)]
pub struct Vocab {
    to_id: HashMap<String, u32>,
    to_token: Vec<String>,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
}

impl Vocab {
    pub fn from_json(text: &str) -> Result<Self> {
        let map: HashMap<String, u32> =
            serde_json::from_str(text).map_err(|e| ChannelError::Tokenizer(format!("vocab.json: {e}")))?;
        let size = map.len();
        let mut to_token = vec![None; size];
        for (tok, &id) in &map {
            let slot = to_token.get_mut(id as usize).ok_or_else(|| {
                ChannelError::Tokenizer(format!("id {id} for {tok:?} outside [0, {size})"))
            })?;
            if slot.is_some() {
                return Err(ChannelError::Tokenizer(format!("id {id} assigned twice")));
            }
            *slot = Some(tok.clone());
        }
        let to_token = to_token
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| ChannelError::Tokenizer("vocabulary ids are not contiguous".into()))?;
        let byte_to_char = byte_unicode_table();
        let char_to_byte = byte_to_char.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        Ok(Self {
            to_id: map,
            to_token,
            byte_to_char,
            char_to_byte,
        })
    }

    pub fn len(&self) -> usize {
        self.to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.to_token.get(id as usize).map(String::as_str)
    }
}

/// GPT-2's reversible byte → printable-char mapping.
fn byte_unicode_table() -> [char; 256] {
    let printable = |b: u32| (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..256u32 {
        table[b as usize] = if printable(b) {
            char::from_u32(b).expect("latin-1 code point")
        } else {
            extra += 1;
            char::from_u32(255 + extra).expect("valid code point")
        };
    }
    table
}

/// Ordered merge list; rank is the line position.
#[derive(Debug, Clone, Default)]
pub struct MergeRules {
    ranks: HashMap<(String, String), usize>,
}

impl MergeRules {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut ranks = HashMap::new();
        let lines = text.lines().filter(|l| !l.starts_with("#version") && !l.trim().is_empty());
        for (rank, line) in lines.enumerate() {
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| ChannelError::Tokenizer(format!("merge line {rank} malformed: {line:?}")))?;
            ranks.entry((a.to_string(), b.to_string())).or_insert(rank);
        }
        Ok(Self { ranks })
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn rank(&self, a: &str, b: &str) -> Option<usize> {
        // avoid allocating a key tuple for the common miss path
        self.ranks.get(&(a.to_owned(), b.to_owned())).copied()
    }
}

fn pretokenizer() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+").expect("valid regex")
    })
}

/// Split text into GPT-2 pre-tokens. The reference pattern's
/// `\s+(?!\S)` branch (no look-ahead in `regex`) is emulated by giving
/// back the final whitespace char when a run is followed by non-space.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let re = pretokenizer();
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let Some(m) = re.find_at(text, pos) else { break };
        let mut end = m.end();
        let piece = m.as_str();
        if piece.chars().all(char::is_whitespace) && end < text.len() {
            let count = piece.chars().count();
            if count > 1 {
                let last = piece.chars().last().expect("non-empty").len_utf8();
                end -= last;
            }
        }
        out.push(&text[m.start()..end]);
        pos = end;
    }
    out
}

/// GPT-2 byte-level BPE tokenizer.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vocab,
    merges: MergeRules,
}

impl Tokenizer {
    pub fn new(vocab: Vocab, merges: MergeRules) -> Self {
        Self { vocab, merges }
    }

    pub fn from_files(vocab_json: impl AsRef<Path>, merges_txt: impl AsRef<Path>) -> Result<Self> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| ChannelError::io(p, e));
        Ok(Self::new(
            Vocab::from_json(&read(vocab_json.as_ref())?)?,
            MergeRules::from_text(&read(merges_txt.as_ref())?)?,
        ))
    }

    /// The GPT-2 vocabulary compiled into the crate.
    pub fn gpt2() -> &'static Tokenizer {
        static TOK: OnceLock<Tokenizer> = OnceLock::new();
        TOK.get_or_init(|| {
            Tokenizer::new(
                Vocab::from_json(BUNDLED_VOCAB).expect("bundled vocab parses"),
                MergeRules::from_text(BUNDLED_MERGES).expect("bundled merges parse"),
            )
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn end_of_text(&self) -> Option<u32> {
        self.vocab.id(END_OF_TEXT)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for piece in pretokenize(text) {
            let symbols: Vec<String> = piece
                .bytes()
                .map(|b| self.vocab.byte_to_char[b as usize].to_string())
                .collect();
            for sym in self.bpe(symbols) {
                // every byte symbol is in the vocab, and merges only produce vocab entries
                let id = self
                    .vocab
                    .id(&sym)
                    .unwrap_or_else(|| panic!("BPE produced out-of-vocabulary symbol {sym:?}"));
                ids.push(id);
            }
        }
        ids
    }

    fn bpe(&self, mut symbols: Vec<String>) -> Vec<String> {
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.merges.rank(&w[0], &w[1]).map(|r| (r, i)))
                .min();
            let Some((_, at)) = best else { break };
            let (left, right) = (symbols[at].clone(), symbols[at + 1].clone());
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    /// Raw bytes for `ids`.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.vocab.token(id).ok_or(ChannelError::UnknownToken {
                id,
                vocab_size: self.vocab.len(),
            })?;
            for c in tok.chars() {
                match self.vocab.char_to_byte.get(&c) {
                    Some(&b) => out.push(b),
                    // special tokens are stored verbatim
                    None => {
                        let mut buf = [0u8; 4];
                        out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Decode to text; invalid UTF-8 (ids splitting a code point) is replaced.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn is_single_token(&self, word: &str) -> bool {
        self.encode(word).len() == 1
    }
}
