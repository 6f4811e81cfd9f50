// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt datasets with token-position annotations, and their metrics.

mod duplicates;
mod ioi;
mod laundry;
mod metrics;
mod segments;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use duplicates::{
    gen_duplicate_seqs, printable_ids, DuplicateSeqExample, DEFAULT_DUPLICATES, DEFAULT_LENGTH, DEFAULT_SEQUENCES,
};
pub use ioi::{gen_ioi, minimal_pairs, render_ioi, single_token_names, IoiExample, DEFAULT_TEMPLATE, NAME_POOL};
pub use laundry::{gen_laundry, render_laundry, LaundryExample, DEFAULT_COUNT, FIRST_STARTS, OBJECTS, SECOND_STARTS};
pub use metrics::{
    attended_index, balance, fit_separator, inhibition_from_row, inhibition_score, separability, split_half,
    task_accuracy, LabelledPoint, LinearSeparator, Prompt,
};

use crate::error::{ChannelError, Result};
use crate::model_io::fetch::write_atomic;

/// Bumped whenever generation would produce different bytes.
pub const GENERATOR_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_version: String,
    pub kind: String,
    pub seed: u64,
    pub count: usize,
    pub params: serde_json::Value,
    pub sha256: String,
}

/// Write one JSON object per line plus a `<name>.manifest.json` beside it.
pub fn write_dataset<T: Serialize>(
    path: &Path,
    examples: &[T],
    kind: &str,
    seed: u64,
    params: serde_json::Value,
) -> Result<DatasetManifest> {
    let mut body = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut body, ex)?;
        body.write_all(b"\n").map_err(|e| ChannelError::io(path, e))?;
    }
    write_atomic(path, &body)?;
    let manifest = DatasetManifest {
        generator_version: GENERATOR_VERSION.into(),
        kind: kind.into(),
        seed,
        count: examples.len(),
        params,
        sha256: {
            use sha2::{Digest, Sha256};
            hex::encode(Sha256::digest(&body))
        },
    };
    write_atomic(&manifest_path(path), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

pub fn read_dataset<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| ChannelError::io(path, e))?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|line| {
            let line = line.map_err(|e| ChannelError::io(path, e))?;
            Ok(serde_json::from_str(&line)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Tokenizer;
    use ndarray::{Array1, Array2};

    fn tok() -> &'static Tokenizer {
        Tokenizer::gpt2()
    }

    #[test]
    fn ioi_template_positions() {
        let ex = render_ioi(tok(), DEFAULT_TEMPLATE, "Mary", "John", false, 0).unwrap();
        assert_eq!(ex.text, "Then, John and Mary went to the store. John gave a drink to");
        assert_eq!(ex.ids[ex.s1_pos], ex.ids[ex.s2_pos]);
        assert_eq!(tok().decode(&[ex.ids[ex.io_pos]]).unwrap(), " Mary");
        assert_eq!(tok().decode(&[ex.ids[ex.s1_pos]]).unwrap(), " John");
        assert!(ex.s1_pos < ex.io_pos && ex.io_pos < ex.s2_pos);
        assert_eq!(ex.end_pos, ex.ids.len() - 1);
        assert_eq!(ex.answer, tok().encode(" Mary")[0]);
    }

    #[test]
    fn ioi_split_and_minimal_pairs() {
        let data = gen_ioi(tok(), 100, 7, NAME_POOL, DEFAULT_TEMPLATE).unwrap();
        assert_eq!(data.len(), 200);
        assert_eq!(data.iter().filter(|e| e.io_first).count(), 100);
        let pairs = minimal_pairs(&data);
        assert_eq!(pairs.len(), 100);
        for (a, b) in pairs {
            let (a, b) = (&data[a], &data[b]);
            assert_eq!(a.ids.len(), b.ids.len());
            assert_eq!((a.io_name.as_str(), a.s_name.as_str()), (b.io_name.as_str(), b.s_name.as_str()));
            let differing: Vec<usize> = (0..a.ids.len()).filter(|&i| a.ids[i] != b.ids[i]).collect();
            assert_eq!(differing, vec![a.io_pos, a.s1_pos]);
            assert_ne!(a.io_name, a.s_name);
            assert_eq!(tok().encode(&a.text), a.ids);
        }
        assert_eq!(data, gen_ioi(tok(), 100, 7, NAME_POOL, DEFAULT_TEMPLATE).unwrap());
        assert!(gen_ioi(tok(), 1, 0, &["John"], DEFAULT_TEMPLATE).is_err());
    }

    #[test]
    fn laundry_objects_are_single_tokens() {
        for obj in OBJECTS {
            assert!(tok().is_single_token(&format!(" {obj}")), "{obj}");
        }
    }

    #[test]
    fn laundry_construction() {
        let data = gen_laundry(tok(), 3, 250, 1).unwrap();
        assert_eq!(data.len(), 250);
        for ex in &data {
            let first: Vec<&str> = ex.objects.iter().map(String::as_str).collect();
            assert_eq!(first.len(), 3);
            let mut uniq = first.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), 3);
            assert_eq!(ex.second_order.len(), 2);
            assert!(!ex.second_order.contains(&ex.missing_index));
            for (i, &p) in ex.first_positions.iter().enumerate() {
                assert_eq!(tok().decode(&[ex.ids[p]]).unwrap(), format!(" {}", first[i]));
            }
            for (k, &p) in ex.second_positions.iter().enumerate() {
                assert_eq!(ex.ids[p], ex.object_tokens[ex.second_order[k]]);
            }
            assert!(ex.text.ends_with(", and finally the"));
            assert_eq!(tok().encode(&ex.text), ex.ids);
        }
        assert!(data.iter().any(|e| e.text.starts_with("Today,")));
        assert!(data.iter().any(|e| e.text.starts_with("I need")));
        assert!(data.iter().any(|e| e.text.contains(". When I go, I will buy")));
        assert!(gen_laundry(tok(), 1, 1, 0).is_err());
        assert!(gen_laundry(tok(), 23, 1, 0).is_err());
        assert!(gen_laundry(tok(), 22, 3, 0).is_ok());
        let ex = render_laundry(tok(), &["pen", "cup", "ball"], 1, &[2, 0], " Today,", " First,").unwrap();
        assert_eq!(
            ex.text,
            "Today, I need to buy the pen, the cup, and the ball. First, I will buy the ball, then the pen, and finally the"
        );
    }

    #[test]
    fn duplicate_sequences() {
        let pool = printable_ids(tok());
        assert!(pool.len() > 1000);
        let none = gen_duplicate_seqs(&pool, 50, 0, 5, 1024, 3).unwrap();
        for ex in &none {
            let mut ids = ex.ids.clone();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 50);
        }
        let data = gen_duplicate_seqs(&pool, 100, 10, 20, 1024, 3).unwrap();
        for ex in &data {
            assert_eq!(ex.ids.len(), 110);
            assert_eq!(ex.duplicates.len(), 10);
            for &(a, b) in &ex.duplicates {
                assert!(a < b);
                assert_eq!(ex.ids[a], ex.ids[b]);
                assert_eq!(ex.ids.iter().filter(|&&t| t == ex.ids[a]).count(), 2);
            }
            let mut ids = ex.ids.clone();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 100);
        }
        assert!(gen_duplicate_seqs(&pool, 1020, 10, 1, 1024, 0).is_err());
    }

    #[test]
    fn inhibition_score_cases() {
        let ex = render_ioi(tok(), DEFAULT_TEMPLATE, "Mary", "John", true, 0).unwrap();
        let n = ex.ids.len();
        let mut pat = Array2::<f32>::zeros((n, n));
        pat[[ex.end_pos, ex.io_pos]] = 1.0;
        assert_eq!(inhibition_score(pat.view(), &ex).unwrap(), 1.0);
        let uniform = Array2::from_elem((n, n), 1.0 / n as f32);
        assert_eq!(inhibition_score(uniform.view(), &ex).unwrap(), 0.0);
        assert!(inhibition_score(Array2::<f32>::zeros((3, 3)).view(), &ex).is_err());
    }

    #[test]
    fn attended_index_and_accuracy() {
        let ex = render_laundry(tok(), &["pen", "cup", "ball"], 0, &[1, 2], "", "").unwrap();
        let mut row = Array1::<f32>::zeros(ex.ids.len());
        row[ex.first_positions[2]] = 0.4;
        row[ex.second_positions[0]] = 0.9;
        assert_eq!(attended_index(row.view(), &ex), 2);
        let data = vec![ex.clone(), ex];
        assert_eq!(task_accuracy(&data, |e| Ok(e.answer)).unwrap(), 1.0);
        assert_eq!(task_accuracy(&data, |_| Ok(0)).unwrap(), 0.0);
    }

    #[test]
    fn separability_fixtures() {
        let split: Vec<LabelledPoint> = (0..40)
            .map(|i| {
                let y = i % 2 == 0;
                let x = if y { 2.0 } else { -2.0 } + (i as f64 * 0.37).sin();
                ([x, (i as f64).cos()], y)
            })
            .collect();
        let (train, test) = split_half(&split, 1);
        assert_eq!(separability(&train, &test).unwrap(), 1.0);

        let same: Vec<LabelledPoint> = (0..2000)
            .map(|i| ([((i / 2) as f64 * 1.618).fract(), ((i / 2) as f64 * 2.414).fract()], i % 2 == 0))
            .collect();
        let (train, test) = split_half(&same, 2);
        let acc = separability(&train, &test).unwrap();
        assert!((acc - 0.5).abs() < 0.06, "{acc}");
        assert!(separability(&[([0.0, 0.0], true)], &[([0.0, 0.0], true)]).is_err());

        let skewed: Vec<LabelledPoint> = (0..30).map(|i| ([i as f64, 0.0], i < 5)).collect();
        let b = balance(&skewed, 0);
        assert_eq!(b.iter().filter(|p| p.1).count(), 5);
        assert_eq!(b.len(), 10);
    }

    #[test]
    fn dataset_round_trip_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_laundry(tok(), 4, 10, 9).unwrap();
        let p = dir.path().join("ll.jsonl");
        let m1 = write_dataset(&p, &data, "laundry", 9, serde_json::json!({"n": 4})).unwrap();
        let back: Vec<LaundryExample> = read_dataset(&p).unwrap();
        assert_eq!(back, data);
        let bytes = std::fs::read(&p).unwrap();
        let p2 = dir.path().join("ll2.jsonl");
        let m2 = write_dataset(&p2, &gen_laundry(tok(), 4, 10, 9).unwrap(), "laundry", 9, serde_json::json!({"n": 4}))
            .unwrap();
        assert_eq!(bytes, std::fs::read(&p2).unwrap());
        assert_eq!(m1.sha256, m2.sha256);
        assert!(manifest_path(&p).exists());
    }
}
