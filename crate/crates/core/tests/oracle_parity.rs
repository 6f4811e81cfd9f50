// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parity with frozen reference outputs (see `fixtures/gen_*.py`).

use std::path::PathBuf;

use channel_core::model_io::{load_tensors, Model};
use channel_core::runtime::Outputs;
use channel_core::tokenizer::Tokenizer;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[derive(serde::Deserialize)]
struct Doc {
    text: String,
    ids: Vec<u32>,
}

#[test]
fn tokenizer_matches_reference_corpus() {
    let text = std::fs::read_to_string(fixture("tokenizer_corpus.jsonl")).unwrap();
    let docs: Vec<Doc> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(docs.len(), 1000);
    let tok = Tokenizer::gpt2();
    let mismatches: Vec<&Doc> = docs.iter().filter(|d| tok.encode(&d.text) != d.ids).collect();
    if let Some(d) = mismatches.first() {
        panic!(
            "{} of 1000 documents differ; first: {:?}\nours   {:?}\nwanted {:?}",
            mismatches.len(),
            d.text,
            tok.encode(&d.text),
            d.ids
        );
    }
    for d in &docs {
        assert_eq!(tok.decode(&d.ids).unwrap(), d.text);
    }
}

#[test]
fn forward_matches_reference_logits() {
    let model = Model::load_dir(fixture("tiny_gpt2")).unwrap();
    let prompts: Vec<Vec<u32>> =
        serde_json::from_str(&std::fs::read_to_string(fixture("tiny_gpt2_prompts.json")).unwrap()).unwrap();
    let reference = load_tensors(fixture("tiny_gpt2_logits.safetensors")).unwrap().matrix("logits").unwrap();
    assert_eq!(reference.nrows(), 200);

    let mut agree = 0;
    let mut worst = 0.0f32;
    for (ids, want) in prompts.iter().zip(reference.rows()) {
        let out = model.forward_final(ids, &[]).unwrap();
        let got = out.final_logits();
        let argmax = |v: ndarray::ArrayView1<f32>| {
            v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
        };
        agree += usize::from(argmax(got) == argmax(want));
        worst = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(worst, f32::max);
    }
    assert!(agree as f64 / 200.0 >= 0.99, "top-1 agreement {agree}/200");
    assert!(worst <= 1e-2, "max |Δlogit| {worst}");
}
