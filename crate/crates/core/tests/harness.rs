// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::sync::{Arc, OnceLock};

use channel_core::harness::{
    report, run_with_model, ExperimentConfig, Preset, RunManifest, MANIFEST_FILE, RECIPES,
};
use channel_core::model_io::{Model, ModelConfig};
use channel_core::tokenizer::Tokenizer;
use channel_core::ChannelError;

/// GPT-2 layout and vocabulary at toy width: every head index the recipes
/// name exists, and d_head covers component 8.6.10.
fn model() -> Arc<Model> {
    static M: OnceLock<Arc<Model>> = OnceLock::new();
    M.get_or_init(|| {
        let cfg = ModelConfig {
            d_model: 192,
            d_head: 16,
            d_mlp: 64,
            n_ctx: 160,
            ..ModelConfig::gpt2_small()
        };
        Arc::new(Model::random(cfg, 11).unwrap())
    })
    .clone()
}

fn small(name: &str, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(name);
    c.out_dir = out.to_path_buf();
    c.seed = 5;
    c.ioi_per_order = Some(4);
    c.sweep_examples = Some(3);
    c.sweep_step = Some(50.0);
    c.laundry_ns = Some(vec![3, 4]);
    c.laundry_count = Some(6);
    c.steer_ns = Some(vec![3]);
    c.grid_step = Some(100.0);
    c.calibration = Some(6);
    c.evaluation = Some(6);
    c.patch_pairs = Some(4);
    c.dup_sequences = Some(4);
    c.dup_length = Some(30);
    c.dup_copies = Some(5);
    c
}

fn run(name: &str, out: &Path) -> RunManifest {
    run_with_model(&small(name, out), model(), Tokenizer::gpt2()).unwrap()
}

#[test]
fn unknown_recipe_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_with_model(&small("unknown", dir.path()), model(), Tokenizer::gpt2()).unwrap_err();
    match err {
        ChannelError::UnknownRecipe { name, valid } => {
            assert_eq!(name, "unknown");
            for r in RECIPES {
                assert!(valid.contains(r), "{r} missing from {valid}");
            }
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn config_json_and_presets() {
    let cfg = ExperimentConfig::from_json(r#"{"name": "ll-steer", "seed": 3, "preset": "full"}"#).unwrap();
    let p = cfg.resolve().unwrap();
    assert_eq!(p.grid_step, 10.0);
    assert_eq!(p.axis(p.grid_step).len(), 21);
    let desk = ExperimentConfig::new("ll-steer").resolve().unwrap();
    assert_eq!(desk.grid_step, 20.0);
    assert_eq!((desk.calibration, desk.evaluation), (50, 200));
    assert_eq!(desk.steer_ns, (3..=8).collect::<Vec<_>>());
    assert_eq!(desk.laundry_ns, (3..=10).collect::<Vec<_>>());
    assert_eq!(ExperimentConfig::new("x").preset, Preset::Desk);
    assert!(ExperimentConfig::from_json(r#"{"name": "ll-steer", "bogus": 1}"#).is_err());
    let mut bad = ExperimentConfig::new("ll-baseline");
    bad.laundry_ns = Some(vec![1]);
    assert!(matches!(bad.validate(), Err(ChannelError::Config(_))));

    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
}

#[test]
fn every_recipe_writes_a_manifest_and_its_files() {
    let dir = tempfile::tempdir().unwrap();
    for name in RECIPES {
        let m = run(name, dir.path());
        let run_dir = small(name, dir.path()).run_dir();
        assert!(run_dir.join(MANIFEST_FILE).exists(), "{name}");
        assert_eq!(m.recipe, name);
        assert_eq!(m.checkpoint, "random-init:11");
        assert!(!m.files.is_empty() || name == "duplicate-add", "{name} wrote no files");
        for f in &m.files {
            assert!(run_dir.join(f).exists(), "{name}: {} missing", f.display());
        }
        assert_eq!(RunManifest::read(&run_dir).unwrap(), m);
    }
}

#[test]
fn same_seed_reproduces_measured_values() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for name in ["edit-inhibition", "ll-baseline"] {
        let (ma, mb) = (run(name, a.path()), run(name, b.path()));
        assert_eq!(ma.metrics, mb.metrics, "{name}");
    }
    let dirs = |root: &Path| {
        ["edit-inhibition", "ll-baseline"]
            .map(|n| small(n, root).run_dir())
            .to_vec()
    };
    let (ra, rb) = (report(&dirs(a.path())).unwrap(), report(&dirs(b.path())).unwrap());
    assert!(!ra.rows.is_empty());
    let measured = |r: &channel_core::harness::Report| r.rows.iter().map(|x| x.measured.to_bits()).collect::<Vec<_>>();
    assert_eq!(measured(&ra), measured(&rb));
}

#[test]
fn ll_baseline_emits_accuracy_per_n() {
    let dir = tempfile::tempdir().unwrap();
    let m = run("ll-baseline", dir.path());
    let csv = std::fs::read_to_string(small("ll-baseline", dir.path()).run_dir().join("ll_baseline.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "N,accuracy,last_first_list,last_second_list,n_examples");
    assert_eq!(lines.len(), 3);
    assert!(m.metrics.contains_key("spearman_accuracy_vs_n"));
    assert!(m.checks.iter().any(|c| c.name == "N=3 accuracy"));
}

#[test]
fn report_of_nothing_is_empty() {
    let r = report(&[]).unwrap();
    assert!(r.rows.is_empty());
    assert_eq!(r.to_text().lines().count(), 1);
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        report(&[dir.path().to_path_buf()]),
        Err(ChannelError::MissingManifest(_))
    ));
}

#[test]
fn report_csv_has_one_row_per_check() {
    let dir = tempfile::tempdir().unwrap();
    let m = run("keep-only", dir.path());
    let r = report(&[small("keep-only", dir.path()).run_dir()]).unwrap();
    assert_eq!(r.rows.len(), m.checks.len());
    let path = dir.path().join("summary.csv");
    r.write_csv(&path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), m.checks.len() + 1);
}
