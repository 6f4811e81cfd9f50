// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::OnceLock;

use ndarray::Array1;

use channel_core::composition::{Analyzer, BuildOptions, ComponentRef, HeadRef};
use channel_core::intervention::{
    add_duplicate_signal, direction_f32, patch_dataset, run_scale_sweep, subspace_patch, DuplicateChannel, NameRole,
    PatchSpec, ScaleSweep, SweepMetric, SweepPosition,
};
use channel_core::model_io::{Model, ModelConfig};
use channel_core::runtime::{Hook, HookPoint, Outputs, Positions};
use channel_core::tasks::{gen_ioi, IoiExample, DEFAULT_TEMPLATE, NAME_POOL};
use channel_core::tokenizer::Tokenizer;

fn model() -> &'static Model {
    static M: OnceLock<Model> = OnceLock::new();
    M.get_or_init(|| {
        let cfg = ModelConfig {
            d_model: 192,
            d_head: 16,
            d_mlp: 64,
            n_ctx: 64,
            ..ModelConfig::gpt2_small()
        };
        Model::random(cfg, 4).unwrap()
    })
}

fn prompts() -> Vec<IoiExample> {
    gen_ioi(Tokenizer::gpt2(), 3, 1, NAME_POOL, DEFAULT_TEMPLATE).unwrap()
}

fn logit_diff(m: &Model, ex: &IoiExample, hooks: &[Hook]) -> f64 {
    let out = m.forward_final(&ex.ids, hooks).unwrap();
    let l = out.final_logits();
    f64::from(l[ex.answer as usize] - l[ex.s_token as usize])
}

#[test]
fn alpha_zero_equals_zero_replacement() {
    let m = model();
    let a = Analyzer::new(m, BuildOptions::default());
    let exs = prompts();
    let c = ComponentRef::new(8, 10, 1);
    for position in [SweepPosition::Final, SweepPosition::All] {
        let sweep = ScaleSweep {
            component: c,
            alphas: vec![-10.0, 0.0, 10.0],
            position,
            dataset: String::new(),
        };
        let curve = run_scale_sweep(&a, &sweep, &exs, SweepMetric::LogitDiff).unwrap();
        let positions = match position {
            SweepPosition::Final => Positions::Final,
            SweepPosition::All => Positions::All,
        };
        let zero = Hook::replace(HookPoint::head_output(8, 10), positions, Array1::zeros(192));
        let want: f64 = exs.iter().map(|ex| logit_diff(m, ex, std::slice::from_ref(&zero))).sum::<f64>() / exs.len() as f64;
        assert!((curve[1].metric_mean - want).abs() < 1e-4, "{position:?}: {} vs {want}", curve[1].metric_mean);
        assert_eq!(curve[1].n, exs.len());
    }
}

#[test]
fn sweep_rejects_bad_axes_and_layer_order() {
    let m = model();
    let a = Analyzer::new(m, BuildOptions::default());
    let exs = prompts();
    let mut sweep = ScaleSweep {
        component: ComponentRef::new(8, 10, 1),
        alphas: vec![1.0, 0.0],
        position: SweepPosition::Final,
        dataset: String::new(),
    };
    assert!(run_scale_sweep(&a, &sweep, &exs, SweepMetric::Accuracy).is_err());
    sweep.alphas = vec![0.0];
    let early_mover = SweepMetric::Inhibition { mover: HeadRef::new(5, 0) };
    assert!(run_scale_sweep(&a, &sweep, &exs, early_mover).is_err());
    assert!(run_scale_sweep(&a, &sweep, &[], SweepMetric::Accuracy).is_err());
}

#[test]
fn self_patch_changes_nothing() {
    let m = model();
    let a = Analyzer::new(m, BuildOptions::default());
    for ex in prompts() {
        let r = subspace_patch(&a, &PatchSpec::default(), &ex, &ex).unwrap();
        assert!((r.ld_patched - r.ld_clean).abs() < 1e-4, "{} vs {}", r.ld_patched, r.ld_clean);
        if let Some(f) = r.fldd {
            assert!(f.abs() < 1e-2, "fldd {f}");
        }
        assert!(!r.interchanged);
    }
}

#[test]
fn patching_is_deterministic_and_pairwise_consistent() {
    let m = model();
    let a = Analyzer::new(m, BuildOptions::default());
    let exs = prompts();
    let (donor, recipient) = (&exs[0], &exs[3]);
    assert_eq!(donor.pair_id, recipient.pair_id);
    let spec = PatchSpec::default();
    let once = subspace_patch(&a, &spec, donor, recipient).unwrap();
    let twice = subspace_patch(&a, &spec, donor, recipient).unwrap();
    assert_eq!(once, twice);
    assert_eq!(once.donor_answer, recipient.ids[donor.io_pos]);

    let (summary, rows) = patch_dataset(&a, &spec, &[(donor, recipient), (recipient, donor)]).unwrap();
    assert_eq!(rows[0], once);
    assert_eq!(summary.n_pairs, 2);
    assert_eq!(summary.excluded, rows.iter().filter(|r| r.fldd.is_none()).count());
    assert!(patch_dataset(&a, &spec, &[]).is_err());
    let short = IoiExample { ids: donor.ids[..donor.ids.len() - 1].to_vec(), ..donor.clone() };
    assert!(subspace_patch(&a, &spec, &short, recipient).is_err());
}

/// Setting the projection to the donor's value along a unit direction
/// leaves the orthogonal part of the recipient's activation untouched.
#[test]
fn projection_patch_only_moves_the_patched_direction() {
    let m = model();
    let a = Analyzer::new(m, BuildOptions::default());
    let exs = prompts();
    let c = ComponentRef::new(8, 6, 2);
    let w = direction_f32(&a, c).unwrap();
    assert!((w.dot(&w) - 1.0).abs() < 1e-5);
    let point = HookPoint::head_output(8, 6);
    // the record hook fires after the projection is set
    let hooks = |v: f32| {
        vec![
            Hook::new(
                point,
                Positions::Final,
                channel_core::runtime::HookAction::SetProjection { direction: w.clone(), values: vec![v] },
            ),
            Hook::record_at(point, Positions::Final),
        ]
    };
    let clean = m.forward_final(&exs[1].ids, &[Hook::record_at(point, Positions::Final)]).unwrap();
    let before = clean.recording(point).unwrap().values.row(0).to_owned();
    let out = m.forward_final(&exs[1].ids, &hooks(2.5)).unwrap();
    let after = out.recording(point).unwrap().values.row(0).to_owned();
    assert!((after.dot(&w) - 2.5).abs() < 1e-4);
    let orth = |x: &Array1<f32>| x - &(&w * x.dot(&w));
    let moved = (orth(&after) - orth(&before)).mapv(f32::abs).fold(0.0f32, |p, &q| p.max(q));
    assert!(moved < 1e-5, "orthogonal part moved by {moved}");
}

/// A hook at layer `l` cannot change anything recorded upstream of it.
#[test]
fn replacement_is_local_to_downstream_layers() {
    let m = model();
    let ex = &prompts()[0];
    let records: Vec<Hook> = (0..=8).map(|l| Hook::record(HookPoint::ResidPre(l))).collect();
    let clean = m.forward(&ex.ids, &records).unwrap();
    let mut hooked = vec![Hook::replace(HookPoint::head_output(7, 9), Positions::All, Array1::from_elem(192, 3.0))];
    hooked.extend(records.iter().cloned());
    let out = m.forward(&ex.ids, &hooked).unwrap();
    for l in 0..=7 {
        let p = HookPoint::ResidPre(l);
        assert_eq!(clean.recording(p).unwrap().values, out.recording(p).unwrap().values, "layer {l}");
    }
    let p = HookPoint::ResidPre(8);
    assert_ne!(clean.recording(p).unwrap().values, out.recording(p).unwrap().values);
}

#[test]
fn duplicate_addition_at_zero_is_the_clean_run() {
    let m = model();
    let a = Analyzer::new(m, BuildOptions::default());
    let ex = &prompts()[2];
    let channel = DuplicateChannel::default();
    let clean = m.forward_final(&ex.ids, &[]).unwrap();
    for role in [NameRole::Io, NameRole::S1] {
        let zero = add_duplicate_signal(&a, &channel, ex, role, 0.0, &[]).unwrap();
        assert_eq!(zero.final_logits(), clean.final_logits());
        let pushed = add_duplicate_signal(&a, &channel, ex, role, 50.0, &[]).unwrap();
        assert_ne!(pushed.final_logits(), clean.final_logits());
    }
    let dir = channel.direction(&a).unwrap();
    assert!((dir.dot(&dir) - 1.0).abs() < 1e-4, "write directions of one head are orthonormal");
}
