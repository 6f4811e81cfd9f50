// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hooked forward pass for pre-layer-norm decoder transformers.

mod forward;
pub mod hooks;

pub use forward::{
    attention_pattern, final_attention_row, greedy_next, logit_of, FinalOutput, ForwardOutput, Outputs, PrefixCache,
};
pub use hooks::{Activation, Hook, HookAction, HookPoint, Positions, Recording};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ChannelError;
    use crate::model_io::{Model, ModelConfig};
    use ndarray::{Array1, Array2};
    use rayon::prelude::*;

    fn model() -> Model {
        let cfg = ModelConfig {
            n_layers: 3,
            n_heads_per_layer: 4,
            d_model: 32,
            d_head: 8,
            d_mlp: 64,
            vocab_size: 97,
            n_ctx: 24,
            ln_eps: 1e-5,
        };
        // larger init than GPT-2's so attention is far from uniform
        let mut m = Model::random(cfg, 11).unwrap();
        for layer in m.heads.iter_mut() {
            for h in layer.iter_mut() {
                let hw = std::sync::Arc::make_mut(h);
                hw.read_q *= 25.0;
                hw.read_k *= 25.0;
                hw.write_o *= 10.0;
            }
        }
        m
    }

    const IDS: [u32; 9] = [5, 17, 3, 88, 42, 17, 9, 60, 1];

    fn max_abs_diff(a: &Array2<f32>, b: &Array2<f32>) -> f32 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn record_then_replace_is_noop() {
        let m = model();
        let point = HookPoint::head_output(1, 2);
        let clean = m.forward(&IDS, &[Hook::record(point)]).unwrap();
        let rec = clean.recording(point).unwrap().clone();
        let replayed = m
            .forward(
                &IDS,
                &[Hook::new(point, Positions::All, HookAction::Replace(Activation::Rows(rec.values)))],
            )
            .unwrap();
        assert_eq!(clean.logits, replayed.logits);
    }

    #[test]
    fn add_then_subtract_restores_logits() {
        let m = model();
        let v = Array1::from_iter((0..32).map(|i| (i as f32 * 0.37).sin()));
        let clean = m.forward(&IDS, &[]).unwrap();
        let hooks = [
            Hook::add(HookPoint::ResidPre(1), Positions::At(vec![2, 5]), v.clone()),
            Hook::add(HookPoint::ResidPre(1), Positions::At(vec![2, 5]), -&v),
        ];
        let out = m.forward(&IDS, &hooks).unwrap();
        assert!(max_abs_diff(&clean.logits, &out.logits) < 1e-4);
    }

    #[test]
    fn causality() {
        let m = model();
        let a = m.forward(&IDS, &[]).unwrap();
        let mut other = IDS;
        other[6] = 70;
        other[8] = 2;
        let b = m.forward(&other, &[]).unwrap();
        for p in 0..6 {
            assert_eq!(a.logits.row(p), b.logits.row(p), "position {p}");
        }
        assert_ne!(a.logits.row(6), b.logits.row(6));
    }

    #[test]
    fn patterns_are_causal_and_normalized() {
        let m = model();
        let out = m.forward(&IDS, &[Hook::record(HookPoint::attn_pattern(2, 1))]).unwrap();
        let pat = &attention_pattern(&out, 2, 1).unwrap().values;
        assert_eq!(pat.shape(), &[9, 9]);
        for (i, row) in pat.rows().into_iter().enumerate() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
            for j in i + 1..9 {
                assert_eq!(row[j], 0.0);
            }
        }
        assert_eq!(pat[[0, 0]], 1.0);
        assert!(matches!(
            attention_pattern(&out, 0, 0),
            Err(ChannelError::NotRecorded(_))
        ));
    }

    #[test]
    fn hook_order_controls_what_records_see() {
        let m = model();
        let point = HookPoint::head_output(0, 0);
        let zero = Array1::zeros(32);
        let out = m
            .forward(
                &IDS,
                &[
                    Hook::record(point),
                    Hook::replace(point, Positions::Final, zero),
                    Hook::record(point),
                ],
            )
            .unwrap();
        let before = &out.recordings[0].values;
        let after = &out.recordings[1].values;
        assert!(before.row(8).iter().any(|&v| v != 0.0));
        assert!(after.row(8).iter().all(|&v| v == 0.0));
        assert_eq!(before.row(3), after.row(3));
    }

    #[test]
    fn set_projection_only_moves_one_direction() {
        let m = model();
        let point = HookPoint::head_output(1, 0);
        let mut dir = Array1::<f32>::zeros(32);
        dir[3] = 0.6;
        dir[7] = 0.8;
        let out = m
            .forward(
                &IDS,
                &[
                    Hook::record(point),
                    Hook::new(
                        point,
                        Positions::Final,
                        HookAction::SetProjection { direction: dir.clone(), values: vec![2.5] },
                    ),
                    Hook::record(point),
                ],
            )
            .unwrap();
        let before = out.recordings[0].values.row(8).to_owned();
        let after = out.recordings[1].values.row(8).to_owned();
        assert!((after.dot(&dir) - 2.5).abs() < 1e-5);
        let strip = |v: &Array1<f32>| v - &(&dir * v.dot(&dir));
        let diff = strip(&before) - strip(&after);
        assert!(diff.iter().all(|d| d.abs() < 1e-5));
    }

    #[test]
    fn cached_continuation_matches_full_pass() {
        let m = model();
        let mut v = Array1::<f32>::zeros(32);
        v[0] = 3.0;
        let hooks = vec![
            Hook::replace(HookPoint::head_output(1, 3), Positions::Final, v.clone()),
            Hook::add(HookPoint::ResidPre(2), Positions::Final, v),
            Hook::record_at(HookPoint::attn_pattern(2, 0), Positions::Final),
        ];
        let full = m.forward(&IDS, &hooks).unwrap();
        let cache = m.prefix_cache(&IDS, 1, &[]).unwrap();
        let fast = m.continue_final(&cache, &hooks).unwrap();
        let d = full
            .final_logits()
            .iter()
            .zip(fast.final_logits().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(d < 1e-4, "max diff {d}");
        let full_row = final_attention_row(&full, 2, 0, 9).unwrap();
        let fast_row = final_attention_row(&fast, 2, 0, 9).unwrap();
        assert!((&full_row - &fast_row).iter().all(|x| x.abs() < 1e-5));

        let clean = m.forward_final(&IDS, &[]).unwrap();
        let cont = m.continue_final(&cache, &[]).unwrap();
        assert!((&clean.logits - &cont.logits).iter().all(|x| x.abs() < 1e-4));
    }

    #[test]
    fn cached_continuation_rejects_non_final_hooks() {
        let m = model();
        let cache = m.prefix_cache(&IDS, 1, &[]).unwrap();
        let v = Array1::zeros(32);
        let bad = [Hook::replace(HookPoint::head_output(1, 0), Positions::At(vec![2]), v.clone())];
        assert!(m.continue_final(&cache, &bad).is_err());
        let early = [Hook::replace(HookPoint::head_output(0, 0), Positions::Final, v.clone())];
        assert!(m.continue_final(&cache, &early).is_err());
        let into_cache = [Hook::replace(HookPoint::head_output(2, 0), Positions::Final, v)];
        assert!(m.prefix_cache(&IDS, 1, &into_cache).is_err());
    }

    #[test]
    fn greedy_ties_go_to_lowest_id() {
        let mut logits = Array1::<f32>::zeros(10);
        logits[4] = 2.0;
        logits[7] = 2.0;
        let out = FinalOutput { logits, recordings: vec![] };
        assert_eq!(greedy_next(&out), 4);
        let mut one_hot = Array1::<f32>::zeros(10);
        one_hot[9] = 1.0;
        let out = FinalOutput { logits: one_hot, recordings: vec![] };
        assert_eq!(greedy_next(&out), 9);
    }

    #[test]
    fn greedy_dominates_every_logit() {
        let m = model();
        let out = m.forward(&IDS, &[]).unwrap();
        let best = logit_of(&out, greedy_next(&out));
        assert!((0..97).all(|t| best >= logit_of(&out, t)));
    }

    #[test]
    fn shape_and_length_errors() {
        let m = model();
        let long: Vec<u32> = (0..25).collect();
        assert!(matches!(m.forward(&long, &[]), Err(ChannelError::ContextOverflow { .. })));
        let wrong = [Hook::add(HookPoint::ResidPre(0), Positions::All, Array1::zeros(31))];
        assert!(matches!(m.forward(&IDS, &wrong), Err(ChannelError::Hook(_))));
        let oob = [Hook::record_at(HookPoint::ResidPre(0), Positions::At(vec![9]))];
        assert!(matches!(m.forward(&IDS, &oob), Err(ChannelError::Hook(_))));
        let bad_head = [Hook::record(HookPoint::head_output(0, 4))];
        assert!(matches!(m.forward(&IDS, &bad_head), Err(ChannelError::OutOfRange { .. })));
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let m = model();
        let prompts: Vec<Vec<u32>> = (0..8).map(|s| (0..7).map(|i| (s * 13 + i * 7) % 97).collect()).collect();
        let seq: Vec<_> = prompts.iter().map(|p| m.forward(p, &[]).unwrap().logits).collect();
        let par: Vec<_> = prompts.par_iter().map(|p| m.forward(p, &[]).unwrap().logits).collect();
        assert_eq!(seq, par);
    }
}
