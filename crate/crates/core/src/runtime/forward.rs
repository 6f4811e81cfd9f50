// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-layer-norm decoder forward pass with hook dispatch.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};

use super::hooks::{apply_to_row, resolve_hooks, Hook, HookAction, HookPoint, Positions, Recording, ResolvedHook};
use crate::error::{ChannelError, Result};
use crate::model_io::weights::LayerNorm;
use crate::model_io::Model;

/// Logits for every position plus whatever the hooks recorded.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `seq × vocab`
    pub logits: Array2<f32>,
    pub recordings: Vec<Recording>,
}

/// Next-token logits only (final position).
#[derive(Debug, Clone)]
pub struct FinalOutput {
    pub logits: Array1<f32>,
    pub recordings: Vec<Recording>,
}

/// Anything that exposes final-position logits and recordings.
pub trait Outputs {
    fn final_logits(&self) -> ArrayView1<'_, f32>;
    fn recordings(&self) -> &[Recording];

    /// Last recording made at `point`.
    fn recording(&self, point: HookPoint) -> Option<&Recording> {
        self.recordings().iter().rev().find(|r| r.point == point)
    }
}

impl Outputs for ForwardOutput {
    fn final_logits(&self) -> ArrayView1<'_, f32> {
        self.logits.row(self.logits.nrows() - 1)
    }
    fn recordings(&self) -> &[Recording] {
        &self.recordings
    }
}

impl Outputs for FinalOutput {
    fn final_logits(&self) -> ArrayView1<'_, f32> {
        self.logits.view()
    }
    fn recordings(&self) -> &[Recording] {
        &self.recordings
    }
}

/// Argmax over the final-position logits; ties go to the lowest id.
pub fn greedy_next(output: &impl Outputs) -> u32 {
    let row = output.final_logits();
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

pub fn logit_of(output: &impl Outputs, token: u32) -> f32 {
    output.final_logits()[token as usize]
}

/// Recorded attention pattern of `(layer, head)`: one row per recorded
/// query position. A full recording is `seq × seq`.
pub fn attention_pattern(output: &impl Outputs, layer: usize, head: usize) -> Result<&Recording> {
    let point = HookPoint::attn_pattern(layer, head);
    output
        .recording(point)
        .ok_or_else(|| ChannelError::NotRecorded(point.to_string()))
}

/// Attention row of the last sequence position.
pub fn final_attention_row(output: &impl Outputs, layer: usize, head: usize, seq_len: usize) -> Result<Array1<f32>> {
    let rec = attention_pattern(output, layer, head)?;
    rec.row_at(seq_len - 1)
        .map(|r| r.to_owned())
        .ok_or_else(|| ChannelError::NotRecorded(format!("{} at final position", rec.point)))
}

/// Keys and values of one head for a run of positions.
#[derive(Debug, Clone)]
struct HeadKv {
    k: Array2<f32>,
    v: Array2<f32>,
}

/// Clean activations up to the final position, for cheap re-evaluation of
/// interventions that only touch the final position from `start_layer` on.
#[derive(Debug, Clone)]
pub struct PrefixCache {
    ids: Vec<u32>,
    start_layer: usize,
    /// Residual entering `start_layer` at the final position.
    resid_final: Array1<f32>,
    /// `kv[layer - start_layer][head]`, rows `0..n-1`.
    kv: Vec<Vec<HeadKv>>,
    /// Recordings of the prefix run.
    pub recordings: Vec<Recording>,
}

impl PrefixCache {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }
    pub fn start_layer(&self) -> usize {
        self.start_layer
    }
}

struct HookRunner<'a> {
    hooks: Vec<ResolvedHook<'a>>,
    recordings: Vec<Recording>,
}

impl<'a> HookRunner<'a> {
    fn new(hooks: Vec<ResolvedHook<'a>>) -> Self {
        Self { hooks, recordings: Vec::new() }
    }

    fn any_at(&self, point: HookPoint) -> bool {
        self.hooks.iter().any(|h| h.hook.point == point)
    }

    /// Run every hook registered at `point` in list order. `rows` holds
    /// positions `offset..offset + rows.nrows()`.
    fn apply(&mut self, point: HookPoint, rows: &mut Array2<f32>, offset: usize) {
        for resolved in self.hooks.iter().filter(|h| h.hook.point == point) {
            match &resolved.hook.action {
                HookAction::Record => {
                    let present: Vec<usize> = resolved
                        .positions
                        .iter()
                        .copied()
                        .filter(|&p| p >= offset && p - offset < rows.nrows())
                        .collect();
                    let mut values = Array2::zeros((present.len(), rows.ncols()));
                    for (i, &p) in present.iter().enumerate() {
                        values.row_mut(i).assign(&rows.row(p - offset));
                    }
                    self.recordings.push(Recording { point, positions: present, values });
                }
                action => {
                    for (i, &p) in resolved.positions.iter().enumerate() {
                        if p >= offset && p - offset < rows.nrows() {
                            apply_to_row(action, rows.row_mut(p - offset), i);
                        }
                    }
                }
            }
        }
    }
}

fn layer_norm(x: &Array2<f32>, ln: &LayerNorm, eps: f32) -> Array2<f32> {
    let mut out = x.clone();
    let d = x.ncols() as f32;
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f32>() / d;
        let inv = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        row *= &ln.gain;
        row += &ln.bias;
    }
    out
}

fn gelu_new(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Softmax over causal rows: row `i` (position `offset + i`) sees keys `0..=offset + i`.
fn causal_softmax(scores: &mut Array2<f32>, offset: usize) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let visible = offset + i + 1;
        let max = row.slice(s![..visible]).fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0f32;
        for (j, v) in row.iter_mut().enumerate() {
            if j < visible {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

impl Model {
    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(ChannelError::Hook("cannot run an empty sequence".into()));
        }
        if ids.len() > self.config.n_ctx {
            return Err(ChannelError::ContextOverflow {
                len: ids.len(),
                n_ctx: self.config.n_ctx,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ChannelError::UnknownToken {
                id: bad,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed_rows(&self, ids: &[u32], offset: usize) -> Array2<f32> {
        let d = self.config.d_model;
        let mut x = Array2::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&self.embed.token.row(id as usize));
            row += &self.embed.position.row(offset + i);
        }
        x
    }

    /// Run `layers` over rows holding positions
    /// `offset..offset + x.nrows()`. `prefix` supplies keys/values for
    /// positions `0..offset`. When `collect` is set, returns this run's
    /// keys/values per layer and head.
    fn run_blocks(
        &self,
        x: &mut Array2<f32>,
        offset: usize,
        layers: std::ops::Range<usize>,
        prefix: Option<&[Vec<HeadKv>]>,
        runner: &mut HookRunner<'_>,
        collect: bool,
    ) -> Vec<Vec<HeadKv>> {
        let cfg = &self.config;
        let scale = 1.0 / (cfg.d_head as f32).sqrt();
        let start_layer = layers.start;
        let mut collected = Vec::new();
        for l in layers {
            runner.apply(HookPoint::ResidPre(l), x, offset);
            let block = &self.blocks[l];
            let h = layer_norm(x, &block.ln1, cfg.ln_eps);
            let mut attn = Array2::<f32>::zeros(x.raw_dim());
            let mut layer_kv = Vec::new();
            for (head_idx, hw) in self.heads[l].iter().enumerate() {
                let q = h.dot(&hw.read_q) + &hw.bias_q;
                let k_new = h.dot(&hw.read_k) + &hw.bias_k;
                let v_new = h.dot(&hw.read_v) + &hw.bias_v;
                let (k_all, v_all) = match prefix {
                    Some(p) => {
                        let kv = &p[l - start_layer][head_idx];
                        (
                            concatenate(Axis(0), &[kv.k.slice(s![..offset, ..]), k_new.view()]).expect("same width"),
                            concatenate(Axis(0), &[kv.v.slice(s![..offset, ..]), v_new.view()]).expect("same width"),
                        )
                    }
                    None => (k_new.clone(), v_new.clone()),
                };
                let mut pattern = q.dot(&k_all.t()) * scale;
                causal_softmax(&mut pattern, offset);
                runner.apply(HookPoint::attn_pattern(l, head_idx), &mut pattern, offset);
                let z = pattern.dot(&v_all);
                let mut out = z.dot(&hw.write_o);
                let point = HookPoint::head_output(l, head_idx);
                if runner.any_at(point) {
                    runner.apply(point, &mut out, offset);
                }
                attn += &out;
                if collect {
                    layer_kv.push(HeadKv { k: k_new, v: v_new });
                }
            }
            attn += &block.attn_out_bias;
            *x += &attn;

            let h2 = layer_norm(x, &block.ln2, cfg.ln_eps);
            let mut hidden = h2.dot(&block.mlp_in) + &block.mlp_in_bias;
            hidden.mapv_inplace(gelu_new);
            let mlp = hidden.dot(&block.mlp_out) + &block.mlp_out_bias;
            *x += &mlp;
            if collect {
                collected.push(layer_kv);
            }
        }
        collected
    }

    fn unembed(&self, x: &Array2<f32>) -> Array2<f32> {
        let h = layer_norm(x, &self.final_ln, self.config.ln_eps);
        h.dot(&self.embed.unembedding().t())
    }

    /// Full forward pass over `ids` with hooks applied in list order.
    pub fn forward(&self, ids: &[u32], hooks: &[Hook]) -> Result<ForwardOutput> {
        self.check_ids(ids)?;
        let mut runner = HookRunner::new(resolve_hooks(hooks, &self.config, ids.len())?);
        let mut x = self.embed_rows(ids, 0);
        self.run_blocks(&mut x, 0, 0..self.config.n_layers, None, &mut runner, false);
        let mut logits = self.unembed(&x);
        runner.apply(HookPoint::Logits, &mut logits, 0);
        Ok(ForwardOutput {
            logits,
            recordings: runner.recordings,
        })
    }

    /// Like [`Model::forward`] but only unembeds the final position.
    /// Logit hooks see a single row at position `len - 1`.
    pub fn forward_final(&self, ids: &[u32], hooks: &[Hook]) -> Result<FinalOutput> {
        self.check_ids(ids)?;
        let n = ids.len();
        let mut runner = HookRunner::new(resolve_hooks(hooks, &self.config, n)?);
        let mut x = self.embed_rows(ids, 0);
        self.run_blocks(&mut x, 0, 0..self.config.n_layers, None, &mut runner, false);
        let last = x.slice(s![n - 1..n, ..]).to_owned();
        let mut logits = self.unembed(&last);
        runner.apply(HookPoint::Logits, &mut logits, n - 1);
        Ok(FinalOutput {
            logits: logits.row(0).to_owned(),
            recordings: runner.recordings,
        })
    }

    /// Run `ids` once (with `hooks`) and keep what is needed to re-run only
    /// the final position from `start_layer` onward. Hooks here must not
    /// modify the final position at or after `start_layer`.
    pub fn prefix_cache(&self, ids: &[u32], start_layer: usize, hooks: &[Hook]) -> Result<PrefixCache> {
        self.check_ids(ids)?;
        if start_layer >= self.config.n_layers {
            return Err(ChannelError::OutOfRange {
                what: "layer",
                index: start_layer,
                limit: self.config.n_layers,
            });
        }
        let n = ids.len();
        let resolved = resolve_hooks(hooks, &self.config, n)?;
        for r in &resolved {
            let late = r.hook.point.layer().is_none_or(|l| l >= start_layer);
            if late && !r.hook.is_record() && r.positions.contains(&(n - 1)) {
                return Err(ChannelError::Hook(format!(
                    "{} modifies the final position inside the cached region",
                    r.hook.point
                )));
            }
        }
        let mut runner = HookRunner::new(resolved);
        let mut x = self.embed_rows(ids, 0);
        self.run_blocks(&mut x, 0, 0..start_layer, None, &mut runner, false);
        let resid_final = x.row(n - 1).to_owned();
        let kv = self.run_blocks(&mut x, 0, start_layer..self.config.n_layers, None, &mut runner, true);
        Ok(PrefixCache {
            ids: ids.to_vec(),
            start_layer,
            resid_final,
            kv,
            recordings: runner.recordings,
        })
    }

    /// Re-run the final position from the cache's start layer with `hooks`.
    /// Hooks may only address the final position (or the logits).
    pub fn continue_final(&self, cache: &PrefixCache, hooks: &[Hook]) -> Result<FinalOutput> {
        let n = cache.seq_len();
        let resolved = resolve_hooks(hooks, &self.config, n)?;
        for r in &resolved {
            if let Some(l) = r.hook.point.layer() {
                if l < cache.start_layer {
                    return Err(ChannelError::Hook(format!(
                        "{} precedes cached start layer {}",
                        r.hook.point, cache.start_layer
                    )));
                }
            }
            if matches!(r.hook.positions, Positions::All) || r.positions.iter().any(|&p| p != n - 1) {
                return Err(ChannelError::Hook(format!(
                    "{}: cached continuation only evaluates the final position",
                    r.hook.point
                )));
            }
        }
        let mut runner = HookRunner::new(resolved);
        let mut x = cache.resid_final.clone().insert_axis(Axis(0));
        self.run_blocks(&mut x, n - 1, cache.start_layer..self.config.n_layers, Some(&cache.kv), &mut runner, false);
        let mut logits = self.unembed(&x);
        runner.apply(HookPoint::Logits, &mut logits, n - 1);
        Ok(FinalOutput {
            logits: logits.row(0).to_owned(),
            recordings: runner.recordings,
        })
    }
}
