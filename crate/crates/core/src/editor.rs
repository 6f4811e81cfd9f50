// SPDX-License-Identifier: MIT OR Apache-2.0

//! Singular-value edits of OV matrices, re-factorized into value/output
//! weights the runtime can execute.
//!
//! An edited head gets `read_v = L·√Σ′` and `write_o = √Σ′·Rᵀ` with
//! `σ′ᵢ = mᵢ·σᵢ`. The value bias is carried through the same edit: its
//! contribution `b_v·W_o` is expressed in the write basis, scaled by the
//! multipliers, and pulled back through `√Σ′`. That keeps an all-ones plan
//! functionally identical to the original head and makes zeroing every
//! component equal to removing the head's output.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::composition::{build_ov, svd, BuildOptions, ComponentRef, HeadRef, SvdFactors};
use crate::error::{ChannelError, Result};
use crate::linalg::{frobenius, to_f32, to_f64};
use crate::model_io::{HeadWeights, Model};

/// Multipliers for individual OV components; unlisted components keep 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub edits: BTreeMap<ComponentRef, f64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl EditPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, c: ComponentRef, multiplier: f64) -> Result<Self> {
        check_multiplier(c, multiplier)?;
        if self.edits.insert(c, multiplier).is_some() {
            return Err(ChannelError::InvalidEdit(format!("component {c} listed twice")));
        }
        Ok(self)
    }

    /// Zero every listed component.
    pub fn zeroing(components: impl IntoIterator<Item = ComponentRef>) -> Result<Self> {
        components.into_iter().try_fold(Self::new(), |p, c| p.set(c, 0.0))
    }

    /// Zero every component of the listed heads except the kept ones.
    pub fn keep_only(kept: &BTreeMap<HeadRef, BTreeSet<usize>>, d_head: usize) -> Result<Self> {
        let mut plan = Self::new();
        for (head, keep) in kept {
            if let Some(&bad) = keep.iter().find(|&&i| i >= d_head) {
                return Err(ChannelError::OutOfRange {
                    what: "component",
                    index: bad,
                    limit: d_head,
                });
            }
            for i in (0..d_head).filter(|i| !keep.contains(i)) {
                plan = plan.set(ComponentRef::new(head.layer, head.head, i), 0.0)?;
            }
        }
        Ok(plan)
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        for (&c, &m) in &plan.edits {
            check_multiplier(c, m)?;
        }
        Ok(plan)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-head multiplier vectors (length `d_head`, default 1).
    pub fn by_head(&self, d_head: usize) -> Result<BTreeMap<HeadRef, Vec<f64>>> {
        let mut out: BTreeMap<HeadRef, Vec<f64>> = BTreeMap::new();
        for (&c, &m) in &self.edits {
            if c.index >= d_head {
                return Err(ChannelError::OutOfRange {
                    what: "component",
                    index: c.index,
                    limit: d_head,
                });
            }
            out.entry(c.head_ref()).or_insert_with(|| vec![1.0; d_head])[c.index] = m;
        }
        Ok(out)
    }
}

fn check_multiplier(c: ComponentRef, m: f64) -> Result<()> {
    if !m.is_finite() || m < 0.0 {
        return Err(ChannelError::InvalidEdit(format!(
            "multiplier for {c} must be finite and non-negative, got {m}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: String,
    pub plan: EditPlan,
}

/// A model whose listed heads carry re-factorized OV weights. Every other
/// head shares its weights with the base model.
#[derive(Debug, Clone)]
pub struct EditedModel {
    base: Arc<Model>,
    model: Model,
    pub provenance: Provenance,
    pub edited_heads: Vec<HeadRef>,
}

impl EditedModel {
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn base(&self) -> &Arc<Model> {
        &self.base
    }

    /// The untouched base model.
    pub fn revert(&self) -> Arc<Model> {
        self.base.clone()
    }

    /// Largest relative Frobenius error between an edited head's
    /// `read_v · write_o` and the component-edited OV matrix.
    pub fn refactorization_error(&self) -> Result<f64> {
        let d_head = self.model.config.d_head;
        let mut worst = 0.0f64;
        for (head, mults) in self.provenance.plan.by_head(d_head)? {
            let f = ov_factors(&self.base, head)?;
            let target = f.reconstruct_scaled(&mults);
            let hw = self.model.head(head.layer, head.head)?;
            let actual = to_f64(&hw.read_v).dot(&to_f64(&hw.write_o));
            let scale = frobenius(&f.reconstruct()).max(f64::MIN_POSITIVE);
            worst = worst.max(frobenius(&(actual - target)) / scale);
        }
        Ok(worst)
    }
}

impl std::ops::Deref for EditedModel {
    type Target = Model;

    fn deref(&self) -> &Model {
        &self.model
    }
}

fn ov_factors(model: &Model, head: HeadRef) -> Result<SvdFactors> {
    svd(&build_ov(model, head.layer, head.head, BuildOptions::default())?)
}

/// Apply `plan` to the OV matrices of `base`.
pub fn apply_edit(base: &Arc<Model>, plan: &EditPlan) -> Result<EditedModel> {
    let cfg = &base.config;
    let per_head = plan.by_head(cfg.d_head)?;
    let mut model = (**base).clone();
    for (&head, mults) in &per_head {
        cfg.check_head(head.layer, head.head)?;
        let f = ov_factors(base, head)?;
        let old = base.head(head.layer, head.head)?;
        let replaced = refactor_head(old, &f, mults);
        model.heads[head.layer][head.head] = Arc::new(replaced);
    }
    Ok(EditedModel {
        base: base.clone(),
        model,
        provenance: Provenance {
            checkpoint: base.checkpoint_id.clone(),
            plan: plan.clone(),
        },
        edited_heads: per_head.keys().copied().collect(),
    })
}

/// Zero every non-kept component of the listed heads.
pub fn keep_only(base: &Arc<Model>, kept: &BTreeMap<HeadRef, BTreeSet<usize>>) -> Result<EditedModel> {
    apply_edit(base, &EditPlan::keep_only(kept, base.config.d_head)?)
}

fn refactor_head(old: &HeadWeights, f: &SvdFactors, mults: &[f64]) -> HeadWeights {
    let k = f.len();
    let new_sigma: Vec<f64> = (0..k).map(|i| f.sigma[i] * mults[i]).collect();
    let root: Vec<f64> = new_sigma.iter().map(|s| s.sqrt()).collect();

    let mut read_v = f.left.clone();
    for (mut col, r) in read_v.columns_mut().into_iter().zip(&root) {
        col *= *r;
    }
    let mut write_o: Array2<f64> = f.right.t().to_owned();
    for (mut row, r) in write_o.rows_mut().into_iter().zip(&root) {
        row *= *r;
    }

    // bias path: b_v·W_o = Σ cᵢ Rᵢᵀ; edited it becomes Σ mᵢ cᵢ Rᵢᵀ
    let carried = to_f64_vec(&old.bias_v).dot(&to_f64(&old.write_o));
    let coords = carried.dot(&f.right);
    let bias_v: Array1<f64> = (0..k)
        .map(|i| if root[i] > 0.0 { coords[i] * mults[i] / root[i] } else { 0.0 })
        .collect();

    HeadWeights {
        read_v: to_f32(&read_v),
        write_o: to_f32(&write_o),
        bias_v: bias_v.mapv(|v| v as f32),
        ..old.clone()
    }
}

fn to_f64_vec(v: &Array1<f32>) -> Array1<f64> {
    v.mapv(f64::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_io::ModelConfig;
    use crate::runtime::{Hook, HookPoint, Positions};

    fn base() -> Arc<Model> {
        let cfg = ModelConfig {
            n_layers: 3,
            n_heads_per_layer: 2,
            d_model: 16,
            d_head: 8,
            d_mlp: 32,
            vocab_size: 40,
            n_ctx: 12,
            ln_eps: 1e-5,
        };
        let mut m = Model::random(cfg, 5).unwrap();
        for layer in m.heads.iter_mut() {
            for h in layer.iter_mut() {
                let hw = Arc::make_mut(h);
                hw.read_v *= 20.0;
                hw.write_o *= 20.0;
                hw.bias_v.mapv_inplace(|_| 0.3);
            }
        }
        Arc::new(m)
    }

    const IDS: [u32; 7] = [3, 9, 27, 1, 9, 14, 33];

    fn max_diff(a: &ndarray::Array2<f32>, b: &ndarray::Array2<f32>) -> f32 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn plan_json_round_trip_and_validation() {
        let plan = EditPlan::new()
            .set("7.9.6".parse().unwrap(), 0.0)
            .unwrap()
            .set("8.6.2".parse().unwrap(), 2.5)
            .unwrap();
        let text = plan.to_json().unwrap();
        assert!(text.contains("\"7.9.6\": 0.0"));
        assert_eq!(EditPlan::from_json(&text).unwrap(), plan);
        assert!(EditPlan::new().set(ComponentRef::new(0, 0, 0), -1.0).is_err());
        assert!(EditPlan::new().set(ComponentRef::new(0, 0, 0), f64::NAN).is_err());
        assert!(EditPlan::from_json(r#"{"edits": {"1.0.2": -0.5}}"#).is_err());
        assert!(plan.clone().set("7.9.6".parse().unwrap(), 1.0).is_err());
    }

    #[test]
    fn empty_plan_is_noop() {
        let b = base();
        let e = apply_edit(&b, &EditPlan::new()).unwrap();
        assert!(e.edited_heads.is_empty());
        assert_eq!(b.forward(&IDS, &[]).unwrap().logits, e.forward(&IDS, &[]).unwrap().logits);
    }

    #[test]
    fn unit_multipliers_refactor_without_changing_logits() {
        let b = base();
        let plan = EditPlan::new().set(ComponentRef::new(1, 0, 0), 1.0).unwrap();
        let e = apply_edit(&b, &plan).unwrap();
        let d = max_diff(&b.forward(&IDS, &[]).unwrap().logits, &e.forward(&IDS, &[]).unwrap().logits);
        assert!(d < 1e-4, "{d}");
        assert!(e.refactorization_error().unwrap() < 1e-5);
    }

    #[test]
    fn zero_all_matches_zero_replacement() {
        let b = base();
        let kept = BTreeMap::from([(HeadRef::new(1, 1), BTreeSet::new())]);
        let e = keep_only(&b, &kept).unwrap();
        let zeroed = b
            .forward(
                &IDS,
                &[Hook::replace(HookPoint::head_output(1, 1), Positions::All, Array1::zeros(16))],
            )
            .unwrap();
        let d = max_diff(&zeroed.logits, &e.forward(&IDS, &[]).unwrap().logits);
        assert!(d < 1e-3, "{d}");
    }

    #[test]
    fn edits_are_local_and_revertible() {
        let b = base();
        let plan = EditPlan::zeroing([ComponentRef::new(2, 1, 0), ComponentRef::new(2, 1, 3)]).unwrap();
        let e = apply_edit(&b, &plan).unwrap();
        for l in 0..3 {
            for h in 0..2 {
                let same = Arc::ptr_eq(&b.heads[l][h], &e.heads[l][h]);
                assert_eq!(same, (l, h) != (2, 1));
            }
        }
        let rec = [Hook::record(HookPoint::ResidPre(2))];
        let before = b.forward(&IDS, &rec).unwrap();
        let after = e.forward(&IDS, &rec).unwrap();
        assert_eq!(before.recordings[0].values, after.recordings[0].values);
        assert_ne!(before.logits, after.logits);
        let r = e.revert();
        assert!(Arc::ptr_eq(&r, &b));
        assert_eq!(r.forward(&IDS, &[]).unwrap().logits, before.logits);
        assert!(e.refactorization_error().unwrap() < 1e-5);
    }

    #[test]
    fn keep_only_rejects_bad_indices() {
        let b = base();
        let kept = BTreeMap::from([(HeadRef::new(0, 0), BTreeSet::from([8]))]);
        assert!(keep_only(&b, &kept).is_err());
        let kept_all = BTreeMap::from([(HeadRef::new(0, 0), (0..8).collect())]);
        let e = keep_only(&b, &kept_all).unwrap();
        assert_eq!(e.forward(&IDS, &[]).unwrap().logits, b.forward(&IDS, &[]).unwrap().logits);
    }
}
