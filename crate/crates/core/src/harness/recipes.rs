// SPDX-License-Identifier: MIT OR Apache-2.0

//! The ten named experiments.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{ExperimentConfig, Params};
use super::manifest::Check;
use crate::composition::{
    Analyzer, BuildOptions, ComponentRef, CompositionKind, CompositionReport, DecomposedSide, HeadRef,
};
use crate::editor::{apply_edit, keep_only, EditPlan};
use crate::error::{ChannelError, Result};
use crate::intervention::{
    build_region_map, detect_crossover, duplicate_sweep, head_outputs, patch_dataset, region_contiguity,
    run_scale_sweep, spearman, steered_accuracy, traverse_grid, write_curve_csv, write_traversal_csv, CurvePoint,
    DuplicateChannel, GridSpec, NameRole, PatchSpec, ScaleSweep, SweepMetric, SweepPosition, MOVER,
};
use crate::model_io::Model;
use crate::runtime::{final_attention_row, greedy_next, Hook, HookPoint, Positions};
use crate::tasks::{
    balance, gen_duplicate_seqs, gen_ioi, gen_laundry, inhibition_from_row, minimal_pairs, printable_ids,
    separability, task_accuracy, IoiExample, LabelledPoint, LaundryExample, DEFAULT_TEMPLATE, NAME_POOL,
};
use crate::tokenizer::Tokenizer;

pub const INHIBITION_HEADS: [HeadRef; 4] = [
    HeadRef { layer: 7, head: 3 },
    HeadRef { layer: 7, head: 9 },
    HeadRef { layer: 8, head: 6 },
    HeadRef { layer: 8, head: 10 },
];

/// Held-out accuracy needed by the duplicate separator: the balanced
/// majority baseline (0.5) plus 20 points.
pub const SEPARABILITY_THRESHOLD: f64 = 0.70;

const CROSSOVER_MIN_RHO: f64 = 0.8;
const CROSSOVER_MIN_RANGE: f64 = 0.1;

/// Mutable state of one recipe run.
pub struct Context<'a> {
    pub model: Arc<Model>,
    pub tok: &'a Tokenizer,
    pub config: &'a ExperimentConfig,
    pub params: Params,
    pub dir: PathBuf,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub files: Vec<PathBuf>,
}

impl Context<'_> {
    fn analyzer(&self) -> Analyzer<'_> {
        Analyzer::new(
            &self.model,
            BuildOptions {
                fold_ln: self.config.fold_ln,
                attn_scale: false,
            },
        )
    }

    fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    fn check(&mut self, c: Check) {
        self.checks.push(c);
    }

    /// Register `name` as a result file and return its full path.
    fn file(&mut self, name: impl AsRef<Path>) -> Result<PathBuf> {
        let path = self.dir.join(name.as_ref());
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| ChannelError::io(parent, e))?;
        }
        self.files.push(name.as_ref().to_path_buf());
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.file(name)?;
        std::fs::write(&path, serde_json::to_string_pretty(value)?).map_err(|e| ChannelError::io(&path, e))
    }

    fn ioi(&self, per_order: usize) -> Result<Vec<IoiExample>> {
        gen_ioi(self.tok, per_order, self.config.seed, NAME_POOL, DEFAULT_TEMPLATE)
    }
}

pub(crate) fn dispatch(name: &str, ctx: &mut Context<'_>) -> Result<()> {
    match name {
        "compose-scan" => compose_scan(ctx),
        "edit-inhibition" => edit_inhibition(ctx),
        "keep-only" => keep_only_recipe(ctx),
        "ioi-sweep" => ioi_sweep(ctx),
        "duplicate-add" => duplicate_add(ctx),
        "subspace-patch" => subspace_patch(ctx),
        "ll-baseline" => ll_baseline(ctx),
        "ll-traverse" => ll_traverse(ctx),
        "ll-steer" => ll_steer(ctx),
        "duplicate-separability" => duplicate_separability(ctx),
        _ => Err(ChannelError::UnknownRecipe {
            name: name.into(),
            valid: super::RECIPES.join(", "),
        }),
    }
}

/// Mean mover inhibition score (attention to IO minus S1 at the final
/// position) over `examples`.
pub fn mean_inhibition(model: &Model, examples: &[IoiExample], mover: HeadRef) -> Result<f64> {
    let point = HookPoint::attn_pattern(mover.layer, mover.head);
    let scores = examples
        .par_iter()
        .map(|ex| {
            let out = model.forward_final(&ex.ids, &[Hook::record_at(point, Positions::Final)])?;
            let row = final_attention_row(&out, mover.layer, mover.head, ex.ids.len())?;
            inhibition_from_row(row.view(), ex)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(crate::intervention::mean_std(&scores).0)
}

/// Component of `head` with the highest query-composition score into the
/// mover's QK.
pub fn top_query_component(analyzer: &Analyzer<'_>, head: HeadRef) -> Result<ComponentRef> {
    let r = analyzer.component_scores(head, MOVER, CompositionKind::Query, DecomposedSide::Source, None)?;
    Ok(ComponentRef::new(head.layer, head.head, r.top()))
}

fn report_name(r: &CompositionReport) -> String {
    let target = match r.fixed_component {
        Some(c) => c.to_string(),
        None => r.target.to_string(),
    };
    format!("reports/{}_{}_{}.json", r.kind, r.source, target)
}

fn compose_scan(ctx: &mut Context<'_>) -> Result<()> {
    let reports = {
        let analyzer = ctx.analyzer();
        let mut out = Vec::new();
        for head in INHIBITION_HEADS {
            out.push(analyzer.component_scores(head, MOVER, CompositionKind::Query, DecomposedSide::Source, None)?);
        }
        let dup = HeadRef::new(3, 0);
        out.push(analyzer.component_scores(dup, HeadRef::new(7, 9), CompositionKind::Value, DecomposedSide::Source, Some(6))?);
        out.push(analyzer.component_scores(
            HeadRef::new(4, 11),
            HeadRef::new(5, 5),
            CompositionKind::Key,
            DecomposedSide::Source,
            None,
        )?);
        out
    };
    for r in &reports {
        let name = report_name(r);
        ctx.write_json(&name, r)?;
        let z_top = r.z_scores[r.top()];
        ctx.metric(format!("{}:{}->{}:top", r.kind, r.source, r.target), r.top() as f64);
        ctx.metric(format!("{}:{}->{}:top_z", r.kind, r.source, r.target), z_top);
        ctx.metric(format!("{}:{}->{}:outliers", r.kind, r.source, r.target), r.outliers.len() as f64);
    }
    for r in &reports[1..4] {
        let z = r.z_scores[r.top()];
        ctx.check(Check::at_least(format!("query {}→9.9 top component z", r.source), z, crate::composition::OUTLIER_Z));
    }
    let flag_862 = reports[2].outliers.contains(&2);
    ctx.metric("8.6.2_outlier", if flag_862 { 1.0 } else { 0.0 });
    let value = &reports[4];
    ctx.check(Check::holds(
        "value 3.0→7.9.6 outlier count",
        "exactly 2",
        value.outliers.len() == 2,
    ));
    let key = &reports[5];
    let max_z = key.z_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ctx.check(Check {
        name: "key 4.11→5.5 max z".into(),
        target: format!("< {}", crate::composition::OUTLIER_Z),
        measured: max_z,
        pass: max_z < crate::composition::OUTLIER_Z,
    });
    Ok(())
}

fn edit_inhibition(ctx: &mut Context<'_>) -> Result<()> {
    let examples = ctx.ioi(ctx.params.ioi_per_order)?;
    let clean = mean_inhibition(&ctx.model, &examples, MOVER)?;
    ctx.metric("clean_inhibition", clean);
    ctx.check(Check::within("clean mean inhibition", clean, 0.70, 0.10));

    let tops = {
        let analyzer = ctx.analyzer();
        INHIBITION_HEADS.iter().map(|&h| top_query_component(&analyzer, h)).collect::<Result<Vec<_>>>()?
    };
    let mut rows = Vec::new();
    for c in &tops {
        let edited = apply_edit(&ctx.model, &EditPlan::zeroing([*c])?)?;
        let score = mean_inhibition(edited.model(), &examples, MOVER)?;
        let drop = if clean != 0.0 { (clean - score) / clean } else { f64::NAN };
        ctx.metric(format!("{c}:inhibition"), score);
        ctx.metric(format!("{c}:relative_drop"), drop);
        rows.push((*c, score, drop));
    }
    let path = ctx.file("edit_inhibition.csv")?;
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["component", "inhibition", "relative_drop"])?;
    for (c, s, d) in &rows {
        w.write_record([c.to_string(), s.to_string(), d.to_string()])?;
    }
    w.flush().map_err(|e| ChannelError::io(&path, e))?;

    // 7.3 is listed first; the others must land in the 7–14% band widened
    // by 4 points, and 7.3 must drop less than each of them.
    let drop_73 = rows[0].2;
    for (c, _, d) in &rows[1..] {
        ctx.check(Check::range(format!("{c} zeroed relative drop"), *d, 0.03, 0.18));
    }
    let min_other = rows[1..].iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    ctx.check(Check {
        name: format!("{} zeroed drop below others", rows[0].0),
        target: format!("< {min_other}"),
        measured: drop_73,
        pass: drop_73 < min_other,
    });
    Ok(())
}

fn keep_only_recipe(ctx: &mut Context<'_>) -> Result<()> {
    let examples = ctx.ioi(ctx.params.ioi_per_order)?;
    let clean = mean_inhibition(&ctx.model, &examples, MOVER)?;
    ctx.metric("clean_inhibition", clean);
    let tops = {
        let analyzer = ctx.analyzer();
        INHIBITION_HEADS.iter().map(|&h| top_query_component(&analyzer, h)).collect::<Result<Vec<_>>>()?
    };
    let kept_top: BTreeMap<HeadRef, BTreeSet<usize>> =
        tops.iter().map(|c| (c.head_ref(), BTreeSet::from([c.index]))).collect();
    let kept_zero: BTreeMap<HeadRef, BTreeSet<usize>> =
        INHIBITION_HEADS.iter().map(|&h| (h, BTreeSet::from([0]))).collect();
    let top = mean_inhibition(keep_only(&ctx.model, &kept_top)?.model(), &examples, MOVER)?;
    let zeroth = mean_inhibition(keep_only(&ctx.model, &kept_zero)?.model(), &examples, MOVER)?;
    ctx.metric("keep_top_inhibition", top);
    ctx.metric("keep_0th_inhibition", zeroth);
    let kept: Vec<String> = tops.iter().map(ToString::to_string).collect();
    ctx.write_json(
        "keep_only.json",
        &serde_json::json!({
            "clean": clean,
            "keep_top": {"components": kept, "inhibition": top},
            "keep_0th": {"inhibition": zeroth},
        }),
    )?;
    ctx.check(Check::within("clean mean inhibition", clean, 0.70, 0.10));
    ctx.check(Check::within("keep-only-top mean inhibition", top, 0.30, 0.10));
    ctx.check(Check::within("keep-only-0th mean inhibition", zeroth, 0.04, 0.05));
    Ok(())
}

/// First `k` examples of each order.
fn per_order(examples: &[IoiExample], k: usize) -> (Vec<IoiExample>, Vec<IoiExample>) {
    let io: Vec<_> = examples.iter().filter(|e| e.io_first).take(k).cloned().collect();
    let s1: Vec<_> = examples.iter().filter(|e| !e.io_first).take(k).cloned().collect();
    (io, s1)
}

/// A seeded component of a layer-8 head that is not an inhibition head.
pub fn control_component(model: &Model, seed: u64) -> Result<ComponentRef> {
    let cfg = &model.config;
    let heads: Vec<usize> = (0..cfg.n_heads_per_layer)
        .filter(|&h| !INHIBITION_HEADS.contains(&HeadRef::new(8, h)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0_17_0E);
    let head = *heads
        .choose(&mut rng)
        .ok_or_else(|| ChannelError::Config("layer 8 has no control head".into()))?;
    Ok(ComponentRef::new(8, head, rng.gen_range(0..cfg.d_head)))
}

fn ioi_sweep(ctx: &mut Context<'_>) -> Result<()> {
    let k = ctx.params.sweep_examples.min(ctx.params.ioi_per_order);
    let examples = ctx.ioi(ctx.params.ioi_per_order)?;
    let (io, s1) = per_order(&examples, k);
    let alphas = ctx.params.axis(ctx.params.sweep_step);
    let control = control_component(&ctx.model, ctx.config.seed)?;
    let targets = [("channel", ComponentRef::new(8, 10, 1)), ("control", control)];
    let mut curves: Vec<(String, ComponentRef, Vec<CurvePoint>, Vec<CurvePoint>)> = Vec::new();
    {
        let analyzer = ctx.analyzer();
        for (label, c) in targets {
            let sweep = ScaleSweep {
                component: c,
                alphas: alphas.clone(),
                position: SweepPosition::Final,
                dataset: "ioi".into(),
            };
            let metric = SweepMetric::Inhibition { mover: MOVER };
            let a = run_scale_sweep(&analyzer, &sweep, &io, metric)?;
            let b = run_scale_sweep(&analyzer, &sweep, &s1, metric)?;
            curves.push((label.to_string(), c, a, b));
        }
    }
    for (label, c, a, b) in &curves {
        write_curve_csv(&ctx.file(format!("sweep_{c}_io_first.csv"))?, a)?;
        write_curve_csv(&ctx.file(format!("sweep_{c}_s1_first.csv"))?, b)?;
        // Crossover is sign-symmetric: flipping the component negates α,
        // which negates both ρ and keeps their signs opposite.
        let x = detect_crossover(a, b, CROSSOVER_MIN_RHO, CROSSOVER_MIN_RANGE);
        ctx.metric(format!("{label}:{c}:rho_io_first"), x.rho_io_first);
        ctx.metric(format!("{label}:{c}:rho_s1_first"), x.rho_s1_first);
        ctx.metric(format!("{label}:{c}:range_io_first"), x.range_io_first);
        ctx.metric(format!("{label}:{c}:range_s1_first"), x.range_s1_first);
        let (name, want) = match label.as_str() {
            "channel" => (format!("{c} order crossover"), true),
            _ => (format!("control {c} no crossover"), false),
        };
        ctx.check(Check::holds(name, if want { "detected" } else { "absent" }, x.detected == want));
    }
    Ok(())
}

fn duplicate_add(ctx: &mut Context<'_>) -> Result<()> {
    let k = ctx.params.sweep_examples.min(ctx.params.ioi_per_order);
    let examples = ctx.ioi(ctx.params.ioi_per_order)?;
    let (mut subset, s1) = per_order(&examples, k);
    subset.extend(s1);
    let alphas = ctx.params.axis(ctx.params.sweep_step);
    let channel = DuplicateChannel::default();
    let mut curves = Vec::new();
    {
        let analyzer = ctx.analyzer();
        for role in [NameRole::Io, NameRole::S1] {
            curves.push((role, duplicate_sweep(&analyzer, &channel, &subset, role, &alphas, MOVER)?));
        }
    }
    for (role, curve) in &curves {
        let tag = match role {
            NameRole::Io => "io",
            NameRole::S1 => "s1",
        };
        write_curve_csv(&ctx.file(format!("duplicate_add_{tag}.csv"))?, curve)?;
        let at = |a: f64| curve.iter().find(|p| p.alpha == a).map(|p| p.metric_mean);
        if let (Some(lo), Some(hi)) = (curve.first(), curve.last()) {
            ctx.metric(format!("{tag}:inhibition_at_min_alpha"), lo.metric_mean);
            ctx.metric(format!("{tag}:inhibition_at_max_alpha"), hi.metric_mean);
        }
        if let Some(zero) = at(0.0) {
            ctx.metric(format!("{tag}:inhibition_at_zero"), zero);
        }
    }
    Ok(())
}

fn subspace_patch(ctx: &mut Context<'_>) -> Result<()> {
    let examples = ctx.ioi(ctx.params.patch_pairs)?;
    // Alternate which member of each pair donates so both orders are
    // recipients equally often.
    let pairs: Vec<(&IoiExample, &IoiExample)> = minimal_pairs(&examples)
        .into_iter()
        .enumerate()
        .map(|(k, (i, j))| if k % 2 == 0 { (&examples[i], &examples[j]) } else { (&examples[j], &examples[i]) })
        .collect();
    let (summary, results) = {
        let analyzer = ctx.analyzer();
        patch_dataset(&analyzer, &PatchSpec::default(), &pairs)?
    };
    let path = ctx.file("patch_pairs.csv")?;
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["pair_id", "recipient_io_first", "ld_clean", "ld_patched", "fldd", "predicted", "donor_answer", "interchanged"])?;
    for ((_, r), res) in pairs.iter().zip(&results) {
        w.write_record([
            r.pair_id.to_string(),
            r.io_first.to_string(),
            res.ld_clean.to_string(),
            res.ld_patched.to_string(),
            res.fldd.map(|f| f.to_string()).unwrap_or_default(),
            res.predicted.to_string(),
            res.donor_answer.to_string(),
            res.interchanged.to_string(),
        ])?;
    }
    w.flush().map_err(|e| ChannelError::io(&path, e))?;
    ctx.write_json("patch_summary.json", &summary)?;
    ctx.metric("mean_fldd", summary.mean_fldd);
    ctx.metric("std_fldd", summary.std_fldd);
    ctx.metric("excluded_pairs", summary.excluded as f64);
    ctx.metric("interchange_accuracy", summary.interchange_accuracy);
    ctx.check(Check::within("mean FLDD (%)", summary.mean_fldd, 97.5, 5.0));
    ctx.check(Check::within("interchange accuracy", summary.interchange_accuracy, 0.35, 0.10));
    Ok(())
}

fn predictions(model: &Model, examples: &[LaundryExample]) -> Result<Vec<u32>> {
    examples.par_iter().map(|ex| Ok(greedy_next(&model.forward_final(&ex.ids, &[])?))).collect()
}

fn ll_baseline(ctx: &mut Context<'_>) -> Result<()> {
    let ns = ctx.params.laundry_ns.clone();
    let path = ctx.file("ll_baseline.csv")?;
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["N", "accuracy", "last_first_list", "last_second_list", "n_examples"])?;
    let mut accs = Vec::new();
    for &n in &ns {
        let examples = gen_laundry(ctx.tok, n, ctx.params.laundry_count, ctx.config.seed.wrapping_add(n as u64))?;
        let preds = predictions(&ctx.model, &examples)?;
        let frac = |f: &dyn Fn(&LaundryExample) -> u32| {
            examples.iter().zip(&preds).filter(|(e, &p)| p == f(e)).count() as f64 / examples.len() as f64
        };
        let acc = frac(&|e| e.answer);
        let last_first = frac(&|e| e.object_tokens[e.n - 1]);
        let last_second = frac(&|e| e.object_tokens[*e.second_order.last().expect("n ≥ 2")]);
        w.write_record([n.to_string(), acc.to_string(), last_first.to_string(), last_second.to_string(), examples.len().to_string()])?;
        ctx.metric(format!("N{n}:accuracy"), acc);
        ctx.metric(format!("N{n}:last_first_list"), last_first);
        ctx.metric(format!("N{n}:last_second_list"), last_second);
        accs.push(acc);
    }
    w.flush().map_err(|e| ChannelError::io(&path, e))?;
    if let Some(i) = ns.iter().position(|&n| n == 3) {
        ctx.check(Check::within("N=3 accuracy", accs[i], 0.64, 0.08));
    }
    if ns.len() >= 2 {
        let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
        let rho = spearman(&xs, &accs);
        ctx.metric("spearman_accuracy_vs_n", rho);
        ctx.check(Check {
            name: "accuracy trend over N (Spearman ρ)".into(),
            target: "< 0".into(),
            measured: rho,
            pass: rho < 0.0,
        });
    }
    Ok(())
}

/// Calibration examples stratified over answer indices (round robin) and
/// disjoint evaluation examples, all drawn from one seeded pool.
pub fn laundry_split(
    tok: &Tokenizer,
    n: usize,
    calibration: usize,
    evaluation: usize,
    seed: u64,
) -> Result<(Vec<LaundryExample>, Vec<LaundryExample>)> {
    if calibration < n {
        return Err(ChannelError::Config(format!(
            "calibration set of {calibration} cannot cover {n} answer indices"
        )));
    }
    let pool = gen_laundry(tok, n, calibration + evaluation + 10 * n, seed)?;
    let mut by_index: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, ex) in pool.iter().enumerate() {
        by_index[ex.missing_index].push(i);
    }
    if let Some(empty) = by_index.iter().position(Vec::is_empty) {
        return Err(ChannelError::Dataset(format!("pool has no example with answer index {empty}")));
    }
    let mut chosen = BTreeSet::new();
    let mut cursor = vec![0usize; n];
    'fill: loop {
        let mut progressed = false;
        for (idx, members) in by_index.iter().enumerate() {
            if chosen.len() == calibration {
                break 'fill;
            }
            if let Some(&i) = members.get(cursor[idx]) {
                chosen.insert(i);
                cursor[idx] += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    let calib: Vec<_> = chosen.iter().map(|&i| pool[i].clone()).collect();
    let eval: Vec<_> = pool
        .iter()
        .enumerate()
        .filter(|(i, _)| !chosen.contains(i))
        .map(|(_, e)| e.clone())
        .take(evaluation)
        .collect();
    if calib.len() < calibration || eval.len() < evaluation {
        return Err(ChannelError::Dataset("laundry pool too small for the requested split".into()));
    }
    Ok((calib, eval))
}

fn ll_traverse(ctx: &mut Context<'_>) -> Result<()> {
    let spec = GridSpec::new(ctx.params.axis(ctx.params.grid_step));
    for n in ctx.params.steer_ns.clone() {
        let (calib, _) = laundry_split(
            ctx.tok,
            n,
            ctx.params.calibration,
            ctx.params.evaluation,
            ctx.config.seed.wrapping_add(n as u64),
        )?;
        let t = {
            let analyzer = ctx.analyzer();
            traverse_grid(&analyzer, &spec, &calib)?
        };
        write_traversal_csv(&ctx.file(format!("traverse_N{n}.csv"))?, &t)?;
        ctx.metric(format!("N{n}:region_contiguity"), region_contiguity(&t));
    }
    Ok(())
}

fn ll_steer(ctx: &mut Context<'_>) -> Result<()> {
    let spec = GridSpec::new(ctx.params.axis(ctx.params.grid_step));
    let path = ctx.file("ll_steer.csv")?;
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["N", "clean_accuracy", "steered_accuracy", "calibration", "evaluation"])?;
    let mut rows = Vec::new();
    for n in ctx.params.steer_ns.clone() {
        let seed = ctx.config.seed.wrapping_add(n as u64);
        let (calib, eval) = laundry_split(ctx.tok, n, ctx.params.calibration, ctx.params.evaluation, seed)?;
        let (map, steered) = {
            let analyzer = ctx.analyzer();
            let t = traverse_grid(&analyzer, &spec, &calib)?;
            let map = build_region_map(&t, ctx.params.objective, seed)?;
            let steered = steered_accuracy(&analyzer, &map, &eval, MOVER)?;
            (map, steered)
        };
        let model = ctx.model.clone();
        let clean = task_accuracy(&eval, |e| Ok(greedy_next(&model.forward_final(&e.ids, &[])?)))?;
        ctx.write_json(&format!("region_map_N{n}.json"), &map)?;
        w.write_record([n.to_string(), clean.to_string(), steered.to_string(), calib.len().to_string(), eval.len().to_string()])?;
        ctx.metric(format!("N{n}:clean_accuracy"), clean);
        ctx.metric(format!("N{n}:steered_accuracy"), steered);
        rows.push((n, clean, steered));
    }
    w.flush().map_err(|e| ChannelError::io(&path, e))?;
    for &(n, clean, steered) in &rows {
        match n {
            3 => ctx.check(Check::at_least("N=3 steered accuracy", steered, 0.80)),
            8 => ctx.check(Check::at_least("N=8 steered accuracy", steered, 0.45)),
            _ => {}
        }
        if n <= 8 {
            ctx.check(Check::at_least(format!("N={n} steered ≥ clean"), steered - clean, 0.0));
        }
    }
    Ok(())
}

/// Per-position projections of head 3.0's output on the duplicate
/// channel's two write directions, labelled by duplicate status.
pub fn duplicate_points(
    analyzer: &Analyzer<'_>,
    channel: &DuplicateChannel,
    seqs: &[crate::tasks::DuplicateSeqExample],
) -> Result<Vec<Vec<LabelledPoint>>> {
    let [a, b] = channel.components[..] else {
        return Err(ChannelError::Config("duplicate channel needs exactly two components".into()));
    };
    if a.head_ref() != b.head_ref() {
        return Err(ChannelError::Config("duplicate channel components must share a head".into()));
    }
    let (wa, wb) = (analyzer.write_direction(a)?, analyzer.write_direction(b)?);
    seqs.par_iter()
        .map(|s| {
            let out = head_outputs(analyzer, a.head_ref(), &s.ids)?.mapv(f64::from);
            Ok((0..s.ids.len()).map(|p| ([out.row(p).dot(&wa), out.row(p).dot(&wb)], s.is_duplicate(p))).collect())
        })
        .collect()
}

fn duplicate_separability(ctx: &mut Context<'_>) -> Result<()> {
    let p = ctx.params.clone();
    let pool = printable_ids(ctx.tok);
    let seqs = gen_duplicate_seqs(&pool, p.dup_length, p.dup_copies, p.dup_sequences, ctx.model.config.n_ctx, ctx.config.seed)?;
    let points = {
        let analyzer = ctx.analyzer();
        duplicate_points(&analyzer, &DuplicateChannel::default(), &seqs)?
    };
    // Held-out sequences: first half trains, second half tests.
    let half = seqs.len() / 2;
    let train: Vec<LabelledPoint> = points[..half].iter().flatten().copied().collect();
    let test: Vec<LabelledPoint> = points[half..].iter().flatten().copied().collect();
    let (train, test) = (balance(&train, ctx.config.seed), balance(&test, ctx.config.seed.wrapping_add(1)));
    let acc = separability(&train, &test)?;

    let path = ctx.file("duplicate_points.csv")?;
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["sequence", "position", "x", "y", "duplicate", "split"])?;
    for (si, pts) in points.iter().enumerate() {
        let split = if si < half { "train" } else { "test" };
        for (pos, (xy, dup)) in pts.iter().enumerate() {
            w.write_record([si.to_string(), pos.to_string(), xy[0].to_string(), xy[1].to_string(), dup.to_string(), split.into()])?;
        }
    }
    w.flush().map_err(|e| ChannelError::io(&path, e))?;
    ctx.metric("heldout_accuracy", acc);
    ctx.metric("majority_baseline", 0.5);
    ctx.metric("pass_threshold", SEPARABILITY_THRESHOLD);
    ctx.metric("train_points", train.len() as f64);
    ctx.metric("test_points", test.len() as f64);
    ctx.check(Check::at_least("duplicate separator held-out accuracy", acc, SEPARABILITY_THRESHOLD));
    Ok(())
}
