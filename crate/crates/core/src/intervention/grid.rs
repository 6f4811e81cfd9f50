// SPDX-License-Identifier: MIT OR Apache-2.0

//! Three-component grid traversal and index-conditioned region maps.

use std::collections::BTreeMap;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::direction_f32;
use crate::composition::{Analyzer, ComponentRef, HeadRef};
use crate::error::{ChannelError, Result};
use crate::runtime::{final_attention_row, greedy_next, Hook, HookPoint, Positions, PrefixCache};
use crate::tasks::{attended_index, LaundryExample};

pub type GridPoint3 = [f64; 3];

pub fn default_components() -> [ComponentRef; 3] {
    [ComponentRef::new(7, 9, 6), ComponentRef::new(8, 6, 2), ComponentRef::new(8, 6, 10)]
}

pub const MOVER: HeadRef = HeadRef { layer: 9, head: 9 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub components: [ComponentRef; 3],
    /// α values along each axis (the grid is their cube).
    pub axis: Vec<f64>,
    pub mover: HeadRef,
}

impl GridSpec {
    pub fn new(axis: Vec<f64>) -> Self {
        Self {
            components: default_components(),
            axis,
            mover: MOVER,
        }
    }

    /// Grid points in lexicographic order of coordinates.
    pub fn points(&self) -> Vec<GridPoint3> {
        let mut axis = self.axis.clone();
        axis.sort_by(f64::total_cmp);
        let mut out = Vec::with_capacity(axis.len().pow(3));
        for &a in &axis {
            for &b in &axis {
                for &c in &axis {
                    out.push([a, b, c]);
                }
            }
        }
        out
    }
}

/// Per head: (index into the α list, write direction) for each component.
type HeadDirections = Vec<(HeadRef, Vec<(usize, Array1<f32>)>)>;

/// Replacement hooks that set every listed head's final-position output to
/// the sum of its components' `α·w` (heads with no component untouched).
pub struct Steering {
    heads: HeadDirections,
    d_model: usize,
}

impl Steering {
    pub fn new(analyzer: &Analyzer<'_>, components: &[ComponentRef]) -> Result<Self> {
        let mut heads: HeadDirections = Vec::new();
        for (i, &c) in components.iter().enumerate() {
            let w = direction_f32(analyzer, c)?;
            match heads.iter_mut().find(|(h, _)| *h == c.head_ref()) {
                Some((_, v)) => v.push((i, w)),
                None => heads.push((c.head_ref(), vec![(i, w)])),
            }
        }
        Ok(Self {
            heads,
            d_model: analyzer.model().config.d_model,
        })
    }

    pub fn min_layer(&self) -> usize {
        self.heads.iter().map(|(h, _)| h.layer).min().unwrap_or(0)
    }

    pub fn hooks(&self, alphas: &[f64]) -> Vec<Hook> {
        self.heads
            .iter()
            .map(|(head, comps)| {
                let mut v = Array1::<f32>::zeros(self.d_model);
                for (i, w) in comps {
                    v.scaled_add(alphas[*i] as f32, w);
                }
                Hook::replace(HookPoint::head_output(head.layer, head.head), Positions::Final, v)
            })
            .collect()
    }
}

/// Outcome of one example at one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub attended: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub alphas: GridPoint3,
    pub n: usize,
    /// Count of examples per attended first-list index.
    pub histogram: Vec<usize>,
    pub modal_index: usize,
    pub accuracy: f64,
    pub n_examples: usize,
    /// Per-example outcomes in dataset order.
    pub outcomes: Vec<ExampleOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Traversal {
    pub spec: GridSpec,
    pub n: usize,
    /// `missing_index` of every example, in dataset order.
    pub answer_indices: Vec<usize>,
    pub records: Vec<GridRecord>,
}

fn evaluate(
    analyzer: &Analyzer<'_>,
    cache: &PrefixCache,
    ex: &LaundryExample,
    hooks: &[Hook],
    mover: HeadRef,
) -> Result<ExampleOutcome> {
    let model = analyzer.model();
    let mut hooks = hooks.to_vec();
    hooks.push(Hook::record_at(HookPoint::attn_pattern(mover.layer, mover.head), Positions::Final));
    let out = model.continue_final(cache, &hooks)?;
    let row = final_attention_row(&out, mover.layer, mover.head, ex.ids.len())?;
    Ok(ExampleOutcome {
        attended: attended_index(row.view(), ex),
        correct: greedy_next(&out) == ex.answer,
    })
}

fn check_dataset(dataset: &[LaundryExample]) -> Result<usize> {
    let n = dataset
        .first()
        .ok_or_else(|| ChannelError::Intervention("empty dataset".into()))?
        .n;
    if dataset.iter().any(|e| e.n != n) {
        return Err(ChannelError::Intervention("dataset mixes object counts".into()));
    }
    Ok(n)
}

/// Evaluate every grid point on every example with the three components'
/// heads replaced at the final position.
pub fn traverse_grid(analyzer: &Analyzer<'_>, spec: &GridSpec, dataset: &[LaundryExample]) -> Result<Traversal> {
    let points = spec.points();
    if points.is_empty() {
        return Err(ChannelError::Intervention("grid is empty".into()));
    }
    let n = check_dataset(dataset)?;
    let steering = Steering::new(analyzer, &spec.components)?;
    if spec.mover.layer < steering.min_layer() {
        return Err(ChannelError::LayerOrder {
            source_layer: steering.min_layer(),
            target_layer: spec.mover.layer,
        });
    }
    let model = analyzer.model();
    let caches = dataset
        .par_iter()
        .map(|ex| model.prefix_cache(&ex.ids, steering.min_layer(), &[]))
        .collect::<Result<Vec<_>>>()?;
    let records = points
        .par_iter()
        .map(|&alphas| {
            let hooks = steering.hooks(&alphas);
            let outcomes = dataset
                .iter()
                .zip(&caches)
                .map(|(ex, cache)| evaluate(analyzer, cache, ex, &hooks, spec.mover))
                .collect::<Result<Vec<_>>>()?;
            Ok(summarize(alphas, n, outcomes))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Traversal {
        spec: spec.clone(),
        n,
        answer_indices: dataset.iter().map(|e| e.missing_index).collect(),
        records,
    })
}

fn summarize(alphas: GridPoint3, n: usize, outcomes: Vec<ExampleOutcome>) -> GridRecord {
    let mut histogram = vec![0usize; n];
    for o in &outcomes {
        histogram[o.attended] += 1;
    }
    let mut modal_index = 0;
    for (i, &c) in histogram.iter().enumerate() {
        if c > histogram[modal_index] {
            modal_index = i;
        }
    }
    let correct = outcomes.iter().filter(|o| o.correct).count();
    GridRecord {
        alphas,
        n,
        histogram,
        modal_index,
        accuracy: correct as f64 / outcomes.len().max(1) as f64,
        n_examples: outcomes.len(),
        outcomes,
    }
}

pub fn write_traversal_csv(path: &std::path::Path, t: &Traversal) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["alpha1", "alpha2", "alpha3", "N", "modal_index", "accuracy", "n_examples"])?;
    for r in &t.records {
        w.write_record([
            r.alphas[0].to_string(),
            r.alphas[1].to_string(),
            r.alphas[2].to_string(),
            r.n.to_string(),
            r.modal_index.to_string(),
            r.accuracy.to_string(),
            r.n_examples.to_string(),
        ])?;
    }
    w.flush().map_err(|e| ChannelError::io(path, e))?;
    Ok(())
}

/// Share of grid points whose modal index lies in a 6-connected region of
/// points with the same modal index that is the largest such region for
/// that index. 1.0 means every index occupies one contiguous region.
pub fn region_contiguity(t: &Traversal) -> f64 {
    let mut axis = t.spec.axis.clone();
    axis.sort_by(f64::total_cmp);
    let k = axis.len();
    if k == 0 || t.records.is_empty() {
        return 0.0;
    }
    let label = |i: usize| t.records[i].modal_index;
    let idx = |a: usize, b: usize, c: usize| (a * k + b) * k + c;
    let mut component = vec![usize::MAX; t.records.len()];
    let mut sizes: Vec<(usize, usize)> = Vec::new(); // (label, size)
    for start in 0..t.records.len() {
        if component[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut stack = vec![start];
        component[start] = id;
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (a, b, c) = (p / (k * k), (p / k) % k, p % k);
            let mut neighbours = Vec::with_capacity(6);
            if a > 0 {
                neighbours.push(idx(a - 1, b, c));
            }
            if a + 1 < k {
                neighbours.push(idx(a + 1, b, c));
            }
            if b > 0 {
                neighbours.push(idx(a, b - 1, c));
            }
            if b + 1 < k {
                neighbours.push(idx(a, b + 1, c));
            }
            if c > 0 {
                neighbours.push(idx(a, b, c - 1));
            }
            if c + 1 < k {
                neighbours.push(idx(a, b, c + 1));
            }
            for q in neighbours {
                if component[q] == usize::MAX && label(q) == label(p) {
                    component[q] = id;
                    stack.push(q);
                }
            }
        }
        sizes.push((label(start), size));
    }
    let mut largest: BTreeMap<usize, usize> = BTreeMap::new();
    for &(l, s) in &sizes {
        let e = largest.entry(l).or_insert(0);
        *e = (*e).max(s);
    }
    let covered: usize = largest.values().sum();
    covered as f64 / t.records.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Fraction of cell examples whose attended index is the answer index.
    Attention,
    /// Fraction of cell examples answered correctly.
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    pub n: usize,
    pub components: [ComponentRef; 3],
    /// Answer index → steering point.
    pub points: BTreeMap<usize, GridPoint3>,
    /// Calibration objective value at the chosen point.
    pub scores: BTreeMap<usize, f64>,
    pub objective: Objective,
    pub split_seed: u64,
    pub calibration_size: usize,
}

/// Pick, for each answer index, the grid point that maximizes the
/// objective on calibration examples with that answer index. Ties go to
/// the lexicographically lowest point.
pub fn build_region_map(t: &Traversal, objective: Objective, split_seed: u64) -> Result<RegionMap> {
    if t.records.is_empty() {
        return Err(ChannelError::Intervention("traversal has no grid points".into()));
    }
    let mut points = BTreeMap::new();
    let mut scores = BTreeMap::new();
    for index in 0..t.n {
        let members: Vec<usize> = (0..t.answer_indices.len()).filter(|&i| t.answer_indices[i] == index).collect();
        if members.is_empty() {
            return Err(ChannelError::Intervention(format!(
                "no calibration examples with answer index {index}"
            )));
        }
        let mut best: Option<(f64, GridPoint3)> = None;
        for r in &t.records {
            let hits = members
                .iter()
                .filter(|&&i| match objective {
                    Objective::Attention => r.outcomes[i].attended == index,
                    Objective::Accuracy => r.outcomes[i].correct,
                })
                .count();
            let score = hits as f64 / members.len() as f64;
            let better = match best {
                None => true,
                Some((s, p)) => score > s || (score == s && lex_less(&r.alphas, &p)),
            };
            if better {
                best = Some((score, r.alphas));
            }
        }
        let (score, point) = best.expect("non-empty grid");
        points.insert(index, point);
        scores.insert(index, score);
    }
    Ok(RegionMap {
        n: t.n,
        components: t.spec.components,
        points,
        scores,
        objective,
        split_seed,
        calibration_size: t.answer_indices.len(),
    })
}

fn lex_less(a: &GridPoint3, b: &GridPoint3) -> bool {
    a.iter().zip(b).find(|(x, y)| x != y).is_some_and(|(x, y)| x < y)
}

/// Accuracy with each example steered to its answer index's point.
pub fn steered_accuracy(analyzer: &Analyzer<'_>, map: &RegionMap, dataset: &[LaundryExample], mover: HeadRef) -> Result<f64> {
    let n = check_dataset(dataset)?;
    if n != map.n {
        return Err(ChannelError::Intervention(format!("map built for N={}, dataset has N={n}", map.n)));
    }
    let steering = Steering::new(analyzer, &map.components)?;
    let model = analyzer.model();
    let hits = dataset
        .par_iter()
        .map(|ex| {
            let point = map.points.get(&ex.missing_index).ok_or_else(|| {
                ChannelError::Intervention(format!("map has no point for index {}", ex.missing_index))
            })?;
            let cache = model.prefix_cache(&ex.ids, steering.min_layer(), &[])?;
            let o = evaluate(analyzer, &cache, ex, &steering.hooks(point), mover)?;
            Ok(usize::from(o.correct))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / dataset.len() as f64)
}
