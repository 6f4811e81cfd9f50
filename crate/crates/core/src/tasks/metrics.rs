// SPDX-License-Identifier: MIT OR Apache-2.0

//! Task metrics over attention patterns, predictions, and projections.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ioi::IoiExample;
use super::laundry::LaundryExample;
use crate::error::{ChannelError, Result};

/// Attention to IO minus attention to S1 from the final position.
pub fn inhibition_score(pattern: ArrayView2<'_, f32>, ex: &IoiExample) -> Result<f64> {
    if pattern.nrows() <= ex.end_pos || pattern.ncols() <= ex.end_pos {
        return Err(ChannelError::Metric(format!(
            "pattern of shape {:?} does not cover position {}",
            pattern.shape(),
            ex.end_pos
        )));
    }
    inhibition_from_row(pattern.row(ex.end_pos), ex)
}

/// Same score from the final-position attention row alone.
pub fn inhibition_from_row(row: ArrayView1<'_, f32>, ex: &IoiExample) -> Result<f64> {
    if row.len() <= ex.io_pos.max(ex.s1_pos) {
        return Err(ChannelError::Metric(format!("attention row of length {} too short", row.len())));
    }
    Ok(f64::from(row[ex.io_pos]) - f64::from(row[ex.s1_pos]))
}

/// First-list object the final position attends to most (ties → lowest).
pub fn attended_index(row: ArrayView1<'_, f32>, ex: &LaundryExample) -> usize {
    let mut best = 0;
    for (i, &p) in ex.first_positions.iter().enumerate() {
        if row[p] > row[ex.first_positions[best]] {
            best = i;
        }
    }
    best
}

/// Something with a prompt and a single-token gold answer.
pub trait Prompt: Sync {
    fn ids(&self) -> &[u32];
    fn answer(&self) -> u32;
}

impl Prompt for IoiExample {
    fn ids(&self) -> &[u32] {
        &self.ids
    }

    fn answer(&self) -> u32 {
        self.answer
    }
}

impl Prompt for LaundryExample {
    fn ids(&self) -> &[u32] {
        &self.ids
    }

    fn answer(&self) -> u32 {
        self.answer
    }
}

/// Fraction of examples whose prediction equals the answer.
pub fn task_accuracy<P, F>(examples: &[P], predict: F) -> Result<f64>
where
    P: Prompt,
    F: Fn(&P) -> Result<u32> + Sync,
{
    if examples.is_empty() {
        return Err(ChannelError::Metric("accuracy over an empty dataset".into()));
    }
    let hits = examples
        .par_iter()
        .map(|ex| predict(ex).map(|p| usize::from(p == ex.answer())))
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / examples.len() as f64)
}

/// Labelled 2D point: `(projection, is_duplicate)`.
pub type LabelledPoint = ([f64; 2], bool);

/// Half-plane classifier `p·(cos θ, sin θ) > threshold ⇒ positive`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSeparator {
    pub angle_deg: f64,
    pub threshold: f64,
    pub train_accuracy: f64,
}

impl LinearSeparator {
    pub fn predict(&self, p: [f64; 2]) -> bool {
        let t = self.angle_deg.to_radians();
        p[0] * t.cos() + p[1] * t.sin() > self.threshold
    }

    pub fn accuracy(&self, points: &[LabelledPoint]) -> f64 {
        if points.is_empty() {
            return 0.0;
        }
        let hits = points.iter().filter(|(p, y)| self.predict(*p) == *y).count();
        hits as f64 / points.len() as f64
    }
}

fn check_two_classes(points: &[LabelledPoint]) -> Result<()> {
    let pos = points.iter().filter(|(_, y)| *y).count();
    if pos == 0 || pos == points.len() {
        return Err(ChannelError::Metric("separability needs both classes".into()));
    }
    Ok(())
}

/// Exhaustive 1° angle grid; thresholds at midpoints of sorted projections.
pub fn fit_separator(train: &[LabelledPoint]) -> Result<LinearSeparator> {
    check_two_classes(train)?;
    let n = train.len();
    let total_pos = train.iter().filter(|(_, y)| *y).count();
    let mut best = LinearSeparator {
        angle_deg: 0.0,
        threshold: f64::NEG_INFINITY,
        train_accuracy: -1.0,
    };
    for deg in 0..360 {
        let t = f64::from(deg).to_radians();
        let mut proj: Vec<(f64, bool)> = train.iter().map(|(p, y)| (p[0] * t.cos() + p[1] * t.sin(), *y)).collect();
        proj.sort_by(|a, b| a.0.total_cmp(&b.0));
        // threshold below everything: all predicted positive
        let mut correct = total_pos;
        let mut consider = |correct: usize, threshold: f64| {
            let acc = correct as f64 / n as f64;
            if acc > best.train_accuracy {
                best = LinearSeparator {
                    angle_deg: f64::from(deg),
                    threshold,
                    train_accuracy: acc,
                };
            }
        };
        consider(correct, proj[0].0 - 1.0);
        for i in 0..n {
            // moving the threshold past point i flips it to negative
            if proj[i].1 {
                correct -= 1;
            } else {
                correct += 1;
            }
            if i + 1 < n && proj[i + 1].0 == proj[i].0 {
                continue;
            }
            let threshold = if i + 1 < n { 0.5 * (proj[i].0 + proj[i + 1].0) } else { proj[i].0 + 1.0 };
            consider(correct, threshold);
        }
    }
    Ok(best)
}

/// Held-out accuracy of the separator fitted on `train`.
pub fn separability(train: &[LabelledPoint], test: &[LabelledPoint]) -> Result<f64> {
    check_two_classes(test)?;
    Ok(fit_separator(train)?.accuracy(test))
}

/// Subsample the larger class so both classes are the same size.
pub fn balance(points: &[LabelledPoint], seed: u64) -> Vec<LabelledPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg): (Vec<_>, Vec<_>) = points.iter().copied().partition(|(_, y)| *y);
    let k = pos.len().min(neg.len());
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    pos.truncate(k);
    neg.truncate(k);
    pos.extend(neg);
    pos
}

/// Stratified random halves `(train, test)`.
pub fn split_half(points: &[LabelledPoint], seed: u64) -> (Vec<LabelledPoint>, Vec<LabelledPoint>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg): (Vec<_>, Vec<_>) = points.iter().copied().partition(|(_, y)| *y);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in [pos, neg] {
        let half = class.len() / 2;
        train.extend_from_slice(&class[..half]);
        test.extend_from_slice(&class[half..]);
    }
    (train, test)
}
