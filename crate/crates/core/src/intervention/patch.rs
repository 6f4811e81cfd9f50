// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal-pair patching of one-dimensional channel subspaces.

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{direction_f32, grid::default_components, mean_std};
use crate::composition::{Analyzer, ComponentRef};
use crate::error::{ChannelError, Result};
use crate::runtime::{greedy_next, logit_of, FinalOutput, Hook, HookAction, HookPoint, Outputs, Positions};
use crate::tasks::IoiExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchSite {
    /// Projection of each component's own head output.
    #[default]
    HeadOutput,
    /// Projection of the residual stream entering this layer.
    Residual { layer: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub components: Vec<ComponentRef>,
    #[serde(default)]
    pub site: PatchSite,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            components: default_components().to_vec(),
            site: PatchSite::HeadOutput,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchResult {
    pub ld_clean: f64,
    pub ld_patched: f64,
    /// `None` when the clean logit difference is not positive.
    pub fldd: Option<f64>,
    pub predicted: u32,
    /// The recipient's token at the donor's IO position.
    pub donor_answer: u32,
    /// Prediction moved to the donor answer (which differs from the
    /// recipient's own).
    pub interchanged: bool,
}

fn logit_diff(out: &FinalOutput, ex: &IoiExample) -> f64 {
    f64::from(logit_of(out, ex.answer) - logit_of(out, ex.s_token))
}

struct Site {
    point: HookPoint,
    direction: Array1<f32>,
}

fn sites(analyzer: &Analyzer<'_>, spec: &PatchSpec) -> Result<Vec<Site>> {
    if spec.components.is_empty() {
        return Err(ChannelError::Intervention("patch lists no components".into()));
    }
    spec.components
        .iter()
        .map(|&c| {
            let point = match spec.site {
                PatchSite::HeadOutput => HookPoint::head_output(c.layer, c.head),
                PatchSite::Residual { layer } => HookPoint::ResidPre(layer),
            };
            Ok(Site {
                point,
                direction: direction_f32(analyzer, c)?,
            })
        })
        .collect()
}

fn start_layer(sites: &[Site]) -> usize {
    sites.iter().filter_map(|s| s.point.layer()).min().unwrap_or(0)
}

/// Give the recipient the donor's projections onto each component's write
/// direction at the final position.
pub fn subspace_patch(
    analyzer: &Analyzer<'_>,
    spec: &PatchSpec,
    donor: &IoiExample,
    recipient: &IoiExample,
) -> Result<PatchResult> {
    if donor.ids.len() != recipient.ids.len() {
        return Err(ChannelError::Intervention(format!(
            "donor has {} tokens, recipient {}",
            donor.ids.len(),
            recipient.ids.len()
        )));
    }
    let model = analyzer.model();
    let sites = sites(analyzer, spec)?;
    let start = start_layer(&sites);

    let records: Vec<Hook> = sites.iter().map(|s| Hook::record_at(s.point, Positions::Final)).collect();
    let donor_cache = model.prefix_cache(&donor.ids, start, &[])?;
    let donor_out = model.continue_final(&donor_cache, &records)?;
    let donor_values: Vec<f32> = sites
        .iter()
        .map(|s| {
            let rec = donor_out
                .recording(s.point)
                .ok_or_else(|| ChannelError::NotRecorded(s.point.to_string()))?;
            Ok(rec.values.row(0).dot(&s.direction))
        })
        .collect::<Result<_>>()?;

    let cache = model.prefix_cache(&recipient.ids, start, &[])?;
    let clean = model.continue_final(&cache, &[])?;
    let hooks: Vec<Hook> = sites
        .iter()
        .zip(&donor_values)
        .map(|(s, &v)| {
            Hook::new(
                s.point,
                Positions::Final,
                HookAction::SetProjection {
                    direction: s.direction.clone(),
                    values: vec![v],
                },
            )
        })
        .collect();
    let patched = model.continue_final(&cache, &hooks)?;

    let ld_clean = logit_diff(&clean, recipient);
    let ld_patched = logit_diff(&patched, recipient);
    let fldd = (ld_clean > 0.0).then(|| 100.0 * (ld_clean - ld_patched) / ld_clean);
    let predicted = greedy_next(&patched);
    let donor_answer = recipient.ids[donor.io_pos];
    Ok(PatchResult {
        ld_clean,
        ld_patched,
        fldd,
        predicted,
        donor_answer,
        interchanged: donor_answer != recipient.answer && predicted == donor_answer,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSummary {
    pub n_pairs: usize,
    /// Pairs dropped from the FLDD mean because the clean LD was ≤ 0.
    pub excluded: usize,
    pub mean_fldd: f64,
    pub std_fldd: f64,
    pub interchange_accuracy: f64,
}

/// Patch every `(donor, recipient)` pair and aggregate.
pub fn patch_dataset(
    analyzer: &Analyzer<'_>,
    spec: &PatchSpec,
    pairs: &[(&IoiExample, &IoiExample)],
) -> Result<(PatchSummary, Vec<PatchResult>)> {
    if pairs.is_empty() {
        return Err(ChannelError::Intervention("no pairs to patch".into()));
    }
    let results = pairs
        .par_iter()
        .map(|(d, r)| subspace_patch(analyzer, spec, d, r))
        .collect::<Result<Vec<_>>>()?;
    let fldds: Vec<f64> = results.iter().filter_map(|r| r.fldd).collect();
    let (mean_fldd, std_fldd) = mean_std(&fldds);
    let swaps = results.iter().filter(|r| r.interchanged).count();
    Ok((
        PatchSummary {
            n_pairs: results.len(),
            excluded: results.len() - fldds.len(),
            mean_fldd,
            std_fldd,
            interchange_accuracy: swaps as f64 / results.len() as f64,
        },
        results,
    ))
}
