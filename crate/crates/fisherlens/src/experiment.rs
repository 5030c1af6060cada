//! The full pipeline on one seeded toy problem, with an optional comparison
//! of selective re-adaptation against baseline layer choices.

use anyhow::Result;
use fisherlens_core::files::{MaskFile, ScoreFile};
use fisherlens_core::masktune::ComponentReport;
use fisherlens_core::ranking::{baseline_rankings, BaselinePolicy, DEFAULT_BASELINE_SEED};
use fisherlens_core::seed::mix64;
use fisherlens_core::LayerImportance;
use serde::Serialize;

use crate::parallel::try_map_ordered;
use crate::stages::{
    compute_scores, full_adaptation_loss, prepare, rank_layers, select_masks, selective_adaptation_loss, tune_masks,
    Prepared, RunSpec,
};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub prepared: Prepared,
    pub scores: ScoreFile,
    pub binary: MaskFile,
    pub tuned: MaskFile,
    pub reports: Vec<ComponentReport>,
    pub importance: LayerImportance,
}

/// scores → select → tune → rank.
pub fn run_pipeline(spec: &RunSpec, jobs: usize) -> Result<PipelineOutput> {
    let prepared = prepare(spec)?;
    let scores = compute_scores(&prepared.net, &prepared.adapters, &prepared.data.pretrain, &prepared.data.task, jobs)?;
    let binary = select_masks(&scores, spec.budget, spec.refine, jobs)?;
    let (tuned, reports) =
        tune_masks(&prepared.net, &prepared.adapters, &binary, &prepared.data.calib, spec.linearization, jobs)?;
    let importance = rank_layers(&tuned, spec.top_k)?;
    Ok(PipelineOutput { prepared, scores, binary, tuned, reports, importance })
}

/// Held-out losses after re-adapting different layer subsets from scratch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub seed: u64,
    pub selected: Vec<usize>,
    pub full_loss: f64,
    pub selected_loss: f64,
    pub weight_norm_loss: f64,
    pub random_losses: Vec<f64>,
}

impl Comparison {
    pub fn random_mean(&self) -> f64 {
        self.random_losses.iter().sum::<f64>() / self.random_losses.len().max(1) as f64
    }
}

/// Re-adapts the selected layers, `spec.random_trials` random selections of
/// the same size and the weight-norm selection.
pub fn compare_selections(out: &PipelineOutput, spec: &RunSpec, jobs: usize) -> Result<Comparison> {
    let prepared = &out.prepared;
    let k = out.importance.selected.len();
    let mut subsets = vec![out.importance.selected.clone()];
    subsets.push(baseline_rankings(&prepared.net, BaselinePolicy::WeightNorm, k)?.selected);
    for t in 0..spec.random_trials as u64 {
        let seed = if t == 0 { DEFAULT_BASELINE_SEED } else { mix64(DEFAULT_BASELINE_SEED ^ mix64(spec.seed) ^ t) };
        subsets.push(baseline_rankings(&prepared.net, BaselinePolicy::Random { seed }, k)?.selected);
    }
    let losses = try_map_ordered(jobs, &subsets, |_, layers| selective_adaptation_loss(prepared, spec, layers))?;
    Ok(Comparison {
        seed: spec.seed,
        selected: out.importance.selected.clone(),
        full_loss: full_adaptation_loss(prepared)?,
        selected_loss: losses[0],
        weight_norm_loss: losses[1],
        random_losses: losses[2..].to_vec(),
    })
}
