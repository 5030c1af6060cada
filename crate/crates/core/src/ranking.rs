//! Layer importance from tuned masks, top-K selection and the two baseline
//! orderings.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;

use crate::files::MaskFile;
use crate::seed::{rng, stage_seed};
use crate::toynet::ToyNetwork;
use crate::types::{rank_descending, LayerImportance};

/// Seed of the random-selection baseline unless told otherwise.
pub const DEFAULT_BASELINE_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankError {
    InvalidK { k: usize, layers: usize },
}

impl fmt::Display for RankError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankError::InvalidK { k, layers } => write!(f, "k must be in 1..={layers}, got {k}"),
        }
    }
}

impl core::error::Error for RankError {}

/// Mean of `|1 − m|` over a layer's pooled heads and neurons.
pub fn mask_deviation(heads: &[f64], neurons: &[f64]) -> f64 {
    let units = heads.len() + neurons.len();
    if units == 0 {
        return 0.0;
    }
    heads.iter().chain(neurons).map(|m| (1.0 - m).abs()).sum::<f64>() / units as f64
}

/// `s_k` per layer, in file order. Layers without continuous values use their
/// binary mask.
pub fn layer_importance(masks: &MaskFile) -> Vec<f64> {
    masks
        .layers
        .iter()
        .map(|rec| {
            let m = rec.effective_mask();
            mask_deviation(&m.head_values, &m.neuron_values)
        })
        .collect()
}

pub fn rank_and_select(scores: &[f64], k: usize) -> Result<LayerImportance, RankError> {
    if k == 0 || k > scores.len() {
        return Err(RankError::InvalidK { k, layers: scores.len() });
    }
    let ranking = rank_descending(scores);
    let selected = ranking[..k].to_vec();
    Ok(LayerImportance { scores: scores.to_vec(), ranking, selected })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselinePolicy {
    Random { seed: u64 },
    WeightNorm,
}

/// Baseline ordering of `net`'s layers with the top `k` selected.
///
/// The random policy's scores are the reversed shuffle positions, so the
/// usual descending-score ranking reproduces the shuffle.
pub fn baseline_rankings(net: &ToyNetwork, policy: BaselinePolicy, k: usize) -> Result<LayerImportance, RankError> {
    let layers = net.num_layers();
    let scores: Vec<f64> = match policy {
        BaselinePolicy::Random { seed } => {
            let order = random_permutation(layers, seed);
            let mut s = alloc::vec![0.0; layers];
            for (pos, &layer) in order.iter().enumerate() {
                s[layer] = (layers - pos) as f64;
            }
            s
        }
        BaselinePolicy::WeightNorm => net.layers.iter().map(|l| libm::sqrt(l.squared_weight_norm())).collect(),
    };
    rank_and_select(&scores, k)
}

/// Seeded shuffle of `0..n`.
pub fn random_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(stage_seed(seed, "baseline-random")));
    order
}

/// Saliency table `layer,score,rank,selected`, one row per layer in layer
/// order.
pub fn saliency_csv(imp: &LayerImportance) -> String {
    let mut rank = alloc::vec![0; imp.scores.len()];
    for (pos, &layer) in imp.ranking.iter().enumerate() {
        rank[layer] = pos;
    }
    let mut out = String::from("layer,score,rank,selected\n");
    for (layer, score) in imp.scores.iter().enumerate() {
        let selected = imp.selected.contains(&layer);
        out.push_str(&format!("{layer},{score:?},{},{selected}\n", rank[layer]));
    }
    out
}
