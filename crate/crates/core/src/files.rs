//! Versioned document types exchanged between pipeline stages.
//!
//! Only the shapes live here; reading and writing them is done by the
//! `fisherlens` crate.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::types::{ContinuousMask, LayerComponentScores, LayerImportance, MaskSolution};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub format_version: u32,
    pub layers: Vec<LayerComponentScores>,
}

impl ScoreFile {
    pub fn new(layers: Vec<LayerComponentScores>) -> Self {
        Self { format_version: FORMAT_VERSION, layers }
    }
}

/// One layer's binary mask and, after tuning, its continuous relaxation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMaskRecord {
    pub layer: usize,
    pub num_heads: usize,
    pub num_neurons: usize,
    pub masked_heads: Vec<usize>,
    pub masked_neurons: Vec<usize>,
    pub fisher_loss: f64,
    pub taylor_used: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuous_heads: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuous_neurons: Option<Vec<f64>>,
}

impl LayerMaskRecord {
    pub fn from_solution(layer: usize, num_heads: usize, num_neurons: usize, sol: &MaskSolution) -> Self {
        Self {
            layer,
            num_heads,
            num_neurons,
            masked_heads: sol.masked_heads.clone(),
            masked_neurons: sol.masked_neurons.clone(),
            fisher_loss: sol.fisher_loss,
            taylor_used: sol.taylor_used,
            continuous_heads: None,
            continuous_neurons: None,
        }
    }

    pub fn solution(&self) -> MaskSolution {
        MaskSolution {
            masked_heads: self.masked_heads.clone(),
            masked_neurons: self.masked_neurons.clone(),
            fisher_loss: self.fisher_loss,
            taylor_used: self.taylor_used,
        }
    }

    /// Continuous mask if present, else the binary mask embedded as 0/1.
    pub fn effective_mask(&self) -> ContinuousMask {
        match (&self.continuous_heads, &self.continuous_neurons) {
            (Some(h), Some(n)) => ContinuousMask { head_values: h.clone(), neuron_values: n.clone() },
            _ => self.solution().to_continuous(self.num_heads, self.num_neurons),
        }
    }

    pub fn set_continuous(&mut self, mask: &ContinuousMask) {
        self.continuous_heads = Some(mask.head_values.clone());
        self.continuous_neurons = Some(mask.neuron_values.clone());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub format_version: u32,
    pub layers: Vec<LayerMaskRecord>,
}

impl MaskFile {
    pub fn new(layers: Vec<LayerMaskRecord>) -> Self {
        Self { format_version: FORMAT_VERSION, layers }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingFile {
    pub format_version: u32,
    pub scores: Vec<f64>,
    pub ranking: Vec<usize>,
    pub selected: Vec<usize>,
}

impl From<&LayerImportance> for RankingFile {
    fn from(imp: &LayerImportance) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            scores: imp.scores.clone(),
            ranking: imp.ranking.clone(),
            selected: imp.selected.clone(),
        }
    }
}

impl From<RankingFile> for LayerImportance {
    fn from(f: RankingFile) -> Self {
        Self { scores: f.scores, ranking: f.ranking, selected: f.selected }
    }
}
