//! Domain types shared by the selection pipeline.

use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;
use serde::{Deserialize, Serialize};

/// The two gateable components of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// An attention head.
    Head,
    /// An FFN hidden neuron.
    Neuron,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::Head => f.write_str("head"),
            Component::Neuron => f.write_str("neuron"),
        }
    }
}

/// Per-layer solver input: one Fisher score per unit and one Taylor cost per
/// component (every head costs `taylor_head`, every neuron `taylor_neuron`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerComponentScores {
    #[serde(rename = "layer")]
    pub layer_index: usize,
    pub fisher_heads: Vec<f64>,
    pub fisher_neurons: Vec<f64>,
    pub taylor_head: f64,
    pub taylor_neuron: f64,
}

impl LayerComponentScores {
    /// Validating constructor.
    pub fn new(
        layer_index: usize,
        fisher_heads: Vec<f64>,
        fisher_neurons: Vec<f64>,
        taylor_head: f64,
        taylor_neuron: f64,
    ) -> Result<Self, ScoreError> {
        let s = Self { layer_index, fisher_heads, fisher_neurons, taylor_head, taylor_neuron };
        validate_scores(&s)?;
        Ok(s)
    }

    pub fn num_heads(&self) -> usize {
        self.fisher_heads.len()
    }

    pub fn num_neurons(&self) -> usize {
        self.fisher_neurons.len()
    }

    pub fn fisher(&self, component: Component) -> &[f64] {
        match component {
            Component::Head => &self.fisher_heads,
            Component::Neuron => &self.fisher_neurons,
        }
    }

    pub fn taylor(&self, component: Component) -> f64 {
        match component {
            Component::Head => self.taylor_head,
            Component::Neuron => self.taylor_neuron,
        }
    }

    /// Taylor mass of masking every unit of the layer.
    pub fn total_taylor_mass(&self) -> f64 {
        taylor_cost(self.num_heads(), self.num_neurons(), self.taylor_head, self.taylor_neuron)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreError {
    NegativeFisher { layer: usize, component: Component, index: usize },
    NonFiniteFisher { layer: usize, component: Component, index: usize },
    NonPositiveTaylor { layer: usize, component: Component },
    EmptyComponent { layer: usize, component: Component },
}

impl fmt::Display for ScoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreError::NegativeFisher { layer, component, index } => {
                write!(f, "negative Fisher score at layer {layer}, {component} {index}")
            }
            ScoreError::NonFiniteFisher { layer, component, index } => {
                write!(f, "non-finite Fisher score at layer {layer}, {component} {index}")
            }
            ScoreError::NonPositiveTaylor { layer, component } => {
                write!(f, "Taylor cost of {component}s at layer {layer} must be finite and > 0")
            }
            ScoreError::EmptyComponent { layer, component } => {
                write!(f, "layer {layer} has no {component}s")
            }
        }
    }
}

impl core::error::Error for ScoreError {}

/// Checks every invariant of [`LayerComponentScores`].
pub fn validate_scores(scores: &LayerComponentScores) -> Result<(), ScoreError> {
    let layer = scores.layer_index;
    for component in [Component::Head, Component::Neuron] {
        let fisher = scores.fisher(component);
        if fisher.is_empty() {
            return Err(ScoreError::EmptyComponent { layer, component });
        }
        for (index, &v) in fisher.iter().enumerate() {
            if v.is_nan() || v.is_infinite() {
                return Err(ScoreError::NonFiniteFisher { layer, component, index });
            }
            if v < 0.0 {
                return Err(ScoreError::NegativeFisher { layer, component, index });
            }
        }
        let t = scores.taylor(component);
        if !(t > 0.0) || !t.is_finite() {
            return Err(ScoreError::NonPositiveTaylor { layer, component });
        }
    }
    Ok(())
}

/// Per-layer masking budget, expressed in Taylor-cost units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum Budget {
    Absolute(f64),
    /// Fraction of the layer's total Taylor mass.
    Fraction(f64),
}

impl Default for Budget {
    fn default() -> Self {
        Budget::Fraction(0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvalidBudget(pub Budget);

impl fmt::Display for InvalidBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Budget::Absolute(v) => write!(f, "absolute budget must be finite and >= 0, got {v}"),
            Budget::Fraction(v) => write!(f, "budget fraction must lie in [0, 1], got {v}"),
        }
    }
}

impl core::error::Error for InvalidBudget {}

impl Budget {
    pub fn validate(self) -> Result<Self, InvalidBudget> {
        let ok = match self {
            Budget::Absolute(v) => v.is_finite() && v >= 0.0,
            Budget::Fraction(v) => (0.0..=1.0).contains(&v),
        };
        if ok {
            Ok(self)
        } else {
            Err(InvalidBudget(self))
        }
    }
}

/// Turns a budget into the absolute per-layer cap `C`.
pub fn resolve_budget(budget: Budget, scores: &LayerComponentScores) -> f64 {
    match budget {
        Budget::Absolute(c) => c,
        Budget::Fraction(rho) => rho * scores.total_taylor_mass(),
    }
}

/// Taylor cost of masking `heads` heads and `neurons` neurons.
#[inline]
pub fn taylor_cost(heads: usize, neurons: usize, taylor_head: f64, taylor_neuron: f64) -> f64 {
    heads as f64 * taylor_head + neurons as f64 * taylor_neuron
}

/// Sum of Fisher values in ascending value order.
///
/// The order makes the result depend only on the multiset of values, so two
/// masks that differ by swapping equal-valued units report identical losses.
pub fn fisher_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    // Fold from +0.0: `Sum` for floats starts at −0.0.
    values.iter().fold(0.0, |acc, v| acc + v)
}

/// Binary mask stored as the sets of MASKED units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSolution {
    pub masked_heads: Vec<usize>,
    pub masked_neurons: Vec<usize>,
    /// Total Fisher score of the masked units.
    pub fisher_loss: f64,
    /// Total Taylor cost of the masked units.
    pub taylor_used: f64,
}

impl MaskSolution {
    pub fn empty() -> Self {
        Self { masked_heads: Vec::new(), masked_neurons: Vec::new(), fisher_loss: 0.0, taylor_used: 0.0 }
    }

    /// Builds a solution from index sets, sorting them and computing the
    /// loss and cost from `scores`. Panics on out-of-range indices.
    pub fn from_sets(
        scores: &LayerComponentScores,
        mut masked_heads: Vec<usize>,
        mut masked_neurons: Vec<usize>,
    ) -> Self {
        masked_heads.sort_unstable();
        masked_heads.dedup();
        masked_neurons.sort_unstable();
        masked_neurons.dedup();
        let values = masked_heads
            .iter()
            .map(|&i| scores.fisher_heads[i])
            .chain(masked_neurons.iter().map(|&j| scores.fisher_neurons[j]))
            .collect();
        let fisher_loss = fisher_sum(values);
        let taylor_used = taylor_cost(
            masked_heads.len(),
            masked_neurons.len(),
            scores.taylor_head,
            scores.taylor_neuron,
        );
        Self { masked_heads, masked_neurons, fisher_loss, taylor_used }
    }

    pub fn masked(&self, component: Component) -> &[usize] {
        match component {
            Component::Head => &self.masked_heads,
            Component::Neuron => &self.masked_neurons,
        }
    }

    /// Checks index ranges, ordering and the recorded loss/cost against `scores`.
    pub fn is_consistent_with(&self, scores: &LayerComponentScores) -> bool {
        let sorted_in_range = |set: &[usize], n: usize| {
            set.windows(2).all(|w| w[0] < w[1]) && set.iter().all(|&i| i < n)
        };
        if !sorted_in_range(&self.masked_heads, scores.num_heads())
            || !sorted_in_range(&self.masked_neurons, scores.num_neurons())
        {
            return false;
        }
        let fresh = MaskSolution::from_sets(scores, self.masked_heads.clone(), self.masked_neurons.clone());
        let tol = 1e-12 * fresh.fisher_loss.abs().max(1.0);
        (fresh.fisher_loss - self.fisher_loss).abs() <= tol && fresh.taylor_used == self.taylor_used
    }

    pub fn to_continuous(&self, num_heads: usize, num_neurons: usize) -> ContinuousMask {
        let mut m = ContinuousMask::ones(num_heads, num_neurons);
        for &i in &self.masked_heads {
            m.head_values[i] = 0.0;
        }
        for &j in &self.masked_neurons {
            m.neuron_values[j] = 0.0;
        }
        m
    }
}

/// Real-valued gate values for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousMask {
    pub head_values: Vec<f64>,
    pub neuron_values: Vec<f64>,
}

impl ContinuousMask {
    pub fn ones(num_heads: usize, num_neurons: usize) -> Self {
        Self { head_values: alloc::vec![1.0; num_heads], neuron_values: alloc::vec![1.0; num_neurons] }
    }

    pub fn values(&self, component: Component) -> &[f64] {
        match component {
            Component::Head => &self.head_values,
            Component::Neuron => &self.neuron_values,
        }
    }

    pub fn values_mut(&mut self, component: Component) -> &mut Vec<f64> {
        match component {
            Component::Head => &mut self.head_values,
            Component::Neuron => &mut self.neuron_values,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.head_values.iter().chain(&self.neuron_values).all(|v| v.is_finite())
    }
}

/// Layer importance scores with their ranking and the selected prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    pub scores: Vec<f64>,
    /// Layer indices by descending score, ties by ascending index.
    pub ranking: Vec<usize>,
    /// The first `k` entries of `ranking`.
    pub selected: Vec<usize>,
}

/// Descending-score order with ascending-index tie break.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}
