//! Solver inputs from gate gradients: empirical Fisher diagonal per unit and
//! component-averaged Taylor cost per layer.

use alloc::vec::Vec;
use core::fmt;

use crate::files::ScoreFile;
use crate::toynet::{gate_gradients, Dataset, GradMethod, LayerAdapters, SampleGateGrads, ToyNetError, ToyNetwork};
use crate::types::{validate_scores, Component, LayerComponentScores, ScoreError};

/// Floor applied to an all-zero Taylor average so budget arithmetic stays
/// well defined.
pub const TAYLOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Base,
    Adapted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Pretrain,
    Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub model: ModelKind,
    pub data: DataKind,
}

impl Provenance {
    pub const FISHER: Provenance = Provenance { model: ModelKind::Adapted, data: DataKind::Task };
    pub const TAYLOR: Provenance = Provenance { model: ModelKind::Base, data: DataKind::Pretrain };
}

/// Per-layer, per-sample gate gradients with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGradients {
    pub provenance: Provenance,
    /// `heads[layer][sample][unit]`
    pub heads: Vec<Vec<Vec<f64>>>,
    /// `neurons[layer][sample][unit]`
    pub neurons: Vec<Vec<Vec<f64>>>,
}

impl RawGradients {
    /// Regroups sample-major gradients (as returned by
    /// [`gate_gradients`]) into layer-major form.
    pub fn from_samples(provenance: Provenance, samples: &[SampleGateGrads]) -> Result<Self, ScoresError> {
        let first = samples.first().ok_or(ScoresError::NoSamples)?;
        let layers = first.len();
        let mut heads: Vec<Vec<Vec<f64>>> = (0..layers).map(|_| Vec::with_capacity(samples.len())).collect();
        let mut neurons: Vec<Vec<Vec<f64>>> = (0..layers).map(|_| Vec::with_capacity(samples.len())).collect();
        for s in samples {
            if s.len() != layers {
                return Err(ScoresError::Ragged);
            }
            for (k, g) in s.iter().enumerate() {
                heads[k].push(g.heads.clone());
                neurons[k].push(g.neurons.clone());
            }
        }
        let raw = Self { provenance, heads, neurons };
        raw.check()?;
        Ok(raw)
    }

    pub fn num_layers(&self) -> usize {
        self.heads.len()
    }

    fn component(&self, c: Component) -> &[Vec<Vec<f64>>] {
        match c {
            Component::Head => &self.heads,
            Component::Neuron => &self.neurons,
        }
    }

    fn check(&self) -> Result<(), ScoresError> {
        if self.heads.len() != self.neurons.len() {
            return Err(ScoresError::Ragged);
        }
        for c in [Component::Head, Component::Neuron] {
            for layer in self.component(c) {
                let width = layer.first().ok_or(ScoresError::NoSamples)?.len();
                for s in layer {
                    if s.len() != width {
                        return Err(ScoresError::Ragged);
                    }
                    if s.iter().any(|v| !v.is_finite()) {
                        return Err(ScoresError::NonFinite);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoresError {
    WrongProvenance { expected: Provenance, found: Provenance },
    NoSamples,
    Ragged,
    NonFinite,
    Model(ToyNetError),
    Invalid(ScoreError),
}

impl fmt::Display for ScoresError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoresError::WrongProvenance { expected, found } => {
                write!(f, "gradients have provenance {found:?}, expected {expected:?}")
            }
            ScoresError::NoSamples => f.write_str("no gradient samples"),
            ScoresError::Ragged => f.write_str("gradient arrays have inconsistent shapes"),
            ScoresError::NonFinite => f.write_str("non-finite gradient value"),
            ScoresError::Model(e) => write!(f, "{e}"),
            ScoresError::Invalid(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for ScoresError {}

impl From<ToyNetError> for ScoresError {
    fn from(e: ToyNetError) -> Self {
        ScoresError::Model(e)
    }
}

impl From<ScoreError> for ScoresError {
    fn from(e: ScoreError) -> Self {
        ScoresError::Invalid(e)
    }
}

fn expect(raw: &RawGradients, expected: Provenance) -> Result<(), ScoresError> {
    if raw.provenance == expected {
        Ok(())
    } else {
        Err(ScoresError::WrongProvenance { expected, found: raw.provenance })
    }
}

/// Per-layer Fisher diagonal `(heads, neurons)`.
pub type FisherScores = Vec<(Vec<f64>, Vec<f64>)>;

fn mean_square(per_sample: &[Vec<f64>]) -> Vec<f64> {
    let n = per_sample.len() as f64;
    let width = per_sample.first().map_or(0, Vec::len);
    (0..width).map(|i| per_sample.iter().map(|s| s[i] * s[i]).sum::<f64>() / n).collect()
}

/// Element-wise mean over samples of squared gate gradients. Requires
/// gradients of the adapted model on task data.
pub fn fisher_scores(raw: &RawGradients) -> Result<FisherScores, ScoresError> {
    expect(raw, Provenance::FISHER)?;
    raw.check()?;
    Ok(raw.heads.iter().zip(&raw.neurons).map(|(h, n)| (mean_square(h), mean_square(n))).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTaylor {
    pub taylor_head: f64,
    pub taylor_neuron: f64,
    pub raw_heads: Vec<f64>,
    pub raw_neurons: Vec<f64>,
}

fn first_order_saliency(per_sample: &[Vec<f64>]) -> Vec<f64> {
    let n = per_sample.len() as f64;
    let width = per_sample.first().map_or(0, Vec::len);
    // Gate value is 1 at the expansion point.
    (0..width).map(|i| (per_sample.iter().map(|s| s[i]).sum::<f64>() / n * 1.0).abs()).collect()
}

fn floored_mean(values: &[f64]) -> f64 {
    let m = values.iter().sum::<f64>() / values.len() as f64;
    if m > TAYLOR_FLOOR { m } else { TAYLOR_FLOOR }
}

/// Per-unit `|mean gradient × gate|` and their per-component means.
/// Requires gradients of the base model on pretraining data.
pub fn taylor_scores(raw: &RawGradients) -> Result<Vec<LayerTaylor>, ScoresError> {
    expect(raw, Provenance::TAYLOR)?;
    raw.check()?;
    Ok(raw
        .heads
        .iter()
        .zip(&raw.neurons)
        .map(|(h, n)| {
            let raw_heads = first_order_saliency(h);
            let raw_neurons = first_order_saliency(n);
            LayerTaylor {
                taylor_head: floored_mean(&raw_heads),
                taylor_neuron: floored_mean(&raw_neurons),
                raw_heads,
                raw_neurons,
            }
        })
        .collect())
}

/// Combines Fisher and Taylor results into validated per-layer scores.
pub fn assemble_scores(fisher: FisherScores, taylor: &[LayerTaylor]) -> Result<ScoreFile, ScoresError> {
    if fisher.len() != taylor.len() {
        return Err(ScoresError::Ragged);
    }
    let layers = fisher
        .into_iter()
        .zip(taylor)
        .enumerate()
        .map(|(k, ((fh, fn_), t))| {
            let s = LayerComponentScores {
                layer_index: k,
                fisher_heads: fh,
                fisher_neurons: fn_,
                taylor_head: t.taylor_head,
                taylor_neuron: t.taylor_neuron,
            };
            validate_scores(&s)?;
            Ok(s)
        })
        .collect::<Result<Vec<_>, ScoresError>>()?;
    Ok(ScoreFile::new(layers))
}

/// Runs both gradient passes with the right provenance and assembles the
/// score file: Taylor on the base network with pretraining data, Fisher on
/// the adapted network with task data.
pub fn build_score_file(
    net: &ToyNetwork,
    adapters: &[LayerAdapters],
    pretrain: &Dataset,
    task: &Dataset,
) -> Result<ScoreFile, ScoresError> {
    let base = gate_gradients(net, &[], pretrain, GradMethod::Analytic)?;
    let adapted = gate_gradients(net, adapters, task, GradMethod::Analytic)?;
    let taylor = taylor_scores(&RawGradients::from_samples(Provenance::TAYLOR, &base)?)?;
    let fisher = fisher_scores(&RawGradients::from_samples(Provenance::FISHER, &adapted)?)?;
    assemble_scores(fisher, &taylor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn raw(provenance: Provenance, heads: Vec<Vec<f64>>) -> RawGradients {
        let neurons = heads.iter().map(|_| vec![0.0]).collect();
        RawGradients { provenance, heads: vec![heads], neurons: vec![neurons] }
    }

    #[test]
    fn fisher_arithmetic() {
        let r = raw(Provenance::FISHER, vec![vec![8.0], vec![-8.0]]);
        assert_eq!(fisher_scores(&r).unwrap()[0].0, vec![64.0]);
        let r = raw(Provenance::FISHER, vec![vec![1.0], vec![3.0]]);
        assert_eq!(fisher_scores(&r).unwrap()[0].0, vec![5.0]);
        let r = raw(Provenance::FISHER, vec![vec![0.0, 0.0]]);
        assert_eq!(fisher_scores(&r).unwrap()[0].0, vec![0.0, 0.0]);
    }

    #[test]
    fn provenance_enforced() {
        let r = raw(Provenance::TAYLOR, vec![vec![1.0]]);
        assert!(matches!(fisher_scores(&r), Err(ScoresError::WrongProvenance { .. })));
        let r = raw(Provenance::FISHER, vec![vec![1.0]]);
        assert!(matches!(taylor_scores(&r), Err(ScoresError::WrongProvenance { .. })));
    }

    #[test]
    fn taylor_arithmetic() {
        let r = raw(Provenance::TAYLOR, vec![vec![0.5], vec![1.0]]);
        let t = taylor_scores(&r).unwrap();
        assert_eq!(t[0].raw_heads, vec![0.75]);
        assert_eq!(t[0].taylor_head, 0.75);
        // all-zero neurons floor to epsilon
        assert_eq!(t[0].raw_neurons, vec![0.0]);
        assert_eq!(t[0].taylor_neuron, TAYLOR_FLOOR);

        let r = raw(Provenance::TAYLOR, vec![vec![4.0, -2.0]]);
        let t = taylor_scores(&r).unwrap();
        assert_eq!(t[0].raw_heads, vec![4.0, 2.0]);
        assert_eq!(t[0].taylor_head, 3.0);
    }

    #[test]
    fn non_finite_rejected() {
        let r = raw(Provenance::FISHER, vec![vec![f64::NAN]]);
        assert_eq!(fisher_scores(&r), Err(ScoresError::NonFinite));
    }
}
