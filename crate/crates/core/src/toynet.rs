//! A small residual network with gateable attention heads and FFN neurons,
//! plus routed low-rank adapters.
//!
//! Inputs are single `d`-dimensional vectors, so "attention" is reduced to
//! per-head linear maps through a `d / N_MHA`-dimensional subspace:
//! head `i` contributes `W_i x = up_i · (down_i · x)`. FFN neuron `j`
//! contributes `tanh(w1_j · x) · w2_j`. A layer computes
//!
//! ```text
//! x <- x + Σ_i g_i W_i x + φ_mha(x)
//! x <- x + Σ_j g_j tanh(w1_j·x) w2_j + φ_ffn(x)
//! ```
//!
//! where `g` are the gate (mask) values and `φ` the optional adapters. The
//! loss is the per-coordinate mean squared error, averaged over samples.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{axpy, dot, Matrix};
use crate::seed::{fnv1a, rng, stage_seed};
use crate::types::{Component, ContinuousMask};

#[derive(Debug, Clone, PartialEq)]
pub enum ToyNetError {
    InvalidConfig(&'static str),
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    EmptyDataset,
    NonFiniteGradient { layer: usize, component: Component, index: usize },
    DivergenceDetected { step: usize },
    InvalidTraining(&'static str),
}

impl fmt::Display for ToyNetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToyNetError::InvalidConfig(msg) => write!(f, "invalid network config: {msg}"),
            ToyNetError::DimensionMismatch { what, expected, found } => {
                write!(f, "dimension mismatch in {what}: expected {expected}, found {found}")
            }
            ToyNetError::EmptyDataset => f.write_str("dataset is empty"),
            ToyNetError::NonFiniteGradient { layer, component, index } => {
                write!(f, "non-finite gradient at layer {layer}, {component} {index}")
            }
            ToyNetError::DivergenceDetected { step } => {
                write!(f, "training diverged (non-finite loss) at step {step}")
            }
            ToyNetError::InvalidTraining(msg) => write!(f, "invalid training request: {msg}"),
        }
    }
}

impl core::error::Error for ToyNetError {}

fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<(), ToyNetError> {
    if expected == found {
        Ok(())
    } else {
        Err(ToyNetError::DimensionMismatch { what, expected, found })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyNetworkConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub seed: u64,
}

impl ToyNetworkConfig {
    pub fn validate(&self) -> Result<(), ToyNetError> {
        if self.num_layers < 1 {
            return Err(ToyNetError::InvalidConfig("need at least one layer"));
        }
        if self.model_dim < 2 {
            return Err(ToyNetError::InvalidConfig("model_dim must be >= 2"));
        }
        if self.num_heads < 1 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(ToyNetError::InvalidConfig("num_heads must divide model_dim"));
        }
        if self.ffn_dim < 1 {
            return Err(ToyNetError::InvalidConfig("ffn_dim must be >= 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// One attention head: `d -> head_dim -> d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    /// `head_dim × d`
    pub down: Matrix,
    /// `d × head_dim`
    pub up: Matrix,
}

impl Head {
    pub fn contribution(&self, x: &[f64]) -> Vec<f64> {
        self.up.matvec(&self.down.matvec(x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLayer {
    pub heads: Vec<Head>,
    /// `N_FFN × d`; row `j` is neuron `j`'s input weights.
    pub ffn_in: Matrix,
    /// `N_FFN × d`; row `j` is neuron `j`'s output direction.
    pub ffn_out: Matrix,
}

impl ToyLayer {
    pub fn model_dim(&self) -> usize {
        self.ffn_in.cols()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn num_neurons(&self) -> usize {
        self.ffn_in.rows()
    }

    pub fn num_units(&self, component: Component) -> usize {
        match component {
            Component::Head => self.num_heads(),
            Component::Neuron => self.num_neurons(),
        }
    }

    /// Ungated output of every unit of `component` at input `x`.
    pub fn unit_contributions(&self, component: Component, x: &[f64]) -> Vec<Vec<f64>> {
        match component {
            Component::Head => self.heads.iter().map(|h| h.contribution(x)).collect(),
            Component::Neuron => (0..self.num_neurons())
                .map(|j| {
                    let h = libm::tanh(dot(self.ffn_in.row(j), x));
                    self.ffn_out.row(j).iter().map(|w| h * w).collect()
                })
                .collect(),
        }
    }

    pub fn squared_weight_norm(&self) -> f64 {
        self.heads.iter().map(|h| h.down.squared_norm() + h.up.squared_norm()).sum::<f64>()
            + self.ffn_in.squared_norm()
            + self.ffn_out.squared_norm()
    }

    fn is_finite(&self) -> bool {
        self.heads.iter().all(|h| h.down.is_finite() && h.up.is_finite())
            && self.ffn_in.is_finite()
            && self.ffn_out.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNetwork {
    pub config: ToyNetworkConfig,
    pub layers: Vec<ToyLayer>,
}

impl ToyNetwork {
    /// Seeded network with every weight drawn uniformly from `[-0.5, 0.5)`.
    pub fn new(config: ToyNetworkConfig) -> Result<Self, ToyNetError> {
        config.validate()?;
        let mut r = rng(stage_seed(config.seed, "toynet-weights"));
        let d = config.model_dim;
        let hd = config.head_dim();
        let mut uniform = |rows, cols| Matrix::from_fn(rows, cols, |_, _| r.random_range(-0.5..0.5));
        let layers = (0..config.num_layers)
            .map(|_| {
                let heads = (0..config.num_heads)
                    .map(|_| {
                        let down = uniform(hd, d);
                        let up = uniform(d, hd);
                        Head { down, up }
                    })
                    .collect();
                let ffn_in = uniform(config.ffn_dim, d);
                let ffn_out = uniform(config.ffn_dim, d);
                ToyLayer { heads, ffn_in, ffn_out }
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Network from explicit weights. Every layer must share one shape.
    pub fn from_layers(layers: Vec<ToyLayer>, seed: u64) -> Result<Self, ToyNetError> {
        let first = layers.first().ok_or(ToyNetError::InvalidConfig("need at least one layer"))?;
        let d = first.model_dim();
        let num_heads = first.num_heads();
        if num_heads == 0 || d % num_heads != 0 {
            return Err(ToyNetError::InvalidConfig("num_heads must divide model_dim"));
        }
        let config = ToyNetworkConfig {
            num_layers: layers.len(),
            model_dim: d,
            num_heads,
            ffn_dim: first.num_neurons(),
            seed,
        };
        config.validate()?;
        let net = Self { config, layers };
        net.check_shapes()?;
        Ok(net)
    }

    /// Validates every weight shape against the config.
    pub fn check_shapes(&self) -> Result<(), ToyNetError> {
        let c = &self.config;
        c.validate()?;
        check_dim("layer count", c.num_layers, self.layers.len())?;
        let hd = c.head_dim();
        for layer in &self.layers {
            check_dim("head count", c.num_heads, layer.heads.len())?;
            for h in &layer.heads {
                check_dim("head down rows", hd, h.down.rows())?;
                check_dim("head down cols", c.model_dim, h.down.cols())?;
                check_dim("head up rows", c.model_dim, h.up.rows())?;
                check_dim("head up cols", hd, h.up.cols())?;
            }
            check_dim("ffn_in rows", c.ffn_dim, layer.ffn_in.rows())?;
            check_dim("ffn_in cols", c.model_dim, layer.ffn_in.cols())?;
            check_dim("ffn_out rows", c.ffn_dim, layer.ffn_out.rows())?;
            check_dim("ffn_out cols", c.model_dim, layer.ffn_out.cols())?;
        }
        Ok(())
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// FNV-1a over the bit patterns of every base weight.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for layer in &self.layers {
            for h in &layer.heads {
                for v in h.down.data().iter().chain(h.up.data()) {
                    bytes.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
            for v in layer.ffn_in.data().iter().chain(layer.ffn_out.data()) {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }
}

/// Routed low-rank adapter: one shared down-projection `A` (`r × d`), `M`
/// expert up-projections `B_i` (`d × r`) and a softmax router (`M × d`).
/// Its update at token `x` is `φ(x) = Σ_i ω_i(x) B_i A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HydraAdapter {
    pub down: Matrix,
    pub experts: Vec<Matrix>,
    pub router: Matrix,
}

impl HydraAdapter {
    /// Standard low-rank init: small random `A` and router, zero experts, so
    /// a fresh adapter leaves the network output unchanged.
    pub fn new_seeded(model_dim: usize, rank: usize, num_experts: usize, seed: u64) -> Result<Self, ToyNetError> {
        if rank == 0 {
            return Err(ToyNetError::InvalidConfig("adapter rank must be >= 1"));
        }
        if num_experts == 0 {
            return Err(ToyNetError::InvalidConfig("adapter needs at least one expert"));
        }
        let mut r = rng(seed);
        let scale = 1.0 / libm::sqrt(model_dim as f64);
        let down = Matrix::from_fn(rank, model_dim, |_, _| scale * r.random_range(-0.5..0.5));
        let router = Matrix::from_fn(num_experts, model_dim, |_, _| scale * r.random_range(-0.5..0.5));
        let experts = (0..num_experts).map(|_| Matrix::zeros(model_dim, rank)).collect();
        Ok(Self { down, experts, router })
    }

    pub fn rank(&self) -> usize {
        self.down.rows()
    }

    pub fn model_dim(&self) -> usize {
        self.down.cols()
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Softmax router output for `token`.
    pub fn router_weights(&self, token: &[f64]) -> Vec<f64> {
        softmax(&self.router.matvec(token))
    }

    /// The merged update matrix `φ = Σ_i ω_i B_i A` at `token`.
    pub fn merged_update(&self, token: &[f64]) -> Result<Matrix, ToyNetError> {
        check_dim("adapter token", self.model_dim(), token.len())?;
        let w = self.router_weights(token);
        let mut mixed = Matrix::zeros(self.model_dim(), self.rank());
        for (wi, b) in w.iter().zip(&self.experts) {
            for (m, v) in mixed.data_mut().iter_mut().zip(b.data()) {
                *m += wi * v;
            }
        }
        Ok(mixed.matmul(&self.down))
    }

    /// `φ(token) · token`.
    pub fn delta(&self, token: &[f64]) -> Result<Vec<f64>, ToyNetError> {
        check_dim("adapter token", self.model_dim(), token.len())?;
        Ok(self.forward_cached(token).1)
    }

    fn forward_cached(&self, x: &[f64]) -> (AdapterCache, Vec<f64>) {
        let z = self.down.matvec(x);
        let weights = self.router_weights(x);
        let expert_out: Vec<Vec<f64>> = self.experts.iter().map(|b| b.matvec(&z)).collect();
        let mut y = vec![0.0; self.model_dim()];
        for (w, e) in weights.iter().zip(&expert_out) {
            axpy(&mut y, *w, e);
        }
        (AdapterCache { z, weights, expert_out }, y)
    }

    fn check(&self, d: usize) -> Result<(), ToyNetError> {
        check_dim("adapter dim", d, self.model_dim())?;
        check_dim("router dim", d, self.router.cols())?;
        check_dim("router experts", self.num_experts(), self.router.rows())?;
        for b in &self.experts {
            check_dim("expert rows", d, b.rows())?;
            check_dim("expert rank", self.rank(), b.cols())?;
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.down.is_finite() && self.router.is_finite() && self.experts.iter().all(Matrix::is_finite)
    }
}

/// Free-function form of [`HydraAdapter::delta`].
pub fn adapter_delta(adapter: &HydraAdapter, token: &[f64]) -> Result<Vec<f64>, ToyNetError> {
    adapter.delta(token)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| libm::exp(l - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Adapters attached to one layer's two sub-layers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerAdapters {
    pub mha: Option<HydraAdapter>,
    pub ffn: Option<HydraAdapter>,
}

impl LayerAdapters {
    pub fn is_empty(&self) -> bool {
        self.mha.is_none() && self.ffn.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub num_experts: usize,
    pub on_mha: bool,
    pub on_ffn: bool,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 4, num_experts: 4, on_mha: true, on_ffn: true, seed: 0 }
    }
}

/// Fresh adapters on `layers` (other layers get none). Each adapter's seed is
/// derived from the config seed, its layer and its site, so the adapter on a
/// given layer is the same whichever subset is requested.
pub fn init_adapters(
    net: &ToyNetwork,
    cfg: &AdapterConfig,
    layers: &[usize],
) -> Result<Vec<LayerAdapters>, ToyNetError> {
    let d = net.model_dim();
    let mut out = vec![LayerAdapters::default(); net.num_layers()];
    for &k in layers {
        let slot = out.get_mut(k).ok_or(ToyNetError::InvalidConfig("adapter layer out of range"))?;
        let site_seed = |site: u64| stage_seed(cfg.seed, "adapter") ^ crate::seed::mix64((k as u64) << 1 | site);
        if cfg.on_mha {
            slot.mha = Some(HydraAdapter::new_seeded(d, cfg.rank, cfg.num_experts, site_seed(0))?);
        }
        if cfg.on_ffn {
            slot.ffn = Some(HydraAdapter::new_seeded(d, cfg.rank, cfg.num_experts, site_seed(1))?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataRole {
    Pretrain,
    Task,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub role: DataRole,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, role: DataRole) -> Result<Self, ToyNetError> {
        let ds = Self { inputs, targets, role };
        ds.check(None)?;
        Ok(ds)
    }

    /// Checks `|inputs| = |targets| >= 1` and, if given, every vector's length.
    pub fn check(&self, dim: Option<usize>) -> Result<(), ToyNetError> {
        if self.inputs.is_empty() {
            return Err(ToyNetError::EmptyDataset);
        }
        check_dim("dataset targets", self.inputs.len(), self.targets.len())?;
        let d = dim.unwrap_or(self.inputs[0].len());
        for v in self.inputs.iter().chain(&self.targets) {
            check_dim("dataset vector", d, v.len())?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// The dataset repeated `times` times.
    pub fn repeated(&self, times: usize) -> Self {
        let mut inputs = Vec::with_capacity(self.len() * times);
        let mut targets = Vec::with_capacity(self.len() * times);
        for _ in 0..times {
            inputs.extend(self.inputs.iter().cloned());
            targets.extend(self.targets.iter().cloned());
        }
        Self { inputs, targets, role: self.role }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// `x ~ N(0, I)`, `y = T x` with `T = I + 0.5 G / sqrt(d)`, `G ~ N(0, 1)`.
    LinearTeacher,
    /// `x, y ~ N(0, I)` independently.
    RandomGaussian,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::LinearTeacher => "linear-teacher",
            Generator::RandomGaussian => "random-gaussian",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "linear-teacher" => Some(Generator::LinearTeacher),
            "random-gaussian" => Some(Generator::RandomGaussian),
            _ => None,
        }
    }
}

/// Seeded synthetic dataset. `teacher_seed` fixes the input-output relation
/// and `sample_seed` the drawn points, so train/validation splits of one task
/// share a teacher.
pub fn generate_dataset(
    generator: Generator,
    teacher_seed: u64,
    sample_seed: u64,
    size: usize,
    dim: usize,
    role: DataRole,
) -> Result<Dataset, ToyNetError> {
    if size == 0 {
        return Err(ToyNetError::EmptyDataset);
    }
    let mut samples = rng(stage_seed(sample_seed, "dataset-samples"));
    let mut gaussian = |n: usize| -> Vec<f64> { (0..n).map(|_| samples.sample(StandardNormal)).collect() };
    let inputs: Vec<Vec<f64>> = (0..size).map(|_| gaussian(dim)).collect();
    let targets = match generator {
        Generator::RandomGaussian => (0..size).map(|_| gaussian(dim)).collect(),
        Generator::LinearTeacher => {
            let mut t_rng = rng(stage_seed(teacher_seed, "dataset-teacher"));
            let scale = 0.5 / libm::sqrt(dim as f64);
            let teacher = Matrix::from_fn(dim, dim, |r, c| {
                let g: f64 = t_rng.sample(StandardNormal);
                if r == c { 1.0 + scale * g } else { scale * g }
            });
            inputs.iter().map(|x| teacher.matvec(x)).collect()
        }
    };
    Dataset::new(inputs, targets, role)
}

/// Inputs seen by every gated sub-layer during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub attn_inputs: Vec<Vec<f64>>,
    pub ffn_inputs: Vec<Vec<f64>>,
}

impl Trace {
    pub fn input(&self, layer: usize, component: Component) -> &[f64] {
        match component {
            Component::Head => &self.attn_inputs[layer],
            Component::Neuron => &self.ffn_inputs[layer],
        }
    }
}

struct AdapterCache {
    z: Vec<f64>,
    weights: Vec<f64>,
    expert_out: Vec<Vec<f64>>,
}

struct LayerCache {
    attn_in: Vec<f64>,
    head_hidden: Vec<Vec<f64>>,
    head_out: Vec<Vec<f64>>,
    attn_adapter: Option<AdapterCache>,
    ffn_in: Vec<f64>,
    hidden: Vec<f64>,
    ffn_adapter: Option<AdapterCache>,
}

fn check_inputs(
    net: &ToyNetwork,
    adapters: &[LayerAdapters],
    masks: Option<&[ContinuousMask]>,
    x: &[f64],
) -> Result<(), ToyNetError> {
    let d = net.model_dim();
    check_dim("input", d, x.len())?;
    if !adapters.is_empty() {
        check_dim("adapter layers", net.num_layers(), adapters.len())?;
        for la in adapters {
            for a in la.mha.iter().chain(la.ffn.iter()) {
                a.check(d)?;
            }
        }
    }
    if let Some(masks) = masks {
        check_dim("mask layers", net.num_layers(), masks.len())?;
        for m in masks {
            check_dim("head mask", net.config.num_heads, m.head_values.len())?;
            check_dim("neuron mask", net.config.ffn_dim, m.neuron_values.len())?;
        }
    }
    Ok(())
}

fn forward_cached(
    net: &ToyNetwork,
    adapters: &[LayerAdapters],
    masks: Option<&[ContinuousMask]>,
    x: &[f64],
) -> (Vec<f64>, Vec<LayerCache>) {
    let mut x = x.to_vec();
    let mut caches = Vec::with_capacity(net.num_layers());
    for (k, layer) in net.layers.iter().enumerate() {
        let mask = masks.map(|m| &m[k]);
        let la = adapters.get(k);

        let attn_in = x;
        let mut out = attn_in.clone();
        let mut head_hidden = Vec::with_capacity(layer.num_heads());
        let mut head_out = Vec::with_capacity(layer.num_heads());
        for (i, head) in layer.heads.iter().enumerate() {
            let v = head.down.matvec(&attn_in);
            let c = head.up.matvec(&v);
            match mask {
                Some(m) => axpy(&mut out, m.head_values[i], &c),
                None => out.iter_mut().zip(&c).for_each(|(o, ci)| *o += ci),
            }
            head_hidden.push(v);
            head_out.push(c);
        }
        let attn_adapter = la.and_then(|a| a.mha.as_ref()).map(|a| {
            let (cache, y) = a.forward_cached(&attn_in);
            out.iter_mut().zip(&y).for_each(|(o, yi)| *o += yi);
            cache
        });

        let ffn_in = out;
        let mut out = ffn_in.clone();
        let mut hidden = Vec::with_capacity(layer.num_neurons());
        for j in 0..layer.num_neurons() {
            let h = libm::tanh(dot(layer.ffn_in.row(j), &ffn_in));
            let coeff = match mask {
                Some(m) => m.neuron_values[j] * h,
                None => h,
            };
            axpy(&mut out, coeff, layer.ffn_out.row(j));
            hidden.push(h);
        }
        let ffn_adapter = la.and_then(|a| a.ffn.as_ref()).map(|a| {
            let (cache, y) = a.forward_cached(&ffn_in);
            out.iter_mut().zip(&y).for_each(|(o, yi)| *o += yi);
            cache
        });

        caches.push(LayerCache { attn_in, head_hidden, head_out, attn_adapter, ffn_in, hidden, ffn_adapter });
        x = out;
    }
    (x, caches)
}

/// Forward pass. `adapters` may be empty (no adapters) or hold one entry per
/// layer; `masks = None` runs the ungated network.
pub fn forward(
    net: &ToyNetwork,
    adapters: &[LayerAdapters],
    masks: Option<&[ContinuousMask]>,
    x: &[f64],
) -> Result<(Vec<f64>, Trace), ToyNetError> {
    check_inputs(net, adapters, masks, x)?;
    let (out, caches) = forward_cached(net, adapters, masks, x);
    let mut trace = Trace { attn_inputs: Vec::new(), ffn_inputs: Vec::new() };
    for c in caches {
        trace.attn_inputs.push(c.attn_in);
        trace.ffn_inputs.push(c.ffn_in);
    }
    Ok((out, trace))
}

/// `‖output − target‖² / d` for one sample.
pub fn sample_loss(output: &[f64], target: &[f64]) -> f64 {
    let d = output.len() as f64;
    output.iter().zip(target).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / d
}

/// Mean over samples of [`sample_loss`].
pub fn loss(outputs: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let total: f64 = outputs.iter().zip(targets).map(|(o, t)| sample_loss(o, t)).sum();
    total / outputs.len() as f64
}

/// Mean loss of the (optionally masked, optionally adapted) network on `data`.
pub fn dataset_loss(
    net: &ToyNetwork,
    adapters: &[LayerAdapters],
    masks: Option<&[ContinuousMask]>,
    data: &Dataset,
) -> Result<f64, ToyNetError> {
    data.check(Some(net.model_dim()))?;
    let mut total = 0.0;
    for (x, y) in data.inputs.iter().zip(&data.targets) {
        let (out, _) = forward(net, adapters, masks, x)?;
        total += sample_loss(&out, y);
    }
    Ok(total / data.len() as f64)
}

/// Gradient of the loss with respect to one layer's gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateGrads {
    pub heads: Vec<f64>,
    pub neurons: Vec<f64>,
}

impl GateGrads {
    pub fn values(&self, component: Component) -> &[f64] {
        match component {
            Component::Head => &self.heads,
            Component::Neuron => &self.neurons,
        }
    }
}

/// Per-layer gate gradients for one sample.
pub type SampleGateGrads = Vec<GateGrads>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradMethod {
    Analytic,
    CentralDifference { step: f64 },
}

#[derive(Clone)]
struct AdapterGrads {
    down: Matrix,
    experts: Vec<Matrix>,
    router: Matrix,
}

impl AdapterGrads {
    fn zeros_like(a: &HydraAdapter) -> Self {
        Self {
            down: Matrix::zeros(a.down.rows(), a.down.cols()),
            experts: a.experts.iter().map(|b| Matrix::zeros(b.rows(), b.cols())).collect(),
            router: Matrix::zeros(a.router.rows(), a.router.cols()),
        }
    }

    fn apply(&self, a: &mut HydraAdapter, lr: f64) {
        a.down.descend(lr, &self.down);
        a.router.descend(lr, &self.router);
        for (b, g) in a.experts.iter_mut().zip(&self.experts) {
            b.descend(lr, g);
        }
    }
}

#[derive(Clone, Default)]
struct LayerAdapterGrads {
    mha: Option<AdapterGrads>,
    ffn: Option<AdapterGrads>,
}

#[derive(Clone)]
struct BaseLayerGrads {
    heads_down: Vec<Matrix>,
    heads_up: Vec<Matrix>,
    ffn_in: Matrix,
    ffn_out: Matrix,
}

impl BaseLayerGrads {
    fn zeros_like(l: &ToyLayer) -> Self {
        Self {
            heads_down: l.heads.iter().map(|h| Matrix::zeros(h.down.rows(), h.down.cols())).collect(),
            heads_up: l.heads.iter().map(|h| Matrix::zeros(h.up.rows(), h.up.cols())).collect(),
            ffn_in: Matrix::zeros(l.ffn_in.rows(), l.ffn_in.cols()),
            ffn_out: Matrix::zeros(l.ffn_out.rows(), l.ffn_out.cols()),
        }
    }
}

/// Where backpropagated gradients go. `weight` scales accumulated parameter
/// gradients; gate gradients are written unscaled.
struct Sink<'a> {
    gates: Option<&'a mut Vec<GateGrads>>,
    adapters: Option<&'a mut Vec<LayerAdapterGrads>>,
    base: Option<&'a mut Vec<BaseLayerGrads>>,
    weight: f64,
}

fn adapter_backward(
    a: &HydraAdapter,
    cache: &AdapterCache,
    x: &[f64],
    delta: &[f64],
    grads: Option<&mut AdapterGrads>,
    weight: f64,
) -> Vec<f64> {
    let mut dz = vec![0.0; a.rank()];
    let mut dw = Vec::with_capacity(a.num_experts());
    for ((b, &w), e) in a.experts.iter().zip(&cache.weights).zip(&cache.expert_out) {
        axpy(&mut dz, w, &b.matvec_t(delta));
        dw.push(dot(e, delta));
    }
    let s: f64 = cache.weights.iter().zip(&dw).map(|(w, g)| w * g).sum();
    let dlogit: Vec<f64> = cache.weights.iter().zip(&dw).map(|(w, g)| w * (g - s)).collect();
    if let Some(g) = grads {
        for ((gb, &w), _) in g.experts.iter_mut().zip(&cache.weights).zip(&a.experts) {
            gb.add_outer(weight * w, delta, &cache.z);
        }
        g.down.add_outer(weight, &dz, x);
        g.router.add_outer(weight, &dlogit, x);
    }
    let mut dx = a.down.matvec_t(&dz);
    axpy(&mut dx, 1.0, &a.router.matvec_t(&dlogit));
    dx
}

fn backward(
    net: &ToyNetwork,
    adapters: &[LayerAdapters],
    masks: Option<&[ContinuousMask]>,
    caches: &[LayerCache],
    mut delta: Vec<f64>,
    sink: &mut Sink<'_>,
) {
    let weight = sink.weight;
    for k in (0..net.num_layers()).rev() {
        let layer = &net.layers[k];
        let cache = &caches[k];
        let mask = masks.map(|m| &m[k]);
        let la = adapters.get(k);

        // FFN sub-layer.
        let mut dx = delta.clone();
        for j in 0..layer.num_neurons() {
            let g = mask.map_or(1.0, |m| m.neuron_values[j]);
            let h = cache.hidden[j];
            let s = dot(layer.ffn_out.row(j), &delta);
            if let Some(gates) = sink.gates.as_deref_mut() {
                gates[k].neurons[j] = h * s;
            }
            let dpre = g * s * (1.0 - h * h);
            if let Some(base) = sink.base.as_deref_mut() {
                axpy(base[k].ffn_out.row_mut(j), weight * g * h, &delta);
                axpy(base[k].ffn_in.row_mut(j), weight * dpre, &cache.ffn_in);
            }
            axpy(&mut dx, dpre, layer.ffn_in.row(j));
        }
        if let (Some(a), Some(ac)) = (la.and_then(|l| l.ffn.as_ref()), cache.ffn_adapter.as_ref()) {
            let g = sink.adapters.as_deref_mut().and_then(|v| v[k].ffn.as_mut());
            let back = adapter_backward(a, ac, &cache.ffn_in, &delta, g, weight);
            axpy(&mut dx, 1.0, &back);
        }
        delta = dx;

        // Attention sub-layer.
        let mut dx = delta.clone();
        for (i, head) in layer.heads.iter().enumerate() {
            let g = mask.map_or(1.0, |m| m.head_values[i]);
            if let Some(gates) = sink.gates.as_deref_mut() {
                gates[k].heads[i] = dot(&cache.head_out[i], &delta);
            }
            let u = head.up.matvec_t(&delta);
            if let Some(base) = sink.base.as_deref_mut() {
                base[k].heads_up[i].add_outer(weight * g, &delta, &cache.head_hidden[i]);
                base[k].heads_down[i].add_outer(weight * g, &u, &cache.attn_in);
            }
            axpy(&mut dx, g, &head.down.matvec_t(&u));
        }
        if let (Some(a), Some(ac)) = (la.and_then(|l| l.mha.as_ref()), cache.attn_adapter.as_ref()) {
            let g = sink.adapters.as_deref_mut().and_then(|v| v[k].mha.as_mut());
            let back = adapter_backward(a, ac, &cache.attn_in, &delta, g, weight);
            axpy(&mut dx, 1.0, &back);
        }
        delta = dx;
    }
}

fn loss_grad(out: &[f64], y: &[f64]) -> Vec<f64> {
    let d = out.len() as f64;
    out.iter().zip(y).map(|(o, t)| 2.0 * (o - t) / d).collect()
}

fn zero_gate_grads(net: &ToyNetwork) -> Vec<GateGrads> {
    net.layers
        .iter()
        .map(|l| GateGrads { heads: vec![0.0; l.num_heads()], neurons: vec![0.0; l.num_neurons()] })
        .collect()
}

fn check_finite_grads(grads: &[GateGrads]) -> Result<(), ToyNetError> {
    for (layer, g) in grads.iter().enumerate() {
        for component in [Component::Head, Component::Neuron] {
            if let Some(index) = g.values(component).iter().position(|v| !v.is_finite()) {
                return Err(ToyNetError::NonFiniteGradient { layer, component, index });
            }
        }
    }
    Ok(())
}

/// Per-layer gradient of one sample's loss with respect to every gate,
/// evaluated with all gates at 1.
pub fn sample_gate_gradients(
    net: &ToyNetwork,
    adapters: &[LayerAdapters],
    x: &[f64],
    y: &[f64],
    method: GradMethod,
) -> Result<SampleGateGrads, ToyNetError> {
    check_dim("target", net.model_dim(), y.len())?;
    let ones: Vec<ContinuousMask> = net
        .layers
        .iter()
        .map(|l| ContinuousMask::ones(l.num_heads(), l.num_neurons()))
        .collect();
    check_inputs(net, adapters, Some(&ones), x)?;
    let mut grads = zero_gate_grads(net);
    match method {
        GradMethod::Analytic => {
            let (out, caches) = forward_cached(net, adapters, Some(&ones), x);
            let mut sink = Sink { gates: Some(&mut grads), adapters: None, base: None, weight: 1.0 };
            backward(net, adapters, Some(&ones), &caches, loss_grad(&out, y), &mut sink);
        }
        GradMethod::CentralDifference { step } => {
            let mut masks = ones.clone();
            let eval = |masks: &[ContinuousMask]| {
                let (out, _) = forward_cached(net, adapters, Some(masks), x);
                sample_loss(&out, y)
            };
            for k in 0..net.num_layers() {
                for component in [Component::Head, Component::Neuron] {
                    for i in 0..net.layers[k].num_units(component) {
                        masks[k].values_mut(component)[i] = 1.0 + step;
                        let plus = eval(&masks);
                        masks[k].values_mut(component)[i] = 1.0 - step;
                        let minus = eval(&masks);
                        masks[k].values_mut(component)[i] = 1.0;
                        let g = (plus - minus) / (2.0 * step);
                        match component {
                            Component::Head => grads[k].heads[i] = g,
                            Component::Neuron => grads[k].neurons[i] = g,
                        }
                    }
                }
            }
        }
    }
    check_finite_grads(&grads)?;
    Ok(grads)
}

/// Per-sample gate gradients over a whole dataset, in sample order.
pub fn gate_gradients(
    net: &ToyNetwork,
    adapters: &[LayerAdapters],
    data: &Dataset,
    method: GradMethod,
) -> Result<Vec<SampleGateGrads>, ToyNetError> {
    data.check(Some(net.model_dim()))?;
    data.inputs
        .iter()
        .zip(&data.targets)
        .map(|(x, y)| sample_gate_gradients(net, adapters, x, y, method))
        .collect()
}

/// `|a − b| / max(|a|, |b|, 1e-6)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between analytic and central-difference gate
/// gradients over every sample, layer and unit.
pub fn gradient_check(
    net: &ToyNetwork,
    adapters: &[LayerAdapters],
    data: &Dataset,
    step: f64,
) -> Result<f64, ToyNetError> {
    let analytic = gate_gradients(net, adapters, data, GradMethod::Analytic)?;
    let numeric = gate_gradients(net, adapters, data, GradMethod::CentralDifference { step })?;
    let mut worst: f64 = 0.0;
    for (sa, sn) in analytic.iter().zip(&numeric) {
        for (la, ln) in sa.iter().zip(sn) {
            for (a, n) in la.heads.iter().chain(&la.neurons).zip(ln.heads.iter().chain(&ln.neurons)) {
                worst = worst.max(relative_error(*a, *n));
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub adapters: Vec<LayerAdapters>,
    /// Loss before training followed by the loss after every step.
    pub loss_curve: Vec<f64>,
}

fn check_training(lr: f64, data: &Dataset, net: &ToyNetwork) -> Result<(), ToyNetError> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(ToyNetError::InvalidTraining("learning rate must be finite and > 0"));
    }
    data.check(Some(net.model_dim()))
}

/// Full-batch gradient descent on the adapters of `trainable_layers`. The base
/// network is borrowed immutably and never changes.
pub fn train_adapters(
    net: &ToyNetwork,
    adapters: &[LayerAdapters],
    data: &Dataset,
    steps: usize,
    lr: f64,
    trainable_layers: &[usize],
) -> Result<TrainOutcome, ToyNetError> {
    check_training(lr, data, net)?;
    if let Some(x) = data.inputs.first() {
        check_inputs(net, adapters, None, x)?;
    }
    let mut adapters = adapters.to_vec();
    let n = data.len() as f64;
    let trainable: Vec<bool> = (0..net.num_layers()).map(|k| trainable_layers.contains(&k)).collect();
    let mut curve = Vec::with_capacity(steps + 1);

    let mut step = 0;
    loop {
        let mut grads: Vec<LayerAdapterGrads> = adapters
            .iter()
            .enumerate()
            .map(|(k, la)| {
                if trainable.get(k).copied().unwrap_or(false) {
                    LayerAdapterGrads {
                        mha: la.mha.as_ref().map(AdapterGrads::zeros_like),
                        ffn: la.ffn.as_ref().map(AdapterGrads::zeros_like),
                    }
                } else {
                    LayerAdapterGrads::default()
                }
            })
            .collect();
        let mut total = 0.0;
        for (x, y) in data.inputs.iter().zip(&data.targets) {
            let (out, caches) = forward_cached(net, &adapters, None, x);
            total += sample_loss(&out, y);
            if step < steps {
                let mut sink = Sink { gates: None, adapters: Some(&mut grads), base: None, weight: 1.0 / n };
                backward(net, &adapters, None, &caches, loss_grad(&out, y), &mut sink);
            }
        }
        let l = total / n;
        if !l.is_finite() {
            return Err(ToyNetError::DivergenceDetected { step });
        }
        curve.push(l);
        if step == steps {
            break;
        }
        for (la, g) in adapters.iter_mut().zip(&grads) {
            if let (Some(a), Some(g)) = (la.mha.as_mut(), g.mha.as_ref()) {
                g.apply(a, lr);
            }
            if let (Some(a), Some(g)) = (la.ffn.as_mut(), g.ffn.as_ref()) {
                g.apply(a, lr);
            }
        }
        if adapters.iter().any(|la| la.mha.iter().chain(la.ffn.iter()).any(|a| !a.is_finite())) {
            return Err(ToyNetError::DivergenceDetected { step: step + 1 });
        }
        step += 1;
    }
    Ok(TrainOutcome { adapters, loss_curve: curve })
}

/// Full-batch gradient descent on the base weights (no adapters, no gates).
/// Returns the trained copy and its loss curve.
pub fn pretrain_base(
    net: &ToyNetwork,
    data: &Dataset,
    steps: usize,
    lr: f64,
) -> Result<(ToyNetwork, Vec<f64>), ToyNetError> {
    check_training(lr, data, net)?;
    let mut net = net.clone();
    let n = data.len() as f64;
    let mut curve = Vec::with_capacity(steps + 1);
    let mut step = 0;
    loop {
        let mut grads: Vec<BaseLayerGrads> = net.layers.iter().map(BaseLayerGrads::zeros_like).collect();
        let mut total = 0.0;
        for (x, y) in data.inputs.iter().zip(&data.targets) {
            let (out, caches) = forward_cached(&net, &[], None, x);
            total += sample_loss(&out, y);
            if step < steps {
                let mut sink = Sink { gates: None, adapters: None, base: Some(&mut grads), weight: 1.0 / n };
                backward(&net, &[], None, &caches, loss_grad(&out, y), &mut sink);
            }
        }
        let l = total / n;
        if !l.is_finite() {
            return Err(ToyNetError::DivergenceDetected { step });
        }
        curve.push(l);
        if step == steps {
            break;
        }
        for (layer, g) in net.layers.iter_mut().zip(&grads) {
            for (i, head) in layer.heads.iter_mut().enumerate() {
                head.down.descend(lr, &g.heads_down[i]);
                head.up.descend(lr, &g.heads_up[i]);
            }
            layer.ffn_in.descend(lr, &g.ffn_in);
            layer.ffn_out.descend(lr, &g.ffn_out);
        }
        if !net.layers.iter().all(ToyLayer::is_finite) {
            return Err(ToyNetError::DivergenceDetected { step: step + 1 });
        }
        step += 1;
    }
    Ok((net, curve))
}
