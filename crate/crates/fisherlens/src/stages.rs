//! Pipeline stages with deterministic parallel fan-out.
//!
//! Every random quantity is derived from one run seed through
//! [`stage_seed`] with a fixed stage name, so running a stage on its own
//! reproduces the value it has inside a full pipeline. Parallel work is
//! merged in index order and reductions keep their sequential order, so
//! results are bit-identical for every `jobs` value.

use anyhow::{bail, Context, Result};
use fisherlens_core::files::{LayerMaskRecord, MaskFile, ScoreFile};
use fisherlens_core::masksolve::solve_layer;
use fisherlens_core::masktune::{binary_gates, tune_layer, CalibrationTraces, ComponentReport, Linearization};
use fisherlens_core::ranking::{layer_importance, rank_and_select};
use fisherlens_core::scores::{assemble_scores, fisher_scores, taylor_scores, Provenance, RawGradients};
use fisherlens_core::seed::stage_seed;
use fisherlens_core::toynet::{
    dataset_loss, forward, generate_dataset, init_adapters, sample_gate_gradients, train_adapters, AdapterConfig,
    DataRole, Dataset, GradMethod, Generator, LayerAdapters, SampleGateGrads, ToyNetwork, ToyNetworkConfig,
};
use fisherlens_core::{resolve_budget, Budget, ContinuousMask, LayerImportance};

use crate::config::Config;
use crate::parallel::try_map_ordered;

/// Fully resolved run parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub seed: u64,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub rank: usize,
    pub experts: usize,
    pub generator: Generator,
    pub pretrain_size: usize,
    pub task_size: usize,
    pub calib_size: usize,
    pub eval_size: usize,
    pub train_steps: usize,
    pub lr: f64,
    pub budget: Budget,
    pub refine: bool,
    pub linearization: Linearization,
    pub top_k: usize,
    pub compare: bool,
    pub random_trials: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            layers: 4,
            dim: 8,
            heads: 2,
            ffn: 16,
            rank: 4,
            experts: 4,
            generator: Generator::LinearTeacher,
            pretrain_size: 64,
            task_size: 64,
            calib_size: 32,
            eval_size: 64,
            train_steps: 200,
            lr: 1e-2,
            budget: Budget::default(),
            refine: true,
            linearization: Linearization::default(),
            top_k: 3,
            compare: false,
            random_trials: 20,
        }
    }
}

pub fn linearization_name(l: Linearization) -> &'static str {
    match l {
        Linearization::MaskedInput => "exact",
        Linearization::CleanInput => "literal",
    }
}

pub fn parse_linearization(name: &str) -> Result<Linearization> {
    match name {
        "exact" => Ok(Linearization::MaskedInput),
        "literal" => Ok(Linearization::CleanInput),
        other => bail!("unknown linearization {other:?} (expected exact or literal)"),
    }
}

pub fn parse_generator(name: &str) -> Result<Generator> {
    Generator::from_name(name).with_context(|| format!("unknown generator {name:?}"))
}

impl RunSpec {
    /// Defaults overridden by any keys present in `cfg`.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let known = [
            "model.seed",
            "model.layers",
            "model.dim",
            "model.heads",
            "model.ffn",
            "adapter.rank",
            "adapter.experts",
            "data.generator",
            "data.pretrain_size",
            "data.task_size",
            "data.calib_size",
            "data.eval_size",
            "train.steps",
            "train.lr",
            "select.budget",
            "select.budget_frac",
            "select.refine",
            "tune.linearization",
            "rank.top_k",
            "compare.enabled",
            "compare.random_trials",
        ];
        if let Some(k) = cfg.keys().find(|k| !known.contains(k)) {
            bail!("unknown config key {k:?}");
        }
        let mut s = Self::default();
        macro_rules! take {
            ($field:expr, $key:literal) => {
                if let Some(v) = cfg.get_parsed($key)? {
                    $field = v;
                }
            };
        }
        take!(s.seed, "model.seed");
        take!(s.layers, "model.layers");
        take!(s.dim, "model.dim");
        take!(s.heads, "model.heads");
        take!(s.ffn, "model.ffn");
        take!(s.rank, "adapter.rank");
        take!(s.experts, "adapter.experts");
        take!(s.pretrain_size, "data.pretrain_size");
        take!(s.task_size, "data.task_size");
        take!(s.calib_size, "data.calib_size");
        take!(s.eval_size, "data.eval_size");
        take!(s.train_steps, "train.steps");
        take!(s.lr, "train.lr");
        take!(s.refine, "select.refine");
        take!(s.top_k, "rank.top_k");
        take!(s.compare, "compare.enabled");
        take!(s.random_trials, "compare.random_trials");
        if let Some(g) = cfg.get("data.generator") {
            s.generator = parse_generator(g)?;
        }
        if let Some(l) = cfg.get("tune.linearization") {
            s.linearization = parse_linearization(l)?;
        }
        match (cfg.get_parsed::<f64>("select.budget")?, cfg.get_parsed::<f64>("select.budget_frac")?) {
            (Some(_), Some(_)) => bail!("set only one of select.budget and select.budget_frac"),
            (Some(c), None) => s.budget = Budget::Absolute(c),
            (None, Some(f)) => s.budget = Budget::Fraction(f),
            (None, None) => {}
        }
        Ok(s)
    }

    /// The resolved plan as a config document.
    pub fn to_config(&self) -> Config {
        let mut c = Config::default();
        c.set("model.seed", self.seed);
        c.set("model.layers", self.layers);
        c.set("model.dim", self.dim);
        c.set("model.heads", self.heads);
        c.set("model.ffn", self.ffn);
        c.set("adapter.rank", self.rank);
        c.set("adapter.experts", self.experts);
        c.set("data.generator", self.generator.name());
        c.set("data.pretrain_size", self.pretrain_size);
        c.set("data.task_size", self.task_size);
        c.set("data.calib_size", self.calib_size);
        c.set("data.eval_size", self.eval_size);
        c.set("train.steps", self.train_steps);
        c.set("train.lr", format!("{:?}", self.lr));
        match self.budget {
            Budget::Absolute(v) => c.set("select.budget", format!("{v:?}")),
            Budget::Fraction(v) => c.set("select.budget_frac", format!("{v:?}")),
        }
        c.set("select.refine", self.refine);
        c.set("tune.linearization", linearization_name(self.linearization));
        c.set("rank.top_k", self.top_k);
        c.set("compare.enabled", self.compare);
        c.set("compare.random_trials", self.random_trials);
        c
    }

    pub fn network_config(&self) -> ToyNetworkConfig {
        ToyNetworkConfig {
            num_layers: self.layers,
            model_dim: self.dim,
            num_heads: self.heads,
            ffn_dim: self.ffn,
            seed: stage_seed(self.seed, "network"),
        }
    }

    pub fn adapter_config(&self, rank: usize) -> AdapterConfig {
        AdapterConfig {
            rank,
            num_experts: self.experts,
            on_mha: true,
            on_ffn: true,
            seed: stage_seed(self.seed, "adapters"),
        }
    }

    fn task_data(&self, name: &str, size: usize) -> Result<Dataset> {
        Ok(generate_dataset(
            self.generator,
            stage_seed(self.seed, "task-teacher"),
            stage_seed(self.seed, name),
            size,
            self.dim,
            DataRole::Task,
        )?)
    }

    pub fn datasets(&self) -> Result<Datasets> {
        let pretrain = generate_dataset(
            Generator::RandomGaussian,
            stage_seed(self.seed, "pretrain-teacher"),
            stage_seed(self.seed, "pretrain-samples"),
            self.pretrain_size,
            self.dim,
            DataRole::Pretrain,
        )?;
        Ok(Datasets {
            pretrain,
            task: self.task_data("task-samples", self.task_size)?,
            calib: self.task_data("calib-samples", self.calib_size)?,
            eval: self.task_data("eval-samples", self.eval_size)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub pretrain: Dataset,
    pub task: Dataset,
    pub calib: Dataset,
    pub eval: Dataset,
}

/// Network, data and the fully adapted model every later stage starts from.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub net: ToyNetwork,
    pub data: Datasets,
    pub adapters: Vec<LayerAdapters>,
    pub loss_curve: Vec<f64>,
}

/// Builds the network and trains adapters on every layer.
pub fn prepare(spec: &RunSpec) -> Result<Prepared> {
    let net = ToyNetwork::new(spec.network_config())?;
    let data = spec.datasets()?;
    let all: Vec<usize> = (0..spec.layers).collect();
    let init = init_adapters(&net, &spec.adapter_config(spec.rank), &all)?;
    let trained = train_adapters(&net, &init, &data.task, spec.train_steps, spec.lr, &all)
        .context("training full-layer adapters")?;
    Ok(Prepared { net, data, adapters: trained.adapters, loss_curve: trained.loss_curve })
}

/// Per-sample gate gradients computed in parallel over samples.
pub fn gradients(net: &ToyNetwork, adapters: &[LayerAdapters], data: &Dataset, jobs: usize) -> Result<Vec<SampleGateGrads>> {
    data.check(Some(net.model_dim()))?;
    let pairs: Vec<(&Vec<f64>, &Vec<f64>)> = data.inputs.iter().zip(&data.targets).collect();
    Ok(try_map_ordered(jobs, &pairs, |_, (x, y)| sample_gate_gradients(net, adapters, x, y, GradMethod::Analytic))?)
}

/// Taylor scores from the base model on pretraining data and Fisher scores
/// from the adapted model on task data.
pub fn compute_scores(
    net: &ToyNetwork,
    adapters: &[LayerAdapters],
    pretrain: &Dataset,
    task: &Dataset,
    jobs: usize,
) -> Result<ScoreFile> {
    let base = gradients(net, &[], pretrain, jobs)?;
    let adapted = gradients(net, adapters, task, jobs)?;
    let taylor = taylor_scores(&RawGradients::from_samples(Provenance::TAYLOR, &base)?)?;
    let fisher = fisher_scores(&RawGradients::from_samples(Provenance::FISHER, &adapted)?)?;
    Ok(assemble_scores(fisher, &taylor)?)
}

/// Greedy search, plus refinement when `refine`, on every layer.
pub fn select_masks(scores: &ScoreFile, budget: Budget, refine: bool, jobs: usize) -> Result<MaskFile> {
    let budget = budget.validate()?;
    let layers = try_map_ordered(jobs, &scores.layers, |_, s| -> Result<LayerMaskRecord> {
        let c = resolve_budget(budget, s);
        let sol = solve_layer(s, c, refine).with_context(|| format!("layer {}", s.layer_index))?;
        Ok(LayerMaskRecord::from_solution(s.layer_index, s.num_heads(), s.num_neurons(), &sol))
    })?;
    Ok(MaskFile::new(layers))
}

/// Continuous masks for every layer. Layer `k` of the returned file carries
/// the binary sets of `masks` plus the tuned values.
pub fn tune_masks(
    net: &ToyNetwork,
    adapters: &[LayerAdapters],
    masks: &MaskFile,
    calib: &Dataset,
    linearization: Linearization,
    jobs: usize,
) -> Result<(MaskFile, Vec<ComponentReport>)> {
    if masks.layers.len() != net.num_layers() {
        bail!("mask file has {} layers, network has {}", masks.layers.len(), net.num_layers());
    }
    for (k, rec) in masks.layers.iter().enumerate() {
        let l = &net.layers[k];
        if rec.layer != k || rec.num_heads != l.num_heads() || rec.num_neurons != l.num_neurons() {
            bail!("mask record {k} does not match the network's layer shape");
        }
    }
    calib.check(Some(net.model_dim()))?;
    let solutions: Vec<_> = masks.layers.iter().map(|r| r.solution()).collect();
    let gates = binary_gates(net, &solutions)?;
    let ones: Vec<ContinuousMask> =
        net.layers.iter().map(|l| ContinuousMask::ones(l.num_heads(), l.num_neurons())).collect();
    let traced = try_map_ordered(jobs, &calib.inputs, |_, x| -> Result<_> {
        Ok((forward(net, adapters, Some(&ones), x)?.1, forward(net, adapters, Some(&gates), x)?.1))
    })?;
    let (clean, masked) = traced.into_iter().unzip();
    let traces = CalibrationTraces { clean, masked };
    let layer_ids: Vec<usize> = (0..net.num_layers()).collect();
    let tuned = try_map_ordered(jobs, &layer_ids, |_, &k| tune_layer(net, adapters, k, &gates[k], &traces, linearization))?;
    let mut out = masks.clone();
    let mut reports = Vec::with_capacity(2 * tuned.len());
    for (rec, (mask, r)) in out.layers.iter_mut().zip(tuned) {
        rec.set_continuous(&mask);
        reports.extend(r);
    }
    Ok((out, reports))
}

pub fn rank_layers(masks: &MaskFile, k: usize) -> Result<LayerImportance> {
    Ok(rank_and_select(&layer_importance(masks), k)?)
}

/// Fresh adapters on `layers` only, trained on the task data; returns the
/// loss on the held-out evaluation set.
pub fn selective_adaptation_loss(prepared: &Prepared, spec: &RunSpec, layers: &[usize]) -> Result<f64> {
    let mut layers = layers.to_vec();
    layers.sort_unstable();
    layers.dedup();
    let init = init_adapters(&prepared.net, &spec.adapter_config(spec.rank), &layers)?;
    let trained = train_adapters(&prepared.net, &init, &prepared.data.task, spec.train_steps, spec.lr, &layers)?;
    Ok(dataset_loss(&prepared.net, &trained.adapters, None, &prepared.data.eval)?)
}

/// Held-out loss of the fully adapted model.
pub fn full_adaptation_loss(prepared: &Prepared) -> Result<f64> {
    Ok(dataset_loss(&prepared.net, &prepared.adapters, None, &prepared.data.eval)?)
}
