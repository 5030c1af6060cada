use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, ColorChoice, Parser, Subcommand};
use fisherlens::config::Config;
use fisherlens::experiment::{compare_selections, run_pipeline};
use fisherlens::io::{
    read_dataset_file, read_mask_file, read_model_file, read_score_file, to_json, write_json, write_text, ModelFile,
};
use fisherlens::objective::Objective;
use fisherlens::parallel::available_jobs;
use fisherlens::stages::{
    compute_scores, parse_generator, parse_linearization, prepare, rank_layers, select_masks, tune_masks, RunSpec,
};
use fisherlens::verify::{verify_scores, worked_instance, Status};
use fisherlens_core::files::RankingFile;
use fisherlens_core::rankopt::optimize;
use fisherlens_core::ranking::saliency_csv;
use fisherlens_core::Budget;

#[derive(Parser)]
#[command(name = "fisherlens", version, about = "Fisher-guided layer selection for routed low-rank adapters")]
struct Cli {
    /// Worker threads for per-layer and per-sample work (0 = all cores).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train full-layer adapters on a seeded toy problem and write Fisher/Taylor scores.
    Scores(ScoresArgs),
    /// Budgeted binary masks from a score file.
    Select(SelectArgs),
    /// Relax binary masks into continuous values.
    Tune(TuneArgs),
    /// Rank layers by mask deviation and select the top k.
    Rank(RankArgs),
    /// Search the adapter rank with a Parzen-estimator optimizer.
    RankOpt(RankOptArgs),
    /// Cross-check the solvers against the brute-force oracles.
    Verify(VerifyArgs),
    /// Run scores, select, tune and rank from one config file.
    Pipeline(PipelineArgs),
}

#[derive(Args, Default)]
struct ModelArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn: Option<usize>,
    /// Adapter rank.
    #[arg(long)]
    rank: Option<usize>,
    /// Adapter experts per site.
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// linear-teacher or random-gaussian.
    #[arg(long)]
    generator: Option<String>,
    #[arg(long)]
    pretrain_size: Option<usize>,
    #[arg(long)]
    task_size: Option<usize>,
    #[arg(long)]
    calib_size: Option<usize>,
}

impl ModelArgs {
    fn apply(&self, s: &mut RunSpec) -> Result<()> {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { s.$f = v; })* };
        }
        set!(seed, layers, dim, heads, ffn, rank, experts, train_steps, lr, pretrain_size, task_size, calib_size);
        if let Some(g) = &self.generator {
            s.generator = parse_generator(g)?;
        }
        Ok(())
    }

    fn spec(&self) -> Result<RunSpec> {
        let mut s = RunSpec::default();
        self.apply(&mut s)?;
        Ok(s)
    }
}

#[derive(Args)]
#[group(multiple = false)]
struct BudgetArgs {
    /// Absolute Taylor budget per layer.
    #[arg(long)]
    budget: Option<f64>,
    /// Budget as a fraction of each layer's Taylor mass.
    #[arg(long)]
    budget_frac: Option<f64>,
}

impl BudgetArgs {
    fn resolve(&self) -> Option<Budget> {
        match (self.budget, self.budget_frac) {
            (Some(c), _) => Some(Budget::Absolute(c)),
            (_, Some(f)) => Some(Budget::Fraction(f)),
            _ => None,
        }
    }
}

#[derive(Args)]
struct ScoresArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also write the network and trained adapters.
    #[arg(long)]
    save_model: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long)]
    no_refine: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Network and adapters written by `scores --save-model`; regenerated from
    /// the model flags when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Calibration dataset file; generated from the seed when absent.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// exact or literal.
    #[arg(long, default_value = "exact")]
    linearization: String,
    #[command(flatten)]
    model_args: ModelArgs,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    masks: PathBuf,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
    #[arg(long)]
    out: PathBuf,
    /// CSV table `layer,score,rank,selected`.
    #[arg(long)]
    saliency: Option<PathBuf>,
}

#[derive(Args)]
struct RankOptArgs {
    #[arg(long, default_value_t = 2)]
    min: usize,
    #[arg(long, default_value_t = 16)]
    max: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// `table:<path>` (JSON object rank -> value) or `toy`.
    #[arg(long, default_value = "toy")]
    objective: String,
    /// Training steps per trial for the toy objective.
    #[arg(long)]
    train_steps: Option<usize>,
    /// Write the trial history as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Score file to check; the built-in worked instance when absent.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the machine-readable report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "dry_run")]
    out_dir: Option<PathBuf>,
    /// Print the resolved plan and write nothing.
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    top_k: Option<usize>,
    /// Re-adapt the selected layers against random and weight-norm choices.
    #[arg(long)]
    compare: bool,
    #[command(flatten)]
    model: ModelArgs,
}

fn jobs(requested: usize) -> usize {
    if requested == 0 {
        available_jobs()
    } else {
        requested
    }
}

fn cmd_scores(a: &ScoresArgs, jobs: usize) -> Result<()> {
    let spec = a.model.spec()?;
    let prepared = prepare(&spec)?;
    let scores = compute_scores(&prepared.net, &prepared.adapters, &prepared.data.pretrain, &prepared.data.task, jobs)?;
    write_json(&a.out, &scores)?;
    if let Some(path) = &a.save_model {
        write_json(path, &ModelFile::new(prepared.net.clone(), prepared.adapters.clone()))?;
    }
    let last = prepared.loss_curve.last().copied().unwrap_or(f64::NAN);
    println!("wrote {} ({} layers, adapted task loss {last:.6})", a.out.display(), scores.layers.len());
    Ok(())
}

fn cmd_select(a: &SelectArgs, jobs: usize) -> Result<()> {
    let scores = read_score_file(&a.scores)?;
    let budget = a.budget.resolve().unwrap_or_default();
    let masks = select_masks(&scores, budget, !a.no_refine, jobs)?;
    write_json(&a.out, &masks)?;
    for rec in &masks.layers {
        println!(
            "layer {}: masked heads {:?}, neurons {:?}, fisher {:?}, taylor {:?}",
            rec.layer, rec.masked_heads, rec.masked_neurons, rec.fisher_loss, rec.taylor_used
        );
    }
    Ok(())
}

fn cmd_tune(a: &TuneArgs, jobs: usize) -> Result<()> {
    let masks = read_mask_file(&a.masks)?;
    let spec = a.model_args.spec()?;
    let (net, adapters) = match &a.model {
        Some(path) => {
            let m = read_model_file(path)?;
            (m.network, m.adapters)
        }
        None => {
            let p = prepare(&spec)?;
            (p.net, p.adapters)
        }
    };
    let calib = match &a.calib {
        Some(path) => read_dataset_file(path)?.dataset,
        None => spec.datasets()?.calib,
    };
    let (tuned, reports) = tune_masks(&net, &adapters, &masks, &calib, parse_linearization(&a.linearization)?, jobs)?;
    write_json(&a.out, &tuned)?;
    for r in &reports {
        println!(
            "layer {} {}: binary error {:.6e}, tuned error {:.6e}",
            r.layer, r.component, r.binary_error, r.tuned_error
        );
    }
    Ok(())
}

fn write_ranking(imp: &fisherlens_core::LayerImportance, out: &Path, saliency: Option<&Path>) -> Result<()> {
    write_json(out, &RankingFile::from(imp))?;
    if let Some(path) = saliency {
        write_text(path, &saliency_csv(imp))?;
    }
    Ok(())
}

fn cmd_rank(a: &RankArgs) -> Result<()> {
    let masks = read_mask_file(&a.masks)?;
    let imp = rank_layers(&masks, a.top_k)?;
    write_ranking(&imp, &a.out, a.saliency.as_deref())?;
    println!("ranking {:?}, selected {:?}", imp.ranking, imp.selected);
    Ok(())
}

fn cmd_rank_opt(a: &RankOptArgs) -> Result<()> {
    let mut spec = RunSpec { seed: a.seed, ..RunSpec::default() };
    if let Some(steps) = a.train_steps {
        spec.train_steps = steps;
    }
    let objective = Objective::parse(&a.objective, &spec)?;
    let out = optimize(|r| objective.evaluate(r), a.min, a.max, a.trials, a.seed).map_err(|e| anyhow::anyhow!("{e:#}"))?;
    if let Some(path) = &a.out {
        #[derive(serde::Serialize)]
        struct History<'a> {
            best_rank: usize,
            best_value: f64,
            trials: &'a [(usize, f64)],
        }
        write_json(path, &History { best_rank: out.best_rank, best_value: out.best_value, trials: &out.history })?;
    }
    println!("best r = {} (objective {:?}, {} trials)", out.best_rank, out.best_value, out.history.len());
    Ok(())
}

/// Returns whether every check passed.
fn cmd_verify(a: &VerifyArgs) -> Result<bool> {
    let (scores, default_budget) = match &a.scores {
        Some(path) => (read_score_file(path)?, Budget::default()),
        None => (worked_instance(), Budget::Absolute(3.0)),
    };
    let report = verify_scores(&scores, a.budget.resolve().unwrap_or(default_budget), a.seed);
    for c in &report.checks {
        let tag = match c.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skipped => "SKIP",
        };
        println!("{tag} {}: {}", c.name, c.detail);
    }
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    Ok(report.passed)
}

fn cmd_pipeline(a: &PipelineArgs, jobs: usize) -> Result<()> {
    let cfg = match &a.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let mut spec = RunSpec::from_config(&cfg)?;
    a.model.apply(&mut spec)?;
    if let Some(k) = a.top_k {
        spec.top_k = k;
    }
    if a.compare {
        spec.compare = true;
    }
    if spec.top_k == 0 || spec.top_k > spec.layers {
        bail!("top_k must be in 1..={}, got {}", spec.layers, spec.top_k);
    }
    let plan = spec.to_config().render();
    if a.dry_run {
        print!("{plan}");
        return Ok(());
    }
    let dir = a.out_dir.as_deref().context("--out-dir is required")?;
    let out = run_pipeline(&spec, jobs)?;
    write_text(&dir.join("plan.cfg"), &plan)?;
    write_json(&dir.join("model.json"), &ModelFile::new(out.prepared.net.clone(), out.prepared.adapters.clone()))?;
    write_json(&dir.join("scores.json"), &out.scores)?;
    write_json(&dir.join("masks.json"), &out.binary)?;
    write_json(&dir.join("tuned.json"), &out.tuned)?;
    write_ranking(&out.importance, &dir.join("ranking.json"), Some(&dir.join("saliency.csv")))?;
    println!("ranking {:?}, selected {:?}", out.importance.ranking, out.importance.selected);
    if spec.compare {
        let cmp = compare_selections(&out, &spec, jobs)?;
        write_text(&dir.join("comparison.json"), &to_json(&cmp)?)?;
        println!(
            "held-out loss: full {:.6}, selected {:.6}, weight-norm {:.6}, random mean {:.6}",
            cmp.full_loss,
            cmp.selected_loss,
            cmp.weight_norm_loss,
            cmp.random_mean()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let color = if std::env::var_os("NO_COLOR").is_some() { ColorChoice::Never } else { ColorChoice::Auto };
    let matches = <Cli as clap::CommandFactory>::command().color(color).get_matches();
    let cli = match <Cli as clap::FromArgMatches>::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let jobs = jobs(cli.jobs);
    let (name, result) = match &cli.command {
        Command::Scores(a) => ("scores", cmd_scores(a, jobs).map(|_| true)),
        Command::Select(a) => ("select", cmd_select(a, jobs).map(|_| true)),
        Command::Tune(a) => ("tune", cmd_tune(a, jobs).map(|_| true)),
        Command::Rank(a) => ("rank", cmd_rank(a).map(|_| true)),
        Command::RankOpt(a) => ("rank-opt", cmd_rank_opt(a).map(|_| true)),
        Command::Verify(a) => ("verify", cmd_verify(a)),
        Command::Pipeline(a) => ("pipeline", cmd_pipeline(a, jobs).map(|_| true)),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{name}: verification failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {name}: {e:#}");
            ExitCode::from(1)
        }
    }
}
