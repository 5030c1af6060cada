//! Black-box objectives for the rank search.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use fisherlens_core::toynet::{dataset_loss, init_adapters, train_adapters};

use crate::io::read_json;
use crate::stages::{prepare, Prepared, RunSpec};

pub enum Objective {
    /// Replays values measured elsewhere, keyed by rank.
    Table(BTreeMap<usize, f64>),
    /// Trains all-layer adapters of the given rank and reports held-out loss.
    ToyFineTune { spec: RunSpec, prepared: Box<Prepared> },
}

impl Objective {
    /// `table:<path>` or `toy`.
    pub fn parse(text: &str, spec: &RunSpec) -> Result<Self> {
        if let Some(path) = text.strip_prefix("table:") {
            return Self::load_table(Path::new(path));
        }
        if text == "toy" {
            let mut base = spec.clone();
            // Only the network and data are shared; the rank varies per trial.
            base.train_steps = 0;
            let prepared = prepare(&base)?;
            return Ok(Objective::ToyFineTune { spec: spec.clone(), prepared: Box::new(prepared) });
        }
        bail!("unknown objective {text:?} (expected table:<path> or toy)")
    }

    /// JSON object mapping ranks (as strings) to values.
    pub fn load_table(path: &Path) -> Result<Self> {
        let raw: BTreeMap<String, f64> = read_json(path)?;
        let mut table = BTreeMap::new();
        for (k, v) in raw {
            let r: usize = k.parse().with_context(|| format!("{}: bad rank key {k:?}", path.display()))?;
            table.insert(r, v);
        }
        Ok(Objective::Table(table))
    }

    pub fn evaluate(&self, r: usize) -> Result<f64> {
        match self {
            Objective::Table(t) => t.get(&r).copied().ok_or_else(|| anyhow!("table has no entry for rank {r}")),
            Objective::ToyFineTune { spec, prepared } => {
                let all: Vec<usize> = (0..spec.layers).collect();
                let init = init_adapters(&prepared.net, &spec.adapter_config(r), &all)?;
                let trained = train_adapters(&prepared.net, &init, &prepared.data.task, spec.train_steps, spec.lr, &all)?;
                Ok(dataset_loss(&prepared.net, &trained.adapters, None, &prepared.data.eval)?)
            }
        }
    }
}
