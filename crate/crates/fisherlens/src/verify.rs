//! Cross-checks of the solvers against the brute-force oracles.

use fisherlens_core::files::ScoreFile;
use fisherlens_core::linalg::Matrix;
use fisherlens_core::masksolve::{greedy_mask_search, refine_masks};
use fisherlens_core::masktune::{solve_relaxation, ReconstructionSystem};
use fisherlens_core::oracle::{
    oracle_greedy, oracle_least_squares, oracle_refine_bfs, MAX_BFS_HEADS, MAX_BFS_NEURONS, MAX_GREEDY_HEADS,
    MAX_GREEDY_NEURONS,
};
use fisherlens_core::seed::{rng, stage_seed};
use fisherlens_core::{resolve_budget, Budget, LayerComponentScores};
use rand::Rng;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    /// Instance too large for the oracle.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    fn new(checks: Vec<Check>) -> Self {
        let passed = checks.iter().all(|c| c.status != Status::Fail);
        Self { passed, checks }
    }
}

fn check(name: String, ok: bool, detail: String) -> Check {
    Check { name, status: if ok { Status::Pass } else { Status::Fail }, detail }
}

fn skipped(name: String, detail: &str) -> Check {
    Check { name, status: Status::Skipped, detail: detail.to_string() }
}

/// Single-layer instance used by the worked examples: heads [5, 1], neurons
/// [0.5, 2, 0.1], Taylor costs 2 and 1.
pub fn worked_instance() -> ScoreFile {
    ScoreFile::new(vec![
        LayerComponentScores::new(0, vec![5.0, 1.0], vec![0.5, 2.0, 0.1], 2.0, 1.0).expect("valid instance"),
    ])
}

fn verify_layer(s: &LayerComponentScores, budget: Budget, out: &mut Vec<Check>) {
    let k = s.layer_index;
    let c = resolve_budget(budget, s);
    let greedy = match greedy_mask_search(s, c) {
        Ok(g) => g,
        Err(e) => {
            out.push(check(format!("layer {k} greedy"), false, e.to_string()));
            return;
        }
    };
    let name = format!("layer {k} greedy vs exhaustive");
    if s.num_heads() <= MAX_GREEDY_HEADS && s.num_neurons() <= MAX_GREEDY_NEURONS {
        match oracle_greedy(s, c) {
            Ok(o) => {
                let ok = o.masked_heads == greedy.masked_heads
                    && o.masked_neurons == greedy.masked_neurons
                    && o.fisher_loss.to_bits() == greedy.fisher_loss.to_bits();
                out.push(check(name, ok, format!("greedy loss {:?}, oracle loss {:?}", greedy.fisher_loss, o.fisher_loss)));
            }
            Err(e) => out.push(check(name, false, e.to_string())),
        }
    } else {
        out.push(skipped(name, "layer too large for exhaustive enumeration"));
    }
    let refined = refine_masks(s, &greedy, c);
    let name = format!("layer {k} refine vs reachable minimum");
    match refined {
        Err(e) => out.push(check(name, false, e.to_string())),
        Ok(r) => {
            let sane = r.fisher_loss <= greedy.fisher_loss && r.taylor_used <= c;
            if s.num_heads() <= MAX_BFS_HEADS && s.num_neurons() <= MAX_BFS_NEURONS {
                match oracle_refine_bfs(s, &greedy, c) {
                    Ok(best) => out.push(check(
                        name,
                        sane && best.to_bits() == r.fisher_loss.to_bits(),
                        format!("refined loss {:?}, reachable minimum {best:?}", r.fisher_loss),
                    )),
                    Err(e) => out.push(check(name, false, e.to_string())),
                }
            } else {
                out.push(check(
                    format!("layer {k} refine monotone and feasible"),
                    sane,
                    format!("greedy {:?} -> refined {:?}", greedy.fisher_loss, r.fisher_loss),
                ));
            }
        }
    }
}

/// Random well-conditioned systems solved both ways.
fn verify_least_squares(seed: u64, count: usize, out: &mut Vec<Check>) {
    let mut g = rng(stage_seed(seed, "verify-lsq"));
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    for _ in 0..count {
        let cols = g.random_range(1..=8);
        let rows = cols + g.random_range(2..12);
        let design = Matrix::from_fn(rows, cols, |r, c| {
            (if r % cols == c { 2.0 } else { 0.0 }) + g.random_range(-0.5..0.5)
        });
        let rhs = (0..rows).map(|_| g.random_range(-1.0..1.0)).collect();
        let sys = ReconstructionSystem { design, rhs };
        match (solve_relaxation(&sys), oracle_least_squares(&sys)) {
            (Ok(a), Ok(b)) => {
                for (x, y) in a.values.iter().zip(&b) {
                    worst = worst.max((x - y).abs());
                }
            }
            (Err(e), _) => detail = e.to_string(),
            (_, Err(e)) => detail = e.to_string(),
        }
    }
    let ok = detail.is_empty() && worst < 1e-6;
    if detail.is_empty() {
        detail = format!("{count} systems, max deviation {worst:e}");
    }
    out.push(check("closed-form least squares vs coordinate descent".into(), ok, detail));
}

pub fn verify_scores(scores: &ScoreFile, budget: Budget, seed: u64) -> VerifyReport {
    let mut checks = Vec::new();
    for s in &scores.layers {
        verify_layer(s, budget, &mut checks);
    }
    verify_least_squares(seed, 20, &mut checks);
    VerifyReport::new(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_instance_verifies() {
        let r = verify_scores(&worked_instance(), Budget::Absolute(3.0), 0);
        assert!(r.passed, "{r:?}");
        assert!(r.checks.iter().all(|c| c.status == Status::Pass));
    }
}
