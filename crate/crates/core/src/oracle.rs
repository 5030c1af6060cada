//! Brute-force references for the solvers. Deliberately naive and sharing no
//! code with the optimized paths; each refuses inputs large enough to make
//! it slow.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::masktune::ReconstructionSystem;
use crate::types::{LayerComponentScores, MaskSolution};

pub const MAX_GREEDY_HEADS: usize = 8;
pub const MAX_GREEDY_NEURONS: usize = 10;
pub const MAX_BFS_HEADS: usize = 4;
pub const MAX_BFS_NEURONS: usize = 5;
pub const MAX_LSQ_COLUMNS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    TooLarge { what: &'static str, size: usize, limit: usize },
    NotConverged,
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::TooLarge { what, size, limit } => {
                write!(f, "oracle refuses {size} {what} (limit {limit})")
            }
            OracleError::NotConverged => f.write_str("coordinate descent did not converge"),
        }
    }
}

impl core::error::Error for OracleError {}

fn guard(what: &'static str, size: usize, limit: usize) -> Result<(), OracleError> {
    if size > limit {
        Err(OracleError::TooLarge { what, size, limit })
    } else {
        Ok(())
    }
}

/// Sum after sorting ascending, so equal multisets give equal bits.
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let mut s = 0.0;
    for x in v {
        s += x;
    }
    s
}

fn cost(n: usize, f: usize, th: f64, tf: f64) -> f64 {
    n as f64 * th + f as f64 * tf
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(cur.clone());
        let Some(i) = (0..k).rev().find(|&i| cur[i] < n - k + i) else {
            return out;
        };
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Exhaustive counterpart of the greedy determination stage.
///
/// For every head count `n` that fits, the neuron count is the largest `f`
/// with `n·t_h + f·t_f ≤ C` (found by scanning), and every pair of subsets of
/// those sizes is scored. The first strict minimum wins, which prefers the
/// smaller head count and then lexicographically smaller index sets.
pub fn oracle_greedy(scores: &LayerComponentScores, c: f64) -> Result<MaskSolution, OracleError> {
    let (nh, nf) = (scores.fisher_heads.len(), scores.fisher_neurons.len());
    guard("heads", nh, MAX_GREEDY_HEADS)?;
    guard("neurons", nf, MAX_GREEDY_NEURONS)?;
    let (th, tf) = (scores.taylor_head, scores.taylor_neuron);
    let mut best: Option<(f64, Vec<usize>, Vec<usize>)> = None;
    for n in 0..=nh {
        if n as f64 * th > c {
            continue;
        }
        let mut f = 0;
        for cand in 0..=nf {
            if cost(n, cand, th, tf) <= c {
                f = cand;
            }
        }
        let head_sets = subsets(nh, n);
        let neuron_sets = subsets(nf, f);
        for hs in &head_sets {
            for ns in &neuron_sets {
                let vals: Vec<f64> = hs
                    .iter()
                    .map(|&i| scores.fisher_heads[i])
                    .chain(ns.iter().map(|&j| scores.fisher_neurons[j]))
                    .collect();
                let loss = sorted_sum(vals);
                let better = match &best {
                    None => true,
                    Some((b, _, _)) => loss < *b,
                };
                if better {
                    best = Some((loss, hs.clone(), ns.clone()));
                }
            }
        }
    }
    let (loss, hs, ns) = best.unwrap_or((0.0, Vec::new(), Vec::new()));
    let used = cost(hs.len(), ns.len(), th, tf);
    Ok(MaskSolution { masked_heads: hs, masked_neurons: ns, fisher_loss: loss, taylor_used: used })
}

/// Minimum masked Fisher over every state reachable from `start` through
/// chains of budget-valid swaps. A swap unmasks one unit and masks another
/// whose Taylor cost is no larger, keeping the rounded total within `C` and
/// no larger than before.
pub fn oracle_refine_bfs(scores: &LayerComponentScores, start: &MaskSolution, c: f64) -> Result<f64, OracleError> {
    let (nh, nf) = (scores.fisher_heads.len(), scores.fisher_neurons.len());
    guard("heads", nh, MAX_BFS_HEADS)?;
    guard("neurons", nf, MAX_BFS_NEURONS)?;
    let units = nh + nf;
    let value = |u: usize| if u < nh { scores.fisher_heads[u] } else { scores.fisher_neurons[u - nh] };
    let taylor = |u: usize| if u < nh { scores.taylor_head } else { scores.taylor_neuron };
    let state_loss = |s: u32| sorted_sum((0..units).filter(|u| s >> u & 1 == 1).map(value).collect());
    let state_cost = |s: u32| {
        let n = (0..nh).filter(|u| s >> u & 1 == 1).count();
        let f = (nh..units).filter(|u| s >> u & 1 == 1).count();
        cost(n, f, scores.taylor_head, scores.taylor_neuron)
    };

    let mut s0 = 0u32;
    for &i in &start.masked_heads {
        s0 |= 1 << i;
    }
    for &j in &start.masked_neurons {
        s0 |= 1 << (nh + j);
    }
    let mut seen = vec![false; 1 << units];
    let mut queue = VecDeque::new();
    seen[s0 as usize] = true;
    queue.push_back(s0);
    let mut best = state_loss(s0);
    while let Some(s) = queue.pop_front() {
        let l = state_loss(s);
        if l < best {
            best = l;
        }
        for p in (0..units).filter(|&u| s >> u & 1 == 1) {
            for q in (0..units).filter(|&u| s >> u & 1 == 0) {
                if taylor(p) < taylor(q) {
                    continue;
                }
                let next = (s & !(1 << p)) | (1 << q);
                let next_cost = state_cost(next);
                if seen[next as usize] || next_cost > c || next_cost > state_cost(s) {
                    continue;
                }
                seen[next as usize] = true;
                queue.push_back(next);
            }
        }
    }
    Ok(best)
}

/// `m = u + 1` where `u` minimizes `‖A u − b‖²`, by cyclic coordinate descent
/// until no coordinate moves by more than `1e-12`.
pub fn oracle_least_squares(sys: &ReconstructionSystem) -> Result<Vec<f64>, OracleError> {
    let (rows, cols) = (sys.design.rows(), sys.design.cols());
    guard("columns", cols, MAX_LSQ_COLUMNS)?;
    let col = |j: usize| -> Vec<f64> { (0..rows).map(|r| sys.design.get(r, j)).collect() };
    let columns: Vec<Vec<f64>> = (0..cols).map(col).collect();
    let norms: Vec<f64> = columns.iter().map(|a| a.iter().map(|v| v * v).sum()).collect();
    let mut u = vec![0.0; cols];
    let mut r = sys.rhs.clone();
    for _ in 0..5_000_000 {
        let mut largest: f64 = 0.0;
        for j in 0..cols {
            if norms[j] == 0.0 {
                continue;
            }
            let step = columns[j].iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / norms[j];
            u[j] += step;
            for (ri, a) in r.iter_mut().zip(&columns[j]) {
                *ri -= step * a;
            }
            largest = largest.max(step.abs());
        }
        if largest < 1e-12 {
            return Ok(u.iter().map(|v| v + 1.0).collect());
        }
    }
    Err(OracleError::NotConverged)
}
