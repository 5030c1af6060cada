//! Per-layer binary mask selection under a Taylor budget.
//!
//! [`greedy_mask_search`] scans the number of masked heads `n`; for each
//! feasible `n` it fills the remaining budget with as many neurons as fit and
//! masks the lowest-Fisher units of both components. [`refine_masks`] then
//! exchanges one masked unit for one unmasked unit at a time while that
//! lowers the masked Fisher total without raising the Taylor cost.
//!
//! Solutions always store the MASKED index sets.

use alloc::vec::Vec;
use core::fmt;

use crate::types::{fisher_sum, taylor_cost, Component, LayerComponentScores, MaskSolution};

#[derive(Debug, Clone, PartialEq)]
pub enum SolveError {
    InvalidBudget(f64),
    /// The starting solution exceeds the budget.
    InfeasibleInput { taylor_used: f64, budget: f64 },
    /// The starting solution does not match the scores it is refined against.
    InconsistentInput,
}

impl fmt::Display for SolveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolveError::InvalidBudget(c) => write!(f, "budget must be finite and >= 0, got {c}"),
            SolveError::InfeasibleInput { taylor_used, budget } => {
                write!(f, "input mask uses {taylor_used} of Taylor budget {budget}")
            }
            SolveError::InconsistentInput => f.write_str("input mask is inconsistent with the scores"),
        }
    }
}

impl core::error::Error for SolveError {}

fn check_budget(c: f64) -> Result<(), SolveError> {
    if c.is_finite() && c >= 0.0 {
        Ok(())
    } else {
        Err(SolveError::InvalidBudget(c))
    }
}

/// Unit indices by ascending Fisher score, ties by ascending index.
fn ascending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order
}

/// Largest neuron count that fits next to `heads` masked heads.
///
/// Starts from `floor((C − n·t_h) / t_f)` and corrects it against the exact
/// cost expression so rounding can never overshoot the budget.
fn neuron_capacity(scores: &LayerComponentScores, heads: usize, c: f64) -> usize {
    let (th, tf, max) = (scores.taylor_head, scores.taylor_neuron, scores.num_neurons());
    let remaining = c - heads as f64 * th;
    let estimate = libm::floor(remaining / tf);
    let mut f = if estimate.is_nan() || estimate < 0.0 {
        0
    } else if estimate >= max as f64 {
        max
    } else {
        estimate as usize
    };
    while f > 0 && taylor_cost(heads, f, th, tf) > c {
        f -= 1;
    }
    while f < max && taylor_cost(heads, f + 1, th, tf) <= c {
        f += 1;
    }
    f
}

/// Determination stage for one layer.
///
/// Ties in masked Fisher go to the smaller head count; within a count the
/// lowest-index units among equal scores are masked.
pub fn greedy_mask_search(scores: &LayerComponentScores, c: f64) -> Result<MaskSolution, SolveError> {
    check_budget(c)?;
    let head_order = ascending(&scores.fisher_heads);
    let neuron_order = ascending(&scores.fisher_neurons);
    let mut best: Option<(f64, usize, usize)> = None;
    for n in 0..=scores.num_heads() {
        if n as f64 * scores.taylor_head > c {
            continue;
        }
        let f = neuron_capacity(scores, n, c);
        let values = head_order[..n]
            .iter()
            .map(|&i| scores.fisher_heads[i])
            .chain(neuron_order[..f].iter().map(|&j| scores.fisher_neurons[j]))
            .collect();
        let loss = fisher_sum(values);
        if best.is_none_or(|(b, _, _)| loss < b) {
            best = Some((loss, n, f));
        }
    }
    // n = 0 is always feasible for C >= 0.
    let (_, n, f) = best.expect("zero heads always fit");
    Ok(MaskSolution::from_sets(scores, head_order[..n].to_vec(), neuron_order[..f].to_vec()))
}

/// A one-for-one exchange: `from` (masked) becomes unmasked and `to`
/// (unmasked) becomes masked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwapCandidate {
    pub from: (Component, usize),
    pub to: (Component, usize),
    /// Reduction in masked Fisher, `τ_from − τ_to`.
    pub gain: f64,
    /// Reduction in Taylor cost, `t_from − t_to`.
    pub budget_delta: f64,
}

const COMPONENTS: [Component; 2] = [Component::Head, Component::Neuron];

fn for_each_swap(scores: &LayerComponentScores, sol: &MaskSolution, mut visit: impl FnMut(SwapCandidate)) {
    for from_c in COMPONENTS {
        let from_tau = scores.fisher(from_c);
        for &p in sol.masked(from_c) {
            for to_c in COMPONENTS {
                let budget_delta = scores.taylor(from_c) - scores.taylor(to_c);
                if !(budget_delta >= 0.0) {
                    continue;
                }
                let masked_to = sol.masked(to_c);
                let to_tau = scores.fisher(to_c);
                for q in 0..to_tau.len() {
                    if masked_to.binary_search(&q).is_ok() {
                        continue;
                    }
                    visit(SwapCandidate {
                        from: (from_c, p),
                        to: (to_c, q),
                        gain: from_tau[p] - to_tau[q],
                        budget_delta,
                    });
                }
            }
        }
    }
}

/// Every valid swap (`budget_delta >= 0`), ordered by the `from` unit then the
/// `to` unit, heads before neurons.
pub fn enumerate_swaps(scores: &LayerComponentScores, sol: &MaskSolution) -> Vec<SwapCandidate> {
    let mut out = Vec::new();
    for_each_swap(scores, sol, |s| out.push(s));
    out
}

fn apply_swap(scores: &LayerComponentScores, sol: &MaskSolution, swap: &SwapCandidate) -> MaskSolution {
    let mut heads = sol.masked_heads.clone();
    let mut neurons = sol.masked_neurons.clone();
    match swap.from.0 {
        Component::Head => heads.retain(|&i| i != swap.from.1),
        Component::Neuron => neurons.retain(|&i| i != swap.from.1),
    }
    match swap.to.0 {
        Component::Head => heads.push(swap.to.1),
        Component::Neuron => neurons.push(swap.to.1),
    }
    MaskSolution::from_sets(scores, heads, neurons)
}

/// Refinement stage: repeatedly apply the valid swap with the largest positive
/// gain (ties go to the earliest swap in [`enumerate_swaps`] order). Returns the
/// refined solution and the number of swaps applied.
pub fn refine_masks_counted(
    scores: &LayerComponentScores,
    sol: &MaskSolution,
    c: f64,
) -> Result<(MaskSolution, usize), SolveError> {
    check_budget(c)?;
    if !sol.is_consistent_with(scores) {
        return Err(SolveError::InconsistentInput);
    }
    if sol.taylor_used > c {
        return Err(SolveError::InfeasibleInput { taylor_used: sol.taylor_used, budget: c });
    }
    let mut current = sol.clone();
    let mut swaps = 0;
    loop {
        let (nh, nf) = (current.masked_heads.len(), current.masked_neurons.len());
        let mut best: Option<SwapCandidate> = None;
        for_each_swap(scores, &current, |s| {
            // A non-negative budget delta cannot raise the cost in exact
            // arithmetic; this also holds the rounded cost to the cap and to
            // the current spend.
            let (dh, df) = match (s.from.0, s.to.0) {
                (Component::Head, Component::Neuron) => (nh - 1, nf + 1),
                (Component::Neuron, Component::Head) => (nh + 1, nf - 1),
                _ => (nh, nf),
            };
            let cost = taylor_cost(dh, df, scores.taylor_head, scores.taylor_neuron);
            if cost > c || cost > current.taylor_used {
                return;
            }
            if best.is_none_or(|b| s.gain > b.gain) {
                best = Some(s);
            }
        });
        match best {
            Some(s) if s.gain > 0.0 => {
                current = apply_swap(scores, &current, &s);
                swaps += 1;
            }
            _ => break,
        }
    }
    Ok((current, swaps))
}

/// [`refine_masks_counted`] without the swap count.
pub fn refine_masks(scores: &LayerComponentScores, sol: &MaskSolution, c: f64) -> Result<MaskSolution, SolveError> {
    refine_masks_counted(scores, sol, c).map(|(s, _)| s)
}

/// Greedy search followed, unless `refine` is false, by refinement.
pub fn solve_layer(scores: &LayerComponentScores, c: f64, refine: bool) -> Result<MaskSolution, SolveError> {
    let greedy = greedy_mask_search(scores, c)?;
    if refine {
        refine_masks(scores, &greedy, c)
    } else {
        Ok(greedy)
    }
}
