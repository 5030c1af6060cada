//! Integer rank search with a tree-structured Parzen estimator.
//!
//! Trials are split at the γ-quantile of their objective values into a good
//! and a bad set. Each set gets a Gaussian Parzen density on the integer
//! lattice, renormalized to the bounds, and the next rank maximizes the
//! density ratio `l(r)/g(r)`, which orders candidates the same way as
//! expected improvement under this surrogate. While unvisited ranks remain
//! the argmax is restricted to them, so a budget at least the domain size
//! evaluates every rank.

use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::seed::{mix64, rng, stage_seed};

pub const DEFAULT_GAMMA: f64 = 0.25;
pub const DEFAULT_STARTUP: usize = 10;
/// Every suggestion whose 1-based index is a multiple of this is a uniform
/// draw over unvisited ranks.
pub const DEFAULT_EXPLORATION_PERIOD: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub enum RankOptError {
    EmptyDomain { r_min: usize, r_max: usize },
    OutOfBounds { r: usize, r_min: usize, r_max: usize },
    NonFiniteObjective { r: usize },
    InvalidSettings,
    ZeroBudget,
}

impl fmt::Display for RankOptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankOptError::EmptyDomain { r_min, r_max } => write!(f, "empty rank range [{r_min}, {r_max}]"),
            RankOptError::OutOfBounds { r, r_min, r_max } => {
                write!(f, "rank {r} outside [{r_min}, {r_max}]")
            }
            RankOptError::NonFiniteObjective { r } => write!(f, "non-finite objective at rank {r}"),
            RankOptError::InvalidSettings => f.write_str("gamma must be in (0, 1) and the exploration period positive"),
            RankOptError::ZeroBudget => f.write_str("trial budget must be at least 1"),
        }
    }
}

impl core::error::Error for RankOptError {}

#[derive(Debug, Clone, PartialEq)]
pub struct BOState {
    pub r_min: usize,
    pub r_max: usize,
    /// `(r, objective)` in observation order; lower is better.
    pub trials: Vec<(usize, f64)>,
    pub startup_count: usize,
    pub gamma: f64,
    pub exploration_period: usize,
    pub seed: u64,
}

impl BOState {
    pub fn new(r_min: usize, r_max: usize, seed: u64) -> Result<Self, RankOptError> {
        let s = Self {
            r_min,
            r_max,
            trials: Vec::new(),
            startup_count: DEFAULT_STARTUP,
            gamma: DEFAULT_GAMMA,
            exploration_period: DEFAULT_EXPLORATION_PERIOD,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), RankOptError> {
        if self.r_min > self.r_max {
            return Err(RankOptError::EmptyDomain { r_min: self.r_min, r_max: self.r_max });
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) || self.exploration_period == 0 {
            return Err(RankOptError::InvalidSettings);
        }
        for &(r, v) in &self.trials {
            self.check_rank(r)?;
            if !v.is_finite() {
                return Err(RankOptError::NonFiniteObjective { r });
            }
        }
        Ok(())
    }

    fn check_rank(&self, r: usize) -> Result<(), RankOptError> {
        if r < self.r_min || r > self.r_max {
            Err(RankOptError::OutOfBounds { r, r_min: self.r_min, r_max: self.r_max })
        } else {
            Ok(())
        }
    }

    /// Lowest observed value and its rank; the earliest trial wins ties.
    pub fn best(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for &(r, v) in &self.trials {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((r, v));
            }
        }
        best
    }

    fn domain(&self) -> impl Iterator<Item = usize> + Clone {
        self.r_min..=self.r_max
    }
}

/// Splits trials into `(good, bad)` ranks: the `ceil(γ·n)` lowest values
/// (ties by observation order) and the rest.
pub fn split_trials(trials: &[(usize, f64)], gamma: f64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..trials.len()).collect();
    order.sort_by(|&a, &b| trials[a].1.total_cmp(&trials[b].1).then(a.cmp(&b)));
    let n_good = libm::ceil(gamma * trials.len() as f64) as usize;
    let good = order[..n_good].iter().map(|&i| trials[i].0).collect();
    let bad = order[n_good..].iter().map(|&i| trials[i].0).collect();
    (good, bad)
}

/// Mixture of lattice Gaussians centred on `centres`, each truncated and
/// renormalized to `[lo, hi]`. Returns the density at every integer of the
/// range.
pub fn parzen_density(centres: &[usize], lo: usize, hi: usize) -> Vec<f64> {
    let width = hi - lo + 1;
    let mut density = alloc::vec![0.0; width];
    if centres.is_empty() {
        return alloc::vec![1.0 / width as f64; width];
    }
    let bandwidth = ((hi - lo) as f64 / (centres.len() + 1) as f64).max(1.0);
    let mut kernel = alloc::vec![0.0; width];
    for &c in centres {
        for (i, k) in kernel.iter_mut().enumerate() {
            let z = ((lo + i) as f64 - c as f64) / bandwidth;
            *k = libm::exp(-0.5 * z * z);
        }
        let total: f64 = kernel.iter().sum();
        for (d, k) in density.iter_mut().zip(&kernel) {
            *d += k / total;
        }
    }
    let n = centres.len() as f64;
    density.iter_mut().for_each(|d| *d /= n);
    density
}

fn uniform_unvisited(state: &BOState) -> usize {
    let visited = |r: usize| state.trials.iter().any(|&(t, _)| t == r);
    let mut pool: Vec<usize> = state.domain().filter(|&r| !visited(r)).collect();
    if pool.is_empty() {
        pool = state.domain().collect();
    }
    let n = state.trials.len() as u64;
    let mut g = rng(stage_seed(state.seed ^ mix64(n), "rankopt-draw"));
    pool[g.random_range(0..pool.len())]
}

/// Next rank to evaluate.
pub fn suggest(state: &BOState) -> Result<usize, RankOptError> {
    state.validate()?;
    let n = state.trials.len();
    if n < state.startup_count || (n + 1).is_multiple_of(state.exploration_period) {
        return Ok(uniform_unvisited(state));
    }
    let first = state.trials[0].1;
    if state.trials.iter().all(|&(_, v)| v == first) {
        // No information about which side is better.
        return Ok(state.r_min);
    }
    let (good, bad) = split_trials(&state.trials, state.gamma);
    let l = parzen_density(&good, state.r_min, state.r_max);
    let g = parzen_density(&bad, state.r_min, state.r_max);
    // Deterministic objectives gain nothing from a repeat, so the argmax is
    // taken over unvisited ranks until the domain is exhausted.
    let visited = |r: usize| state.trials.iter().any(|&(t, _)| t == r);
    let fresh = state.domain().any(|r| !visited(r));
    let mut best = (state.r_min, f64::NEG_INFINITY);
    for (i, (li, gi)) in l.iter().zip(&g).enumerate() {
        let r = state.r_min + i;
        if fresh && visited(r) {
            continue;
        }
        let ratio = li / gi;
        if ratio > best.1 {
            best = (r, ratio);
        }
    }
    Ok(best.0)
}

pub fn observe(state: &mut BOState, r: usize, value: f64) -> Result<(), RankOptError> {
    state.check_rank(r)?;
    if !value.is_finite() {
        return Err(RankOptError::NonFiniteObjective { r });
    }
    state.trials.push((r, value));
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizeError<E> {
    Settings(RankOptError),
    Objective { trial: usize, r: usize, error: E },
}

impl<E: fmt::Display> fmt::Display for OptimizeError<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizeError::Settings(e) => write!(f, "{e}"),
            OptimizeError::Objective { trial, r, error } => {
                write!(f, "objective failed at trial {trial} (r = {r}): {error}")
            }
        }
    }
}

impl<E: fmt::Debug + fmt::Display> core::error::Error for OptimizeError<E> {}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome {
    pub best_rank: usize,
    pub best_value: f64,
    pub history: Vec<(usize, f64)>,
}

/// Runs `budget` suggest/evaluate/observe rounds from a fresh default state.
pub fn optimize<E>(
    mut objective: impl FnMut(usize) -> Result<f64, E>,
    r_min: usize,
    r_max: usize,
    budget: usize,
    seed: u64,
) -> Result<OptimizeOutcome, OptimizeError<E>> {
    let state = BOState::new(r_min, r_max, seed).map_err(OptimizeError::Settings)?;
    optimize_from(state, &mut objective, budget)
}

/// [`optimize`] starting from a caller-configured state.
pub fn optimize_from<E>(
    mut state: BOState,
    objective: &mut impl FnMut(usize) -> Result<f64, E>,
    budget: usize,
) -> Result<OptimizeOutcome, OptimizeError<E>> {
    if budget == 0 {
        return Err(OptimizeError::Settings(RankOptError::ZeroBudget));
    }
    for trial in 0..budget {
        let r = suggest(&state).map_err(OptimizeError::Settings)?;
        let value = objective(r).map_err(|error| OptimizeError::Objective { trial, r, error })?;
        observe(&mut state, r, value).map_err(OptimizeError::Settings)?;
    }
    let (best_rank, best_value) = state.best().expect("at least one trial");
    Ok(OptimizeOutcome { best_rank, best_value, history: state.trials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::convert::Infallible;

    fn quad(t: f64) -> impl FnMut(usize) -> Result<f64, Infallible> {
        move |r| Ok((r as f64 - t) * (r as f64 - t))
    }

    #[test]
    fn first_suggestion_deterministic() {
        let s = BOState::new(2, 16, 9).unwrap();
        let a = suggest(&s).unwrap();
        assert_eq!(a, suggest(&s).unwrap());
        assert!((2..=16).contains(&a));
    }

    #[test]
    fn constant_objective() {
        let out = optimize(|_| Ok::<_, Infallible>(1.0), 2, 16, 30, 3).unwrap();
        assert_eq!(out.history.len(), 30);
        assert_eq!(out.best_rank, out.history[0].0);
        let mut s = BOState::new(2, 16, 3).unwrap();
        s.trials = out.history;
        // 30 trials, next index 30 is not an exploration slot.
        assert_eq!(suggest(&s).unwrap(), 2);
    }

    #[test]
    fn quadratic_examples() {
        let mut s = BOState::new(2, 16, 1).unwrap();
        s.startup_count = 5;
        let mut f = quad(7.0);
        let out = optimize_from(s, &mut f, 40).unwrap();
        assert_eq!(out.best_rank, 7);
        assert_eq!(optimize(quad(4.0), 2, 16, 100, 42).unwrap().best_rank, 4);
    }

    #[test]
    fn budget_one() {
        let out = optimize(quad(4.0), 2, 16, 1, 42).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.best_rank, out.history[0].0);
    }

    #[test]
    fn observe_rules() {
        let mut s = BOState::new(2, 16, 0).unwrap();
        observe(&mut s, 3, 2.0).unwrap();
        observe(&mut s, 3, 1.0).unwrap();
        assert_eq!(s.trials.len(), 2);
        assert_eq!(s.best(), Some((3, 1.0)));
        assert!(matches!(observe(&mut s, 17, 0.0), Err(RankOptError::OutOfBounds { .. })));
        assert!(matches!(observe(&mut s, 4, f64::NAN), Err(RankOptError::NonFiniteObjective { .. })));
        assert!(matches!(BOState::new(5, 4, 0), Err(RankOptError::EmptyDomain { .. })));
    }

    #[test]
    fn full_coverage_at_hundred() {
        let out = optimize(quad(4.0), 2, 16, 100, 42).unwrap();
        for r in 2..=16 {
            assert!(out.history.iter().any(|&(t, _)| t == r), "rank {r} never visited");
        }
    }

    #[test]
    fn split_sizes() {
        let trials: Vec<(usize, f64)> = (0..11).map(|i| (2 + i, (i * 7 % 5) as f64)).collect();
        let (g, b) = split_trials(&trials, 0.25);
        assert_eq!(g.len(), 3);
        assert_eq!(b.len(), 8);
    }

    #[test]
    fn density_normalized() {
        let d = parzen_density(&[2, 9, 16], 2, 16);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
