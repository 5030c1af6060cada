//! Fisher-information-aware sparse layer selection for routed low-rank adapters.
//!
//! Everything in this crate is pure computation over in-memory values and
//! builds without `std` (an allocator is required). File IO, the command line
//! front end and thread-level parallelism live in the `fisherlens` crate.
//!
//! Pipeline overview:
//!
//! 1. [`toynet`] hosts a small residual transformer-like network whose
//!    attention heads and FFN neurons carry scalar gates, plus routed
//!    low-rank adapters (one shared down-projection, several experts).
//! 2. [`scores`] turns gate gradients into per-unit Fisher scores (adapted
//!    model, task data) and per-component Taylor costs (base model,
//!    pretraining data).
//! 3. [`masksolve`] picks a binary mask per layer under a Taylor budget and
//!    improves it with one-for-one swaps.
//! 4. [`masktune`] relaxes binary masks into continuous values with a
//!    closed-form least-squares reconstruction.
//! 5. [`ranking`] converts continuous masks into layer importance scores.
//! 6. [`rankopt`] searches the adapter rank with a Parzen-estimator optimizer.
//!
//! [`oracle`] holds brute-force checkers that share no code with the solvers.
#![no_std]
// `!(x > 0.0)` is the NaN-rejecting form used in validation; index loops
// mirror the triangular-solve and swap formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod files;
pub mod linalg;
pub mod masksolve;
pub mod masktune;
pub mod oracle;
pub mod ranking;
pub mod rankopt;
pub mod scores;
pub mod seed;
pub mod toynet;
pub mod types;

pub use types::{
    resolve_budget, validate_scores, Budget, Component, ContinuousMask, LayerComponentScores,
    LayerImportance, MaskSolution, ScoreError,
};
