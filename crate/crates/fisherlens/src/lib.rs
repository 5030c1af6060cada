//! Std side of fisherlens: versioned JSON documents, run configuration,
//! parallel drivers for the pipeline stages, rank-search objectives, oracle
//! verification and the toy selective-adaptation experiment.
//!
//! Everything numeric lives in [`fisherlens_core`]; this crate only moves
//! data between files, threads and the command line.

pub mod config;
pub mod experiment;
pub mod io;
pub mod objective;
pub mod parallel;
pub mod stages;
pub mod verify;

pub use fisherlens_core;
