//! File formats, dataset generation, training, evaluation and diagnostics
//! around [`kukan_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod dataset;
pub mod diag;
pub mod error;
pub mod eval;
pub mod train;

pub use error::{HarnessError, Result};
