//! Bayesian inference of across-trait correlation under the phylogenetic
//! multivariate probit model.

pub mod benchmark;
pub mod bps;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod hmc;
pub mod phylo;
pub mod posterior;
pub mod split;
pub mod tmvn;
pub mod traits;

pub use error::{Error, Result};
