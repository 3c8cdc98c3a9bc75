//! Partially observable Gaussian process networks: DAGs of sparse
//! variational GP nodes, each optionally observed through its own likelihood.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod kernels;
pub mod likelihoods;
pub mod params;
pub mod svgp;
pub mod training;

#[cfg(test)]
mod testutil;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
