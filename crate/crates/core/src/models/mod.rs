//! Forward models: closed-form Darcy flow and time-averaged Lorenz-96.

pub mod darcy;
pub mod lorenz;

use ndarray::Array2;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Result};

pub use darcy::Darcy1DModel;
pub use lorenz::{LorenzKind, LorenzOracle, TimeAveraged};

/// A map from inputs to observations that can be evaluated on a tape.
pub trait ForwardModel {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// `z` is `n × input_dim`; the result is `n × output_dim`.
    fn forward_var(&self, tape: &Tape, z: Var) -> Result<Var>;
}

/// A black-box solver: one input vector and a seed (for any internal
/// randomness, such as an initial state) to one output vector.
pub trait Oracle: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn evaluate(&self, z: &[f64], seed: u64) -> Result<Vec<f64>>;
}

/// Evaluate the rows of `zs` in parallel, pair `i` with `seeds[i]`. Results
/// come back in row order and do not depend on scheduling.
pub fn evaluate_batch<O: Oracle + ?Sized>(
    oracle: &O,
    zs: &Array2<f64>,
    seeds: &[u64],
) -> Result<Vec<Result<Vec<f64>>>> {
    if zs.nrows() != seeds.len() {
        return Err(contract(
            "evaluate_batch",
            format!("{} inputs but {} seeds", zs.nrows(), seeds.len()),
        ));
    }
    if zs.ncols() != oracle.input_dim() {
        return Err(contract(
            "evaluate_batch",
            format!("inputs have {} columns, oracle takes {}", zs.ncols(), oracle.input_dim()),
        ));
    }
    let rows: Vec<Vec<f64>> = zs.rows().into_iter().map(|r| r.to_vec()).collect();
    Ok(rows
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(z, &seed)| oracle.evaluate(z, seed))
        .collect())
}
