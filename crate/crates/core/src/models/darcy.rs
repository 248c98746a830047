//! Steady 1D Darcy flow `−(z u′)′ = f0` on `(0, 1)` with `u(0) = u(1) = 0`.
//!
//! For a constant permeability `z` the solution is `u(x) = f0 x(1 − x) / (2z)`,
//! observed pointwise on a grid.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{ForwardModel, Oracle};
use crate::autodiff::{Tape, Var};
use crate::error::{contract, Error, Result};
use crate::measures::midpoint_grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Darcy1DModel {
    pub f0: f64,
    pub grid: Vec<f64>,
}

impl Darcy1DModel {
    /// `d_y` observations at the cell midpoints of `(0, 1)`.
    pub fn new(f0: f64, d_y: usize) -> Self {
        Self {
            f0,
            grid: midpoint_grid(d_y),
        }
    }

    pub fn with_grid(f0: f64, grid: Vec<f64>) -> Self {
        Self { f0, grid }
    }

    pub fn d_y(&self) -> usize {
        self.grid.len()
    }

    /// `u(x) · z`, the solution at unit permeability.
    pub fn shape(&self) -> Array1<f64> {
        self.grid.iter().map(|&x| 0.5 * self.f0 * x * (1.0 - x)).collect()
    }

    pub fn solve(&self, z: f64) -> Result<Array1<f64>> {
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::Domain(format!("permeability must be positive, got {z}")));
        }
        Ok(self.shape() / z)
    }
}

impl ForwardModel for Darcy1DModel {
    fn input_dim(&self) -> usize {
        1
    }

    fn output_dim(&self) -> usize {
        self.d_y()
    }

    fn forward_var(&self, tape: &Tape, z: Var) -> Result<Var> {
        let (_, k) = tape.shape(z);
        if k != 1 {
            return Err(contract("darcy_forward", format!("expected n x 1 inputs, got {k} columns")));
        }
        if let Some(bad) = tape.value(z).iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("permeability must be positive, got {bad}")));
        }
        let shape = self.shape();
        let row = tape.constant(Array2::from_shape_vec((1, shape.len()), shape.to_vec()).expect("row"));
        tape.div(row, z)
    }
}

impl Oracle for Darcy1DModel {
    fn input_dim(&self) -> usize {
        1
    }

    fn output_dim(&self) -> usize {
        self.d_y()
    }

    fn evaluate(&self, z: &[f64], _seed: u64) -> Result<Vec<f64>> {
        if z.len() != 1 {
            return Err(contract("darcy_solve", format!("expected one input, got {}", z.len())));
        }
        Ok(self.solve(z[0])?.to_vec())
    }
}
