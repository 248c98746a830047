//! Adam and the step-halving learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{contract, Result};

/// Learning rate `lr0 · 0.5^k`, where `k` counts how many of the `halvings`
/// equally spaced points `i · total / (halvings + 1)` have been reached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalvingSchedule {
    pub lr0: f64,
    pub halvings: u32,
    pub total_steps: usize,
}

impl HalvingSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            lr0: lr,
            halvings: 0,
            total_steps: 1,
        }
    }

    /// Learning rate for the zero-based step `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let spacing = self.total_steps as f64 / (self.halvings as f64 + 1.0);
        let reached = (1..=self.halvings)
            .filter(|&i| step as f64 >= i as f64 * spacing)
            .count();
        self.lr0 * 0.5f64.powi(reached as i32)
    }
}

/// Adam with per-block first and second moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            steps: 0,
        }
    }

    pub fn for_params(params: &[Tensor]) -> Self {
        let shapes: Vec<_> = params.iter().map(|p| (p.nrows(), p.ncols())).collect();
        Self::new(&shapes)
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(contract(
                "adam_step",
                format!(
                    "{} parameter blocks and {} gradients for an optimizer over {} blocks",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dim() != self.m[i].dim() || g.dim() != self.m[i].dim() {
                return Err(contract(
                    "adam_step",
                    format!("block {i}: shape differs from the optimizer state"),
                ));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ten_halvings_over_two_thousand_steps() {
        let s = HalvingSchedule {
            lr0: 0.1,
            halvings: 10,
            total_steps: 2000,
        };
        assert_eq!(s.lr(0), 0.1);
        assert_eq!(s.lr(1999), 0.1 / 1024.0);
        let mut last = s.lr(0);
        let mut drops = 0;
        for t in 1..2000 {
            let lr = s.lr(t);
            assert!(lr <= last);
            if lr < last {
                drops += 1;
            }
            last = lr;
        }
        assert_eq!(drops, 10);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = vec![array![[1.0, -2.0]]];
        let mut opt = Adam::for_params(&p);
        opt.step(&mut p, &[array![[3.0, -0.5]]], 0.1).unwrap();
        assert!((p[0][[0, 0]] - 0.9).abs() < 1e-7);
        assert!((p[0][[0, 1]] + 1.9).abs() < 1e-7);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let mut p = vec![array![[0.3]]];
        let mut opt = Adam::for_params(&p);
        opt.step(&mut p, &[array![[5.0]]], 0.0).unwrap();
        assert_eq!(p[0][[0, 0]], 0.3);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![array![[4.0, -3.0]]];
        let mut opt = Adam::for_params(&p);
        for _ in 0..2000 {
            let g = p[0].mapv(|x| 2.0 * (x - 1.0));
            opt.step(&mut p, &[g], 0.05).unwrap();
        }
        assert!(p[0].iter().all(|&x| (x - 1.0).abs() < 1e-3));
    }
}
