//! Lipschitz-constrained MLP surrogates and concurrent surrogate learning.
//!
//! The network maps normalized inputs to normalized outputs through affine
//! layers with GELU between them. After every optimizer step each weight
//! matrix is rescaled so that its ∞-operator norm (largest absolute row sum)
//! stays under the configured bound. Training pairs live in an append-only
//! [`ReplayBuffer`] whose uniform distribution is the cumulative empirical
//! measure of solver evaluations.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{gelu, Tape, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::models::{evaluate_batch, ForwardModel, Oracle};
use crate::optim::{Adam, HalvingSchedule};
use crate::rng::{self, StreamRng};

/// Upper bound on the derivative of GELU.
pub const GELU_LIPSCHITZ: f64 = 1.13;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Per-coordinate affine maps applied outside the network proper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_std: Vec<f64>,
}

fn column_stats(x: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let std = x.std_axis(Axis(0), 0.0);
    let std = std
        .iter()
        .map(|&s| if s > 1e-8 * (1.0 + s.abs()) && s.is_finite() { s } else { 1.0 })
        .collect();
    (mean.to_vec(), std)
}

impl Normalization {
    pub fn identity(input_dim: usize, output_dim: usize) -> Self {
        Self {
            in_mean: vec![0.0; input_dim],
            in_std: vec![1.0; input_dim],
            out_mean: vec![0.0; output_dim],
            out_std: vec![1.0; output_dim],
        }
    }

    /// Column means and standard deviations of the buffer contents. Columns
    /// with (near) zero spread keep unit scale.
    pub fn fit(buffer: &ReplayBuffer) -> Result<Self> {
        if buffer.is_empty() {
            return Err(contract("normalization_fit", "buffer is empty"));
        }
        let all: Vec<usize> = (0..buffer.len()).collect();
        let (z, u) = buffer.batch(&all);
        let (in_mean, in_std) = column_stats(&z);
        let (out_mean, out_std) = column_stats(&u);
        Ok(Self {
            in_mean,
            in_std,
            out_mean,
            out_std,
        })
    }

    fn row(v: &[f64]) -> Tensor {
        Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
    }

    pub fn normalize_inputs(&self, z: &Array2<f64>) -> Array2<f64> {
        (z - &Self::row(&self.in_mean)) / &Self::row(&self.in_std)
    }

    pub fn normalize_outputs(&self, u: &Array2<f64>) -> Array2<f64> {
        (u - &Self::row(&self.out_mean)) / &Self::row(&self.out_std)
    }

    pub fn denormalize_outputs(&self, u: &Array2<f64>) -> Array2<f64> {
        u * &Self::row(&self.out_std) + &Self::row(&self.out_mean)
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input_dim: usize,
    pub output_dim: usize,
    pub width: usize,
    /// Number of affine layers.
    pub depth: usize,
    pub lipschitz_bound: f64,
}

impl MlpShape {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            width: 100,
            depth: 5,
            lipschitz_bound: 10.0,
        }
    }
}

/// Weights are stored `out × in`, biases as `1 × out` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSurrogate {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub lipschitz_bound: f64,
    pub normalization: Normalization,
}

/// `max_i Σ_j |W_ij|`.
pub fn inf_norm(w: &Tensor) -> f64 {
    w.rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Rescale any weight matrix whose ∞-norm exceeds the bound back onto it.
pub fn lipschitz_project(net: &mut MlpSurrogate) {
    let bound = net.lipschitz_bound;
    for w in &mut net.weights {
        let n = inf_norm(w);
        if n > bound {
            *w *= bound / n;
            // rounding can leave the row sum an ulp above the bound
            while inf_norm(w) > bound {
                *w *= 1.0 - f64::EPSILON;
            }
        }
    }
}

impl MlpSurrogate {
    /// PyTorch-style uniform initialization `U(−1/√fan_in, 1/√fan_in)`,
    /// projected onto the Lipschitz constraint.
    pub fn new<R: Rng + ?Sized>(shape: MlpShape, rng: &mut R) -> Result<Self> {
        if shape.depth == 0 || shape.width == 0 || shape.input_dim == 0 || shape.output_dim == 0 {
            return Err(contract("mlp_new", format!("degenerate architecture {shape:?}")));
        }
        if !(shape.lipschitz_bound > 0.0) {
            return Err(contract("mlp_new", "Lipschitz bound must be positive"));
        }
        let mut dims = vec![shape.input_dim];
        dims.extend(std::iter::repeat_n(shape.width, shape.depth - 1));
        dims.push(shape.output_dim);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let a = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-a..a)));
            biases.push(Array2::from_shape_fn((1, fan_out), |_| rng.random_range(-a..a)));
        }
        let mut net = Self {
            weights,
            biases,
            lipschitz_bound: shape.lipschitz_bound,
            normalization: Normalization::identity(shape.input_dim, shape.output_dim),
        };
        lipschitz_project(&mut net);
        Ok(net)
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape {
            input_dim: self.input_dim(),
            output_dim: self.output_dim(),
            width: self.weights[0].nrows(),
            depth: self.weights.len(),
            lipschitz_bound: self.lipschitz_bound,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("layers").nrows()
    }

    /// Weights and biases interleaved: `W₀, b₀, W₁, b₁, …`.
    pub fn params(&self) -> Vec<Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.clone(), b.clone()])
            .collect()
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != 2 * self.weights.len() {
            return Err(contract("mlp_set_params", "wrong number of parameter blocks"));
        }
        for (i, chunk) in params.chunks(2).enumerate() {
            if chunk[0].dim() != self.weights[i].dim() || chunk[1].dim() != self.biases[i].dim() {
                return Err(contract("mlp_set_params", format!("layer {i} shape mismatch")));
            }
            self.weights[i].assign(&chunk[0]);
            self.biases[i].assign(&chunk[1]);
        }
        Ok(())
    }

    /// The affine/GELU chain on a tape. `params` are the interleaved
    /// weight and bias variables; input and output are in normalized units.
    pub fn network_var(&self, tape: &Tape, x: Var, params: &[Var]) -> Result<Var> {
        let (_, k) = tape.shape(x);
        if k != self.input_dim() {
            return Err(contract(
                "surrogate_forward",
                format!("input has {k} columns, network takes {}", self.input_dim()),
            ));
        }
        let depth = self.weights.len();
        let mut h = x;
        for (i, pb) in params.chunks(2).enumerate() {
            let wt = tape.transpose(pb[0])?;
            h = tape.add(tape.matmul(h, wt)?, pb[1])?;
            if i + 1 < depth {
                h = tape.gelu(h)?;
            }
        }
        Ok(h)
    }

    fn constant_params(&self, tape: &Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.constant(p)).collect()
    }

    /// Normalize, run the network, denormalize: all on the tape, with the
    /// supplied parameter variables.
    pub fn forward_with(&self, tape: &Tape, z: Var, params: &[Var]) -> Result<Var> {
        let norm = &self.normalization;
        let mean = tape.constant(Normalization::row(&norm.in_mean));
        let inv_std = tape.constant(Normalization::row(&norm.in_std).mapv(|s| 1.0 / s));
        let x = tape.mul(tape.sub(z, mean)?, inv_std)?;
        let y = self.network_var(tape, x, params)?;
        let out_std = tape.constant(Normalization::row(&norm.out_std));
        let out_mean = tape.constant(Normalization::row(&norm.out_mean));
        tape.add(tape.mul(y, out_std)?, out_mean)
    }

    /// The network alone, without normalization.
    pub fn network(&self, x: &Array2<f64>) -> Array2<f64> {
        let depth = self.weights.len();
        let mut h = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.dot(&w.t()) + b;
            if i + 1 < depth {
                h.mapv_inplace(gelu);
            }
        }
        h
    }

    /// Surrogate prediction in physical units for the rows of `z`.
    pub fn predict(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.input_dim() {
            return Err(contract(
                "surrogate_forward",
                format!("input has {} columns, network takes {}", z.ncols(), self.input_dim()),
            ));
        }
        let x = self.normalization.normalize_inputs(z);
        Ok(self.normalization.denormalize_outputs(&self.network(&x)))
    }

    /// Largest ∞-norm over the layers.
    pub fn max_layer_norm(&self) -> f64 {
        self.weights.iter().map(inf_norm).fold(0.0, f64::max)
    }

    /// Write `manifest.json` and `weights.bin` (little-endian f64, layers
    /// in order, weight then bias) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut bytes = Vec::new();
        let mut arrays = Vec::new();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            for (name, a) in [(format!("w{i}"), w), (format!("b{i}"), b)] {
                arrays.push(ArrayEntry {
                    name,
                    shape: [a.nrows(), a.ncols()],
                });
                for v in a.iter() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            lipschitz_bound: self.lipschitz_bound,
            arrays,
            normalization: self.normalization.clone(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        };
        fs::write(dir.join("weights.bin"), &bytes)?;
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: manifest.format_version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let bytes = fs::read(dir.join("weights.bin"))?;
        if hex::encode(Sha256::digest(&bytes)) != manifest.sha256 {
            return Err(Error::Integrity("checkpoint weights do not match their digest".into()));
        }
        let expected: usize = manifest.arrays.iter().map(|a| a.shape[0] * a.shape[1] * 8).sum();
        if expected != bytes.len() || manifest.arrays.len() % 2 != 0 || manifest.arrays.is_empty() {
            return Err(Error::Integrity(format!(
                "manifest describes {expected} bytes in {} arrays, file has {}",
                manifest.arrays.len(),
                bytes.len()
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::new();
        for a in &manifest.arrays {
            let n = a.shape[0] * a.shape[1];
            let vals: Vec<f64> = bytes[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += 8 * n;
            tensors.push(Array2::from_shape_vec((a.shape[0], a.shape[1]), vals).expect("shape"));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in tensors.chunks(2) {
            weights.push(pair[0].clone());
            biases.push(pair[1].clone());
        }
        Ok(Self {
            weights,
            biases,
            lipschitz_bound: manifest.lipschitz_bound,
            normalization: manifest.normalization,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    lipschitz_bound: f64,
    arrays: Vec<ArrayEntry>,
    normalization: Normalization,
    sha256: String,
}

impl ForwardModel for MlpSurrogate {
    fn input_dim(&self) -> usize {
        MlpSurrogate::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        MlpSurrogate::output_dim(self)
    }

    fn forward_var(&self, tape: &Tape, z: Var) -> Result<Var> {
        let params = self.constant_params(tape);
        self.forward_with(tape, z, &params)
    }
}

/// One solver evaluation with its provenance: the outer step at which the
/// input was drawn (0 for pretraining) and the input-measure parameters it
/// was drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub z: Vec<f64>,
    pub output: Vec<f64>,
    pub step: usize,
    pub alpha: Vec<f64>,
}

/// Append-only store of training pairs.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    pairs: Vec<Pair>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn push(&mut self, pair: Pair) -> Result<()> {
        if let Some(first) = self.pairs.first() {
            if first.z.len() != pair.z.len() || first.output.len() != pair.output.len() {
                return Err(contract("replay_push", "pair dimensions differ from the buffer"));
            }
        }
        self.pairs.push(pair);
        Ok(())
    }

    /// Inputs and outputs of the given pairs as matrices.
    pub fn batch(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let dz = self.pairs[0].z.len();
        let du = self.pairs[0].output.len();
        let z = Array2::from_shape_fn((idx.len(), dz), |(i, j)| self.pairs[idx[i]].z[j]);
        let u = Array2::from_shape_fn((idx.len(), du), |(i, j)| self.pairs[idx[i]].output[j]);
        (z, u)
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.pairs.len())).collect()
    }
}

/// Mean over the batch of `‖F^φ(z) − u‖²/d_u` in normalized output units.
pub fn surrogate_loss(net: &MlpSurrogate, tape: &Tape, params: &[Var], z: &Array2<f64>, u: &Array2<f64>) -> Result<Var> {
    let x = tape.constant(net.normalization.normalize_inputs(z));
    let target = tape.constant(net.normalization.normalize_outputs(u));
    let pred = net.network_var(tape, x, params)?;
    tape.mean(tape.square(tape.sub(pred, target)?)?)
}

/// One Adam step on a uniformly drawn batch, then the Lipschitz projection.
/// Returns the batch loss before the update.
pub fn train_step<R: Rng + ?Sized>(
    net: &mut MlpSurrogate,
    buffer: &ReplayBuffer,
    batch: usize,
    opt: &mut Adam,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    if buffer.is_empty() {
        return Err(contract("train_step", "replay buffer is empty"));
    }
    if batch == 0 {
        return Err(contract("train_step", "batch size must be positive"));
    }
    let idx = buffer.sample_indices(batch, rng);
    let (z, u) = buffer.batch(&idx);
    let tape = Tape::new();
    let mut params = net.params();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = surrogate_loss(net, &tape, &vars, &z, &u)?;
    let value = tape.item(loss)?;
    let grads = tape.backward(loss)?;
    let g: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    if g.iter().any(|t| t.iter().any(|x| !x.is_finite())) {
        return Err(Error::Domain("non-finite surrogate gradient".into()));
    }
    opt.step(&mut params, &g, lr)?;
    net.set_params(&params)?;
    lipschitz_project(net);
    Ok(value)
}

/// Network, optimizer state and learning-rate schedule, stepped together.
#[derive(Debug, Clone)]
pub struct SurrogateTrainer {
    pub net: MlpSurrogate,
    pub opt: Adam,
    pub schedule: HalvingSchedule,
    pub batch: usize,
    steps: usize,
}

impl SurrogateTrainer {
    pub fn new(net: MlpSurrogate, schedule: HalvingSchedule, batch: usize) -> Self {
        let opt = Adam::for_params(&net.params());
        Self {
            net,
            opt,
            schedule,
            batch,
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer, rng: &mut R) -> Result<f64> {
        let lr = self.schedule.lr(self.steps);
        let loss = train_step(&mut self.net, buffer, self.batch, &mut self.opt, lr, rng)?;
        self.steps += 1;
        Ok(loss)
    }
}

/// Counts for the concurrent schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSchedule {
    pub t_pre: usize,
    pub t_inner: usize,
    /// Pairs are acquired at outer steps `t < t_a`.
    pub t_a: usize,
    pub n_pre: usize,
    pub batch: usize,
    /// Outer steps `T`.
    pub outer_steps: usize,
    /// Acquired inputs are evaluated in groups of this size (1 = immediately).
    pub acquisition_batch: usize,
}

/// The inference side of the concurrent schedule.
pub trait ScheduleDriver {
    /// Draw `n` inputs from the current `μ(α_t)`, with the flattened `α_t`.
    fn draw_inputs(&mut self, n: usize, rng: &mut StreamRng) -> Result<(Array2<f64>, Vec<f64>)>;

    /// One update of `(α, Γ)` with the surrogate standing in for the solver.
    fn outer_step(&mut self, t: usize, net: &MlpSurrogate) -> Result<()>;

    /// Called after every surrogate training step.
    fn after_train_step(&mut self, _net: &MlpSurrogate, _loss: f64) {}
}

/// What happened during a concurrent run.
#[derive(Debug, Clone, Default)]
pub struct SurrogateReport {
    pub pretrain_losses: Vec<f64>,
    /// Mean inner-loop loss per outer step.
    pub inner_losses: Vec<f64>,
    /// Buffer size after each outer step.
    pub buffer_sizes: Vec<usize>,
    /// Acquisitions dropped because the solver diverged.
    pub dropped: usize,
}

fn acquire<O: Oracle + ?Sized>(
    oracle: &O,
    buffer: &mut ReplayBuffer,
    pending: &mut Vec<(Vec<f64>, usize, Vec<f64>)>,
    seed: u64,
    report: &mut SurrogateReport,
) -> Result<()> {
    if pending.is_empty() {
        return Ok(());
    }
    let dz = pending[0].0.len();
    let zs = Array2::from_shape_fn((pending.len(), dz), |(i, j)| pending[i].0[j]);
    let seeds: Vec<u64> = (0..pending.len() as u64)
        .map(|i| rng::derive_seed(seed, i))
        .collect();
    let results = evaluate_batch(oracle, &zs, &seeds)?;
    for ((z, step, alpha), res) in pending.drain(..).zip(results) {
        match res {
            Ok(output) => buffer.push(Pair {
                z,
                output,
                step,
                alpha,
            })?,
            Err(Error::IntegrationDiverged { .. }) => report.dropped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Pretrain on `n_pre` pairs from `μ(α₀)`, then alternate inference steps,
/// acquisitions (while `t < t_a`) and `t_inner` warm-started surrogate steps.
/// Normalization constants are fitted on the pretraining pairs and frozen.
pub fn run_surrogate_schedule<O: Oracle + ?Sized, D: ScheduleDriver>(
    cfg: &SurrogateSchedule,
    oracle: &O,
    driver: &mut D,
    trainer: &mut SurrogateTrainer,
    buffer: &mut ReplayBuffer,
    seed: u64,
) -> Result<SurrogateReport> {
    if cfg.n_pre == 0 || cfg.batch == 0 || cfg.acquisition_batch == 0 {
        return Err(contract("surrogate_schedule", "n_pre, batch and acquisition_batch must be positive"));
    }
    let mut report = SurrogateReport::default();
    let mut draw_rng = rng::stream(seed, 1);
    let mut train_rng = rng::stream(seed, 2);
    let mut acq_counter = 0u64;
    let acq_seed = rng::derive_seed(seed, 3);

    let (z0, alpha0) = driver.draw_inputs(cfg.n_pre, &mut draw_rng)?;
    let mut pending: Vec<_> = z0.rows().into_iter().map(|r| (r.to_vec(), 0, alpha0.clone())).collect();
    acquire(oracle, buffer, &mut pending, rng::derive_seed(acq_seed, acq_counter), &mut report)?;
    acq_counter += 1;
    if buffer.is_empty() {
        return Err(Error::Aborted("every pretraining evaluation diverged".into()));
    }
    trainer.net.normalization = Normalization::fit(buffer)?;
    for _ in 0..cfg.t_pre {
        let loss = trainer.step(buffer, &mut train_rng)?;
        report.pretrain_losses.push(loss);
        driver.after_train_step(&trainer.net, loss);
    }

    for t in 1..=cfg.outer_steps {
        driver.outer_step(t, &trainer.net)?;
        if t < cfg.t_a {
            let (z, alpha) = driver.draw_inputs(1, &mut draw_rng)?;
            pending.push((z.row(0).to_vec(), t, alpha));
            if pending.len() >= cfg.acquisition_batch || t + 1 >= cfg.t_a {
                acquire(oracle, buffer, &mut pending, rng::derive_seed(acq_seed, acq_counter), &mut report)?;
                acq_counter += 1;
            }
        }
        let mut total = 0.0;
        for _ in 0..cfg.t_inner {
            let loss = trainer.step(buffer, &mut train_rng)?;
            total += loss;
            driver.after_train_step(&trainer.net, loss);
        }
        if cfg.t_inner > 0 {
            report.inner_losses.push(total / cfg.t_inner as f64);
        }
        report.buffer_sizes.push(buffer.len());
    }
    Ok(report)
}

/// Root-mean-square error of the surrogate against reference outputs,
/// over all entries.
pub fn rmse(net: &MlpSurrogate, z: &Array2<f64>, reference: &Array2<f64>) -> Result<f64> {
    let pred = net.predict(z)?;
    if pred.dim() != reference.dim() {
        return Err(contract("rmse", "reference has the wrong shape"));
    }
    let diff = pred - reference;
    Ok(diff.mapv(|v| v * v).mean().unwrap_or(0.0).sqrt())
}

/// Per-coordinate standard deviations averaged in quadrature:
/// `sqrt(mean_j Var(y_j))`.
pub fn observation_scale(y: &Array2<f64>) -> f64 {
    let var: Array1<f64> = y.var_axis(Axis(0), 0.0);
    var.mean().unwrap_or(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn tiny(input: usize, output: usize, width: usize, depth: usize) -> MlpSurrogate {
        let shape = MlpShape {
            input_dim: input,
            output_dim: output,
            width,
            depth,
            lipschitz_bound: 10.0,
        };
        MlpSurrogate::new(shape, &mut StreamRng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let mut net = tiny(2, 3, 4, 3);
        for w in &mut net.weights {
            w.fill(0.0);
        }
        net.biases[2] = array![[1.0, -2.0, 0.5]];
        let out = net.predict(&array![[3.0, 4.0], [-1.0, 7.0]]).unwrap();
        for r in out.rows() {
            assert_eq!(r.to_vec(), vec![1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn single_layer_is_affine() {
        let mut net = tiny(2, 2, 5, 1);
        net.weights[0] = array![[1.0, 2.0], [-3.0, 0.5]];
        net.biases[0] = array![[0.1, 0.2]];
        let out = net.predict(&array![[1.0, 1.0]]).unwrap();
        assert!((out[[0, 0]] - 3.1).abs() < 1e-15);
        assert!((out[[0, 1]] + 2.3).abs() < 1e-15);
    }

    #[test]
    fn projection_examples() {
        let mut net = tiny(2, 2, 5, 1);
        net.weights[0] = array![[1.0, 2.0], [-4.0, 1.0]];
        lipschitz_project(&mut net);
        assert_eq!(net.weights[0], array![[1.0, 2.0], [-4.0, 1.0]]);
        net.weights[0] = array![[12.0, -8.0], [2.0, 2.0]];
        lipschitz_project(&mut net);
        assert_eq!(net.weights[0], array![[6.0, -4.0], [1.0, 1.0]]);
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let mut net = tiny(3, 2, 8, 3);
        net.normalization = Normalization {
            in_mean: vec![0.1, 0.2, 0.3],
            in_std: vec![2.0, 0.5, 1.0],
            out_mean: vec![-1.0, 1.0],
            out_std: vec![3.0, 0.1],
        };
        let z = array![[0.3, -1.0, 2.0], [1.0, 1.0, 1.0]];
        let tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = net.forward_var(&tape, zv).unwrap();
        let plain = net.predict(&z).unwrap();
        let diff = (&*tape.value(out) - &plain).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn memorizes_a_single_pair() {
        let mut buffer = ReplayBuffer::new();
        buffer
            .push(Pair {
                z: vec![0.5],
                output: vec![1.0, -2.0],
                step: 0,
                alpha: vec![],
            })
            .unwrap();
        let mut trainer = SurrogateTrainer::new(tiny(1, 2, 16, 3), HalvingSchedule::constant(1e-2), 8);
        let mut rng = StreamRng::seed_from_u64(3);
        let mut last = f64::INFINITY;
        for _ in 0..1500 {
            last = trainer.step(&buffer, &mut rng).unwrap();
            assert!(last >= 0.0);
            assert!(trainer.net.max_layer_norm() <= 10.0);
        }
        let pred = trainer.net.predict(&array![[0.5]]).unwrap();
        let resid = (pred[[0, 0]] - 1.0).powi(2) + (pred[[0, 1]] + 2.0).powi(2);
        assert!(resid < 1e-4, "residual {resid}, last loss {last}");
    }

    #[test]
    fn empty_buffer_is_rejected() {
        let mut net = tiny(1, 1, 4, 2);
        let mut opt = Adam::for_params(&net.params());
        let err = train_step(&mut net, &ReplayBuffer::new(), 4, &mut opt, 1e-3, &mut StreamRng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::Contract { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = tiny(2, 3, 5, 3);
        net.save(dir.path()).unwrap();
        let back = MlpSurrogate::load(dir.path()).unwrap();
        assert_eq!(net, back);
        let mut bytes = fs::read(dir.path().join("weights.bin")).unwrap();
        bytes[0] ^= 1;
        fs::write(dir.path().join("weights.bin"), bytes).unwrap();
        assert!(matches!(MlpSurrogate::load(dir.path()), Err(Error::Integrity(_))));
    }
}
