//! Joint inference of the input measure `μ(α)` and the noise covariance `Γ`.
//!
//! The loss is
//!
//! ```text
//! L(α, Γ; Γ′) = (d_y/2) SW²_{Γ′}(ν, η(Γ) ∗ F#μ(α)) + h(α) + r(Γ)
//! ```
//!
//! estimated each iteration from fresh input and noise draws, a fresh data
//! subsample and fresh slices. In the cut-gradient mode `Γ′` is a detached
//! copy of the current `Γ`, so the weighting contributes no gradient; in the
//! standard mode it is the live `Γ`.

use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::distance::{sliced_w2, EmpiricalMeasure, SliceSet};
use crate::error::{contract, Error, Result};
use crate::measures::{InputMeasure, NoiseCov};
use crate::models::{ForwardModel, Oracle};
use crate::optim::{Adam, HalvingSchedule};
use crate::rng::{self, StreamRng};
use crate::surrogate::{
    run_surrogate_schedule, SurrogateSchedule, ScheduleDriver, SurrogateReport, MlpSurrogate,
    ReplayBuffer, SurrogateTrainer,
};

/// Consecutive rejected steps tolerated before a run is aborted.
pub const MAX_CONSECUTIVE_REJECTIONS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Weighting built from `detach(Γ)`.
    Cut,
    /// Weighting differentiated along with everything else.
    Standard,
}

impl GradientMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Cut => "cut",
            Self::Standard => "standard",
        }
    }
}

impl std::str::FromStr for GradientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cut" => Ok(Self::Cut),
            "standard" => Ok(Self::Standard),
            other => Err(Error::Config(format!(
                "unknown gradient mode `{other}` (expected `cut` or `standard`)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Alpha,
    Gamma,
}

/// `weight · (x − anchor)²` on one stored parameter entry. Scale parameters
/// are stored as logarithms, so anchors for them are logarithms too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    pub group: ParamGroup,
    pub block: String,
    #[serde(default)]
    pub index: usize,
    pub anchor: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Model samples per evaluation (capped at the data size).
    pub n_s: usize,
    /// Slice count.
    pub slices: usize,
    pub gradient_mode: GradientMode,
    #[serde(default)]
    pub penalties: Vec<Penalty>,
    /// Weight of `κ₂(Γ)` in `r(Γ)`.
    #[serde(default)]
    pub epsilon_kappa: f64,
    /// Stored blocks (by name) that keep their initial values.
    #[serde(default)]
    pub frozen: Vec<String>,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_s < 2 {
            return Err(Error::Config(format!("n_s must be at least 2, got {}", self.n_s)));
        }
        if self.slices == 0 {
            return Err(Error::Config("slice count must be at least 1".into()));
        }
        if !(self.epsilon_kappa >= 0.0) {
            return Err(Error::Config("epsilon_kappa must be nonnegative".into()));
        }
        Ok(())
    }

    fn check_frozen(&self, params: &Params) -> Result<()> {
        let names = params.block_names();
        match self.frozen.iter().find(|f| !names.contains(&f.as_str())) {
            Some(f) => Err(Error::Config(format!("cannot freeze unknown block `{f}` (blocks: {names:?})"))),
            None => Ok(()),
        }
    }
}

/// The current `(α, Γ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub alpha: InputMeasure,
    pub gamma: NoiseCov,
}

impl Params {
    /// Stored blocks, `α` first.
    pub fn blocks(&self) -> Vec<Tensor> {
        let mut b = self.alpha.blocks();
        b.extend(self.gamma.blocks());
        b
    }

    pub fn set_blocks(&mut self, blocks: &[Tensor]) -> Result<()> {
        let k = self.alpha.blocks().len();
        if blocks.len() != k + self.gamma.blocks().len() {
            return Err(contract("params", "wrong number of parameter blocks"));
        }
        self.alpha.set_blocks(&blocks[..k])?;
        self.gamma.set_blocks(&blocks[k..])
    }

    /// Names of the stored blocks, `α` first.
    pub fn block_names(&self) -> Vec<&'static str> {
        let mut n = self.alpha.block_names().to_vec();
        n.extend(self.gamma.block_names());
        n
    }

    /// Names of the reported parameters, in natural units.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let k = self.alpha.dim();
        for base in ["m", "sigma"] {
            if k == 1 {
                names.push(base.to_string());
            } else {
                names.extend((0..k).map(|i| format!("{base}{i}")));
            }
        }
        match &self.gamma {
            NoiseCov::ScaledIdentity { .. } => names.push("gamma".into()),
            NoiseCov::WhittleMatern(_) => names.extend(["gamma".into(), "ell".into()]),
            NoiseCov::Cholesky { .. } => names.push("kappa2".into()),
        }
        names
    }

    /// Reported values matching [`names`](Self::names).
    /// Every natural-unit value finite and every scale strictly positive.
    pub fn is_usable(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
            && self.alpha.mean_sigma().1.iter().all(|&s| s > 0.0)
            && self.gamma.weighting().and_then(|w| w.validate()).is_ok()
    }

    pub fn values(&self) -> Vec<f64> {
        let (m, s) = self.alpha.mean_sigma();
        let mut v = m;
        v.extend(s);
        match &self.gamma {
            NoiseCov::ScaledIdentity { log_gamma, .. } => v.push(log_gamma.exp()),
            NoiseCov::WhittleMatern(wm) => v.extend([wm.log_gamma.exp(), wm.log_ell.exp()]),
            NoiseCov::Cholesky { .. } => v.push(condition_number(&self.gamma.covariance())),
        }
        v
    }

    fn find_block(&self, p: &Penalty) -> Result<usize> {
        let na = self.alpha.blocks().len();
        let (names, offset, blocks): (Vec<&str>, usize, Vec<Tensor>) = match p.group {
            ParamGroup::Alpha => (self.alpha.block_names().to_vec(), 0, self.alpha.blocks()),
            ParamGroup::Gamma => (self.gamma.block_names(), na, self.gamma.blocks()),
        };
        let pos = names.iter().position(|n| *n == p.block).ok_or_else(|| {
            Error::Config(format!("no parameter block `{}` in {:?}", p.block, names))
        })?;
        if p.index >= blocks[pos].len() {
            return Err(Error::Config(format!(
                "penalty index {} out of range for block `{}`",
                p.index, p.block
            )));
        }
        Ok(offset + pos)
    }
}

/// `λ_max / λ_min` of a symmetric positive-definite matrix.
pub fn condition_number(c: &Array2<f64>) -> f64 {
    let eig = nalgebra::DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| 0.5 * (c[[i, j]] + c[[j, i]]))
        .symmetric_eigenvalues();
    eig.max() / eig.min()
}

/// Everything random about one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossDraws {
    pub eps_z: Tensor,
    pub eps_noise: Tensor,
    pub data: Tensor,
    pub slices: SliceSet,
}

impl LossDraws {
    pub fn sample(
        params: &Params,
        data: &EmpiricalMeasure,
        cfg: &LossConfig,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let n = cfg.n_s.min(data.len());
        let eps_z = rng::standard_normal(rng, n, params.alpha.dim());
        let eps_noise = rng::standard_normal(rng, n, params.gamma.eps_dim());
        let rows = data.subsample(n, rng)?;
        let slices = SliceSet::draw(cfg.slices, data.dim(), rng::next_seed(rng))?;
        Ok(Self {
            eps_z,
            eps_noise,
            data: rows,
            slices,
        })
    }
}

/// The pieces of one loss evaluation on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    /// `(d_y/2) · SW²`.
    pub fit: Var,
    pub h: Var,
    pub r: Var,
    /// Whether the condition-number gradient was usable.
    pub kappa_reliable: bool,
}

/// `ε · λ_max(Γ)/λ_min(Γ)` and whether its gradient can be trusted. When
/// the extreme eigenvalues are numerically repeated the value is returned
/// as a constant.
pub fn condition_regularizer(tape: &Tape, gamma: &NoiseCov, vars: &[Var], eps: f64) -> Result<(Var, bool)> {
    let cov = gamma.covariance_var(tape, vars)?;
    let eig = tape.sym_eigvals(cov)?;
    let values = tape.value(eig);
    let lo = values[[0, 0]];
    let hi = values[[0, values.ncols() - 1]];
    if !(lo > 0.0) || !hi.is_finite() {
        return Err(Error::Domain(format!("covariance is not positive definite (eigenvalues {lo}..{hi})")));
    }
    let n = values.ncols();
    if n == 1 {
        return Ok((tape.scalar(eps), true));
    }
    let gap = 1e-10 * hi;
    let reliable = values[[0, 1]] - lo >= gap && hi - values[[0, n - 2]] >= gap;
    if !reliable {
        return Ok((tape.scalar(eps * hi / lo), false));
    }
    let max = tape.max(eig)?;
    let min = tape.min(eig)?;
    Ok((tape.scale(tape.div(max, min)?, eps)?, true))
}

/// Build the loss on `tape` for parameter variables `alpha_vars` and
/// `gamma_vars` (one per stored block).
pub fn loss_l(
    tape: &Tape,
    params: &Params,
    alpha_vars: &[Var],
    gamma_vars: &[Var],
    draws: &LossDraws,
    forward: &dyn ForwardModel,
    cfg: &LossConfig,
) -> Result<LossParts> {
    build_loss(tape, params, alpha_vars, gamma_vars, None, draws, forward, cfg)
}

/// Loss value with the weighting held at `weighting` instead of the
/// current `Γ`. At `weighting == params.gamma` its gradient is the cut
/// gradient.
pub fn loss_with_fixed_weighting(
    params: &Params,
    weighting: &NoiseCov,
    draws: &LossDraws,
    forward: &dyn ForwardModel,
    cfg: &LossConfig,
) -> Result<f64> {
    let tape = Tape::new();
    let alpha_vars: Vec<Var> = params.alpha.blocks().into_iter().map(|b| tape.constant(b)).collect();
    let gamma_vars: Vec<Var> = params.gamma.blocks().into_iter().map(|b| tape.constant(b)).collect();
    let parts = build_loss(&tape, params, &alpha_vars, &gamma_vars, Some(weighting), draws, forward, cfg)?;
    tape.item(parts.total)
}

#[allow(clippy::too_many_arguments)]
fn build_loss(
    tape: &Tape,
    params: &Params,
    alpha_vars: &[Var],
    gamma_vars: &[Var],
    fixed_weighting: Option<&NoiseCov>,
    draws: &LossDraws,
    forward: &dyn ForwardModel,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let d_y = params.gamma.dim();
    if forward.output_dim() != d_y || draws.data.ncols() != d_y {
        return Err(Error::DataMismatch(format!(
            "forward model emits {} values, noise has dimension {d_y}, data has {}",
            forward.output_dim(),
            draws.data.ncols()
        )));
    }
    let z = params.alpha.sample_var(tape, alpha_vars, &draws.eps_z)?;
    let y = forward.forward_var(tape, z)?;
    let noise = params.gamma.sample_var(tape, gamma_vars, &draws.eps_noise)?;
    let model = tape.add(y, noise)?;
    let nu = tape.constant(draws.data.clone());
    let weighting = match fixed_weighting {
        Some(g) => {
            let vars: Vec<Var> = g.blocks().into_iter().map(|b| tape.constant(b)).collect();
            g.weight_var(tape, &vars)?
        }
        None => {
            let weight_vars: Vec<Var> = match cfg.gradient_mode {
                GradientMode::Cut => gamma_vars.iter().map(|&v| tape.detach(v)).collect(),
                GradientMode::Standard => gamma_vars.to_vec(),
            };
            params.gamma.weight_var(tape, &weight_vars)?
        }
    };
    let sw = sliced_w2(tape, nu, model, weighting, &draws.slices)?;
    let fit = tape.scale(sw, d_y as f64 / 2.0)?;

    let mut h = tape.scalar(0.0);
    let mut r = tape.scalar(0.0);
    let na = alpha_vars.len();
    for p in &cfg.penalties {
        let block = params.find_block(p)?;
        let var = if block < na {
            alpha_vars[block]
        } else {
            gamma_vars[block - na]
        };
        let (rows, cols) = tape.shape(var);
        let entry = tape.gather(var, vec![p.index], (1, 1))?;
        debug_assert!(p.index < rows * cols);
        let term = tape.scale(tape.square(tape.offset(entry, -p.anchor)?)?, p.weight)?;
        match p.group {
            ParamGroup::Alpha => h = tape.add(h, term)?,
            ParamGroup::Gamma => r = tape.add(r, term)?,
        }
    }
    let mut kappa_reliable = true;
    if cfg.epsilon_kappa > 0.0 {
        let (k, ok) = condition_regularizer(tape, &params.gamma, gamma_vars, cfg.epsilon_kappa)?;
        kappa_reliable = ok;
        r = tape.add(r, k)?;
    }
    let total = tape.add(tape.add(fit, h)?, r)?;
    Ok(LossParts {
        total,
        fit,
        h,
        r,
        kappa_reliable,
    })
}

/// Loss value and gradients with respect to every stored block, `α` first.
pub fn loss_and_grad(
    params: &Params,
    draws: &LossDraws,
    forward: &dyn ForwardModel,
    cfg: &LossConfig,
) -> Result<(f64, Vec<Tensor>, bool)> {
    let tape = Tape::new();
    let alpha_vars: Vec<Var> = params.alpha.blocks().into_iter().map(|b| tape.param(b)).collect();
    let gamma_vars: Vec<Var> = params.gamma.blocks().into_iter().map(|b| tape.param(b)).collect();
    let parts = loss_l(&tape, params, &alpha_vars, &gamma_vars, draws, forward, cfg)?;
    let value = tape.item(parts.total)?;
    let grads = tape.backward(parts.total)?;
    let g = alpha_vars
        .iter()
        .chain(&gamma_vars)
        .map(|&v| grads.wrt(v))
        .collect();
    Ok((value, g, parts.kappa_reliable))
}

/// One row of a convergence trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    /// Parameters after the step, in natural units.
    pub params: Vec<f64>,
    pub wall_ms: f64,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub names: Vec<String>,
    pub records: Vec<TraceRecord>,
}

impl ConvergenceTrace {
    pub fn new(names: Vec<String>) -> Self {
        Self {
            names,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn rejected(&self) -> usize {
        self.records.iter().filter(|r| r.rejected).count()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.records.iter().map(|r| r.params[j]).collect())
    }

    /// Mean over the last `window` records of `|x − x†|/|x†|`.
    pub fn relative_error(&self, name: &str, truth: f64, window: usize) -> Option<f64> {
        let col = self.column(name)?;
        relative_error_tail(&col, truth, window)
    }

    /// `iter,loss,lr,<params>,wall_ms`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,loss,lr");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push_str(",wall_ms\n");
        for r in &self.records {
            out.push_str(&format!("{},{:e},{:e}", r.iter, r.loss, r.lr));
            for p in &r.params {
                out.push_str(&format!(",{p:e}"));
            }
            out.push_str(&format!(",{}\n", r.wall_ms));
        }
        out
    }

    /// Inverse of [`to_csv`](Self::to_csv). Rows with a NaN loss are read
    /// back as rejected.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let parse_err = |pos: Option<&csv::Position>, detail: String| Error::Parse {
            offset: pos.map_or(0, |p| p.byte()),
            detail,
        };
        let header = reader.headers().map_err(|e| parse_err(e.position(), e.to_string()))?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.len() < 4 || cols[..3] != ["iter", "loss", "lr"] || cols[cols.len() - 1] != "wall_ms" {
            return Err(parse_err(None, "expected header `iter,loss,lr,<params>,wall_ms`".into()));
        }
        let names: Vec<String> = cols[3..cols.len() - 1].iter().map(|s| s.to_string()).collect();
        let mut trace = Self::new(names);
        for row in reader.records() {
            let row = row.map_err(|e| parse_err(e.position(), e.to_string()))?;
            let pos = row.position().cloned();
            let num = |i: usize| -> Result<f64> {
                row[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(pos.as_ref(), format!("column `{}`: {e}", cols[i])))
            };
            let iter = row[0]
                .trim()
                .parse::<usize>()
                .map_err(|e| parse_err(pos.as_ref(), format!("column `iter`: {e}")))?;
            let loss = num(1)?;
            let params = (3..cols.len() - 1).map(num).collect::<Result<Vec<_>>>()?;
            trace.records.push(TraceRecord {
                iter,
                loss,
                lr: num(2)?,
                params,
                wall_ms: num(cols.len() - 1)?,
                rejected: loss.is_nan(),
            });
        }
        Ok(trace)
    }
}

/// Mean of `|x − truth|/|truth|` over the last `window` entries.
pub fn relative_error_tail(values: &[f64], truth: f64, window: usize) -> Option<f64> {
    if values.is_empty() || truth == 0.0 {
        return None;
    }
    let w = window.clamp(1, values.len());
    let tail = &values[values.len() - w..];
    Some(tail.iter().map(|x| (x - truth).abs() / truth.abs()).sum::<f64>() / w as f64)
}

/// Optimizer plus the parameters it moves.
#[derive(Debug, Clone)]
pub struct InferenceState {
    pub params: Params,
    pub opt: Adam,
    pub schedule: HalvingSchedule,
    pub iter: usize,
    consecutive_rejections: usize,
}

impl InferenceState {
    pub fn new(params: Params, schedule: HalvingSchedule) -> Self {
        let opt = Adam::for_params(&params.blocks());
        Self {
            params,
            opt,
            schedule,
            iter: 0,
            consecutive_rejections: 0,
        }
    }

    /// One stochastic step. A non-finite loss or gradient, or a step that
    /// would leave some parameter non-finite, leaves the parameters and
    /// optimizer untouched and marks the record rejected.
    pub fn step(
        &mut self,
        data: &EmpiricalMeasure,
        forward: &dyn ForwardModel,
        cfg: &LossConfig,
        rng: &mut StreamRng,
    ) -> Result<TraceRecord> {
        let lr = self.schedule.lr(self.iter);
        let draws = LossDraws::sample(&self.params, data, cfg, rng)?;
        let outcome = match loss_and_grad(&self.params, &draws, forward, cfg) {
            Ok(v) => Some(v),
            Err(Error::Domain(_)) => None,
            Err(e) => return Err(e),
        };
        let accepted = outcome.and_then(|(loss, grads, _)| {
            let finite = loss.is_finite() && grads.iter().all(|g| g.iter().all(|x| x.is_finite()));
            finite.then_some((loss, grads))
        });
        let iter = self.iter;
        self.iter += 1;
        let mut applied = None;
        if let Some((loss, mut grads)) = accepted {
            for (g, name) in grads.iter_mut().zip(self.params.block_names()) {
                if cfg.frozen.iter().any(|f| f == name) {
                    g.fill(0.0);
                }
            }
            let mut blocks = self.params.blocks();
            let mut opt = self.opt.clone();
            opt.step(&mut blocks, &grads, lr)?;
            let mut next = self.params.clone();
            next.set_blocks(&blocks)?;
            // a step that overflows a scale parameter is rejected as a whole
            if next.is_usable() {
                self.opt = opt;
                self.params = next;
                applied = Some(loss);
            }
        }
        let (loss, rejected) = match applied {
            Some(loss) => {
                self.consecutive_rejections = 0;
                (loss, false)
            }
            None => {
                self.consecutive_rejections += 1;
                if self.consecutive_rejections > MAX_CONSECUTIVE_REJECTIONS {
                    return Err(Error::Aborted(format!(
                        "{} consecutive steps were rejected for non-finite losses, gradients or parameters (last at iteration {iter})",
                        self.consecutive_rejections
                    )));
                }
                (f64::NAN, true)
            }
        };
        Ok(TraceRecord {
            iter,
            loss,
            lr,
            params: self.params.values(),
            wall_ms: 0.0,
            rejected,
        })
    }
}

/// Outer-loop settings shared by direct and surrogate runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub iterations: usize,
    pub lr: f64,
    pub halvings: u32,
    pub seed: u64,
    /// Record elapsed wall time; off for bit-reproducible traces.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl RunConfig {
    pub fn schedule(&self) -> HalvingSchedule {
        HalvingSchedule {
            lr0: self.lr,
            halvings: self.halvings,
            total_steps: self.iterations.max(1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: ConvergenceTrace,
    pub params: Params,
    pub surrogate: Option<SurrogateRun>,
}

/// Extras from a surrogate-in-the-loop run.
#[derive(Debug, Clone)]
pub struct SurrogateRun {
    pub net: MlpSurrogate,
    pub buffer: ReplayBuffer,
    pub report: SurrogateReport,
    /// Training steps after which some layer exceeded the bound.
    pub lipschitz_violations: usize,
    pub max_layer_norm: f64,
}

fn elapsed_ms(start: &Instant, on: bool) -> f64 {
    if on {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    }
}

/// Inference loop with a fixed forward model. Iteration `t` draws from
/// stream `t` of the run seed.
pub fn run_inference(
    init: Params,
    data: &EmpiricalMeasure,
    forward: &dyn ForwardModel,
    loss: &LossConfig,
    run: &RunConfig,
) -> Result<RunOutput> {
    loss.validate()?;
    loss.check_frozen(&init)?;
    let mut state = InferenceState::new(init, run.schedule());
    let mut trace = ConvergenceTrace::new(state.params.names());
    let start = Instant::now();
    for t in 0..run.iterations {
        let mut rng = rng::stream(run.seed, t as u64);
        let mut rec = state.step(data, forward, loss, &mut rng)?;
        rec.wall_ms = elapsed_ms(&start, run.record_wall_time);
        trace.records.push(rec);
    }
    Ok(RunOutput {
        trace,
        params: state.params,
        surrogate: None,
    })
}

struct Driver<'a> {
    state: InferenceState,
    data: &'a EmpiricalMeasure,
    loss: &'a LossConfig,
    run: &'a RunConfig,
    trace: ConvergenceTrace,
    start: Instant,
    violations: usize,
    max_norm: f64,
}

impl ScheduleDriver for Driver<'_> {
    fn draw_inputs(&mut self, n: usize, rng: &mut StreamRng) -> Result<(Array2<f64>, Vec<f64>)> {
        let (m, s) = self.state.params.alpha.mean_sigma();
        let alpha = m.into_iter().chain(s).collect();
        Ok((self.state.params.alpha.sample(n, rng)?, alpha))
    }

    fn outer_step(&mut self, t: usize, net: &MlpSurrogate) -> Result<()> {
        let mut rng = rng::stream(self.run.seed, t as u64 - 1);
        let mut rec = self.state.step(self.data, net, self.loss, &mut rng)?;
        rec.wall_ms = elapsed_ms(&self.start, self.run.record_wall_time);
        self.trace.records.push(rec);
        Ok(())
    }

    fn after_train_step(&mut self, net: &MlpSurrogate, _loss: f64) {
        let n = net.max_layer_norm();
        self.max_norm = self.max_norm.max(n);
        if n > net.lipschitz_bound {
            self.violations += 1;
        }
    }
}

/// Inference steps through a surrogate trained concurrently on solver
/// pairs drawn from the current input measure.
pub fn run_surrogate_inference<O: Oracle + ?Sized>(
    init: Params,
    data: &EmpiricalMeasure,
    oracle: &O,
    trainer: &mut SurrogateTrainer,
    schedule: &SurrogateSchedule,
    loss: &LossConfig,
    run: &RunConfig,
) -> Result<RunOutput> {
    loss.validate()?;
    loss.check_frozen(&init)?;
    if oracle.output_dim() != data.dim() {
        return Err(Error::DataMismatch(format!(
            "solver emits {} values but the data has {} columns",
            oracle.output_dim(),
            data.dim()
        )));
    }
    let cfg = SurrogateSchedule {
        outer_steps: run.iterations,
        ..*schedule
    };
    let state = InferenceState::new(init, run.schedule());
    let mut driver = Driver {
        trace: ConvergenceTrace::new(state.params.names()),
        state,
        data,
        loss,
        run,
        start: Instant::now(),
        violations: 0,
        max_norm: 0.0,
    };
    let mut buffer = ReplayBuffer::new();
    let report = run_surrogate_schedule(
        &cfg,
        oracle,
        &mut driver,
        trainer,
        &mut buffer,
        rng::derive_seed(run.seed, 0x5u64),
    )?;
    Ok(RunOutput {
        trace: driver.trace,
        params: driver.state.params,
        surrogate: Some(SurrogateRun {
            net: trainer.net.clone(),
            buffer,
            report,
            lipschitz_violations: driver.violations,
            max_layer_norm: driver.max_norm,
        }),
    })
}

/// One cell of a convergence study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub mode: GradientMode,
    pub n: usize,
    pub gamma_dagger: f64,
    pub mean_rel_err: f64,
    pub std_rel_err: f64,
    pub runs: usize,
    pub failures: usize,
    pub errors: Vec<f64>,
}

impl StudyRow {
    pub fn csv_header() -> &'static str {
        "mode,N,gamma_dagger,mean_rel_err,std_rel_err,runs"
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:e},{:e},{}",
            self.mode.name(),
            self.n,
            self.gamma_dagger,
            self.mean_rel_err,
            self.std_rel_err,
            self.runs
        )
    }
}

/// Run `run_one(mode, n, gamma, repeat)` for every cell and repeat (in
/// parallel) and summarize the returned relative errors. Repeat `r` of a
/// cell should use the same data seed for both modes so the comparison is
/// paired. Failed runs are counted, not fatal.
pub fn convergence_study<F>(
    modes: &[GradientMode],
    ns: &[usize],
    gammas: &[f64],
    repeats: usize,
    run_one: F,
) -> Result<Vec<StudyRow>>
where
    F: Fn(GradientMode, usize, f64, usize) -> Result<f64> + Sync,
{
    if modes.is_empty() || ns.is_empty() || gammas.is_empty() || repeats == 0 {
        return Err(Error::Config("convergence study needs a nonempty grid and repeats".into()));
    }
    let mut jobs = Vec::new();
    for &mode in modes {
        for &n in ns {
            for &g in gammas {
                for r in 0..repeats {
                    jobs.push((mode, n, g, r));
                }
            }
        }
    }
    let results: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(mode, n, g, r)| run_one(mode, n, g, r))
        .collect();
    let mut rows = Vec::new();
    for (cell, chunk) in jobs.chunks(repeats).zip(results.chunks(repeats)) {
        let (mode, n, g, _) = cell[0];
        let errors: Vec<f64> = chunk
            .iter()
            .filter_map(|r| r.as_ref().ok().copied())
            .filter(|e| e.is_finite())
            .collect();
        let k = errors.len();
        let mean = if k > 0 { errors.iter().sum::<f64>() / k as f64 } else { f64::NAN };
        let std = if k > 1 {
            (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
        } else {
            f64::NAN
        };
        rows.push(StudyRow {
            mode,
            n,
            gamma_dagger: g,
            mean_rel_err: mean,
            std_rel_err: std,
            runs: k,
            failures: repeats - k,
            errors,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Darcy1DModel;
    use ndarray::array;

    fn darcy_setup(n: usize) -> (Params, EmpiricalMeasure, Darcy1DModel) {
        let model = Darcy1DModel::new(10.0, 8);
        let truth = Params {
            alpha: InputMeasure::log_normal(0.5, 0.25),
            gamma: NoiseCov::scaled_identity(0.05, 8),
        };
        let mut rng = rng::stream(1, 0);
        let z = truth.alpha.sample(n, &mut rng).unwrap();
        let y = Array2::from_shape_fn((n, 8), |(i, j)| model.solve(z[[i, 0]]).unwrap()[j]);
        let y = y + truth.gamma.sample(n, &mut rng).unwrap();
        (truth, EmpiricalMeasure::new(y).unwrap(), model)
    }

    fn cfg(mode: GradientMode) -> LossConfig {
        LossConfig {
            n_s: 64,
            slices: 10,
            gradient_mode: mode,
            penalties: vec![],
            epsilon_kappa: 0.0,
            frozen: vec![],
        }
    }

    #[test]
    fn modes_share_the_forward_value() {
        let (truth, data, model) = darcy_setup(64);
        let draws = LossDraws::sample(&truth, &data, &cfg(GradientMode::Cut), &mut rng::stream(9, 0)).unwrap();
        let (a, ga, _) = loss_and_grad(&truth, &draws, &model, &cfg(GradientMode::Cut)).unwrap();
        let (b, gb, _) = loss_and_grad(&truth, &draws, &model, &cfg(GradientMode::Standard)).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        assert_eq!(ga[0], gb[0]);
        assert!(ga[2] != gb[2]);
    }

    #[test]
    fn penalty_vanishes_at_anchor() {
        let (mut truth, data, model) = darcy_setup(16);
        truth.gamma = NoiseCov::whittle_matern(2.0, 1.0, 0.5, crate::measures::WmGeometry::line(8));
        let mut c = cfg(GradientMode::Cut);
        c.penalties = vec![
            Penalty { group: ParamGroup::Gamma, block: "log_ell".into(), index: 0, anchor: 0.0, weight: 1.0 / 200.0 },
            Penalty { group: ParamGroup::Gamma, block: "log_gamma".into(), index: 0, anchor: 2f64.ln(), weight: 1.0 / 200.0 },
        ];
        let draws = LossDraws::sample(&truth, &data, &c, &mut rng::stream(2, 0)).unwrap();
        let tape = Tape::new();
        let av: Vec<Var> = truth.alpha.blocks().into_iter().map(|b| tape.param(b)).collect();
        let gv: Vec<Var> = truth.gamma.blocks().into_iter().map(|b| tape.param(b)).collect();
        let parts = loss_l(&tape, &truth, &av, &gv, &draws, &model, &c).unwrap();
        assert_eq!(tape.item(parts.r).unwrap(), 0.0);
        assert_eq!(tape.item(parts.h).unwrap(), 0.0);
    }

    #[test]
    fn condition_number_examples() {
        let tape = Tape::new();
        let g = NoiseCov::cholesky_from_factor(&array![[2.0, 0.0], [0.0, 1.0]]).unwrap();
        let vars: Vec<Var> = g.blocks().into_iter().map(|b| tape.param(b)).collect();
        let (k, ok) = condition_regularizer(&tape, &g, &vars, 1.0).unwrap();
        assert!(ok);
        assert!((tape.item(k).unwrap() - 4.0).abs() < 1e-12);
        let eye = NoiseCov::cholesky_identity(3);
        let vars: Vec<Var> = eye.blocks().into_iter().map(|b| tape.param(b)).collect();
        let (k, ok) = condition_regularizer(&tape, &eye, &vars, 1e-5).unwrap();
        assert!(!ok);
        assert!((tape.item(k).unwrap() - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn zero_learning_rate_keeps_params_and_zero_iterations_keep_init() {
        let (truth, data, model) = darcy_setup(32);
        let run = RunConfig { iterations: 3, lr: 0.0, halvings: 0, seed: 4, record_wall_time: false };
        let out = run_inference(truth.clone(), &data, &model, &cfg(GradientMode::Cut), &run).unwrap();
        assert_eq!(out.params, truth);
        assert_eq!(out.trace.len(), 3);
        let run = RunConfig { iterations: 0, ..run };
        let out = run_inference(truth.clone(), &data, &model, &cfg(GradientMode::Cut), &run).unwrap();
        assert!(out.trace.is_empty());
        assert_eq!(out.params, truth);
    }

    #[test]
    fn trace_csv_header() {
        let (truth, _, _) = darcy_setup(4);
        let t = ConvergenceTrace::new(truth.names());
        assert_eq!(t.to_csv(), "iter,loss,lr,m,sigma,gamma,wall_ms\n");
    }

    #[test]
    fn relative_error_window() {
        assert!((relative_error_tail(&[5.0, 1.1, 0.9], 1.0, 2).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(relative_error_tail(&[], 1.0, 2), None);
    }

    #[test]
    fn trace_csv_reads_back_exactly() {
        let mut t = ConvergenceTrace::new(vec!["m".into(), "gamma".into()]);
        for (i, loss) in [0.1 + 0.2, f64::NAN, 1e-300].into_iter().enumerate() {
            t.records.push(TraceRecord {
                iter: i + 1,
                loss,
                lr: 0.1 / 3.0,
                params: vec![std::f64::consts::PI * i as f64, -1.0 / 7.0],
                wall_ms: 0.0,
                rejected: loss.is_nan(),
            });
        }
        let back = ConvergenceTrace::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back.to_csv(), t.to_csv());
        assert_eq!(back.records[2].params, t.records[2].params);
        assert_eq!(back.rejected(), 1);
        assert!(matches!(ConvergenceTrace::from_csv("a,b\n1,2\n"), Err(Error::Parse { .. })));
    }
}
