//! Fast self-checks: gradients against finite differences, transport
//! against brute force, the weighting scaling identity, RK4 order, the
//! Lipschitz projection and the Darcy closed form.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};

use crate::autodiff::{Tape, Tensor, Var};
use crate::distance::{self, SliceSet, WeightingOperator};
use crate::inference::{
    condition_regularizer, loss_and_grad, loss_with_fixed_weighting, GradientMode, LossConfig, LossDraws,
    ParamGroup, Params, Penalty,
};
use crate::measures::{InputMeasure, NoiseCov, WmGeometry};
use crate::models::lorenz::{rk4_trajectory, OdeSystem};
use crate::models::Darcy1DModel;
use crate::rng::{self, StreamRng};
use crate::surrogate::{inf_norm, lipschitz_project, surrogate_loss, MlpShape, MlpSurrogate, GELU_LIPSCHITZ};

/// Tolerance for gradient checks (relative to the largest component).
pub const GRADIENT_TOL: f64 = 1e-4;

pub struct Check {
    pub name: &'static str,
    pub category: &'static str,
    run: fn() -> std::result::Result<String, String>,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub category: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed_ms: f64,
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a − b| / max(max |b|, 1e-12)`.
pub fn max_relative_difference(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn flatten(blocks: &[Tensor]) -> Vec<f64> {
    blocks.iter().flat_map(|b| b.iter().copied()).collect()
}

fn unflatten(template: &[Tensor], flat: &[f64]) -> Vec<Tensor> {
    let mut at = 0;
    template
        .iter()
        .map(|b| {
            let n = b.len();
            let t = Array2::from_shape_vec(b.dim(), flat[at..at + n].to_vec()).expect("shape");
            at += n;
            t
        })
        .collect()
}

/// Relative error between the tape gradient of the loss and central
/// differences, for fixed draws. In cut mode the differences are taken with
/// the weighting held at the current `Γ`.
pub fn loss_gradient_error(
    params: &Params,
    draws: &LossDraws,
    forward: &dyn crate::models::ForwardModel,
    cfg: &LossConfig,
) -> crate::Result<f64> {
    let (_, grads, _) = loss_and_grad(params, draws, forward, cfg)?;
    let template = params.blocks();
    let x = flatten(&template);
    let mut f = |v: &[f64]| {
        let mut p = params.clone();
        p.set_blocks(&unflatten(&template, v)).expect("blocks");
        match cfg.gradient_mode {
            GradientMode::Standard => loss_and_grad(&p, draws, forward, cfg).map(|r| r.0),
            GradientMode::Cut => loss_with_fixed_weighting(&p, &params.gamma, draws, forward, cfg),
        }
        .unwrap_or(f64::NAN)
    };
    let fd = central_difference(&mut f, &x, 1e-5);
    Ok(max_relative_difference(&flatten(&grads), &fd))
}

fn darcy_instance(seed: u64, noise: NoiseCov, mode: GradientMode) -> (Params, LossDraws, Darcy1DModel, LossConfig) {
    let mut r = rng::stream(seed, 0);
    let d = noise.dim();
    let model = Darcy1DModel::new(10.0, d);
    let params = Params {
        alpha: InputMeasure::log_normal(r.random_range(0.0..1.0), r.random_range(0.2..0.6)),
        gamma: noise,
    };
    let data = (params.alpha.sample(24, &mut r).unwrap().mapv(|z| 1.0 / z) * 0.5)
        .dot(&Array2::ones((1, d)))
        + rng::standard_normal(&mut r, 24, d) * 0.1;
    let cfg = LossConfig {
        n_s: 24,
        slices: 6,
        gradient_mode: mode,
        penalties: vec![],
        epsilon_kappa: 0.0,
        frozen: vec![],
    };
    let measure = distance::EmpiricalMeasure::new(data).unwrap();
    let draws = LossDraws::sample(&params, &measure, &cfg, &mut r).unwrap();
    (params, draws, model, cfg)
}

fn gradient_verdict(worst: f64) -> std::result::Result<String, String> {
    if worst < GRADIENT_TOL {
        Ok(format!("10 instances, max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e} exceeds {GRADIENT_TOL:e}"))
    }
}

fn random_wm_or_identity(seed: u64, d: usize) -> NoiseCov {
    let mut r = rng::stream(seed, 7);
    if seed % 2 == 0 {
        NoiseCov::scaled_identity(r.random_range(0.05..0.3), d)
    } else {
        NoiseCov::whittle_matern(r.random_range(0.1..0.5), r.random_range(0.1..0.5), 0.5, WmGeometry::line(d))
    }
}

/// The bare fit term: sliced W2 between data and reparameterized samples,
/// differentiated through both the samples and the weighting.
fn check_sliced_w2_gradient() -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let (p, draws, model, cfg) = darcy_instance(seed, random_wm_or_identity(seed, 6), GradientMode::Standard);
        worst = worst.max(loss_gradient_error(&p, &draws, &model, &cfg).map_err(|e| e.to_string())?);
    }
    gradient_verdict(worst)
}

/// `z ↦ z A`.
struct LinearModel {
    a: Array2<f64>,
}

impl crate::models::ForwardModel for LinearModel {
    fn input_dim(&self) -> usize {
        self.a.nrows()
    }
    fn output_dim(&self) -> usize {
        self.a.ncols()
    }
    fn forward_var(&self, tape: &Tape, z: Var) -> crate::Result<Var> {
        tape.matmul(z, tape.constant(self.a.clone()))
    }
}

fn penalty(group: ParamGroup, block: &str, index: usize, anchor: f64, weight: f64) -> Penalty {
    Penalty {
        group,
        block: block.into(),
        index,
        anchor,
        weight,
    }
}

/// The full loss with penalties: Darcy with Whittle–Matérn or scaled
/// identity noise on even seeds, a linear model with Gaussian inputs and
/// Cholesky noise plus the condition regularizer on odd seeds.
fn check_loss_gradients(mode: GradientMode) -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let e = if seed % 2 == 0 {
            let (p, draws, model, mut cfg) = darcy_instance(seed, random_wm_or_identity(seed / 2, 6), mode);
            cfg.penalties = vec![
                penalty(ParamGroup::Alpha, "m", 0, 0.3, 0.5),
                penalty(ParamGroup::Gamma, "log_gamma", 0, -1.0, 0.2),
            ];
            loss_gradient_error(&p, &draws, &model, &cfg)
        } else {
            let mut r = rng::stream(seed, 3);
            let (k, d) = (2, 4);
            let model = LinearModel {
                a: rng::standard_normal(&mut r, k, d),
            };
            let params = Params {
                alpha: InputMeasure::gaussian(&[r.random_range(-1.0..1.0), 0.5], &[0.7, r.random_range(0.3..1.0)]),
                gamma: random_cholesky(d, seed),
            };
            let data = rng::standard_normal(&mut r, 30, d) * 1.5;
            let cfg = LossConfig {
                n_s: 30,
                slices: 8,
                gradient_mode: mode,
                penalties: vec![
                    penalty(ParamGroup::Alpha, "m", 1, 1.0, 0.1),
                    penalty(ParamGroup::Alpha, "log_sigma", 0, 0.0, 0.3),
                    penalty(ParamGroup::Gamma, "log_diag", 2, 0.0, 0.1),
                ],
                epsilon_kappa: 0.1,
                frozen: vec![],
            };
            let measure = distance::EmpiricalMeasure::new(data).unwrap();
            let draws = LossDraws::sample(&params, &measure, &cfg, &mut r).map_err(|e| e.to_string())?;
            loss_gradient_error(&params, &draws, &model, &cfg)
        };
        worst = worst.max(e.map_err(|e| e.to_string())?);
    }
    gradient_verdict(worst)
}

fn check_mlp_gradient() -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut r = StreamRng::seed_from_u64(seed);
        let shape = MlpShape {
            input_dim: 2,
            output_dim: 3,
            width: 5,
            depth: 2,
            lipschitz_bound: 10.0,
        };
        let net = MlpSurrogate::new(shape, &mut r).unwrap();
        let z = rng::standard_normal(&mut r, 4, 2);
        let u = rng::standard_normal(&mut r, 4, 3);
        let template = net.params();
        let value = |flat: &[f64]| {
            let tape = Tape::new();
            let vars: Vec<_> = unflatten(&template, flat).into_iter().map(|t| tape.param(t)).collect();
            let l = surrogate_loss(&net, &tape, &vars, &z, &u).unwrap();
            let v = tape.item(l).unwrap();
            let g = tape.backward(l).unwrap();
            (v, flatten(&vars.iter().map(|&v| g.wrt(v)).collect::<Vec<_>>()))
        };
        let x = flatten(&template);
        let (_, ad) = value(&x);
        let fd = central_difference(&mut |p| value(p).0, &x, 1e-5);
        worst = worst.max(max_relative_difference(&ad, &fd));
    }
    gradient_verdict(worst)
}

/// Random SPD `Γ = L Lᵀ` as Cholesky parameters.
pub fn random_cholesky(d: usize, seed: u64) -> NoiseCov {
    let mut r = rng::stream(seed, 11);
    let mut l = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..i {
            l[[i, j]] = r.random_range(-0.5..0.5);
        }
        l[[i, i]] = r.random_range(0.5..2.0);
    }
    NoiseCov::cholesky_from_factor(&l).expect("positive diagonal")
}

fn check_condition_gradient() -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let g = random_cholesky(5, seed);
        let template = g.blocks();
        let eval = |flat: &[f64]| -> (f64, Vec<f64>) {
            let mut c = g.clone();
            c.set_blocks(&unflatten(&template, flat)).unwrap();
            let tape = Tape::new();
            let vars: Vec<_> = c.blocks().into_iter().map(|b| tape.param(b)).collect();
            let (k, _) = condition_regularizer(&tape, &c, &vars, 1.0).unwrap();
            let v = tape.item(k).unwrap();
            let gr = tape.backward(k).unwrap();
            (v, flatten(&vars.iter().map(|&v| gr.wrt(v)).collect::<Vec<_>>()))
        };
        let x = flatten(&template);
        let (_, ad) = eval(&x);
        let fd = central_difference(&mut |p| eval(p).0, &x, 1e-6);
        worst = worst.max(max_relative_difference(&ad, &fd));
    }
    gradient_verdict(worst)
}

fn check_ot_oracle() -> std::result::Result<String, String> {
    let mut r = rng::stream(5, 0);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = r.random_range(1..=8);
        let a: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let fast = distance::wasserstein2_1d(&a, &b).map_err(|e| e.to_string())?;
        let col = |v: &[f64]| Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap();
        let exact = distance::w2_exact_small(&col(&a), &col(&b)).map_err(|e| e.to_string())?;
        worst = worst.max((fast - exact).abs());
    }
    if worst < 1e-10 {
        Ok(format!("200 instances, max difference {worst:.1e}"))
    } else {
        Err(format!("max difference {worst:.1e}"))
    }
}

fn check_scaling() -> std::result::Result<String, String> {
    let mut r = rng::stream(6, 0);
    let nu = rng::standard_normal(&mut r, 40, 5);
    let mu = rng::standard_normal(&mut r, 40, 5) * 1.5;
    let slices = SliceSet::draw(20, 5, 3).map_err(|e| e.to_string())?;
    let base = distance::sliced_w2_value(&nu, &mu, &WeightingOperator::Identity, &slices).map_err(|e| e.to_string())?;
    for c in [0.5, 2.0, 10.0] {
        let w = WeightingOperator::ScaledIdentity { gamma: c };
        let v = distance::sliced_w2_value(&nu, &mu, &w, &slices).map_err(|e| e.to_string())?;
        if (v - base / (c * c)).abs() > 1e-12 * base.max(1.0) {
            return Err(format!("c = {c}: {v} vs {}", base / (c * c)));
        }
    }
    Ok("c in {0.5, 2, 10}".into())
}

struct Oscillator;

impl OdeSystem for Oscillator {
    fn dim(&self) -> usize {
        2
    }
    fn rhs(&self, s: &[f64], ds: &mut [f64]) {
        ds[0] = s[1];
        ds[1] = -s[0];
    }
}

fn check_rk4_order() -> std::result::Result<String, String> {
    let err = |dt: f64| {
        let traj = rk4_trajectory(&Oscillator, &[1.0, 0.0], 2.0, dt).unwrap();
        let last = traj.row(traj.nrows() - 1);
        ((last[0] - 2f64.cos()).powi(2) + (last[1] + 2f64.sin()).powi(2)).sqrt()
    };
    let (e1, e2) = (err(0.1), err(0.05));
    let order = (e1 / e2).log2();
    if (3.8..4.2).contains(&order) {
        Ok(format!("observed order {order:.3}"))
    } else {
        Err(format!("observed order {order:.3}"))
    }
}

fn check_lipschitz() -> std::result::Result<String, String> {
    let mut r = StreamRng::seed_from_u64(8);
    let shape = MlpShape {
        input_dim: 3,
        output_dim: 2,
        width: 16,
        depth: 3,
        lipschitz_bound: 10.0,
    };
    let mut net = MlpSurrogate::new(shape, &mut r).unwrap();
    for w in &mut net.weights {
        w.mapv_inplace(|v| v * 40.0);
    }
    lipschitz_project(&mut net);
    if let Some(bad) = net.weights.iter().map(inf_norm).find(|&n| n > 10.0) {
        return Err(format!("layer norm {bad} after projection"));
    }
    let bound = (10.0 * GELU_LIPSCHITZ).powi(3);
    for _ in 0..50 {
        let a = rng::standard_normal(&mut r, 1, 3);
        let b = &a + &(rng::standard_normal(&mut r, 1, 3) * 0.1);
        let dy = (net.network(&a) - net.network(&b)).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
        let dz = (&a - &b).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
        if dy > bound * dz {
            return Err(format!("Lipschitz bound violated: {dy} > {bound} * {dz}"));
        }
    }
    Ok("all layers within bound".into())
}

/// Second-order finite differences for `−(z u′)′ = f0`, `u(0) = u(1) = 0`,
/// on `n` interior nodes (Thomas algorithm).
pub fn darcy_finite_difference(z: f64, f0: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = 1.0 / (n as f64 + 1.0);
    let x: Vec<f64> = (1..=n).map(|i| i as f64 * h).collect();
    let (a, b, c) = (-z / (h * h), 2.0 * z / (h * h), -z / (h * h));
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = c / b;
    dp[0] = f0 / b;
    for i in 1..n {
        let m = b - a * cp[i - 1];
        cp[i] = c / m;
        dp[i] = (f0 - a * dp[i - 1]) / m;
    }
    let mut u = vec![0.0; n];
    u[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        u[i] = dp[i] - cp[i] * u[i + 1];
    }
    (x, u)
}

fn check_darcy() -> std::result::Result<String, String> {
    let mut r = rng::stream(9, 0);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let z = r.random_range(0.2..5.0);
        let (x, u_fd) = darcy_finite_difference(z, 10.0, 99);
        let u = Darcy1DModel::with_grid(10.0, x).solve(z).map_err(|e| e.to_string())?;
        let num: f64 = u.iter().zip(&u_fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = u_fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(num / den);
    }
    if worst < 1e-6 {
        Ok(format!("20 permeabilities, max relative error {worst:.1e}"))
    } else {
        Err(format!("max relative error {worst:.1e}"))
    }
}

pub fn checks() -> Vec<Check> {
    vec![
        Check { name: "sliced-w2-gradient", category: "gradient", run: check_sliced_w2_gradient },
        Check { name: "loss-gradient-cut", category: "gradient", run: || check_loss_gradients(GradientMode::Cut) },
        Check { name: "loss-gradient-standard", category: "gradient", run: || check_loss_gradients(GradientMode::Standard) },
        Check { name: "mlp-gradient", category: "gradient", run: check_mlp_gradient },
        Check { name: "condition-gradient", category: "gradient", run: check_condition_gradient },
        Check { name: "ot-oracle-1d", category: "ot", run: check_ot_oracle },
        Check { name: "ot-scaling-identity", category: "ot", run: check_scaling },
        Check { name: "rk4-order", category: "ode", run: check_rk4_order },
        Check { name: "lipschitz-projection", category: "surrogate", run: check_lipschitz },
        Check { name: "darcy-analytic", category: "models", run: check_darcy },
    ]
}

/// Run the checks whose name or category contains `filter`.
pub fn run(filter: Option<&str>) -> Vec<CheckOutcome> {
    checks()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f) || c.category.contains(f)))
        .map(|c| {
            let start = Instant::now();
            let res = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
            let (passed, detail) = match res {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckOutcome {
                name: c.name,
                category: c.category,
                passed,
                detail,
                elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_suite_passes() {
        for o in run(None) {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }

    #[test]
    fn filter_selects_transport_checks() {
        let names: Vec<_> = run(Some("ot")).into_iter().map(|o| o.name).collect();
        assert_eq!(names, vec!["ot-oracle-1d", "ot-scaling-identity"]);
    }
}
