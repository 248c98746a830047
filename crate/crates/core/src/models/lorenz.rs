//! Lorenz-96 systems, classical RK4, and time-averaged observables.
//!
//! `G_τ(z; s₀)` integrates from `s₀`, discards the burn-in `[0, T₀)` and
//! averages the feature map over `[T₀, T₀ + τ)` with a left Riemann sum at
//! the integrator step. The feature map stacks the observed coordinates `w`
//! with the lower triangle of `w wᵀ`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Oracle;
use crate::error::{contract, Error, Result};
use crate::rng;

/// Autonomous ODE `ṡ = f(s)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, s: &[f64], ds: &mut [f64]);
}

/// Scratch space for [`rk4_step`].
#[derive(Debug, Clone)]
pub struct Rk4Work {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Work {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }
}

/// One classical fourth-order Runge–Kutta step, in place.
pub fn rk4_step<S: OdeSystem + ?Sized>(sys: &S, s: &mut [f64], dt: f64, w: &mut Rk4Work) {
    let n = s.len();
    sys.rhs(s, &mut w.k1);
    for i in 0..n {
        w.tmp[i] = s[i] + 0.5 * dt * w.k1[i];
    }
    sys.rhs(&w.tmp, &mut w.k2);
    for i in 0..n {
        w.tmp[i] = s[i] + 0.5 * dt * w.k2[i];
    }
    sys.rhs(&w.tmp, &mut w.k3);
    for i in 0..n {
        w.tmp[i] = s[i] + dt * w.k3[i];
    }
    sys.rhs(&w.tmp, &mut w.k4);
    for i in 0..n {
        s[i] += dt / 6.0 * (w.k1[i] + 2.0 * w.k2[i] + 2.0 * w.k3[i] + w.k4[i]);
    }
}

fn step_count(t: f64, dt: f64) -> usize {
    (t / dt).round() as usize
}

/// Integrate `steps` RK4 steps from `s0`, calling `visit(k, s_k)` for the
/// initial state and after every step. Returns the final state.
pub fn rk4_integrate<S: OdeSystem + ?Sized>(
    sys: &S,
    s0: &[f64],
    steps: usize,
    dt: f64,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(contract("rk4", format!("time step must be positive, got {dt}")));
    }
    if s0.len() != sys.dim() {
        return Err(contract(
            "rk4",
            format!("initial state has {} entries, system has {}", s0.len(), sys.dim()),
        ));
    }
    let mut s = s0.to_vec();
    let mut work = Rk4Work::new(s.len());
    visit(0, &s);
    for k in 1..=steps {
        rk4_step(sys, &mut s, dt, &mut work);
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged {
                time: k as f64 * dt,
            });
        }
        visit(k, &s);
    }
    Ok(s)
}

/// States at every step from `0` to `t_end`, one row each.
pub fn rk4_trajectory<S: OdeSystem + ?Sized>(
    sys: &S,
    s0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<Array2<f64>> {
    if !(dt > 0.0) || t_end < dt {
        return Err(contract(
            "rk4_trajectory",
            format!("need dt > 0 and t_end >= dt, got dt={dt}, t_end={t_end}"),
        ));
    }
    let steps = step_count(t_end, dt);
    let mut out = Array2::zeros((steps + 1, sys.dim()));
    rk4_integrate(sys, s0, steps, dt, |k, s| {
        out.row_mut(k).iter_mut().zip(s).for_each(|(o, v)| *o = *v);
    })?;
    Ok(out)
}

/// `u̇ₖ = u_{k−1}(u_{k+1} − u_{k−2}) − uₖ + F`, cyclic in `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorenz96Single {
    pub k: usize,
    pub forcing: f64,
}

impl OdeSystem for Lorenz96Single {
    fn dim(&self) -> usize {
        self.k
    }

    fn rhs(&self, u: &[f64], du: &mut [f64]) {
        let n = self.k;
        for i in 0..n {
            let up1 = u[(i + 1) % n];
            let um1 = u[(i + n - 1) % n];
            let um2 = u[(i + n - 2) % n];
            du[i] = um1 * (up1 - um2) - u[i] + self.forcing;
        }
    }
}

/// Two-scale Lorenz-96. State layout: `u₀..u_{K−1}` then `v_{k,l}` at
/// `K + k·L + l`; the fast variables are cyclic within each block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorenz96Multi {
    pub k: usize,
    pub l: usize,
    pub c: f64,
    pub forcing: f64,
    pub h: f64,
    pub b: f64,
}

impl OdeSystem for Lorenz96Multi {
    fn dim(&self) -> usize {
        self.k + self.k * self.l
    }

    fn rhs(&self, s: &[f64], ds: &mut [f64]) {
        let (nk, nl) = (self.k, self.l);
        let (u, v) = s.split_at(nk);
        let (du, dv) = ds.split_at_mut(nk);
        for k in 0..nk {
            let block = &v[k * nl..(k + 1) * nl];
            let vbar = block.iter().sum::<f64>() / nl as f64;
            let um1 = u[(k + nk - 1) % nk];
            let um2 = u[(k + nk - 2) % nk];
            let up1 = u[(k + 1) % nk];
            du[k] = -um1 * (um2 - up1) - u[k] + self.forcing - self.h * vbar;
            let out = &mut dv[k * nl..(k + 1) * nl];
            for l in 0..nl {
                let vp1 = block[(l + 1) % nl];
                let vp2 = block[(l + 2) % nl];
                let vm1 = block[(l + nl - 1) % nl];
                out[l] = self.c * (-vp1 * (vp2 - vm1) - block[l] + self.b * u[k]);
            }
        }
    }
}

/// Which Lorenz-96 variant, with its fixed structural constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum LorenzKind {
    /// Parameter `z = (F)`.
    Single { k: usize },
    /// Parameters `z = (F, h, b)`.
    Multi { k: usize, l: usize, c: f64 },
}

/// Number of features for `n` observed coordinates: means plus the lower
/// triangle of second moments.
pub fn feature_dim(n: usize) -> usize {
    n + n * (n + 1) / 2
}

/// `φ(w) = (w_i ; w_i w_j for j ≤ i)`.
pub fn features(w: &[f64], out: &mut [f64]) {
    let n = w.len();
    out[..n].copy_from_slice(w);
    let mut p = n;
    for i in 0..n {
        for j in 0..=i {
            out[p] = w[i] * w[j];
            p += 1;
        }
    }
}

/// Full symmetric second-moment matrix from the triangle block of a feature vector.
pub fn second_moments(feat: &[f64], n: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n, n));
    let mut p = n;
    for i in 0..n {
        for j in 0..=i {
            m[[i, j]] = feat[p];
            m[[j, i]] = feat[p];
            p += 1;
        }
    }
    m
}

/// A Lorenz-96 variant together with its averaging window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeAveraged {
    pub system: LorenzKind,
    pub dt: f64,
    pub tau: f64,
    pub burn_in: f64,
}

impl TimeAveraged {
    pub fn param_dim(&self) -> usize {
        match self.system {
            LorenzKind::Single { .. } => 1,
            LorenzKind::Multi { .. } => 3,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.system {
            LorenzKind::Single { k } => k,
            LorenzKind::Multi { k, l, .. } => k + k * l,
        }
    }

    /// Length of the observed vector `w`.
    pub fn observed_dim(&self) -> usize {
        match self.system {
            LorenzKind::Single { k } => k,
            LorenzKind::Multi { k, .. } => k + 1,
        }
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.observed_dim())
    }

    fn validate(&self, z: &[f64], s0: &[f64]) -> Result<()> {
        if z.len() != self.param_dim() {
            return Err(contract(
                "g_tau",
                format!("expected {} parameters, got {}", self.param_dim(), z.len()),
            ));
        }
        if s0.len() != self.state_dim() {
            return Err(contract(
                "g_tau",
                format!("expected a state of length {}, got {}", self.state_dim(), s0.len()),
            ));
        }
        if !(self.dt > 0.0 && self.tau >= self.dt && self.burn_in >= 0.0) {
            return Err(contract(
                "g_tau",
                format!("bad window dt={}, tau={}, burn_in={}", self.dt, self.tau, self.burn_in),
            ));
        }
        Ok(())
    }

    /// Dispatch to the concrete system; `f` receives it plus a map from the
    /// state to the observed vector `w`.
    fn with_system<T>(&self, z: &[f64], f: impl FnOnce(&dyn OdeSystem, &dyn Fn(&[f64], &mut [f64])) -> T) -> T {
        match self.system {
            LorenzKind::Single { k } => {
                let sys = Lorenz96Single { k, forcing: z[0] };
                f(&sys, &|s, w| w.copy_from_slice(s))
            }
            LorenzKind::Multi { k, l, c } => {
                let sys = Lorenz96Multi {
                    k,
                    l,
                    c,
                    forcing: z[0],
                    h: z[1],
                    b: z[2],
                };
                f(&sys, &move |s, w| {
                    w[..k].copy_from_slice(&s[..k]);
                    w[k] = s[k..].iter().sum::<f64>() / (k * l) as f64;
                })
            }
        }
    }

    /// Time-averaged features `G_τ(z; s₀)`.
    pub fn g_tau(&self, z: &[f64], s0: &[f64]) -> Result<Vec<f64>> {
        self.validate(z, s0)?;
        let burn = step_count(self.burn_in, self.dt);
        let window = step_count(self.tau, self.dt);
        let n_obs = self.observed_dim();
        let mut acc = vec![0.0; self.feature_dim()];
        let mut w = vec![0.0; n_obs];
        let mut feat = vec![0.0; self.feature_dim()];
        self.with_system(z, |sys, observe| {
            rk4_integrate(sys, s0, burn + window - 1, self.dt, |k, s| {
                if k >= burn {
                    observe(s, &mut w);
                    features(&w, &mut feat);
                    acc.iter_mut().zip(&feat).for_each(|(a, f)| *a += f);
                }
            })
        })?;
        let inv = 1.0 / window as f64;
        Ok(acc.into_iter().map(|a| a * inv).collect())
    }

    /// States from `0` to `t_end` at every step.
    pub fn trajectory(&self, z: &[f64], s0: &[f64], t_end: f64) -> Result<Array2<f64>> {
        self.validate(z, s0)?;
        self.with_system(z, |sys, _| rk4_trajectory(sys, s0, t_end, self.dt))
    }

    /// Initial state with independent `N(0, sd²)` coordinates.
    pub fn sample_initial<R: Rng + ?Sized>(&self, sd: f64, rng: &mut R) -> Vec<f64> {
        (0..self.state_dim())
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Sample covariance of `√τ (G_τ(z; s₀⁽ⁱ⁾) − mean)` over the given initial states.
    pub fn clt_cov_from_states(&self, z: &[f64], states: &[Vec<f64>]) -> Result<Array2<f64>> {
        if states.len() < 2 {
            return Err(contract("clt_empirical_cov", "need at least two initial states"));
        }
        let outputs: Vec<Vec<f64>> = states
            .par_iter()
            .map(|s0| self.g_tau(z, s0))
            .collect::<Result<_>>()?;
        let samples = Array2::from_shape_fn((outputs.len(), self.feature_dim()), |(i, j)| {
            outputs[i][j]
        });
        Ok(sample_covariance(&samples) * self.tau)
    }

    /// [`clt_cov_from_states`](Self::clt_cov_from_states) with `n_init`
    /// states drawn from `N(0, init_sd² I)`, state `i` from stream `i` of `seed`.
    pub fn clt_empirical_cov(&self, z: &[f64], n_init: usize, init_sd: f64, seed: u64) -> Result<Array2<f64>> {
        let states: Vec<Vec<f64>> = (0..n_init as u64)
            .map(|i| self.sample_initial(init_sd, &mut rng::stream(seed, i)))
            .collect();
        self.clt_cov_from_states(z, &states)
    }
}

/// Unbiased sample covariance of the rows of `x`.
pub fn sample_covariance(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mean = x.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let centered = x - &mean;
    centered.t().dot(&centered) / (n as f64 - 1.0)
}

/// `G_τ` with initial states drawn from `N(0, init_sd² I)`: the oracle used
/// for time-averaged data and surrogate training pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorenzOracle {
    pub model: TimeAveraged,
    pub init_sd: f64,
}

impl Oracle for LorenzOracle {
    fn input_dim(&self) -> usize {
        self.model.param_dim()
    }

    fn output_dim(&self) -> usize {
        self.model.feature_dim()
    }

    fn evaluate(&self, z: &[f64], seed: u64) -> Result<Vec<f64>> {
        let s0 = self.model.sample_initial(self.init_sd, &mut rng::stream(seed, 0));
        self.model.g_tau(z, &s0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Decay;
    impl OdeSystem for Decay {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, s: &[f64], ds: &mut [f64]) {
            ds[0] = -s[0];
        }
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let traj = rk4_trajectory(&Decay, &[1.0], 1.0, 0.01).unwrap();
        let last = traj[[traj.nrows() - 1, 0]];
        assert!((last - (-1f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn equilibrium_is_preserved() {
        let sys = Lorenz96Single { k: 6, forcing: 8.0 };
        let traj = rk4_trajectory(&sys, &[8.0; 6], 5.0, 0.01).unwrap();
        assert!(traj.iter().all(|&v| (v - 8.0).abs() < 1e-10));
    }

    #[test]
    fn feature_dimensions() {
        assert_eq!(feature_dim(6), 27);
        assert_eq!(feature_dim(10), 65);
        let multi = TimeAveraged {
            system: LorenzKind::Multi { k: 9, l: 10, c: 10.0 },
            dt: 1e-3,
            tau: 100.0,
            burn_in: 20.0,
        };
        assert_eq!(multi.state_dim(), 99);
        assert_eq!(multi.feature_dim(), 65);
    }

    #[test]
    fn constant_state_gives_unit_features() {
        let mut out = vec![0.0; 27];
        features(&[1.0; 6], &mut out);
        assert!(out.iter().all(|&v| v == 1.0));
        let w = [0.5, -2.0, 3.0];
        let mut f = vec![0.0; feature_dim(3)];
        features(&w, &mut f);
        let m = second_moments(&f, 3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[[i, j]], w[i] * w[j]);
            }
        }
    }

    #[test]
    fn divergence_reports_time() {
        struct Blowup;
        impl OdeSystem for Blowup {
            fn dim(&self) -> usize {
                1
            }
            fn rhs(&self, s: &[f64], ds: &mut [f64]) {
                ds[0] = s[0] * s[0];
            }
        }
        let err = rk4_trajectory(&Blowup, &[1.0], 5.0, 0.1).unwrap_err();
        match err {
            Error::IntegrationDiverged { time } => assert!(time > 0.0 && time <= 5.0),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn identical_initial_states_have_zero_covariance() {
        let m = TimeAveraged {
            system: LorenzKind::Single { k: 6 },
            dt: 0.01,
            tau: 2.0,
            burn_in: 1.0,
        };
        let s0 = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let c = m.clt_cov_from_states(&[10.0], &[s0.clone(), s0]).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
    }
}
