//! Parametric input measures `μ(α)` and Gaussian noise models `η(Γ)`.
//!
//! Every family is sampled by reparameterization: a standard normal draw `ε`
//! is pushed through a differentiable map of the parameters, so gradients
//! reach the parameters through the samples. Scale-type parameters are
//! stored as logarithms and stay positive under any update.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::distance::{WeightVar, WeightingOperator};
use crate::error::{contract, Result};
use crate::rng;

/// Smallest eigenvalue admitted when inverting a Whittle–Matérn spectrum.
pub const EIGENVALUE_FLOOR: f64 = 1e-12;

fn row(values: &[f64]) -> Tensor {
    Tensor::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}

fn scalar(x: f64) -> Tensor {
    Tensor::from_elem((1, 1), x)
}

fn check_blocks(op: &'static str, values: &[Tensor], shapes: &[(usize, usize)]) -> Result<()> {
    if values.len() != shapes.len() {
        return Err(contract(
            op,
            format!("expected {} parameter blocks, got {}", shapes.len(), values.len()),
        ));
    }
    for (i, (v, s)) in values.iter().zip(shapes).enumerate() {
        if v.dim() != *s {
            return Err(contract(
                op,
                format!("block {i} has shape {:?}, expected {s:?}", v.dim()),
            ));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(contract(op, format!("block {i} has non-finite entries")));
        }
    }
    Ok(())
}

/// Input distribution `μ(α)` over model parameters `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum InputMeasure {
    /// `z = exp(m + σ ε)`, scalar `z`.
    LogNormal { m: f64, log_sigma: f64 },
    /// `z = m + σ ⊙ ε`, independent coordinates.
    Gaussian { m: Vec<f64>, log_sigma: Vec<f64> },
}

impl InputMeasure {
    pub fn log_normal(m: f64, sigma: f64) -> Self {
        Self::LogNormal {
            m,
            log_sigma: sigma.ln(),
        }
    }

    pub fn gaussian(m: &[f64], sigma: &[f64]) -> Self {
        Self::Gaussian {
            m: m.to_vec(),
            log_sigma: sigma.iter().map(|s| s.ln()).collect(),
        }
    }

    /// Dimension of `z`.
    pub fn dim(&self) -> usize {
        match self {
            Self::LogNormal { .. } => 1,
            Self::Gaussian { m, .. } => m.len(),
        }
    }

    pub fn block_names(&self) -> [&'static str; 2] {
        ["m", "log_sigma"]
    }

    /// Stored parameters, in block order.
    pub fn blocks(&self) -> Vec<Tensor> {
        match self {
            Self::LogNormal { m, log_sigma } => vec![scalar(*m), scalar(*log_sigma)],
            Self::Gaussian { m, log_sigma } => vec![row(m), row(log_sigma)],
        }
    }

    pub fn set_blocks(&mut self, values: &[Tensor]) -> Result<()> {
        let k = self.dim();
        check_blocks("input_measure", values, &[(1, k), (1, k)])?;
        match self {
            Self::LogNormal { m, log_sigma } => {
                *m = values[0][[0, 0]];
                *log_sigma = values[1][[0, 0]];
            }
            Self::Gaussian { m, log_sigma } => {
                *m = values[0].iter().copied().collect();
                *log_sigma = values[1].iter().copied().collect();
            }
        }
        Ok(())
    }

    /// Means and standard deviations in natural units.
    pub fn mean_sigma(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Self::LogNormal { m, log_sigma } => (vec![*m], vec![log_sigma.exp()]),
            Self::Gaussian { m, log_sigma } => {
                (m.clone(), log_sigma.iter().map(|l| l.exp()).collect())
            }
        }
    }

    /// Reparameterized samples: `vars = [m, log_sigma]` and `eps` is `n × dim`.
    pub fn sample_var(&self, tape: &Tape, vars: &[Var], eps: &Tensor) -> Result<Var> {
        if vars.len() != 2 {
            return Err(contract("sample_inputs", "expected [m, log_sigma] variables"));
        }
        if eps.ncols() != self.dim() || eps.nrows() == 0 {
            return Err(contract(
                "sample_inputs",
                format!("noise draw {:?} does not fit dimension {}", eps.dim(), self.dim()),
            ));
        }
        let e = tape.constant(eps.clone());
        let sigma = tape.exp(vars[1])?;
        let scaled = tape.mul(e, sigma)?;
        let shifted = tape.add(scaled, vars[0])?;
        match self {
            Self::LogNormal { .. } => tape.exp(shifted),
            Self::Gaussian { .. } => Ok(shifted),
        }
    }

    /// `n` draws as an `n × dim` matrix.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(contract("sample_inputs", "n must be at least 1"));
        }
        let eps = rng::standard_normal(rng, n, self.dim());
        Ok(self.sample_with(&eps))
    }

    /// Push a standard normal draw through the reparameterization.
    pub fn sample_with(&self, eps: &Tensor) -> Array2<f64> {
        let (m, s) = self.mean_sigma();
        let mut z = eps.clone();
        for mut r in z.rows_mut() {
            for (j, v) in r.iter_mut().enumerate() {
                *v = m[j] + s[j] * *v;
            }
        }
        if matches!(self, Self::LogNormal { .. }) {
            z.mapv_inplace(f64::exp);
        }
        z
    }
}

/// Where a Whittle–Matérn field is observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WmGeometry {
    /// Points in `(0, 1)`, modes `cos(jπx)` for `j = 1..=modes`.
    Line { grid: Vec<f64>, modes: usize },
    /// Product grid over `(0, length) × (0, 1)`, modes
    /// `cos(jπx/length) cos(kπt)`; observation index is `ix * t.len() + it`.
    SpaceTime {
        x: Vec<f64>,
        t: Vec<f64>,
        length: f64,
        modes_x: usize,
        modes_t: usize,
    },
}

impl WmGeometry {
    /// Midpoint grid of `d` points on `(0, 1)` with `d` modes.
    pub fn line(d: usize) -> Self {
        Self::Line {
            grid: midpoint_grid(d),
            modes: d,
        }
    }

    fn spatial_dim(&self) -> usize {
        match self {
            Self::Line { .. } => 1,
            Self::SpaceTime { .. } => 2,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Self::Line { grid, .. } => grid.len(),
            Self::SpaceTime { x, t, .. } => x.len() * t.len(),
        }
    }

    pub fn mode_count(&self) -> usize {
        match self {
            Self::Line { modes, .. } => *modes,
            Self::SpaceTime {
                modes_x, modes_t, ..
            } => modes_x * modes_t,
        }
    }

    /// `(j² + k²) π²` for every mode, in basis order.
    fn frequencies(&self) -> Vec<f64> {
        match self {
            Self::Line { modes, .. } => (1..=*modes).map(|j| (j * j) as f64 * PI * PI).collect(),
            Self::SpaceTime {
                modes_x, modes_t, ..
            } => {
                let mut f = Vec::with_capacity(modes_x * modes_t);
                for j in 1..=*modes_x {
                    for k in 1..=*modes_t {
                        f.push((j * j + k * k) as f64 * PI * PI);
                    }
                }
                f
            }
        }
    }

    /// `modes × d_y` matrix of eigenfunctions evaluated on the grid.
    pub fn basis(&self) -> Array2<f64> {
        match self {
            Self::Line { grid, modes } => Array2::from_shape_fn((*modes, grid.len()), |(j, i)| {
                ((j + 1) as f64 * PI * grid[i]).cos()
            }),
            Self::SpaceTime {
                x,
                t,
                length,
                modes_x,
                modes_t,
            } => {
                let nt = t.len();
                Array2::from_shape_fn((modes_x * modes_t, x.len() * nt), |(m, o)| {
                    let (j, k) = (m / modes_t + 1, m % modes_t + 1);
                    let (ix, it) = (o / nt, o % nt);
                    (j as f64 * PI * x[ix] / length).cos() * (k as f64 * PI * t[it]).cos()
                })
            }
        }
    }

    /// Orthonormal counterpart of [`basis`](Self::basis), as `d_y × modes`
    /// (`Q_ij = √(2/d) cos(jπx_i)` on a line).
    pub fn q_matrix(&self) -> Array2<f64> {
        let scale = match self {
            Self::Line { grid, .. } => (2.0 / grid.len() as f64).sqrt(),
            Self::SpaceTime { x, t, .. } => {
                (2.0 / x.len() as f64).sqrt() * (2.0 / t.len() as f64).sqrt()
            }
        };
        self.basis().t().mapv(|v| v * scale)
    }
}

/// `d` equally spaced cell midpoints `(i + 1/2)/d` on `(0, 1)`.
pub fn midpoint_grid(d: usize) -> Vec<f64> {
    (0..d).map(|i| (i as f64 + 0.5) / d as f64).collect()
}

/// Whittle–Matérn covariance `σℓ^d(I − ℓ²Δ)^{−υ−d/2}` with Neumann modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhittleMatern {
    pub log_gamma: f64,
    pub log_ell: f64,
    /// Roughness; never learned.
    pub upsilon: f64,
    pub geometry: WmGeometry,
}

/// `σ = γ² 2^d π^{d/2} Γ(υ + d/2) / Γ(υ)` without the `γ²` factor, as a log.
fn log_amplitude_constant(upsilon: f64, d: f64) -> f64 {
    d * 2f64.ln() + 0.5 * d * PI.ln() + libm::lgamma(upsilon + 0.5 * d) - libm::lgamma(upsilon)
}

/// Eigenvalues `σℓ^d(ℓ² f + 1)^{−υ−d/2}` for frequencies `f = (j² + k²)π²`.
pub fn whittle_matern_eigenvalues(gamma: f64, ell: f64, upsilon: f64, d: usize, freqs: &[f64]) -> Vec<f64> {
    let d = d as f64;
    let log_sigma = 2.0 * gamma.ln() + log_amplitude_constant(upsilon, d);
    freqs
        .iter()
        .map(|f| (log_sigma + d * ell.ln() - (upsilon + 0.5 * d) * (ell * ell * f + 1.0).ln()).exp())
        .collect()
}

impl WhittleMatern {
    pub fn eigenvalues(&self) -> Vec<f64> {
        whittle_matern_eigenvalues(
            self.log_gamma.exp(),
            self.log_ell.exp(),
            self.upsilon,
            self.geometry.spatial_dim(),
            &self.geometry.frequencies(),
        )
    }

    /// `1 × modes` row of eigenvalues on the tape.
    fn eigenvalues_var(&self, tape: &Tape, log_gamma: Var, log_ell: Var) -> Result<Var> {
        let d = self.geometry.spatial_dim() as f64;
        let freqs = tape.constant(row(&self.geometry.frequencies()));
        let ell_sq = tape.exp(tape.scale(log_ell, 2.0)?)?;
        let arg = tape.offset(tape.mul(freqs, ell_sq)?, 1.0)?;
        let decay = tape.scale(tape.log(arg)?, -(self.upsilon + 0.5 * d))?;
        let lead = tape.add(tape.scale(log_gamma, 2.0)?, tape.scale(log_ell, d)?)?;
        let lead = tape.offset(lead, log_amplitude_constant(self.upsilon, d))?;
        tape.exp(tape.add(decay, lead)?)
    }
}

/// Noise covariance families for `η(Γ) = N(0, Γ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum NoiseCov {
    /// `Γ = γ² I`.
    ScaledIdentity { log_gamma: f64, dim: usize },
    WhittleMatern(WhittleMatern),
    /// `Γ = L Lᵀ`, `L` lower triangular with positive diagonal.
    /// `strict_lower` lists the entries below the diagonal row by row.
    Cholesky {
        dim: usize,
        strict_lower: Vec<f64>,
        log_diag: Vec<f64>,
    },
}

/// Row-major flat positions of the strictly lower triangle of a `d × d` matrix.
pub fn strict_lower_positions(d: usize) -> Vec<usize> {
    (0..d).flat_map(|i| (0..i).map(move |j| i * d + j)).collect()
}

impl NoiseCov {
    pub fn scaled_identity(gamma: f64, dim: usize) -> Self {
        Self::ScaledIdentity {
            log_gamma: gamma.ln(),
            dim,
        }
    }

    pub fn whittle_matern(gamma: f64, ell: f64, upsilon: f64, geometry: WmGeometry) -> Self {
        Self::WhittleMatern(WhittleMatern {
            log_gamma: gamma.ln(),
            log_ell: ell.ln(),
            upsilon,
            geometry,
        })
    }

    /// `L = I`.
    pub fn cholesky_identity(dim: usize) -> Self {
        Self::Cholesky {
            dim,
            strict_lower: vec![0.0; dim * (dim - 1) / 2],
            log_diag: vec![0.0; dim],
        }
    }

    /// Cholesky parameters for a given lower-triangular factor.
    pub fn cholesky_from_factor(l: &Array2<f64>) -> Result<Self> {
        let d = l.nrows();
        if l.ncols() != d || (0..d).any(|i| !(l[[i, i]] > 0.0)) {
            return Err(contract("cholesky", "factor must be square with a positive diagonal"));
        }
        Ok(Self::Cholesky {
            dim: d,
            strict_lower: (0..d).flat_map(|i| (0..i).map(move |j| (i, j))).map(|p| l[p]).collect(),
            log_diag: (0..d).map(|i| l[[i, i]].ln()).collect(),
        })
    }

    /// Observation dimension.
    pub fn dim(&self) -> usize {
        match self {
            Self::ScaledIdentity { dim, .. } | Self::Cholesky { dim, .. } => *dim,
            Self::WhittleMatern(wm) => wm.geometry.obs_dim(),
        }
    }

    /// Width of the standard normal draw behind one noise vector.
    pub fn eps_dim(&self) -> usize {
        match self {
            Self::WhittleMatern(wm) => wm.geometry.mode_count(),
            _ => self.dim(),
        }
    }

    pub fn block_names(&self) -> Vec<&'static str> {
        match self {
            Self::ScaledIdentity { .. } => vec!["log_gamma"],
            Self::WhittleMatern(_) => vec!["log_gamma", "log_ell"],
            Self::Cholesky { .. } => vec!["strict_lower", "log_diag"],
        }
    }

    pub fn blocks(&self) -> Vec<Tensor> {
        match self {
            Self::ScaledIdentity { log_gamma, .. } => vec![scalar(*log_gamma)],
            Self::WhittleMatern(wm) => vec![scalar(wm.log_gamma), scalar(wm.log_ell)],
            Self::Cholesky {
                strict_lower,
                log_diag,
                ..
            } => vec![row(strict_lower), row(log_diag)],
        }
    }

    pub fn set_blocks(&mut self, values: &[Tensor]) -> Result<()> {
        match self {
            Self::ScaledIdentity { log_gamma, .. } => {
                check_blocks("noise_cov", values, &[(1, 1)])?;
                *log_gamma = values[0][[0, 0]];
            }
            Self::WhittleMatern(wm) => {
                check_blocks("noise_cov", values, &[(1, 1), (1, 1)])?;
                wm.log_gamma = values[0][[0, 0]];
                wm.log_ell = values[1][[0, 0]];
            }
            Self::Cholesky {
                dim,
                strict_lower,
                log_diag,
            } => {
                let d = *dim;
                check_blocks("noise_cov", values, &[(1, d * (d - 1) / 2), (1, d)])?;
                *strict_lower = values[0].iter().copied().collect();
                *log_diag = values[1].iter().copied().collect();
            }
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        if self.blocks().iter().flat_map(|b| b.iter()).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(contract("noise_cov", "covariance parameters are not finite"))
        }
    }

    /// Lower-triangular factor of a Cholesky covariance.
    pub fn cholesky_factor(&self) -> Option<Array2<f64>> {
        match self {
            Self::Cholesky {
                dim,
                strict_lower,
                log_diag,
            } => {
                let d = *dim;
                let mut l = Array2::zeros((d, d));
                let mut next = strict_lower.iter();
                for i in 0..d {
                    for j in 0..i {
                        l[[i, j]] = *next.next().expect("strict lower length");
                    }
                    l[[i, i]] = log_diag[i].exp();
                }
                Some(l)
            }
            _ => None,
        }
    }

    /// Dense `Γ`.
    pub fn covariance(&self) -> Array2<f64> {
        match self {
            Self::ScaledIdentity { log_gamma, dim } => {
                Array2::eye(*dim) * (2.0 * log_gamma).exp()
            }
            Self::WhittleMatern(wm) => {
                let psi = wm.geometry.basis();
                let lam = Array1::from(wm.eigenvalues());
                let scaled = &psi * &lam.insert_axis(ndarray::Axis(1));
                psi.t().dot(&scaled)
            }
            Self::Cholesky { .. } => {
                let l = self.cholesky_factor().expect("cholesky");
                l.dot(&l.t())
            }
        }
    }

    /// The weighting `B^{-1/2}` induced by this covariance, as fixed values.
    pub fn weighting(&self) -> Result<WeightingOperator> {
        self.check_finite()?;
        Ok(match self {
            Self::ScaledIdentity { log_gamma, .. } => WeightingOperator::ScaledIdentity {
                gamma: log_gamma.exp(),
            },
            Self::WhittleMatern(wm) => WeightingOperator::EigenFactorized {
                q: wm.geometry.q_matrix(),
                eigenvalues: wm
                    .eigenvalues()
                    .into_iter()
                    .map(|l| l.max(EIGENVALUE_FLOOR))
                    .collect(),
            },
            // D of the LDLᵀ factorization is diag(L)², so D^{-1/2} = 1/diag(L).
            Self::Cholesky { log_diag, .. } => WeightingOperator::Diagonal {
                inv_sqrt: log_diag.iter().map(|l| (-l).exp()).collect(),
            },
        })
    }

    /// Weighting built from tape variables. Pass detached variables for the
    /// cut-gradient form and live ones for the standard form.
    pub fn weight_var<'a>(&self, tape: &Tape, vars: &[Var]) -> Result<WeightVar<'a>> {
        self.check_vars(vars)?;
        self.check_finite()?;
        match self {
            Self::ScaledIdentity { .. } => Ok(WeightVar::Scalar(tape.exp(tape.neg(vars[0])?)?)),
            Self::WhittleMatern(wm) => {
                let lam = wm.eigenvalues_var(tape, vars[0], vars[1])?;
                let lam = floor_var(tape, lam, EIGENVALUE_FLOOR)?;
                let inv_sqrt = tape.powf(lam, -0.5)?;
                let q = tape.constant(wm.geometry.q_matrix());
                let qt = tape.constant(wm.geometry.q_matrix().t().to_owned());
                let scaled = tape.mul(q, inv_sqrt)?;
                Ok(WeightVar::Dense(tape.matmul(scaled, qt)?))
            }
            Self::Cholesky { .. } => {
                let inv = tape.exp(tape.neg(vars[1])?)?;
                Ok(WeightVar::Diagonal(tape.transpose(inv)?))
            }
        }
    }

    fn check_vars(&self, vars: &[Var]) -> Result<()> {
        let want = self.block_names().len();
        if vars.len() == want {
            Ok(())
        } else {
            Err(contract(
                "noise_cov",
                format!("expected {want} parameter variables, got {}", vars.len()),
            ))
        }
    }

    /// Lower-triangular factor on the tape (Cholesky family only).
    fn factor_var(&self, tape: &Tape, vars: &[Var]) -> Result<Var> {
        let Self::Cholesky { dim, .. } = self else {
            return Err(contract("noise_cov", "not a Cholesky covariance"));
        };
        let d = *dim;
        let lower = tape.scatter(vars[0], strict_lower_positions(d), (d, d))?;
        let diag = tape.scatter(tape.exp(vars[1])?, (0..d).map(|i| i * d + i).collect(), (d, d))?;
        tape.add(lower, diag)
    }

    /// Dense `Γ` on the tape.
    pub fn covariance_var(&self, tape: &Tape, vars: &[Var]) -> Result<Var> {
        self.check_vars(vars)?;
        match self {
            Self::ScaledIdentity { dim, .. } => {
                let g2 = tape.exp(tape.scale(vars[0], 2.0)?)?;
                let eye = tape.constant(Array2::eye(*dim));
                tape.mul(eye, g2)
            }
            Self::WhittleMatern(wm) => {
                let lam = wm.eigenvalues_var(tape, vars[0], vars[1])?;
                let psi = wm.geometry.basis();
                let psi_t = tape.constant(psi.t().to_owned());
                let psi = tape.constant(psi);
                let scaled = tape.mul(psi_t, lam)?;
                tape.matmul(scaled, psi)
            }
            Self::Cholesky { .. } => {
                let l = self.factor_var(tape, vars)?;
                let lt = tape.transpose(l)?;
                tape.matmul(l, lt)
            }
        }
    }

    /// Reparameterized noise: `eps` is `n × eps_dim`, result `n × dim`.
    pub fn sample_var(&self, tape: &Tape, vars: &[Var], eps: &Tensor) -> Result<Var> {
        self.check_vars(vars)?;
        if eps.ncols() != self.eps_dim() || eps.nrows() == 0 {
            return Err(contract(
                "sample_noise",
                format!("noise draw {:?} does not fit width {}", eps.dim(), self.eps_dim()),
            ));
        }
        let e = tape.constant(eps.clone());
        match self {
            Self::ScaledIdentity { .. } => tape.mul(e, tape.exp(vars[0])?),
            Self::WhittleMatern(wm) => {
                let lam = wm.eigenvalues_var(tape, vars[0], vars[1])?;
                let amp = tape.mul(e, tape.sqrt(lam)?)?;
                let psi = tape.constant(wm.geometry.basis());
                tape.matmul(amp, psi)
            }
            Self::Cholesky { .. } => {
                let l = self.factor_var(tape, vars)?;
                tape.matmul(e, tape.transpose(l)?)
            }
        }
    }

    /// `n` noise vectors as an `n × dim` matrix.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(contract("sample_noise", "n must be at least 1"));
        }
        let eps = rng::standard_normal(rng, n, self.eps_dim());
        self.sample_with(&eps)
    }

    pub fn sample_with(&self, eps: &Tensor) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let vars: Vec<Var> = self.blocks().into_iter().map(|b| tape.constant(b)).collect();
        let out = self.sample_var(&tape, &vars, eps)?;
        Ok((*tape.value(out)).clone())
    }
}

/// `max(x, floor)` entrywise; floored entries carry no gradient.
fn floor_var(tape: &Tape, x: Var, floor: f64) -> Result<Var> {
    let value = tape.value(x);
    if value.iter().all(|&v| v >= floor) {
        return Ok(x);
    }
    let keep = tape.constant(value.mapv(|v| if v >= floor { 1.0 } else { 0.0 }));
    let fill = tape.constant(value.mapv(|v| if v >= floor { 0.0 } else { floor }));
    tape.add(tape.mul(x, keep)?, fill)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn degenerate_log_normal_is_a_point_mass() {
        let mu = InputMeasure::LogNormal {
            m: 0.3,
            log_sigma: -30.0,
        };
        let mut r = rng::stream(1, 0);
        let z = mu.sample(100, &mut r).unwrap();
        assert!(z.iter().all(|&v| (v - 0.3f64.exp()).abs() < 1e-10));
    }

    #[test]
    fn log_normal_sample_gradient_in_m_is_z() {
        let mu = InputMeasure::log_normal(0.2, 0.4);
        let tape = Tape::new();
        let vars: Vec<Var> = mu.blocks().into_iter().map(|b| tape.param(b)).collect();
        let eps = array![[0.7]];
        let z = mu.sample_var(&tape, &vars, &eps).unwrap();
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        assert_relative_eq!(g.wrt(vars[0])[[0, 0]], tape.item(z).unwrap(), epsilon = 1e-14);
    }

    #[test]
    fn vanishing_noise_amplitude() {
        let cov = NoiseCov::ScaledIdentity {
            log_gamma: -30.0,
            dim: 4,
        };
        let mut r = rng::stream(2, 0);
        let xi = cov.sample(10, &mut r).unwrap();
        assert!(xi.iter().all(|v| v.abs() < 1e-11));
    }

    #[test]
    fn whittle_matern_first_eigenvalue() {
        // γ = ℓ = 1, υ = 1/2, d = 1: σ = 2√π Γ(1)/Γ(1/2) = 2, λ₁ = 2/(π² + 1).
        let wm = WhittleMatern {
            log_gamma: 0.0,
            log_ell: 0.0,
            upsilon: 0.5,
            geometry: WmGeometry::line(5),
        };
        assert_relative_eq!(wm.eigenvalues()[0], 2.0 / (PI * PI + 1.0), max_relative = 1e-13);
        let ev = wm.eigenvalues();
        assert!(ev.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn weightings_of_simple_covariances() {
        let w = NoiseCov::scaled_identity(2.0, 3).weighting().unwrap();
        let x = array![[1.0, 2.0, 4.0]];
        assert_eq!(w.apply(&x).unwrap(), array![[0.5, 1.0, 2.0]]);
        let ident = NoiseCov::scaled_identity(1.0, 3).weighting().unwrap();
        assert_eq!(ident.apply(&x).unwrap(), x);
        let chol = NoiseCov::cholesky_from_factor(&array![[2.0, 0.0], [0.0, 3.0]]).unwrap();
        let WeightingOperator::Diagonal { inv_sqrt } = chol.weighting().unwrap() else {
            panic!("expected a diagonal weighting");
        };
        assert_relative_eq!(inv_sqrt[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(inv_sqrt[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn q_matrix_is_orthonormal_on_midpoints() {
        let g = WmGeometry::Line {
            grid: midpoint_grid(12),
            modes: 11,
        };
        let q = g.q_matrix();
        let qtq = q.t().dot(&q);
        for i in 0..11 {
            for j in 0..11 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((qtq[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_covariance_matches_factor() {
        let l = array![[1.5, 0.0, 0.0], [0.3, 0.8, 0.0], [-0.2, 0.4, 1.1]];
        let cov = NoiseCov::cholesky_from_factor(&l).unwrap();
        let dense = cov.covariance();
        let want = l.dot(&l.t());
        for (a, b) in dense.iter().zip(want.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
        let tape = Tape::new();
        let vars: Vec<Var> = cov.blocks().into_iter().map(|b| tape.constant(b)).collect();
        let c = cov.covariance_var(&tape, &vars).unwrap();
        for (a, b) in tape.value(c).iter().zip(want.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }
}
