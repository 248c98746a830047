//! Empirical measures and weighted (sliced) 2-Wasserstein distances.
//!
//! In one dimension the optimal coupling between two equal-size empirical
//! measures pairs order statistics, so the squared distance is the mean
//! squared difference of the sorted samples. The sliced distance averages
//! this over random directions after applying the weighting `B^{-1/2}`:
//!
//! `SW²(ν, μ) ≈ (1/M) Σ_θ W²(⟨B^{-1/2}·, θ⟩#ν, ⟨B^{-1/2}·, θ⟩#μ)`.

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract, Result};
use crate::rng;

/// Rows are observation vectors, each carrying mass `1/N`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    samples: Array2<f64>,
}

impl EmpiricalMeasure {
    pub fn new(samples: Array2<f64>) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(contract(
                "empirical_measure",
                format!("need at least one row and column, got {:?}", samples.dim()),
            ));
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    /// `n` distinct rows drawn uniformly without replacement. Asking for all
    /// rows returns them in stored order (row order carries no information).
    pub fn subsample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        if n == 0 || n > self.len() {
            return Err(contract(
                "subsample",
                format!("cannot draw {n} rows from {}", self.len()),
            ));
        }
        if n == self.len() {
            return Ok(self.samples.clone());
        }
        let rows = index::sample(rng, self.len(), n).into_vec();
        Ok(self.samples.select(Axis(0), &rows))
    }
}

/// Directions on the unit sphere, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSet {
    directions: Array2<f64>,
    seed: u64,
}

impl SliceSet {
    /// `m` directions in `dim` dimensions: normalized standard Gaussian vectors.
    pub fn draw(m: usize, dim: usize, seed: u64) -> Result<Self> {
        if m == 0 || dim == 0 {
            return Err(contract(
                "slice_set",
                format!("need at least one slice and one dimension, got m={m}, dim={dim}"),
            ));
        }
        let mut r = rng::stream(seed, 0);
        let mut directions = rng::standard_normal(&mut r, m, dim);
        for mut row in directions.rows_mut() {
            let mut norm = row.dot(&row).sqrt();
            while norm == 0.0 {
                row.assign(&rng::standard_normal(&mut r, 1, dim).row(0));
                norm = row.dot(&row).sqrt();
            }
            row /= norm;
        }
        Ok(Self { directions, seed })
    }

    /// Wrap explicit directions; each row must be a unit vector.
    pub fn from_directions(directions: Array2<f64>) -> Result<Self> {
        if directions.nrows() == 0 || directions.ncols() == 0 {
            return Err(contract("slice_set", "empty direction matrix"));
        }
        for (i, row) in directions.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(contract(
                    "slice_set",
                    format!("direction {i} has norm {norm}, expected 1"),
                ));
            }
        }
        Ok(Self {
            directions,
            seed: 0,
        })
    }

    pub fn directions(&self) -> &Array2<f64> {
        &self.directions
    }

    pub fn len(&self) -> usize {
        self.directions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.directions.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// The map `x ↦ B^{-1/2} x` for a fixed SPD `B`.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightingOperator {
    Identity,
    /// `B = γ² I`.
    ScaledIdentity { gamma: f64 },
    /// `B^{-1/2} = diag(inv_sqrt)`.
    Diagonal { inv_sqrt: Array1<f64> },
    /// `B^{-1/2} = Q Λ^{-1/2} Qᵀ`, eigenvalues in `eigenvalues`.
    EigenFactorized {
        q: Array2<f64>,
        eigenvalues: Array1<f64>,
    },
}

impl WeightingOperator {
    /// Check that the operator is finite and positive definite on its range.
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(contract("weighting", detail));
        match self {
            Self::Identity => Ok(()),
            Self::ScaledIdentity { gamma } => {
                if gamma.is_finite() && *gamma > 0.0 {
                    Ok(())
                } else {
                    bad(format!("scaled identity needs gamma > 0, got {gamma}"))
                }
            }
            Self::Diagonal { inv_sqrt } => {
                if inv_sqrt.iter().all(|v| v.is_finite() && *v > 0.0) {
                    Ok(())
                } else {
                    bad("diagonal weighting has a non-positive or non-finite entry".into())
                }
            }
            Self::EigenFactorized { q, eigenvalues } => {
                if q.ncols() != eigenvalues.len() {
                    return bad(format!(
                        "{} eigenvectors but {} eigenvalues",
                        q.ncols(),
                        eigenvalues.len()
                    ));
                }
                if q.iter().any(|v| !v.is_finite()) {
                    return bad("eigenvector matrix has non-finite entries".into());
                }
                if eigenvalues.iter().all(|v| v.is_finite() && *v > 0.0) {
                    Ok(())
                } else {
                    bad("eigen-factorized weighting has a non-positive eigenvalue".into())
                }
            }
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        let found = match self {
            Self::Identity | Self::ScaledIdentity { .. } => return Ok(()),
            Self::Diagonal { inv_sqrt } => inv_sqrt.len(),
            Self::EigenFactorized { q, .. } => q.nrows(),
        };
        if found == dim {
            Ok(())
        } else {
            Err(contract(
                "weighting",
                format!("operator acts on dimension {found}, data has {dim}"),
            ))
        }
    }

    /// Dense `B^{-1/2}` for vectors of length `dim`.
    pub fn inv_sqrt_matrix(&self, dim: usize) -> Result<Array2<f64>> {
        self.validate()?;
        self.check_dim(dim)?;
        Ok(match self {
            Self::Identity => Array2::eye(dim),
            Self::ScaledIdentity { gamma } => Array2::eye(dim) / *gamma,
            Self::Diagonal { inv_sqrt } => Array2::from_diag(inv_sqrt),
            Self::EigenFactorized { q, eigenvalues } => {
                let scaled = q * &eigenvalues.mapv(|l| 1.0 / l.sqrt());
                scaled.dot(&q.t())
            }
        })
    }

    /// Apply `B^{-1/2}` to every row of `x`.
    pub fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.validate()?;
        self.check_dim(x.ncols())?;
        Ok(match self {
            Self::Identity => x.clone(),
            Self::ScaledIdentity { gamma } => x / *gamma,
            Self::Diagonal { inv_sqrt } => x * inv_sqrt,
            Self::EigenFactorized { .. } => x.dot(&self.inv_sqrt_matrix(x.ncols())?),
        })
    }

    /// `B^{-1/2} Θᵀ`, the `dim × M` projection matrix for a slice set.
    fn projection(&self, slices: &SliceSet) -> Result<Array2<f64>> {
        let dirs_t = slices.directions().t();
        Ok(match self {
            Self::Identity => dirs_t.to_owned(),
            Self::ScaledIdentity { gamma } => dirs_t.mapv(|v| v / gamma),
            Self::Diagonal { inv_sqrt } => {
                let col = inv_sqrt.view().insert_axis(Axis(1));
                &dirs_t * &col
            }
            Self::EigenFactorized { .. } => {
                self.inv_sqrt_matrix(slices.dim())?.dot(&dirs_t)
            }
        })
    }
}

/// A weighting whose entries may live on a tape.
#[derive(Debug, Clone, Copy)]
pub enum WeightVar<'a> {
    Fixed(&'a WeightingOperator),
    /// `1 × 1` variable holding `1/γ` for `B = γ² I`.
    Scalar(Var),
    /// `d × 1` variable holding the diagonal of `B^{-1/2}`.
    Diagonal(Var),
    /// `d × d` variable holding a symmetric `B^{-1/2}`.
    Dense(Var),
}

fn projection_var(tape: &Tape, weighting: WeightVar<'_>, slices: &SliceSet) -> Result<Var> {
    let d = slices.dim();
    let positive = |v: Var, what: &str| -> Result<()> {
        let value = tape.value(v);
        if value.iter().all(|x| x.is_finite() && *x > 0.0) {
            Ok(())
        } else {
            Err(contract(
                "sliced_w2",
                format!("{what} weighting has a non-positive or non-finite entry"),
            ))
        }
    };
    match weighting {
        WeightVar::Fixed(op) => {
            op.validate()?;
            op.check_dim(d)?;
            Ok(tape.constant(op.projection(slices)?))
        }
        WeightVar::Scalar(s) => {
            if tape.shape(s) != (1, 1) {
                return Err(contract("sliced_w2", "scalar weighting must be 1x1"));
            }
            positive(s, "scalar")?;
            let dirs = tape.constant(slices.directions().t().to_owned());
            tape.mul(dirs, s)
        }
        WeightVar::Diagonal(w) => {
            if tape.shape(w) != (d, 1) {
                return Err(contract(
                    "sliced_w2",
                    format!("diagonal weighting must be {d}x1, got {:?}", tape.shape(w)),
                ));
            }
            positive(w, "diagonal")?;
            let dirs = tape.constant(slices.directions().t().to_owned());
            tape.mul(dirs, w)
        }
        WeightVar::Dense(w) => {
            if tape.shape(w) != (d, d) {
                return Err(contract(
                    "sliced_w2",
                    format!("dense weighting must be {d}x{d}, got {:?}", tape.shape(w)),
                ));
            }
            if tape.value(w).iter().any(|x| !x.is_finite()) {
                return Err(contract("sliced_w2", "dense weighting has non-finite entries"));
            }
            let dirs = tape.constant(slices.directions().t().to_owned());
            tape.matmul(w, dirs)
        }
    }
}

/// Squared sliced 2-Wasserstein distance between the rows of `nu` and `mu`
/// (both `N × d`), averaged over the slices. Differentiable in both sample
/// sets and in the weighting.
pub fn sliced_w2(
    tape: &Tape,
    nu: Var,
    mu: Var,
    weighting: WeightVar<'_>,
    slices: &SliceSet,
) -> Result<Var> {
    if slices.is_empty() {
        return Err(contract("sliced_w2", "no slices"));
    }
    let (n_nu, d_nu) = tape.shape(nu);
    let (n_mu, d_mu) = tape.shape(mu);
    if n_nu != n_mu || d_nu != d_mu {
        return Err(contract(
            "sliced_w2",
            format!("sample sets {n_nu}x{d_nu} and {n_mu}x{d_mu} differ in shape"),
        ));
    }
    if n_nu == 0 {
        return Err(contract("sliced_w2", "empty sample sets"));
    }
    if d_nu != slices.dim() {
        return Err(contract(
            "sliced_w2",
            format!("slices live in dimension {}, samples in {d_nu}", slices.dim()),
        ));
    }
    let proj = projection_var(tape, weighting, slices)?;
    let project_sorted = |x: Var| -> Result<Var> {
        let p = tape.matmul(x, proj)?;
        let pt = tape.transpose(p)?;
        tape.sort_rows(pt)
    };
    let a = project_sorted(nu)?;
    let b = project_sorted(mu)?;
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Value-only [`sliced_w2`] for plain matrices.
pub fn sliced_w2_value(
    nu: &Array2<f64>,
    mu: &Array2<f64>,
    weighting: &WeightingOperator,
    slices: &SliceSet,
) -> Result<f64> {
    let tape = Tape::new();
    let a = tape.constant(nu.clone());
    let b = tape.constant(mu.clone());
    let out = sliced_w2(&tape, a, b, WeightVar::Fixed(weighting), slices)?;
    tape.item(out)
}

/// `(1/N) Σ (a₍ᵢ₎ − b₍ᵢ₎)²` over order statistics.
pub fn wasserstein2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(contract(
            "wasserstein2_1d",
            format!("sample sizes {} and {} must be equal and nonzero", a.len(), b.len()),
        ));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable_by(f64::total_cmp);
    b.sort_unstable_by(f64::total_cmp);
    let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// Differentiable [`wasserstein2_1d`] between two `1 × N` rows.
pub fn wasserstein2_1d_var(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let (ra, na) = tape.shape(a);
    let (rb, nb) = tape.shape(b);
    if ra != 1 || rb != 1 || na != nb || na == 0 {
        return Err(contract(
            "wasserstein2_1d",
            format!("expected two 1xN rows of equal length, got {ra}x{na} and {rb}x{nb}"),
        ));
    }
    let sa = tape.sort_rows(a)?;
    let sb = tape.sort_rows(b)?;
    let diff = tape.sub(sa, sb)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Largest sample count [`w2_exact_small`] accepts.
pub const EXACT_W2_MAX: usize = 10;

/// Exact squared 2-Wasserstein distance between two equal-size point clouds
/// (rows), by enumerating every assignment. Test oracle only.
pub fn w2_exact_small(nu: &Array2<f64>, mu: &Array2<f64>) -> Result<f64> {
    let n = nu.nrows();
    if n != mu.nrows() || nu.ncols() != mu.ncols() || n == 0 {
        return Err(contract(
            "w2_exact_small",
            format!("point sets {:?} and {:?} must match in shape", nu.dim(), mu.dim()),
        ));
    }
    if n > EXACT_W2_MAX {
        return Err(contract(
            "w2_exact_small",
            format!("{n} points exceed the enumeration limit of {EXACT_W2_MAX}"),
        ));
    }
    let cost = Tensor::from_shape_fn((n, n), |(i, j)| {
        let d = &nu.row(i) - &mu.row(j);
        d.dot(&d)
    });
    // Heap's algorithm over assignments i -> perm[i].
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |p: &[usize]| -> f64 { p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum() };
    let mut best = total(&perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(total(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(best / n as f64)
}
