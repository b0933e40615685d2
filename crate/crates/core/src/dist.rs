//! Gaussian and Wishart sampling, densities, moments and tail bounds.

use std::f64::consts::{E, PI};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::sym::SymMatrix;
use crate::{Error, Result, RngStream};

/// `Σ ~ W_d(D; V)`: `Σ = GGᵀ` with `D` i.i.d. `N(0, V)` columns in `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct WishartParams {
    dof: usize,
    scale: SymMatrix,
}

impl WishartParams {
    pub fn new(dof: usize, scale: SymMatrix) -> Result<Self> {
        if dof == 0 {
            return Err(Error::param("dof", "degrees of freedom must be at least 1"));
        }
        if !scale.is_positive_definite() {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self { dof, scale })
    }

    /// `W_d(D; I/D)`, the law of the normalised Wishart matrix.
    pub fn normalized(d: usize, dof: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::EmptyDimension);
        }
        Self::new(dof, SymMatrix::scaled_identity(d, 1.0 / dof as f64))
    }

    pub fn dim(&self) -> usize {
        self.scale.dim()
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn scale(&self) -> &SymMatrix {
        &self.scale
    }

    /// Inverse-Wishart second moments exist only for `D > d + 3`.
    pub fn inverse_moments_valid(&self) -> bool {
        self.dof > self.dim() + 3
    }
}

/// Prior `Σ = GGᵀ/D` with `G` a `d x D` standard Gaussian matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormalizedWishartPrior {
    dim: usize,
    dof: usize,
}

impl NormalizedWishartPrior {
    /// The default prior, `D = 2d`.
    pub fn new(dim: usize) -> Result<Self> {
        Self::with_dof(dim, 2 * dim)
    }

    pub fn with_dof(dim: usize, dof: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyDimension);
        }
        if dof == 0 {
            return Err(Error::param("dof", "degrees of freedom must be at least 1"));
        }
        Ok(Self { dim, dof })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn params(&self) -> WishartParams {
        WishartParams::normalized(self.dim, self.dof).expect("validated in constructor")
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> SymMatrix {
        let g = standard_normals(rng, self.dim, self.dof);
        SymMatrix::symmetrized(&g * g.transpose() / self.dof as f64)
    }
}

/// `n` samples in `R^d`, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: DMatrix<f64>,
}

impl Dataset {
    pub fn new(columns: DMatrix<f64>) -> Result<Self> {
        if columns.nrows() == 0 {
            return Err(Error::EmptyDimension);
        }
        if columns.ncols() == 0 {
            return Err(Error::param("n", "dataset needs at least one sample"));
        }
        if columns.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { columns })
    }

    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn n(&self) -> usize {
        self.columns.ncols()
    }

    pub fn columns(&self) -> &DMatrix<f64> {
        &self.columns
    }

    /// `XXᵀ`.
    pub fn gram(&self) -> SymMatrix {
        SymMatrix::symmetrized(&self.columns * self.columns.transpose())
    }
}

/// `rows x cols` i.i.d. standard normals, filled column by column.
pub fn standard_normals<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    DMatrix::from_vec(rows, cols, data)
}

/// Draws `X = L Z` for a lower Cholesky factor `L`.
pub fn gaussian_columns<R: Rng + ?Sized>(chol_lower: &DMatrix<f64>, n: usize, rng: &mut R) -> Dataset {
    let z = standard_normals(rng, chol_lower.nrows(), n);
    Dataset {
        columns: chol_lower * z,
    }
}

/// `n` i.i.d. `N(0, Σ)` columns.
pub fn sample_gaussian_dataset(sigma: &SymMatrix, n: usize, stream: &RngStream) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::param("n", "dataset needs at least one sample"));
    }
    let l = sigma.cholesky_lower()?;
    Ok(gaussian_columns(&l, n, &mut stream.rng()))
}

/// How a Wishart matrix is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WishartMethod {
    /// Form `G` explicitly, `O(d²D)`.
    #[default]
    Direct,
    /// Bartlett decomposition, `O(d³)` independent of `D`.
    Bartlett,
}

/// Wishart sampler with the scale factor precomputed.
#[derive(Debug, Clone)]
pub struct WishartSampler {
    dof: usize,
    chol: DMatrix<f64>,
    method: WishartMethod,
}

impl WishartSampler {
    pub fn new(params: &WishartParams, method: WishartMethod) -> Result<Self> {
        if method == WishartMethod::Bartlett && params.dof < params.dim() {
            return Err(Error::Regime(format!(
                "Bartlett sampling needs D >= d, got D = {} < d = {}",
                params.dof,
                params.dim()
            )));
        }
        Ok(Self {
            dof: params.dof,
            chol: params.scale.cholesky_lower()?,
            method,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SymMatrix {
        let d = self.chol.nrows();
        match self.method {
            WishartMethod::Direct => {
                let g = &self.chol * standard_normals(rng, d, self.dof);
                SymMatrix::symmetrized(&g * g.transpose())
            }
            WishartMethod::Bartlett => {
                let mut a = DMatrix::zeros(d, d);
                for i in 0..d {
                    let chi = ChiSquared::new((self.dof - i) as f64).expect("positive dof");
                    a[(i, i)] = chi.sample(rng).sqrt();
                    for j in 0..i {
                        a[(i, j)] = StandardNormal.sample(rng);
                    }
                }
                let la = &self.chol * a;
                SymMatrix::symmetrized(&la * la.transpose())
            }
        }
    }
}

pub fn sample_wishart(params: &WishartParams, stream: &RngStream) -> Result<SymMatrix> {
    Ok(WishartSampler::new(params, WishartMethod::Direct)?.sample(&mut stream.rng()))
}

pub fn sample_normalized_wishart(prior: &NormalizedWishartPrior, stream: &RngStream) -> SymMatrix {
    prior.sample_with(&mut stream.rng())
}

/// `ln Γ_d(a) = d(d-1)/4 · ln π + Σ_{j=1..d} ln Γ(a + (1-j)/2)`.
pub fn ln_multivariate_gamma(d: usize, a: f64) -> f64 {
    let df = d as f64;
    df * (df - 1.0) / 4.0 * PI.ln() + (1..=d).map(|j| ln_gamma(a + (1.0 - j as f64) / 2.0)).sum::<f64>()
}

/// Log-density of `W_d(D; V)` at a positive definite `Σ`.
pub fn wishart_log_density(sigma: &SymMatrix, params: &WishartParams) -> Result<f64> {
    let d = params.dim();
    if sigma.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: sigma.dim(),
        });
    }
    let dof = params.dof as f64;
    let df = d as f64;
    if dof <= df - 1.0 {
        return Err(Error::Regime(format!(
            "Wishart density needs D > d - 1, got D = {dof}, d = {d}"
        )));
    }
    let ln_det_sigma = sigma.ln_det_pd()?;
    let ln_det_v = params.scale.ln_det_pd()?;
    let v_inv = params.scale.inverse_pd()?;
    Ok((dof - df - 1.0) / 2.0 * ln_det_sigma
        - 0.5 * v_inv.frobenius_dot(sigma)
        - dof * df / 2.0 * 2f64.ln()
        - dof / 2.0 * ln_det_v
        - ln_multivariate_gamma(d, dof / 2.0))
}

/// Symmetric gradient of the Wishart log-density, `½((D−d−1)Σ⁻¹ − V⁻¹)`.
///
/// This is the negative of [`stein_haff_weight`].
pub fn wishart_log_density_sym_gradient(sigma: &SymMatrix, params: &WishartParams) -> Result<SymMatrix> {
    Ok(stein_haff_weight(sigma, params)?.scale(-1.0))
}

/// `½(V⁻¹ − (D−d−1)Σ⁻¹) = −∇ ln p_W(Σ)`, the weight paired with `g(Σ)` in the
/// Stein-Haff identity `E[div g] = E[⟨weight, g⟩]`.
pub fn stein_haff_weight(sigma: &SymMatrix, params: &WishartParams) -> Result<SymMatrix> {
    let d = params.dim();
    if sigma.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: sigma.dim(),
        });
    }
    let coeff = params.dof as f64 - d as f64 - 1.0;
    let v_inv = params.scale.inverse_pd()?;
    if coeff == 0.0 {
        return Ok(v_inv.scale(0.5));
    }
    let s_inv = sigma.inverse_pd()?;
    Ok(v_inv.sub(&s_inv.scale(coeff)).scale(0.5))
}

/// Closed-form mean and entrywise variances of `Σ⁻¹` for Wishart `Σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct InvWishartMoments {
    pub mean: SymMatrix,
    /// `variance[(i, j)] = Var[(Σ⁻¹)_ij]`.
    pub variance: DMatrix<f64>,
    dof: usize,
}

impl InvWishartMoments {
    pub fn var_diag(&self, i: usize) -> f64 {
        self.variance[(i, i)]
    }

    pub fn var_offdiag(&self, i: usize, j: usize) -> f64 {
        self.variance[(i, j)]
    }

    /// `(D−d−1)² Σ_{i,j} Var[(Σ⁻¹)_ij] = E‖(D−d−1)Σ⁻¹ − V⁻¹‖_F²`.
    pub fn scaled_variance_sum(&self) -> f64 {
        let k = self.dof as f64 - self.variance.nrows() as f64 - 1.0;
        k * k * self.variance.sum()
    }
}

pub fn inv_wishart_moments(params: &WishartParams) -> Result<InvWishartMoments> {
    let d = params.dim();
    if !params.inverse_moments_valid() {
        return Err(Error::Regime(format!(
            "inverse-Wishart variances need D > d + 3, got D = {}, d = {d}",
            params.dof
        )));
    }
    let dof = params.dof as f64;
    let df = d as f64;
    let k = dof - df - 1.0;
    let v_inv = params.scale.inverse_pd()?;
    let variance = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            2.0 * v_inv.get(i, i).powi(2) / (k * k * (dof - df - 3.0))
        } else {
            ((dof - df + 1.0) * v_inv.get(i, j).powi(2) + k * v_inv.get(i, i) * v_inv.get(j, j))
                / (k * k * (dof - df - 3.0) * (dof - df))
        }
    });
    Ok(InvWishartMoments {
        mean: v_inv.scale(1.0 / k),
        variance,
        dof: params.dof,
    })
}

/// Chi-squared tail thresholds at level `e^{-x}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chi2Tail {
    /// `√(8d² + 18x²)`.
    pub threshold: f64,
    /// `e^{-x}`.
    pub bound: f64,
    /// `d + 2√(dx) + 2x`, never above `threshold`.
    pub laurent_massart: f64,
}

pub fn chi2_tail_threshold(dof: f64, x: f64) -> Result<Chi2Tail> {
    if !(dof > 0.0 && dof.is_finite()) {
        return Err(Error::param(
            "d",
            format!("degrees of freedom must be positive, got {dof}"),
        ));
    }
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::param("x", format!("must be positive, got {x}")));
    }
    Ok(Chi2Tail {
        threshold: (8.0 * dof * dof + 18.0 * x * x).sqrt(),
        bound: (-x).exp(),
        laurent_massart: dof + 2.0 * (dof * x).sqrt() + 2.0 * x,
    })
}

/// Eigenvalue tail bounds for the normalised Wishart prior with `D = 2d`.
///
/// A `None` marks a bound whose hypotheses fail at `(d, t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenTailBounds {
    /// `P[λ_max ≥ t] ≤ exp(−dδ²)` with `t = (1 + 1/√2 + δ)²`; needs `δ > 0`.
    pub pmax_bound: Option<f64>,
    /// `P[1/λ_min ≥ t] ≤ (2e)^{d+1} / (√(2πd) t^{d+1})`; needs `d ≥ 10`.
    pub pmin_bound: Option<f64>,
    /// `P[κ > t] < 13^{d+1} / (√(2π) t^{(d+1)/2})`.
    pub cond_bound: f64,
    /// `E[1/λ_min] ≤ 6.5`; needs `d ≥ 10`.
    pub inv_lmin_mean_bound: Option<f64>,
}

/// Edge of the bulk for `λ_max` when `D = 2d`.
pub const LAMBDA_MAX_EDGE: f64 = 1.0 + std::f64::consts::FRAC_1_SQRT_2;

pub fn wishart_eigen_tail_bounds(d: usize, t: f64) -> Result<EigenTailBounds> {
    if d == 0 {
        return Err(Error::EmptyDimension);
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::param("t", format!("threshold must be positive, got {t}")));
    }
    let df = d as f64;
    let delta = t.sqrt() - LAMBDA_MAX_EDGE;
    let pmax_bound = (delta > 0.0).then(|| (-df * delta * delta).exp());
    let large_d = d >= 10;
    let pmin_bound =
        large_d.then(|| ((df + 1.0) * (2.0 * E).ln() - 0.5 * (2.0 * PI * df).ln() - (df + 1.0) * t.ln()).exp());
    let cond_bound = ((df + 1.0) * 13f64.ln() - 0.5 * (2.0 * PI).ln() - (df + 1.0) / 2.0 * t.ln()).exp();
    Ok(EigenTailBounds {
        pmax_bound,
        pmin_bound,
        cond_bound,
        inv_lmin_mean_bound: large_d.then_some(6.5),
    })
}

/// `P[λ_max(Σ) ≥ 10] ≤ e^{-2d}`.
pub fn lambda_max_ten_bound(d: usize) -> f64 {
    (-2.0 * d as f64).exp()
}

/// `P[λ_min(Σ) < 0.09] ≤ d^{-1/2} 2^{-d}`.
pub fn lambda_min_small_bound(d: usize) -> f64 {
    let df = d as f64;
    df.powf(-0.5) * 2f64.powf(-df)
}
