//! Gaussian score with respect to the covariance, and its Fisher information.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::sym::{duplication_matrix, SymMatrix};
use crate::{Error, Result};

/// Largest dimension for which the Fisher matrix is assembled.
pub const FISHER_MAX_DIM: usize = 32;

/// Symmetric gradient of `Σ ↦ ln p(x | Σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub value: SymMatrix,
}

impl ScoreMatrix {
    pub fn dim(&self) -> usize {
        self.value.dim()
    }
}

/// Fisher information of `N(0, Σ)` in `vech(Σ)` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrix {
    dim: usize,
    pub value: DMatrix<f64>,
}

impl FisherMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        self.value.clone().symmetric_eigenvalues()
    }
}

fn check_vec(x: &DVector<f64>, sigma: &SymMatrix) -> Result<()> {
    if x.len() != sigma.dim() {
        return Err(Error::DimensionMismatch {
            expected: sigma.dim(),
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

/// `ln p(x | Σ)` for `N(0, Σ)`.
pub fn gaussian_log_density(x: &DVector<f64>, sigma: &SymMatrix) -> Result<f64> {
    check_vec(x, sigma)?;
    let l = sigma.cholesky_lower()?;
    let y = l.solve_lower_triangular(x).ok_or(Error::NotPositiveDefinite)?;
    let ln_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * y.norm_squared() - 0.5 * ln_det - 0.5 * x.len() as f64 * (2.0 * PI).ln())
}

/// `½(Σ⁻¹xxᵀΣ⁻¹ − Σ⁻¹)`.
pub fn score_matrix(x: &DVector<f64>, sigma: &SymMatrix) -> Result<ScoreMatrix> {
    check_vec(x, sigma)?;
    let p = sigma.inverse_pd()?;
    let px = p.as_matrix() * x;
    let outer = &px * px.transpose();
    Ok(ScoreMatrix {
        value: SymMatrix::symmetrized((outer - p.as_matrix()) * 0.5),
    })
}

/// `½ Dᵀ (Σ⁻¹ ⊗ Σ⁻¹) D`, indexed by the `vech` pairs.
pub fn fisher_information(sigma: &SymMatrix) -> Result<FisherMatrix> {
    let d = sigma.dim();
    if d > FISHER_MAX_DIM {
        return Err(Error::DimensionTooLarge {
            dim: d,
            max: FISHER_MAX_DIM,
        });
    }
    let p = sigma.inverse_pd()?;
    let kron = p.as_matrix().kronecker(p.as_matrix());
    let dup = duplication_matrix(d)?;
    let dm = dup.matrix();
    let mut value = dm.transpose() * kron * dm * 0.5;
    // exact symmetry for downstream eigen solvers
    value = (&value + value.transpose()) * 0.5;
    Ok(FisherMatrix { dim: d, value })
}

/// `λ_max` of the Fisher matrix next to its bound `λ_min(Σ)⁻²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherBound {
    pub lmax: f64,
    pub bound: f64,
}

impl FisherBound {
    pub fn holds(&self) -> bool {
        self.lmax <= self.bound * (1.0 + 1e-10) + 1e-10
    }
}

pub fn fisher_lambda_max_bound(sigma: &SymMatrix) -> Result<FisherBound> {
    let fisher = fisher_information(sigma)?;
    let lmax = fisher.eigenvalues().max();
    let lmin = sigma.lambda_min()?;
    let out = FisherBound {
        lmax,
        bound: lmin.powi(-2),
    };
    debug_assert!(out.holds(), "fisher bound violated: {out:?}");
    Ok(out)
}

/// `Σ(B + Bᵀ)Σ + Σ·Tr(BΣ)`, which equals `E[xxᵀBxxᵀ]` for `x ~ N(0, Σ)`.
pub fn fourth_moment_rhs(b: &DMatrix<f64>, sigma: &SymMatrix) -> Result<DMatrix<f64>> {
    let d = sigma.dim();
    if b.nrows() != d || b.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: if b.nrows() != d { b.nrows() } else { b.ncols() },
        });
    }
    let s = sigma.as_matrix();
    let trace = (b * s).trace();
    Ok(s * (b + b.transpose()) * s + s * trace)
}
