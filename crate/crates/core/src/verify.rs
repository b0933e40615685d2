//! Monte Carlo cross-checks of the closed-form moments and tail bounds.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dist::{
    chi2_tail_threshold, inv_wishart_moments, lambda_max_ten_bound, lambda_min_small_bound, standard_normals,
    wishart_eigen_tail_bounds, NormalizedWishartPrior, WishartMethod, WishartParams, WishartSampler,
};
use crate::mc::{binomial_se, par_moments, par_trials, BoundReport, CheckStatus, Direction, McEstimate, VecMoments};
use crate::score::{fisher_information, fourth_moment_rhs, score_matrix};
use crate::sym::{half_len, halfvec_grad_from_sym_grad, lower_pairs, SymMatrix, WellConditionedSet};
use crate::{Error, Result, RngStream};

/// Tolerance, in standard errors, for entrywise moment comparisons.
pub const ENTRYWISE_SE: f64 = 5.0;

/// Entrywise comparison of Monte Carlo means against closed forms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntrywiseCheck {
    /// Largest `|mean − expected| / se` over the compared entries.
    pub max_abs_z: f64,
    /// Index of that entry.
    pub worst: usize,
    pub entries: usize,
    pub draws: usize,
    pub master_seed: u64,
}

impl EntrywiseCheck {
    fn from_moments(m: &VecMoments, expected: &[f64], seed: u64) -> Self {
        let mut max_abs_z = 0.0;
        let mut worst = 0;
        for (i, e) in expected.iter().enumerate() {
            let z = m.estimate(i, seed).z_score(*e).abs();
            // NaN never compares greater; an exact match with zero se gives 0.
            if z > max_abs_z || z.is_nan() {
                max_abs_z = if z.is_nan() { f64::INFINITY } else { z };
                worst = i;
            }
        }
        Self {
            max_abs_z,
            worst,
            entries: expected.len(),
            draws: m.count(),
            master_seed: seed,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_abs_z <= ENTRYWISE_SE
    }

    /// `max |z| ≤ 5` as a report with no sampling error on the statistic.
    pub fn to_report(&self) -> BoundReport {
        BoundReport::new(
            McEstimate::exact(self.max_abs_z, self.draws, self.master_seed),
            ENTRYWISE_SE,
            Direction::Le,
        )
    }
}

fn check_draws(draws: usize) -> Result<()> {
    if draws < 2 {
        return Err(Error::param("draws", format!("need at least 2, got {draws}")));
    }
    Ok(())
}

fn normal_vector(chol: &DMatrix<f64>, rng: &mut rand_chacha::ChaCha12Rng) -> DVector<f64> {
    let z = standard_normals(rng, chol.nrows(), 1);
    DVector::from_column_slice((chol * z).as_slice())
}

/// `E[score] = 0`, every entry of the symmetric score.
pub fn score_mean_check(sigma: &SymMatrix, draws: usize, stream: &RngStream) -> Result<EntrywiseCheck> {
    check_draws(draws)?;
    let d = sigma.dim();
    let chol = sigma.cholesky_lower()?;
    let m = par_moments(stream, draws, d * d, |rng, out| {
        let x = normal_vector(&chol, rng);
        out.copy_from_slice(score_matrix(&x, sigma)?.value.as_matrix().as_slice());
        Ok(())
    })?;
    Ok(EntrywiseCheck::from_moments(&m, &vec![0.0; d * d], stream.master_seed))
}

/// Fisher matrix against the Monte Carlo second moment of `vech` scores.
pub fn fisher_mc_check(sigma: &SymMatrix, draws: usize, stream: &RngStream) -> Result<EntrywiseCheck> {
    check_draws(draws)?;
    let d = sigma.dim();
    let k = half_len(d);
    let fisher = fisher_information(sigma)?;
    let chol = sigma.cholesky_lower()?;
    let m = par_moments(stream, draws, k * k, |rng, out| {
        let x = normal_vector(&chol, rng);
        let g = halfvec_grad_from_sym_grad(&score_matrix(&x, sigma)?.value);
        let v = g.values();
        for a in 0..k {
            for b in 0..k {
                out[a * k + b] = v[a] * v[b];
            }
        }
        Ok(())
    })?;
    let expected: Vec<f64> = (0..k * k).map(|i| fisher.value[(i / k, i % k)]).collect();
    Ok(EntrywiseCheck::from_moments(&m, &expected, stream.master_seed))
}

/// `E[xxᵀBxxᵀ]` against `Σ(B + Bᵀ)Σ + Σ Tr(BΣ)`.
pub fn fourth_moment_mc_check(
    b: &DMatrix<f64>,
    sigma: &SymMatrix,
    draws: usize,
    stream: &RngStream,
) -> Result<EntrywiseCheck> {
    check_draws(draws)?;
    let d = sigma.dim();
    let expected = fourth_moment_rhs(b, sigma)?;
    let chol = sigma.cholesky_lower()?;
    let m = par_moments(stream, draws, d * d, |rng, out| {
        let x = normal_vector(&chol, rng);
        let q = x.dot(&(b * &x));
        out.copy_from_slice((&x * x.transpose() * q).as_slice());
        Ok(())
    })?;
    Ok(EntrywiseCheck::from_moments(
        &m,
        expected.as_slice(),
        stream.master_seed,
    ))
}

/// Inverse-Wishart mean and entrywise variance checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvWishartCheck {
    pub mean: EntrywiseCheck,
    /// Compares `E[(Σ⁻¹_ij − μ_ij)²]`, centred at the closed-form mean, with
    /// the closed-form variance.
    pub variance: EntrywiseCheck,
    /// `(D−d−1)² Σ Var[Σ⁻¹_ij]` from the closed form.
    pub scaled_variance_sum: f64,
    /// `16 d³`.
    pub scaled_variance_bound: f64,
}

impl InvWishartCheck {
    pub fn passed(&self) -> bool {
        self.mean.passed() && self.variance.passed() && self.scaled_variance_sum <= self.scaled_variance_bound
    }
}

/// Samples `Σ ~ W_d(D; V)` and compares the moments of `Σ⁻¹` entrywise
/// over the lower triangle.
pub fn inv_wishart_mc_check(params: &WishartParams, draws: usize, stream: &RngStream) -> Result<InvWishartCheck> {
    check_draws(draws)?;
    let d = params.dim();
    let closed = inv_wishart_moments(params)?;
    let pairs: Vec<(usize, usize)> = lower_pairs(d).collect();
    let k = pairs.len();
    let sampler = WishartSampler::new(params, WishartMethod::Direct)?;
    let m = par_moments(stream, draws, 2 * k, |rng, out| {
        let inv = sampler.sample(rng).inverse_pd()?;
        for (a, (i, j)) in pairs.iter().enumerate() {
            let y = inv.get(*i, *j);
            out[a] = y;
            out[k + a] = (y - closed.mean.get(*i, *j)).powi(2);
        }
        Ok(())
    })?;
    let seed = stream.master_seed;
    let mean_exp: Vec<f64> = pairs.iter().map(|(i, j)| closed.mean.get(*i, *j)).collect();
    let var_exp: Vec<f64> = pairs.iter().map(|(i, j)| closed.variance[(*i, *j)]).collect();
    Ok(InvWishartCheck {
        mean: EntrywiseCheck::from_moments(&m.slice(0..k), &mean_exp, seed),
        variance: EntrywiseCheck::from_moments(&m.slice(k..2 * k), &var_exp, seed),
        scaled_variance_sum: closed.scaled_variance_sum(),
        scaled_variance_bound: 16.0 * (d as f64).powi(3),
    })
}

/// Normalised-Wishart first and second moments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalizedMomentCheck {
    /// `E[Σ] = I`, lower triangle.
    pub mean: EntrywiseCheck,
    /// Monte Carlo `E‖Σ − I‖_F²`.
    pub frobenius_sq: McEstimate,
}

impl NormalizedMomentCheck {
    /// Compares the Frobenius second moment against `target` within 5 se.
    pub fn frobenius_report(&self, target: f64) -> BoundReport {
        let z = self.frobenius_sq.z_score(target).abs();
        BoundReport::new(
            McEstimate::exact(z, self.frobenius_sq.trials, self.frobenius_sq.master_seed),
            ENTRYWISE_SE,
            Direction::Le,
        )
        .with_note("estimate", self.frobenius_sq.mean)
        .with_note("std_error", self.frobenius_sq.std_error)
        .with_note("target", target)
    }
}

pub fn normalized_wishart_moment_check(
    prior: &NormalizedWishartPrior,
    draws: usize,
    stream: &RngStream,
) -> Result<NormalizedMomentCheck> {
    check_draws(draws)?;
    let d = prior.dim();
    let pairs: Vec<(usize, usize)> = lower_pairs(d).collect();
    let k = pairs.len();
    let eye = SymMatrix::identity(d);
    let m = par_moments(stream, draws, k + 1, |rng, out| {
        let s = prior.sample_with(rng);
        for (a, (i, j)) in pairs.iter().enumerate() {
            out[a] = s.get(*i, *j);
        }
        out[k] = s.sub(&eye).frobenius_norm().powi(2);
        Ok(())
    })?;
    let seed = stream.master_seed;
    let expected: Vec<f64> = pairs.iter().map(|(i, j)| if i == j { 1.0 } else { 0.0 }).collect();
    Ok(NormalizedMomentCheck {
        mean: EntrywiseCheck::from_moments(&m.slice(0..k), &expected, seed),
        frobenius_sq: m.estimate(k, seed),
    })
}

/// One-sided dominance of an empirical frequency by a bound, with the
/// standard error taken at the bound.
pub fn frequency_report(hits: usize, draws: usize, bound: f64, seed: u64) -> BoundReport {
    let est = McEstimate {
        mean: hits as f64 / draws as f64,
        std_error: binomial_se(bound, draws),
        trials: draws,
        master_seed: seed,
    };
    BoundReport::new(est, bound, Direction::Le).with_note("hits", hits as f64)
}

/// `P[χ²_d ≥ √(8d² + 18x²)] ≤ e^{−x}`.
pub fn chi2_tail_check(d: usize, x: f64, draws: usize, stream: &RngStream) -> Result<BoundReport> {
    check_draws(draws)?;
    let tail = chi2_tail_threshold(d as f64, x)?;
    let hits = par_trials(stream, draws, |_, s| {
        let z = standard_normals(&mut s.rng(), d, 1);
        Ok(usize::from(z.norm_squared() >= tail.threshold))
    })?
    .into_iter()
    .sum();
    Ok(frequency_report(hits, draws, tail.bound, stream.master_seed).with_note("threshold", tail.threshold))
}

/// Extreme eigenvalues of `draws` normalised-Wishart matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSample {
    pub dim: usize,
    pub lambda_min: Vec<f64>,
    pub lambda_max: Vec<f64>,
    pub master_seed: u64,
}

impl SpectrumSample {
    pub fn collect(prior: &NormalizedWishartPrior, draws: usize, stream: &RngStream) -> Result<Self> {
        check_draws(draws)?;
        let ext = par_trials(stream, draws, |_, s| {
            let ev = prior.sample_with(&mut s.rng()).eigenvalues()?;
            Ok((ev[0], ev[ev.len() - 1]))
        })?;
        Ok(Self {
            dim: prior.dim(),
            lambda_min: ext.iter().map(|e| e.0).collect(),
            lambda_max: ext.iter().map(|e| e.1).collect(),
            master_seed: stream.master_seed,
        })
    }

    pub fn draws(&self) -> usize {
        self.lambda_min.len()
    }

    fn count(&self, pred: impl Fn(f64, f64) -> bool) -> usize {
        self.lambda_min
            .iter()
            .zip(&self.lambda_max)
            .filter(|(lo, hi)| pred(**lo, **hi))
            .count()
    }

    /// Fraction of draws outside the well-conditioned set.
    pub fn reject_rate(&self) -> f64 {
        let w = WellConditionedSet::default();
        self.count(|lo, hi| !w.contains_spectrum(&[lo, hi])) as f64 / self.draws() as f64
    }

    /// `P[λ_max ≥ 10] ≤ e^{−2d}`.
    pub fn lambda_max_ten_check(&self) -> BoundReport {
        let hits = self.count(|_, hi| hi >= 10.0);
        frequency_report(hits, self.draws(), lambda_max_ten_bound(self.dim), self.master_seed)
    }

    /// `P[λ_max ≥ t] ≤ exp(−dδ²)`.
    pub fn lambda_max_check(&self, t: f64) -> Result<BoundReport> {
        let bounds = wishart_eigen_tail_bounds(self.dim, t)?;
        let hits = self.count(|_, hi| hi >= t);
        Ok(self.optional(hits, bounds.pmax_bound, "needs t > (1 + 1/sqrt 2)^2"))
    }

    /// `P[1/λ_min ≥ t] ≤ (2e)^{d+1} / (√(2πd) t^{d+1})`.
    pub fn inv_lambda_min_check(&self, t: f64) -> Result<BoundReport> {
        let bounds = wishart_eigen_tail_bounds(self.dim, t)?;
        let hits = self.count(|lo, _| 1.0 / lo >= t);
        Ok(self.optional(hits, bounds.pmin_bound, "needs d >= 10"))
    }

    /// `P[κ > t] ≤ 13^{d+1} / (√(2π) t^{(d+1)/2})`.
    pub fn condition_check(&self, t: f64) -> Result<BoundReport> {
        let bounds = wishart_eigen_tail_bounds(self.dim, t)?;
        let hits = self.count(|lo, hi| hi / lo > t);
        Ok(frequency_report(
            hits,
            self.draws(),
            bounds.cond_bound.min(1.0),
            self.master_seed,
        ))
    }

    /// `P[λ_min < 0.09] ≤ d^{−1/2} 2^{−d}`.
    pub fn lambda_min_small_check(&self) -> BoundReport {
        let hits = self.count(|lo, _| lo < 0.09);
        frequency_report(hits, self.draws(), lambda_min_small_bound(self.dim), self.master_seed)
    }

    /// `E[1/λ_min] ≤ 6.5`.
    pub fn inv_lambda_min_mean_check(&self) -> Result<BoundReport> {
        let inv: Vec<f64> = self.lambda_min.iter().map(|l| 1.0 / l).collect();
        let est = McEstimate::from_samples(&inv, self.master_seed)?;
        let bounds = wishart_eigen_tail_bounds(self.dim, 1.0)?;
        Ok(match bounds.inv_lmin_mean_bound {
            Some(b) => BoundReport::new(est, b, Direction::Le),
            None => BoundReport::skipped(
                CheckStatus::HypothesesNotMet("needs d >= 10".into()),
                est,
                6.5,
                Direction::Le,
            ),
        })
    }

    fn optional(&self, hits: usize, bound: Option<f64>, why: &str) -> BoundReport {
        match bound {
            Some(b) => frequency_report(hits, self.draws(), b, self.master_seed),
            None => BoundReport::skipped(
                CheckStatus::HypothesesNotMet(why.into()),
                McEstimate::exact(hits as f64 / self.draws() as f64, self.draws(), self.master_seed),
                1.0,
                Direction::Le,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_mean_is_zero() {
        let sigma = SymMatrix::from_row_slice(2, &[2.0, 0.3, 0.3, 0.5]).unwrap();
        let c = score_mean_check(&sigma, 20_000, &RngStream::new(1, 0)).unwrap();
        assert!(c.passed(), "{c:?}");
        assert_eq!(c.entries, 4);
    }

    #[test]
    fn fisher_mc_small() {
        let c = fisher_mc_check(&SymMatrix::identity(2), 50_000, &RngStream::new(2, 0)).unwrap();
        assert!(c.passed(), "{c:?}");
    }

    #[test]
    fn fourth_moment_scalar() {
        let c = fourth_moment_mc_check(
            &DMatrix::from_element(1, 1, 1.0),
            &SymMatrix::from_diagonal(&[1.5]),
            50_000,
            &RngStream::new(3, 0),
        )
        .unwrap();
        assert!(c.passed(), "{c:?}");
    }

    #[test]
    fn entrywise_detects_wrong_target() {
        let mut m = VecMoments::new(1);
        for i in 0..1000 {
            m.push(&[(i % 2) as f64]);
        }
        assert!(!EntrywiseCheck::from_moments(&m, &[0.9], 0).passed());
        assert!(EntrywiseCheck::from_moments(&m, &[0.5], 0).passed());
    }

    #[test]
    fn frequency_report_direction() {
        assert!(frequency_report(0, 1000, 1e-9, 0).satisfied());
        assert!(!frequency_report(500, 1000, 0.1, 0).satisfied());
    }

    #[test]
    fn chi2_tail_small() {
        let r = chi2_tail_check(5, 2.0, 20_000, &RngStream::new(4, 0)).unwrap();
        assert!(r.satisfied(), "{r:?}");
    }

    #[test]
    fn spectrum_regime_flags() {
        let prior = NormalizedWishartPrior::new(5).unwrap();
        let s = SpectrumSample::collect(&prior, 500, &RngStream::new(5, 0)).unwrap();
        assert!(!s.inv_lambda_min_check(8.0).unwrap().evaluated());
        assert!(!s.inv_lambda_min_mean_check().unwrap().evaluated());
        assert!(!s.lambda_max_check(2.0).unwrap().evaluated());
        assert!(s.lambda_max_ten_check().satisfied());
        assert!((0.0..=1.0).contains(&s.reject_rate()));
    }
}
