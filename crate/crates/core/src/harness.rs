//! The score-attack correlation statistic and the experiments built on it.
//!
//! Every experiment uses the same per-trial stream layout as
//! [`crate::mechanism::measure_error`], so a statistic estimate and an error
//! estimate computed with the same `RngStream` see the same `Σ`, `X` and
//! mechanism noise.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::dist::{gaussian_columns, standard_normals, stein_haff_weight, NormalizedWishartPrior};
use crate::dist::{WishartMethod, WishartParams, WishartSampler};
use crate::mc::{binomial_se, par_trials, BoundReport, CheckStatus, Direction, McEstimate};
use crate::mechanism::{measure_error, streams, MechanismKind, MechanismSpec};
use crate::sym::{lower_pairs, SymMatrix, WellConditionedSet};
use crate::{Error, Result, RngStream};

/// Fewest outer trials accepted by the prior-averaged estimators.
pub const MIN_TRIALS: usize = 100;
/// Smallest dimension covered by the main lower bound.
pub const LOWER_BOUND_MIN_DIM: usize = 20;
/// Smallest dimension covered by the Stein-Haff accuracy bound.
pub const HAFF_MIN_DIM: usize = 5;
/// Smallest grid multiple of `γ d^{3/2}` the statistic tail bound covers.
pub const TAIL_MIN_MULTIPLE: f64 = 6.0;
/// Stream for the out-of-sample point inside a trial.
const FRESH: u64 = 3;

/// One realisation of the statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatisticSample {
    pub value: f64,
    pub in_sample: bool,
    pub trial: usize,
}

/// `A(z, M) = ⟨M − Σ, ½(Σ⁻¹zzᵀΣ⁻¹ − Σ⁻¹)⟩_F`.
pub fn correlation_statistic(z: &DVector<f64>, m_out: &SymMatrix, sigma: &SymMatrix) -> Result<f64> {
    if z.len() != sigma.dim() {
        return Err(Error::DimensionMismatch {
            expected: sigma.dim(),
            got: z.len(),
        });
    }
    Ok(Statistic::new(m_out, sigma)?.value(z.as_view()))
}

/// `A(·, M)` at a fixed `(M, Σ)`, with `Σ⁻¹(M − Σ)Σ⁻¹` precomputed.
#[derive(Debug, Clone)]
pub struct Statistic {
    sandwich: DMatrix<f64>,
    offset: f64,
}

impl Statistic {
    pub fn new(m_out: &SymMatrix, sigma: &SymMatrix) -> Result<Self> {
        if m_out.dim() != sigma.dim() {
            return Err(Error::DimensionMismatch {
                expected: sigma.dim(),
                got: m_out.dim(),
            });
        }
        let p = sigma.inverse_pd()?;
        let delta = m_out.sub(sigma);
        Ok(Self {
            sandwich: p.as_matrix() * delta.as_matrix() * p.as_matrix(),
            offset: delta.frobenius_dot(&p),
        })
    }

    pub fn value(&self, z: DVectorView<f64>) -> f64 {
        0.5 * (z.dot(&(&self.sandwich * z)) - self.offset)
    }

    /// `Σ_i A(x_i, M)` over the columns of `x`.
    pub fn sum(&self, x: &DMatrix<f64>) -> f64 {
        0.5 * ((&self.sandwich * x).dot(x) - x.ncols() as f64 * self.offset)
    }
}

#[derive(Debug, Clone, Copy)]
struct Outcome {
    inside: bool,
    stat_sum: f64,
    err2: f64,
}

fn run_trial(
    spec: &MechanismSpec,
    sigma: &SymMatrix,
    chol: &DMatrix<f64>,
    n: usize,
    trial: &RngStream,
) -> Result<(crate::dist::Dataset, SymMatrix, f64, f64)> {
    let x = gaussian_columns(chol, n, &mut trial.split(streams::DATA).rng());
    let m = spec.evaluate_with_truth(&x, Some(sigma), &mut trial.split(streams::MECHANISM).rng())?;
    let stat = Statistic::new(&m, sigma)?.sum(x.columns());
    let err2 = m.sub(sigma).frobenius_norm().powi(2);
    Ok((x, m, stat, err2))
}

fn prior_outcomes(
    spec: &MechanismSpec,
    prior: &NormalizedWishartPrior,
    n: usize,
    trials: usize,
    stream: &RngStream,
) -> Result<Vec<Outcome>> {
    check_counts(n, trials, MIN_TRIALS)?;
    let w = WellConditionedSet::default();
    par_trials(stream, trials, |_, trial| {
        let sigma = prior.sample_with(&mut trial.split(streams::SIGMA).rng());
        let chol = sigma.cholesky_lower()?;
        let (_, _, stat_sum, err2) = run_trial(spec, &sigma, &chol, n, trial)?;
        Ok(Outcome {
            inside: w.contains(&sigma)?,
            stat_sum,
            err2,
        })
    })
}

fn fixed_outcomes(
    spec: &MechanismSpec,
    sigma: &SymMatrix,
    n: usize,
    trials: usize,
    stream: &RngStream,
) -> Result<Vec<Outcome>> {
    check_counts(n, trials, 2)?;
    let chol = sigma.cholesky_lower()?;
    par_trials(stream, trials, |_, trial| {
        let (_, _, stat_sum, err2) = run_trial(spec, sigma, &chol, n, trial)?;
        Ok(Outcome {
            inside: true,
            stat_sum,
            err2,
        })
    })
}

fn check_counts(n: usize, trials: usize, min_trials: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::param("n", "dataset needs at least one sample"));
    }
    if trials < min_trials {
        return Err(Error::param(
            "trials",
            format!("need at least {min_trials}, got {trials}"),
        ));
    }
    Ok(())
}

fn estimate(values: impl Iterator<Item = f64>, seed: u64) -> Result<McEstimate> {
    let v: Vec<f64> = values.collect();
    McEstimate::from_samples(&v, seed)
}

/// `E[Σ_i A(x_i, M(X))]` with `Σ` drawn from the prior.
pub fn estimate_in_sample_sum(
    spec: &MechanismSpec,
    prior: &NormalizedWishartPrior,
    n: usize,
    trials: usize,
    stream: &RngStream,
) -> Result<McEstimate> {
    let out = prior_outcomes(spec, prior, n, trials, stream)?;
    estimate(out.iter().map(|o| o.stat_sum), stream.master_seed)
}

/// `E_{|Σ}[Σ_i A(x_i, M(X))]` at a fixed `Σ`.
pub fn estimate_in_sample_sum_fixed(
    spec: &MechanismSpec,
    sigma: &SymMatrix,
    n: usize,
    trials: usize,
    stream: &RngStream,
) -> Result<McEstimate> {
    let out = fixed_outcomes(spec, sigma, n, trials, stream)?;
    estimate(out.iter().map(|o| o.stat_sum), stream.master_seed)
}

/// `E[A(z, M(X))]` for a fresh `z ~ N(0, Σ)` independent of `X`.
pub fn estimate_out_of_sample(
    spec: &MechanismSpec,
    prior: &NormalizedWishartPrior,
    n: usize,
    trials: usize,
    stream: &RngStream,
) -> Result<McEstimate> {
    check_counts(n, trials, MIN_TRIALS)?;
    let values = par_trials(stream, trials, |_, trial| {
        let sigma = prior.sample_with(&mut trial.split(streams::SIGMA).rng());
        let chol = sigma.cholesky_lower()?;
        let (_, m, _, _) = run_trial(spec, &sigma, &chol, n, trial)?;
        let z = gaussian_columns(&chol, 1, &mut trial.split(FRESH).rng());
        Ok(Statistic::new(&m, &sigma)?.value(z.columns().column(0)))
    })?;
    McEstimate::from_samples(&values, stream.master_seed)
}

/// Individual statistic values: `n` in-sample values per trial followed by
/// one out-of-sample value, at a fixed `Σ`.
pub fn statistic_samples(
    spec: &MechanismSpec,
    sigma: &SymMatrix,
    n: usize,
    trials: usize,
    stream: &RngStream,
) -> Result<Vec<StatisticSample>> {
    check_counts(n, trials, 1)?;
    let chol = sigma.cholesky_lower()?;
    let per_trial = par_trials(stream, trials, |t, trial| {
        let (x, m, _, _) = run_trial(spec, sigma, &chol, n, trial)?;
        let stat = Statistic::new(&m, sigma)?;
        let mut out: Vec<StatisticSample> = x
            .columns()
            .column_iter()
            .map(|c| StatisticSample {
                value: stat.value(c),
                in_sample: true,
                trial: t,
            })
            .collect();
        let z = gaussian_columns(&chol, 1, &mut trial.split(FRESH).rng());
        out.push(StatisticSample {
            value: stat.value(z.columns().column(0)),
            in_sample: false,
            trial: t,
        });
        Ok(out)
    })?;
    Ok(per_trial.into_iter().flatten().collect())
}

fn not_applicable_for_oracle(spec: &MechanismSpec) -> Option<String> {
    matches!(spec.kind(), MechanismKind::Oracle)
        .then(|| "the oracle mechanism reads Σ directly and is not a function of X".to_string())
}

/// Coordinate pair with the outputs at Sigma + hE and Sigma - hE.
type FdNode = ((usize, usize), DMatrix<f64>, DMatrix<f64>);

/// Compares a finite-difference divergence of `g(Σ) = E_{|Σ}[M(X)]` with the
/// direct Monte Carlo of `Σ_i E_{|Σ}[A(x_i, M(X))]`.
///
/// Inner trial `k` fixes standard normals `Z_k` and the mechanism stream, and
/// every finite-difference node uses `X' = chol(Σ') Z_k`.
pub fn divergence_identity_check(
    spec: &MechanismSpec,
    sigma: &SymMatrix,
    n: usize,
    inner_trials: usize,
    h: f64,
    stream: &RngStream,
) -> Result<BoundReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::param("h", format!("step must be positive, got {h}")));
    }
    if sigma.lambda_min()? <= 2.0 * h {
        return Err(Error::StepTooLarge { h });
    }
    check_counts(n, inner_trials, 2)?;
    let direct = estimate_in_sample_sum_fixed(spec, sigma, n, inner_trials, &stream.split(1))?;
    if let Some(reason) = not_applicable_for_oracle(spec) {
        return Ok(BoundReport::skipped(
            CheckStatus::NotApplicable(reason),
            direct,
            0.0,
            Direction::EqWithin,
        ));
    }
    let d = sigma.dim();
    let nodes: Vec<FdNode> = lower_pairs(d)
        .map(|(i, j)| {
            Ok((
                (i, j),
                sigma.perturbed(i, j, h).cholesky_lower()?,
                sigma.perturbed(i, j, -h).cholesky_lower()?,
            ))
        })
        .collect::<Result<_>>()?;
    let divs = par_trials(&stream.split(0), inner_trials, |_, trial| {
        let z = standard_normals(&mut trial.split(streams::DATA).rng(), d, n);
        let mech = trial.split(streams::MECHANISM);
        let eval = |chol: &DMatrix<f64>, truth: &SymMatrix| -> Result<SymMatrix> {
            let x = crate::dist::Dataset::new(chol * &z)?;
            spec.evaluate_with_truth(&x, Some(truth), &mut mech.rng())
        };
        let mut div = 0.0;
        for ((i, j), plus, minus) in &nodes {
            let mp = eval(plus, &sigma.perturbed(*i, *j, h))?;
            let mm = eval(minus, &sigma.perturbed(*i, *j, -h))?;
            div += (mp.get(*i, *j) - mm.get(*i, *j)) / (2.0 * h);
        }
        Ok(div)
    })?;
    let fd = McEstimate::from_samples(&divs, stream.master_seed)?;
    Ok(
        BoundReport::new(fd.minus_independent(&direct), 0.0, Direction::EqWithin)
            .with_note("fd_divergence", fd.mean)
            .with_note("fd_divergence_se", fd.std_error)
            .with_note("direct_sum", direct.mean)
            .with_note("direct_sum_se", direct.std_error),
    )
}

/// Test functions for the Stein-Haff identity.
#[derive(Debug, Clone, PartialEq)]
pub enum SteinHaffFn {
    Identity,
    Constant(SymMatrix),
    Square,
}

/// Divergence of `Σ ↦ Σ²` under the lower-triangular identification.
pub fn square_divergence(sigma: &SymMatrix) -> f64 {
    (sigma.dim() as f64 + 1.0) * sigma.trace()
}

/// Checks `E[div g(Σ)] = E[⟨½(V⁻¹ − (D−d−1)Σ⁻¹), g(Σ)⟩]` over Wishart draws.
pub fn stein_haff_check(
    g: &SteinHaffFn,
    params: &WishartParams,
    trials: usize,
    stream: &RngStream,
) -> Result<BoundReport> {
    let d = params.dim();
    if params.dof() <= d + 1 {
        return Err(Error::Regime(format!(
            "Stein-Haff check needs D > d + 1, got D = {}, d = {d}",
            params.dof()
        )));
    }
    if let SteinHaffFn::Constant(c) = g {
        if c.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: c.dim(),
            });
        }
    }
    check_counts(1, trials, 2)?;
    let sampler = WishartSampler::new(params, WishartMethod::Direct)?;
    let pairs = par_trials(stream, trials, |_, trial| {
        let sigma = sampler.sample(&mut trial.rng());
        let weight = stein_haff_weight(&sigma, params)?;
        Ok(match g {
            SteinHaffFn::Identity => (weight.frobenius_dot(&sigma), 0.0),
            SteinHaffFn::Constant(c) => (weight.frobenius_dot(c), 0.0),
            SteinHaffFn::Square => {
                let sq = SymMatrix::symmetrized(sigma.as_matrix() * sigma.as_matrix());
                (weight.frobenius_dot(&sq), square_divergence(&sigma))
            }
        })
    })?;
    let seed = stream.master_seed;
    let rhs = estimate(pairs.iter().map(|p| p.0), seed)?;
    Ok(match g {
        SteinHaffFn::Identity => {
            let lhs = (d * (d + 1)) as f64 / 2.0;
            BoundReport::new(rhs, lhs, Direction::EqWithin).with_note("lhs", lhs)
        }
        SteinHaffFn::Constant(_) => BoundReport::new(rhs, 0.0, Direction::EqWithin).with_note("lhs", 0.0),
        SteinHaffFn::Square => {
            let lhs = estimate(pairs.iter().map(|p| p.1), seed)?;
            let diff = estimate(pairs.iter().map(|p| p.0 - p.1), seed)?;
            BoundReport::new(diff, 0.0, Direction::EqWithin)
                .with_note("lhs", lhs.mean)
                .with_note("rhs", rhs.mean)
        }
    })
}

/// Checks `E[div g] ≥ d(d+1)/2 − 2d^{3/2} √E[‖Σ − g(Σ)‖²]`, using the
/// in-sample statistic sum for the left side and `E[α_Σ²]` (an upper bound on
/// the bias term) on the right.
pub fn haff_accuracy_bound_check(
    spec: &MechanismSpec,
    prior: &NormalizedWishartPrior,
    n: usize,
    trials: usize,
    stream: &RngStream,
) -> Result<BoundReport> {
    let d = prior.dim();
    let out = prior_outcomes(spec, prior, n, trials, stream)?;
    let seed = stream.master_seed;
    let lhs = estimate(out.iter().map(|o| o.stat_sum), seed)?;
    let err2 = estimate(out.iter().map(|o| o.err2), seed)?;
    let df = d as f64;
    let rhs = df * (df + 1.0) / 2.0 - 2.0 * df.powf(1.5) * err2.mean.sqrt();
    let status = if let Some(reason) = not_applicable_for_oracle(spec) {
        CheckStatus::NotApplicable(reason)
    } else if d < HAFF_MIN_DIM {
        CheckStatus::HypothesesNotMet(format!("needs d >= {HAFF_MIN_DIM}, got {d}"))
    } else if prior.dof() != 2 * d {
        CheckStatus::HypothesesNotMet(format!("needs D = 2d, got D = {}", prior.dof()))
    } else {
        CheckStatus::Evaluated
    };
    let report = match status {
        CheckStatus::Evaluated => BoundReport::new(lhs, rhs, Direction::Ge),
        other => BoundReport::skipped(other, lhs, rhs, Direction::Ge),
    };
    Ok(report
        .with_note("expected_alpha_sigma_sq", err2.mean)
        .with_note("expected_alpha_sigma_sq_se", err2.std_error))
}

/// `√d / 15`, the largest error covered by the main lower bound.
pub fn lower_bound_alpha_threshold(d: usize) -> f64 {
    (d as f64).sqrt() / 15.0
}

/// Checks `Σ_i E[A(x_i, M(X))] ≥ d²/4` when `α ≤ √d/15`, `d ≥ 20` and the
/// mechanism projects onto `W`.
pub fn lower_bound_experiment(
    spec: &MechanismSpec,
    d: usize,
    n: usize,
    trials: usize,
    stream: &RngStream,
) -> Result<BoundReport> {
    let prior = NormalizedWishartPrior::new(d)?;
    let out = prior_outcomes(spec, &prior, n, trials, stream)?;
    let seed = stream.master_seed;
    let accepted: Vec<f64> = out.iter().filter(|o| o.inside).map(|o| o.err2).collect();
    if accepted.is_empty() {
        return Err(Error::AllRejected(trials));
    }
    let alpha = if accepted.len() >= 2 {
        McEstimate::from_samples(&accepted, seed)?.sqrt()
    } else {
        McEstimate::exact(accepted[0].sqrt(), 1, seed)
    };
    let sum = estimate(out.iter().map(|o| o.stat_sum), seed)?;
    let bound = (d * d) as f64 / 4.0;
    let threshold = lower_bound_alpha_threshold(d);
    let status = if let Some(reason) = not_applicable_for_oracle(spec) {
        CheckStatus::NotApplicable(reason)
    } else if d < LOWER_BOUND_MIN_DIM {
        CheckStatus::HypothesesNotMet(format!("needs d >= {LOWER_BOUND_MIN_DIM}, got {d}"))
    } else if !spec.project_output() {
        CheckStatus::HypothesesNotMet("mechanism output must be projected onto W".into())
    } else if alpha.mean > threshold {
        CheckStatus::HypothesesNotMet(format!(
            "measured alpha {:.4} exceeds sqrt(d)/15 = {threshold:.4}",
            alpha.mean
        ))
    } else {
        CheckStatus::Evaluated
    };
    let report = match status {
        CheckStatus::Evaluated => BoundReport::new(sum, bound, Direction::Ge),
        other => BoundReport::skipped(other, sum, bound, Direction::Ge),
    };
    Ok(report
        .with_note("alpha", alpha.mean)
        .with_note("alpha_se", alpha.std_error)
        .with_note("alpha_threshold", threshold)
        .with_note("reject_rate", (trials - accepted.len()) as f64 / trials as f64))
}

/// Smallest `n ≤ n_max` whose measured `α` is at most `target`, by doubling
/// then bisection. All evaluations share `stream`.
pub fn bisect_n_for_alpha(
    spec: &MechanismSpec,
    prior: &NormalizedWishartPrior,
    target: f64,
    trials: usize,
    n_max: usize,
    stream: &RngStream,
) -> Result<usize> {
    let alpha = |n: usize| -> Result<f64> { Ok(measure_error(spec, prior, n, trials, stream)?.alpha.mean) };
    let mut hi = 1usize;
    while alpha(hi)? > target {
        if hi >= n_max {
            return Err(Error::Regime(format!(
                "measured alpha stays above {target} up to n = {n_max}"
            )));
        }
        hi = (hi * 2).min(n_max);
    }
    let mut lo = hi / 2;
    if lo == 0 {
        return Ok(hi);
    }
    // invariant: alpha(lo) > target >= alpha(hi)
    while hi - lo > 1.max(hi / 100) {
        let mid = lo + (hi - lo) / 2;
        if alpha(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// `δ ≤ 1/(3n ln(en))`, the privacy regime of the fixed-`Σ` upper bound.
pub fn upper_bound_max_delta(n: usize) -> f64 {
    let nf = n as f64;
    1.0 / (3.0 * nf * (std::f64::consts::E * nf).ln())
}

/// `2nε α_Σ/λ_min + (β_u/λ_min + 1) d^{3/2}`.
pub fn upper_bound_rhs(n: usize, epsilon: f64, alpha_sigma: f64, lambda_min: f64, beta_u: f64, d: usize) -> f64 {
    2.0 * n as f64 * epsilon * alpha_sigma / lambda_min + (beta_u / lambda_min + 1.0) * (d as f64).powf(1.5)
}

/// Checks the fixed-`Σ` upper bound on the in-sample statistic sum.
pub fn upper_bound_check(
    spec: &MechanismSpec,
    sigma: &SymMatrix,
    n: usize,
    trials: usize,
    stream: &RngStream,
) -> Result<BoundReport> {
    let out = fixed_outcomes(spec, sigma, n, trials, stream)?;
    let seed = stream.master_seed;
    let sum = estimate(out.iter().map(|o| o.stat_sum), seed)?;
    let alpha = estimate(out.iter().map(|o| o.err2), seed)?.sqrt();
    let lmin = sigma.lambda_min()?;
    let beta_u = WellConditionedSet::default().upper;
    let (status, epsilon) = match spec.kind() {
        MechanismKind::GaussianDp { epsilon, delta, .. } => {
            let max_delta = upper_bound_max_delta(n);
            let status = if !spec.project_output() {
                CheckStatus::HypothesesNotMet("mechanism output must be projected onto W".into())
            } else if *delta > max_delta {
                CheckStatus::HypothesesNotMet(format!("delta {delta:e} exceeds 1/(3n ln(en)) = {max_delta:e}"))
            } else {
                CheckStatus::Evaluated
            };
            (status, *epsilon)
        }
        _ => (
            CheckStatus::NotApplicable("the bound is stated for (epsilon, delta)-DP mechanisms".into()),
            f64::NAN,
        ),
    };
    let rhs = upper_bound_rhs(n, epsilon, alpha.mean, lmin, beta_u, sigma.dim());
    let report = match status {
        CheckStatus::Evaluated => BoundReport::new(sum, rhs, Direction::Le),
        other => BoundReport::skipped(other, sum, rhs, Direction::Le),
    };
    Ok(report
        .with_note("alpha_sigma", alpha.mean)
        .with_note("alpha_sigma_se", alpha.std_error)
        .with_note("epsilon", epsilon))
}

/// Paired comparison across privacy budgets at a fixed `Σ`.
///
/// For each consecutive pair in `epsilons` (sorted descending) two reports are
/// returned: the statistic sum does not increase as `ε` decreases, and the
/// squared error does not decrease. Each uses the per-trial paired difference.
pub fn epsilon_monotonicity(
    spec: &MechanismSpec,
    sigma: &SymMatrix,
    n: usize,
    epsilons: &[f64],
    trials: usize,
    stream: &RngStream,
) -> Result<Vec<(String, BoundReport)>> {
    if epsilons.len() < 2 || epsilons.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::param("epsilons", "need at least two, strictly decreasing"));
    }
    let runs: Vec<Vec<Outcome>> = epsilons
        .iter()
        .map(|&e| fixed_outcomes(&spec.with_epsilon(e)?, sigma, n, trials, stream))
        .collect::<Result<_>>()?;
    let seed = stream.master_seed;
    let mut reports = Vec::new();
    for k in 0..epsilons.len() - 1 {
        let (hi, lo) = (&runs[k], &runs[k + 1]);
        let stat = estimate(hi.iter().zip(lo).map(|(a, b)| a.stat_sum - b.stat_sum), seed)?;
        let err = estimate(hi.iter().zip(lo).map(|(a, b)| b.err2 - a.err2), seed)?;
        let tag = format!("{}>{}", epsilons[k], epsilons[k + 1]);
        reports.push((format!("statistic:{tag}"), BoundReport::new(stat, 0.0, Direction::Ge)));
        reports.push((format!("error:{tag}"), BoundReport::new(err, 0.0, Direction::Ge)));
    }
    Ok(reports)
}

/// `γ = 1 + β_u/λ_min(Σ)`.
pub fn tail_gamma(sigma: &SymMatrix) -> Result<f64> {
    Ok(1.0 + WellConditionedSet::default().upper / sigma.lambda_min()?)
}

/// Checks `P(|A(x_i, M(X))| ≥ t) ≤ exp(−t/(9γ√d))` at `t = m γ d^{3/2}` for
/// each multiple `m` in `grid`.
///
/// The reported estimate is the grid point with the largest excess over its
/// bound, in units of the binomial standard error at the bound.
pub fn tail_statistic_check(
    spec: &MechanismSpec,
    sigma: &SymMatrix,
    n: usize,
    trials: usize,
    grid: &[f64],
    stream: &RngStream,
) -> Result<BoundReport> {
    if grid.is_empty() || grid.iter().any(|m| !(*m >= TAIL_MIN_MULTIPLE)) {
        return Err(Error::param(
            "grid",
            format!("multiples of gamma d^1.5 must be at least {TAIL_MIN_MULTIPLE}"),
        ));
    }
    let d = sigma.dim() as f64;
    let gamma = tail_gamma(sigma)?;
    let samples = statistic_samples(spec, sigma, n, trials, stream)?;
    let abs: Vec<f64> = samples.iter().filter(|s| s.in_sample).map(|s| s.value.abs()).collect();
    let total = abs.len();
    let mut worst: Option<(f64, McEstimate, f64)> = None;
    let mut notes = Vec::new();
    for &m in grid {
        let t = m * gamma * d.powf(1.5);
        let bound = (-t / (9.0 * gamma * d.sqrt())).exp();
        let freq = abs.iter().filter(|a| **a >= t).count() as f64 / total as f64;
        let se = binomial_se(bound, total);
        let z = (freq - bound) / se;
        notes.push((format!("t@{m}"), t));
        notes.push((format!("ccdf@{m}"), freq));
        notes.push((format!("bound@{m}"), bound));
        let est = McEstimate {
            mean: freq,
            std_error: se,
            trials: total,
            master_seed: stream.master_seed,
        };
        if worst.as_ref().is_none_or(|w| z > w.0) {
            worst = Some((z, est, bound));
        }
    }
    let (_, est, bound) = worst.expect("grid is non-empty");
    let mut report = if spec.project_output() {
        BoundReport::new(est, bound, Direction::Le)
    } else {
        BoundReport::skipped(
            CheckStatus::HypothesesNotMet("mechanism output must be projected onto W".into()),
            est,
            bound,
            Direction::Le,
        )
    };
    report.notes = notes;
    Ok(report.with_note("gamma", gamma))
}

/// Checks `|A(x, M)| ≤ √d γ ‖zzᵀ − I‖_F` with `z = Σ^{-1/2} x` for every
/// in-sample point. The estimate is the largest observed ratio, bound 1.
pub fn per_sample_bound_check(
    spec: &MechanismSpec,
    sigma: &SymMatrix,
    n: usize,
    trials: usize,
    stream: &RngStream,
) -> Result<BoundReport> {
    check_counts(n, trials, 1)?;
    let d = sigma.dim();
    let gamma = tail_gamma(sigma)?;
    let whiten = sigma.inv_sqrt()?;
    let chol = sigma.cholesky_lower()?;
    let eye = DMatrix::<f64>::identity(d, d);
    let per_trial = par_trials(stream, trials, |_, trial| {
        let (x, m, _, _) = run_trial(spec, sigma, &chol, n, trial)?;
        let stat = Statistic::new(&m, sigma)?;
        let mut worst = 0.0f64;
        let mut violations = 0usize;
        for c in x.columns().column_iter() {
            let a = stat.value(c).abs();
            let z = whiten.as_matrix() * c;
            let rhs = (d as f64).sqrt() * gamma * (&z * z.transpose() - &eye).norm();
            if a > rhs * (1.0 + 1e-12) {
                violations += 1;
            }
            if rhs > 0.0 {
                worst = worst.max(a / rhs);
            }
        }
        Ok((worst, violations))
    })?;
    let worst = per_trial.iter().map(|p| p.0).fold(0.0, f64::max);
    let violations: usize = per_trial.iter().map(|p| p.1).sum();
    let est = McEstimate::exact(worst, trials * n, stream.master_seed);
    let report = if spec.project_output() {
        BoundReport::new(est, 1.0, Direction::Le)
    } else {
        BoundReport::skipped(
            CheckStatus::HypothesesNotMet("mechanism output must be projected onto W".into()),
            est,
            1.0,
            Direction::Le,
        )
    };
    Ok(report
        .with_note("violations", violations as f64)
        .with_note("gamma", gamma))
}

/// Stopping rule for [`run_until_resolved`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialPolicy {
    pub initial: usize,
    pub max_trials: usize,
    /// Stop once `std_error < resolve_fraction · |estimate − bound|`.
    pub resolve_fraction: f64,
    /// Optional wall-clock cap. Reports stay deterministic only if it is never hit.
    pub wall_cap: Option<Duration>,
}

impl Default for TrialPolicy {
    fn default() -> Self {
        Self {
            initial: 2000,
            max_trials: 32_000,
            resolve_fraction: 0.05,
            wall_cap: None,
        }
    }
}

/// Re-runs `check` with doubling trial counts until the standard error is
/// small against the gap to the bound, or a cap is reached.
pub fn run_until_resolved<F>(policy: &TrialPolicy, mut check: F) -> Result<BoundReport>
where
    F: FnMut(usize) -> Result<BoundReport>,
{
    let start = Instant::now();
    let mut trials = policy.initial.max(2);
    loop {
        let report = check(trials)?;
        let gap = (report.estimate.mean - report.bound_value).abs();
        let resolved = report.estimate.std_error < policy.resolve_fraction * gap;
        let over_time = policy.wall_cap.is_some_and(|cap| start.elapsed() >= cap);
        if resolved || over_time || trials * 2 > policy.max_trials || !report.evaluated() {
            return Ok(report);
        }
        trials *= 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::sample_gaussian_dataset;

    fn random_spd(d: usize, seed: u64) -> SymMatrix {
        let mut rng = RngStream::new(seed, 0).rng();
        let g = standard_normals(&mut rng, d, 2 * d);
        SymMatrix::symmetrized(&g * g.transpose() / (2 * d) as f64 + DMatrix::identity(d, d) * 0.5)
    }

    #[test]
    fn statistic_examples() {
        let sigma = random_spd(3, 1);
        let z = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        assert!(correlation_statistic(&z, &sigma, &sigma).unwrap().abs() < 1e-15);
        let z = DVector::from_vec(vec![1.0, 2.0, -0.5, 0.7]);
        let a = correlation_statistic(&z, &SymMatrix::scaled_identity(4, 2.0), &SymMatrix::identity(4)).unwrap();
        assert!((a - 0.5 * (z.norm_squared() - 4.0)).abs() < 1e-14);
        assert!(correlation_statistic(&z, &sigma, &sigma).is_err());
    }

    #[test]
    fn statistic_matches_direct_formula() {
        // ⟨M − Σ, ½(Σ⁻¹zzᵀΣ⁻¹ − Σ⁻¹)⟩ computed entry by entry.
        let d = 4;
        let sigma = random_spd(d, 2);
        let m = random_spd(d, 3);
        let p = sigma.inverse_pd().unwrap();
        let x = sample_gaussian_dataset(&sigma, 7, &RngStream::new(4, 0)).unwrap();
        let stat = Statistic::new(&m, &sigma).unwrap();
        let mut total = 0.0;
        for c in x.columns().column_iter() {
            let z: DVector<f64> = c.into();
            let pz = p.as_matrix() * &z;
            let score = (&pz * pz.transpose() - p.as_matrix()) * 0.5;
            let mut direct = 0.0;
            for i in 0..d {
                for j in 0..d {
                    direct += (m.get(i, j) - sigma.get(i, j)) * score[(i, j)];
                }
            }
            assert!((stat.value(z.as_view()) - direct).abs() < 1e-12);
            total += direct;
        }
        assert!((stat.sum(x.columns()) - total).abs() < 1e-11);
    }

    #[test]
    fn oracle_statistics_are_exactly_zero() {
        let prior = NormalizedWishartPrior::new(3).unwrap();
        let s = estimate_in_sample_sum(&MechanismSpec::oracle(), &prior, 10, 100, &RngStream::new(1, 0)).unwrap();
        assert_eq!((s.mean, s.std_error), (0.0, 0.0));
        let o = estimate_out_of_sample(&MechanismSpec::oracle(), &prior, 10, 100, &RngStream::new(1, 0)).unwrap();
        assert_eq!((o.mean, o.std_error), (0.0, 0.0));
    }

    #[test]
    fn in_sample_sum_rejects_few_trials() {
        let prior = NormalizedWishartPrior::new(3).unwrap();
        assert!(estimate_in_sample_sum(&MechanismSpec::empirical(), &prior, 10, 99, &RngStream::new(1, 0)).is_err());
    }

    #[test]
    fn square_divergence_matches_finite_differences() {
        for d in 1..=5 {
            let sigma = random_spd(d, 10 + d as u64);
            let fd = crate::sym::fd_divergence(
                |s| Ok(SymMatrix::symmetrized(s.as_matrix() * s.as_matrix())),
                &sigma,
                1e-5,
            )
            .unwrap();
            assert!((fd - square_divergence(&sigma)).abs() < 1e-6, "d={d}");
        }
    }

    #[test]
    fn stein_haff_square_small() {
        let p = WishartParams::new(6, SymMatrix::identity(2)).unwrap();
        let r = stein_haff_check(&SteinHaffFn::Square, &p, 20_000, &RngStream::new(3, 0)).unwrap();
        assert!(r.satisfied(), "{r:?}");
        // E[(d+1) tr Σ] = 3 · 2D = 36.
        assert!((r.note("lhs").unwrap() - 36.0).abs() < 1.0);
        let bad = WishartParams::new(3, SymMatrix::identity(2)).unwrap();
        assert!(stein_haff_check(&SteinHaffFn::Identity, &bad, 100, &RngStream::new(3, 0)).is_err());
    }

    #[test]
    fn divergence_check_constant_is_zero() {
        let spec = MechanismSpec::constant(SymMatrix::identity(3)).unwrap();
        let r =
            divergence_identity_check(&spec, &SymMatrix::identity(3), 20, 200, 1e-5, &RngStream::new(2, 0)).unwrap();
        assert_eq!(r.note("fd_divergence"), Some(0.0));
        assert!(r.satisfied());
        assert!(matches!(
            divergence_identity_check(
                &spec,
                &SymMatrix::scaled_identity(3, 1e-6),
                20,
                200,
                1e-5,
                &RngStream::new(2, 0)
            ),
            Err(Error::StepTooLarge { .. })
        ));
        let o = divergence_identity_check(
            &MechanismSpec::oracle(),
            &SymMatrix::identity(3),
            5,
            10,
            1e-5,
            &RngStream::new(2, 0),
        )
        .unwrap();
        assert!(matches!(o.status, CheckStatus::NotApplicable(_)));
    }

    #[test]
    fn lower_bound_status_for_constant() {
        let spec = MechanismSpec::constant(SymMatrix::identity(20))
            .unwrap()
            .projected()
            .unwrap();
        let r = lower_bound_experiment(&spec, 20, 10, 200, &RngStream::new(5, 0)).unwrap();
        assert!(matches!(r.status, CheckStatus::HypothesesNotMet(_)), "{r:?}");
        assert!(r.satisfied());
        assert_eq!(r.bound_value, 100.0);
        // α² ≈ E‖Σ − I‖² ≈ d(d+1)/D = 10.5
        let a = r.note("alpha").unwrap();
        assert!((a * a - 10.5).abs() < 1.5, "{a}");
    }

    #[test]
    fn lower_bound_small_dimension_flagged() {
        let spec = MechanismSpec::empirical().projected().unwrap();
        let r = lower_bound_experiment(&spec, 5, 2000, 100, &RngStream::new(5, 0)).unwrap();
        assert!(matches!(r.status, CheckStatus::HypothesesNotMet(_)));
    }

    #[test]
    fn upper_bound_constants() {
        assert!((upper_bound_rhs(200, 1.0, 0.0, 1.0, 10.0, 5) - 11.0 * 5f64.powf(1.5)).abs() < 1e-12);
        assert!((11.0 * 5f64.powf(1.5) - 123.0).abs() < 0.05);
        let n = 200;
        let dmax = upper_bound_max_delta(n);
        assert!((dmax - 1.0 / (600.0 * (std::f64::consts::E * 200.0).ln())).abs() < 1e-18);
        let spec = MechanismSpec::gaussian_dp(1.0, 0.01, None)
            .unwrap()
            .projected()
            .unwrap();
        let r = upper_bound_check(&spec, &SymMatrix::identity(3), n, 50, &RngStream::new(1, 1)).unwrap();
        assert!(matches!(r.status, CheckStatus::HypothesesNotMet(_)));
        let r = upper_bound_check(
            &MechanismSpec::empirical(),
            &SymMatrix::identity(3),
            n,
            50,
            &RngStream::new(1, 1),
        )
        .unwrap();
        assert!(matches!(r.status, CheckStatus::NotApplicable(_)));
    }

    #[test]
    fn tail_grid_validated() {
        let spec = MechanismSpec::empirical().projected().unwrap();
        let s = SymMatrix::identity(3);
        assert!(tail_statistic_check(&spec, &s, 10, 10, &[5.0], &RngStream::new(0, 0)).is_err());
        assert!(tail_statistic_check(&spec, &s, 10, 10, &[], &RngStream::new(0, 0)).is_err());
        let r = tail_statistic_check(
            &MechanismSpec::oracle().projected().unwrap(),
            &s,
            10,
            10,
            &[6.0],
            &RngStream::new(0, 0),
        )
        .unwrap();
        assert_eq!(r.estimate.mean, 0.0);
        assert!(r.satisfied());
    }

    #[test]
    fn per_sample_bound_d1() {
        // d = 1: |A| ≤ γ |z² − 1| / 2, tighter than the checked √d γ |z² − 1|.
        let sigma = SymMatrix::from_diagonal(&[0.7]);
        let gamma = tail_gamma(&sigma).unwrap();
        let spec = MechanismSpec::gaussian_dp(0.5, 1e-5, None)
            .unwrap()
            .projected()
            .unwrap();
        let samples = statistic_samples(&spec, &sigma, 20, 200, &RngStream::new(8, 0)).unwrap();
        let xs = {
            let chol = sigma.cholesky_lower().unwrap();
            (0..200)
                .flat_map(|t| {
                    let tr = RngStream::new(8, 0).split(t);
                    gaussian_columns(&chol, 20, &mut tr.split(streams::DATA).rng())
                        .columns()
                        .iter()
                        .copied()
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        };
        let in_sample: Vec<f64> = samples.iter().filter(|s| s.in_sample).map(|s| s.value).collect();
        assert_eq!(in_sample.len(), xs.len());
        for (a, x) in in_sample.iter().zip(&xs) {
            let z2 = x * x / 0.7;
            assert!(a.abs() <= gamma * (z2 - 1.0).abs() / 2.0 + 1e-12);
        }
        let r = per_sample_bound_check(&spec, &sigma, 20, 200, &RngStream::new(8, 0)).unwrap();
        assert!(r.satisfied() && r.estimate.mean <= 0.5 + 1e-12, "{r:?}");
    }

    #[test]
    fn run_until_resolved_stops() {
        let mut calls = Vec::new();
        let r = run_until_resolved(
            &TrialPolicy {
                initial: 100,
                max_trials: 1000,
                ..TrialPolicy::default()
            },
            |t| {
                calls.push(t);
                Ok(BoundReport::new(
                    McEstimate {
                        mean: 1.0,
                        std_error: 10.0 / (t as f64).sqrt(),
                        trials: t,
                        master_seed: 0,
                    },
                    0.0,
                    Direction::Le,
                ))
            },
        )
        .unwrap();
        assert_eq!(calls, vec![100, 200, 400, 800]);
        assert_eq!(r.estimate.trials, 800);
    }
}
