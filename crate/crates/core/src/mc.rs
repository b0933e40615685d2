//! Monte Carlo estimates, deterministic reductions and one-sided bound checks.

use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, RngStream};

/// Slack, in standard errors, used by every statistical comparison.
pub const SLACK_SE: f64 = 3.0;

/// Trials per work unit. Fixed so reductions do not depend on thread count.
const CHUNK: usize = 2048;

/// Point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
    pub master_seed: u64,
}

impl McEstimate {
    /// Mean and `sample_std / sqrt(trials)` of `samples` (pairwise summation).
    pub fn from_samples(samples: &[f64], master_seed: u64) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::param("trials", format!("need at least 2, got {n}")));
        }
        let mean = pairwise_sum(samples) / n as f64;
        let sq: Vec<f64> = samples.iter().map(|x| (x - mean) * (x - mean)).collect();
        let var = pairwise_sum(&sq) / (n - 1) as f64;
        Ok(Self {
            mean,
            std_error: (var / n as f64).sqrt(),
            trials: n,
            master_seed,
        })
    }

    /// Estimate with no sampling error (a closed form or an exact zero).
    pub fn exact(value: f64, trials: usize, master_seed: u64) -> Self {
        Self {
            mean: value,
            std_error: 0.0,
            trials,
            master_seed,
        }
    }

    /// `sqrt` of a non-negative estimate, delta-method standard error.
    pub fn sqrt(&self) -> Self {
        let mean = self.mean.max(0.0).sqrt();
        let std_error = if mean > 0.0 { self.std_error / (2.0 * mean) } else { 0.0 };
        Self {
            mean,
            std_error,
            ..*self
        }
    }

    /// Difference of two independent estimates.
    pub fn minus_independent(&self, other: &McEstimate) -> Self {
        Self {
            mean: self.mean - other.mean,
            std_error: self.std_error.hypot(other.std_error),
            trials: self.trials.min(other.trials),
            master_seed: self.master_seed,
        }
    }

    /// Number of standard errors between the mean and `target`.
    pub fn z_score(&self, target: f64) -> f64 {
        let diff = self.mean - target;
        if self.std_error > 0.0 {
            diff / self.std_error
        } else if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        }
    }
}

/// Pairwise (cascade) summation. Result depends only on the slice order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        xs.iter().sum()
    } else {
        let (a, b) = xs.split_at(xs.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

/// Standard error of a Bernoulli frequency with success probability `p`.
pub fn binomial_se(p: f64, trials: usize) -> f64 {
    let p = p.clamp(0.0, 1.0);
    (p * (1.0 - p) / trials as f64).sqrt()
}

/// Running per-coordinate mean and centred second moment (Welford / Chan).
#[derive(Debug, Clone)]
pub struct VecMoments {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl VecMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    pub fn merge(&mut self, other: &VecMoments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased sample variance of coordinate `i`.
    pub fn variance(&self, i: usize) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        self.m2[i] / (self.count - 1) as f64
    }

    pub fn estimate(&self, i: usize, master_seed: u64) -> McEstimate {
        McEstimate {
            mean: self.mean[i],
            std_error: (self.variance(i) / self.count as f64).sqrt(),
            trials: self.count,
            master_seed,
        }
    }

    /// Moments of the coordinates in `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> VecMoments {
        VecMoments {
            count: self.count,
            mean: self.mean[range.clone()].to_vec(),
            m2: self.m2[range].to_vec(),
        }
    }

    pub fn estimates(&self, master_seed: u64) -> Vec<McEstimate> {
        (0..self.mean.len()).map(|i| self.estimate(i, master_seed)).collect()
    }
}

/// Runs `trials` independent trials, trial `t` drawing from `stream.split(t)`,
/// and accumulates the `dim` values each trial writes into its output slice.
///
/// Trials are evaluated in parallel over fixed-size chunks and merged in chunk
/// order, so the result is identical for any thread count.
pub fn par_moments<F>(stream: &RngStream, trials: usize, dim: usize, trial: F) -> Result<VecMoments>
where
    F: Fn(&mut ChaCha12Rng, &mut [f64]) -> Result<()> + Sync,
{
    let chunks = trials.div_ceil(CHUNK);
    let parts: Vec<VecMoments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = VecMoments::new(dim);
            let mut out = vec![0.0; dim];
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(trials);
            for t in lo..hi {
                let mut rng = stream.split(t as u64).rng();
                trial(&mut rng, &mut out)?;
                acc.push(&out);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = VecMoments::new(dim);
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// Runs `trials` trials (trial `t` gets the child stream `stream.split(t)`)
/// and returns their outputs in trial order.
pub fn par_trials<T, F>(stream: &RngStream, trials: usize, trial: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &RngStream) -> Result<T> + Sync,
{
    (0..trials)
        .into_par_iter()
        .map(|t| trial(t, &stream.split(t as u64)))
        .collect()
}

/// Which way a bound points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// The estimate must not exceed the bound.
    Le,
    /// The estimate must not fall below the bound.
    Ge,
    /// The estimate must match the bound.
    EqWithin,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Le => "le",
            Direction::Ge => "ge",
            Direction::EqWithin => "eq-within",
        }
    }

    /// Whether `estimate` (with standard error `se`) respects `bound`
    /// allowing `slack` standard errors.
    pub fn holds(&self, estimate: f64, se: f64, bound: f64, slack: f64) -> bool {
        if !estimate.is_finite() || !bound.is_finite() && *self == Direction::EqWithin {
            return false;
        }
        match self {
            Direction::Le => estimate <= bound + slack * se,
            Direction::Ge => estimate >= bound - slack * se,
            Direction::EqWithin => (estimate - bound).abs() <= slack * se,
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "le" => Ok(Direction::Le),
            "ge" => Ok(Direction::Ge),
            "eq-within" => Ok(Direction::EqWithin),
            other => Err(format!("unknown direction `{other}`")),
        }
    }
}

/// Whether a check's hypotheses were met.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "kebab-case")]
pub enum CheckStatus {
    Evaluated,
    HypothesesNotMet(String),
    NotApplicable(String),
}

/// Outcome of comparing a Monte Carlo estimate against a bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub estimate: McEstimate,
    pub bound_value: f64,
    pub direction: Direction,
    pub status: CheckStatus,
    satisfied: bool,
    /// Auxiliary quantities (measured error, component estimates, ...).
    pub notes: Vec<(String, f64)>,
}

impl BoundReport {
    pub fn new(estimate: McEstimate, bound_value: f64, direction: Direction) -> Self {
        let satisfied = direction.holds(estimate.mean, estimate.std_error, bound_value, SLACK_SE);
        Self {
            estimate,
            bound_value,
            direction,
            status: CheckStatus::Evaluated,
            satisfied,
            notes: Vec::new(),
        }
    }

    /// A check whose hypotheses do not hold; the implication is vacuous.
    pub fn skipped(status: CheckStatus, estimate: McEstimate, bound_value: f64, direction: Direction) -> Self {
        Self {
            estimate,
            bound_value,
            direction,
            status,
            satisfied: true,
            notes: Vec::new(),
        }
    }

    pub fn with_note(mut self, key: impl Into<String>, value: f64) -> Self {
        self.notes.push((key.into(), value));
        self
    }

    pub fn note(&self, key: &str) -> Option<f64> {
        self.notes.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn satisfied(&self) -> bool {
        self.satisfied
    }

    pub fn evaluated(&self) -> bool {
        self.status == CheckStatus::Evaluated
    }
}
