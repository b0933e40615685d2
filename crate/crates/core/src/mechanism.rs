//! Reference covariance estimators and their error under the Wishart prior.

use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{gaussian_columns, standard_normals, Dataset, NormalizedWishartPrior};
use crate::mc::{par_trials, McEstimate};
use crate::sym::{project_well_conditioned, SymMatrix, WellConditionedSet};
use crate::{Error, Result, RngStream};

/// Smallest number of prior draws accepted by [`measure_error`].
pub const MIN_ERROR_TRIALS: usize = 100;

/// Default clipping radius `2√(10d)`.
pub fn default_clip_radius(d: usize) -> f64 {
    2.0 * (10.0 * d as f64).sqrt()
}

/// Gaussian-mechanism noise scale for replace-one sensitivity `2c²/n`.
pub fn dp_noise_sigma(epsilon: f64, delta: f64, clip_radius: f64, n: usize) -> f64 {
    let sensitivity = 2.0 * clip_radius * clip_radius / n as f64;
    sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon
}

#[derive(Debug, Clone, PartialEq)]
pub enum MechanismKind {
    /// `XXᵀ/n`.
    Empirical,
    /// Clipped empirical covariance plus symmetrised Gaussian noise.
    GaussianDp {
        epsilon: f64,
        delta: f64,
        /// `None` uses [`default_clip_radius`].
        clip_radius: Option<f64>,
    },
    /// Ignores the data.
    Constant(SymMatrix),
    /// Returns the true covariance. A test baseline only; not private.
    Oracle,
}

/// A covariance estimator, optionally followed by projection onto `W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MechanismRepr", into = "MechanismRepr")]
pub struct MechanismSpec {
    kind: MechanismKind,
    project_output: bool,
}

impl MechanismSpec {
    pub fn new(kind: MechanismKind, project_output: bool) -> Result<Self> {
        let spec = Self { kind, project_output };
        spec.validate()?;
        Ok(spec)
    }

    pub fn empirical() -> Self {
        Self {
            kind: MechanismKind::Empirical,
            project_output: false,
        }
    }

    pub fn oracle() -> Self {
        Self {
            kind: MechanismKind::Oracle,
            project_output: false,
        }
    }

    pub fn constant(value: SymMatrix) -> Result<Self> {
        Self::new(MechanismKind::Constant(value), false)
    }

    pub fn gaussian_dp(epsilon: f64, delta: f64, clip_radius: Option<f64>) -> Result<Self> {
        Self::new(
            MechanismKind::GaussianDp {
                epsilon,
                delta,
                clip_radius,
            },
            false,
        )
    }

    pub fn projected(mut self) -> Result<Self> {
        self.project_output = true;
        self.validate()?;
        Ok(self)
    }

    pub fn kind(&self) -> &MechanismKind {
        &self.kind
    }

    pub fn project_output(&self) -> bool {
        self.project_output
    }

    /// Copy with a different privacy budget. Errors unless Gaussian-DP.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        match &self.kind {
            MechanismKind::GaussianDp { delta, clip_radius, .. } => Self::new(
                MechanismKind::GaussianDp {
                    epsilon,
                    delta: *delta,
                    clip_radius: *clip_radius,
                },
                self.project_output,
            ),
            _ => Err(Error::param("epsilon", "only applies to gaussian_dp")),
        }
    }

    fn validate(&self) -> Result<()> {
        match &self.kind {
            MechanismKind::GaussianDp {
                epsilon,
                delta,
                clip_radius,
            } => {
                if !(*epsilon > 0.0) {
                    return Err(Error::param("epsilon", format!("must be positive, got {epsilon}")));
                }
                if !(*delta > 0.0 && *delta < 1.0) {
                    return Err(Error::param("delta", format!("must lie in (0, 1), got {delta}")));
                }
                if let Some(c) = clip_radius {
                    if !(*c > 0.0 && c.is_finite()) {
                        return Err(Error::param("clip_radius", format!("must be positive, got {c}")));
                    }
                }
            }
            MechanismKind::Constant(value) => {
                if self.project_output && !WellConditionedSet::default().contains(value)? {
                    return Err(Error::param(
                        "constant_value",
                        "must have eigenvalues in [0.09, 10] when project_output is set",
                    ));
                }
            }
            MechanismKind::Empirical | MechanismKind::Oracle => {}
        }
        Ok(())
    }

    /// Runs the mechanism on `x`. Oracle mechanisms need
    /// [`MechanismSpec::evaluate_with_truth`].
    pub fn evaluate(&self, x: &Dataset, stream: &RngStream) -> Result<SymMatrix> {
        self.evaluate_with_truth(x, None, &mut stream.rng())
    }

    /// Runs the mechanism, supplying the true covariance for the oracle.
    pub fn evaluate_with_truth<R: Rng + ?Sized>(
        &self,
        x: &Dataset,
        truth: Option<&SymMatrix>,
        rng: &mut R,
    ) -> Result<SymMatrix> {
        let d = x.dim();
        let n = x.n();
        let raw = match &self.kind {
            MechanismKind::Empirical => SymMatrix::symmetrized(x.gram().into_matrix() / n as f64),
            MechanismKind::Constant(value) => {
                check_dim(value.dim(), d)?;
                value.clone()
            }
            MechanismKind::Oracle => {
                let truth =
                    truth.ok_or_else(|| Error::param("kind", "the oracle mechanism needs the true covariance"))?;
                check_dim(truth.dim(), d)?;
                truth.clone()
            }
            MechanismKind::GaussianDp {
                epsilon,
                delta,
                clip_radius,
            } => {
                let c = clip_radius.unwrap_or_else(|| default_clip_radius(d));
                let mut clipped = x.columns().clone();
                for mut col in clipped.column_iter_mut() {
                    let norm = col.norm();
                    if norm > c {
                        col *= c / norm;
                    }
                }
                let sigma = dp_noise_sigma(*epsilon, *delta, c, n);
                let z = standard_normals(rng, d, d);
                let noise = (&z + z.transpose()) * (0.5 * sigma);
                SymMatrix::symmetrized(&clipped * clipped.transpose() / n as f64 + noise)
            }
        };
        if self.project_output {
            project_well_conditioned(&raw, &WellConditionedSet::default())
        } else {
            Ok(raw)
        }
    }
}

fn check_dim(got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

impl fmt::Display for MechanismSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            MechanismKind::Empirical => write!(f, "empirical")?,
            MechanismKind::Oracle => write!(f, "oracle")?,
            MechanismKind::Constant(v) => write!(f, "constant(d={})", v.dim())?,
            MechanismKind::GaussianDp {
                epsilon,
                delta,
                clip_radius,
            } => {
                write!(f, "gaussian_dp(eps={epsilon}, delta={delta}")?;
                if let Some(c) = clip_radius {
                    write!(f, ", clip={c}")?;
                }
                write!(f, ")")?;
            }
        }
        if self.project_output {
            write!(f, "+proj")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum KindTag {
    Empirical,
    GaussianDp,
    Constant,
    Oracle,
}

/// Flat on-disk form of [`MechanismSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MechanismRepr {
    kind: KindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clip_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    constant_value: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    project_output: bool,
}

impl TryFrom<MechanismRepr> for MechanismSpec {
    type Error = Error;

    fn try_from(r: MechanismRepr) -> Result<Self> {
        let reject = |name: &'static str, present: bool| {
            if present {
                Err(Error::param(name, format!("not allowed for kind {:?}", r.kind)))
            } else {
                Ok(())
            }
        };
        let kind = match r.kind {
            KindTag::GaussianDp => {
                reject("constant_value", r.constant_value.is_some())?;
                MechanismKind::GaussianDp {
                    epsilon: r
                        .epsilon
                        .ok_or_else(|| Error::param("epsilon", "required for gaussian_dp"))?,
                    delta: r
                        .delta
                        .ok_or_else(|| Error::param("delta", "required for gaussian_dp"))?,
                    clip_radius: r.clip_radius,
                }
            }
            other => {
                reject("epsilon", r.epsilon.is_some())?;
                reject("delta", r.delta.is_some())?;
                reject("clip_radius", r.clip_radius.is_some())?;
                match other {
                    KindTag::Constant => {
                        let rows = r
                            .constant_value
                            .as_ref()
                            .ok_or_else(|| Error::param("constant_value", "required for constant"))?;
                        MechanismKind::Constant(
                            SymMatrix::from_rows(rows).map_err(|e| Error::param("constant_value", e.to_string()))?,
                        )
                    }
                    _ => {
                        reject("constant_value", r.constant_value.is_some())?;
                        if other == KindTag::Empirical {
                            MechanismKind::Empirical
                        } else {
                            MechanismKind::Oracle
                        }
                    }
                }
            }
        };
        MechanismSpec::new(kind, r.project_output)
    }
}

impl From<MechanismSpec> for MechanismRepr {
    fn from(s: MechanismSpec) -> Self {
        let mut r = MechanismRepr {
            kind: KindTag::Empirical,
            epsilon: None,
            delta: None,
            clip_radius: None,
            constant_value: None,
            project_output: s.project_output,
        };
        match s.kind {
            MechanismKind::Empirical => {}
            MechanismKind::Oracle => r.kind = KindTag::Oracle,
            MechanismKind::Constant(v) => {
                r.kind = KindTag::Constant;
                r.constant_value = Some(v.to_rows());
            }
            MechanismKind::GaussianDp {
                epsilon,
                delta,
                clip_radius,
            } => {
                r.kind = KindTag::GaussianDp;
                r.epsilon = Some(epsilon);
                r.delta = Some(delta);
                r.clip_radius = clip_radius;
            }
        }
        r
    }
}

/// Mechanism error against the prior.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    /// `√E[α_Σ² | Σ ∈ W]`.
    pub alpha: McEstimate,
    /// `E[‖M(X) − Σ‖_F² | Σ ∈ W]`.
    pub alpha_sq: McEstimate,
    /// `E[‖M(X) − Σ‖_F²]` over all prior draws.
    pub unconditional_alpha_sq: McEstimate,
    /// Fraction of prior draws outside `W`.
    pub reject_rate: f64,
    pub accepted: usize,
}

/// Stream layout inside one trial. Shared by every experiment so that runs
/// differing only in the mechanism see the same `Σ` and `X`.
pub(crate) mod streams {
    pub const SIGMA: u64 = 0;
    pub const DATA: u64 = 1;
    pub const MECHANISM: u64 = 2;
}

/// Squared Frobenius error of one run at a fixed `Σ`.
pub(crate) fn squared_error_once(
    spec: &MechanismSpec,
    sigma: &SymMatrix,
    chol: &DMatrix<f64>,
    n: usize,
    trial: &RngStream,
) -> Result<f64> {
    let x = gaussian_columns(chol, n, &mut trial.split(streams::DATA).rng());
    let m = spec.evaluate_with_truth(&x, Some(sigma), &mut trial.split(streams::MECHANISM).rng())?;
    Ok(m.sub(sigma).frobenius_norm().powi(2))
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

/// Estimates `α` by drawing `Σ` from the prior, conditioning on `Σ ∈ W`.
pub fn measure_error(
    spec: &MechanismSpec,
    prior: &NormalizedWishartPrior,
    n: usize,
    trials: usize,
    stream: &RngStream,
) -> Result<ErrorReport> {
    check_counts(n, trials, MIN_ERROR_TRIALS)?;
    let w = WellConditionedSet::default();
    let draws = par_trials(stream, trials, |_, trial| {
        let sigma = prior.sample_with(&mut trial.split(streams::SIGMA).rng());
        let inside = w.contains(&sigma)?;
        let chol = sigma.cholesky_lower()?;
        Ok((inside, squared_error_once(spec, &sigma, &chol, n, trial)?))
    })?;
    let all: Vec<f64> = draws.iter().map(|(_, e)| *e).collect();
    let kept: Vec<f64> = draws.iter().filter(|(inside, _)| *inside).map(|(_, e)| *e).collect();
    if kept.is_empty() {
        return Err(Error::AllRejected(trials));
    }
    let seed = stream.master_seed;
    let alpha_sq = if kept.len() == 1 {
        McEstimate {
            mean: kept[0],
            std_error: f64::INFINITY,
            trials: 1,
            master_seed: seed,
        }
    } else {
        McEstimate::from_samples(&kept, seed)?
    };
    Ok(ErrorReport {
        alpha: alpha_sq.sqrt(),
        alpha_sq,
        unconditional_alpha_sq: McEstimate::from_samples(&all, seed)?,
        reject_rate: (trials - kept.len()) as f64 / trials as f64,
        accepted: kept.len(),
    })
}

/// Estimates `α_Σ² = E[‖M(X) − Σ‖_F²]` at a fixed `Σ`.
pub fn measure_error_fixed(
    spec: &MechanismSpec,
    sigma: &SymMatrix,
    n: usize,
    trials: usize,
    stream: &RngStream,
) -> Result<McEstimate> {
    check_counts(n, trials, 2)?;
    let chol = sigma.cholesky_lower()?;
    let errs = par_trials(stream, trials, |_, trial| {
        squared_error_once(spec, sigma, &chol, n, trial)
    })?;
    McEstimate::from_samples(&errs, stream.master_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::sample_gaussian_dataset;

    fn data(cols: &[&[f64]]) -> Dataset {
        let d = cols[0].len();
        let flat: Vec<f64> = cols.iter().flat_map(|c| c.iter().copied()).collect();
        Dataset::new(DMatrix::from_vec(d, cols.len(), flat)).unwrap()
    }

    #[test]
    fn empirical_single_point() {
        let x = data(&[&[1.0, 0.0]]);
        let m = MechanismSpec::empirical().evaluate(&x, &RngStream::new(0, 0)).unwrap();
        assert_eq!(m, SymMatrix::from_row_slice(2, &[1.0, 0.0, 0.0, 0.0]).unwrap());
    }

    #[test]
    fn dp_zero_noise_limit_is_empirical() {
        let x = sample_gaussian_dataset(&SymMatrix::identity(3), 40, &RngStream::new(1, 1)).unwrap();
        let emp = MechanismSpec::empirical().evaluate(&x, &RngStream::new(0, 0)).unwrap();
        let dp = MechanismSpec::gaussian_dp(f64::INFINITY, 1e-5, Some(100.0))
            .unwrap()
            .evaluate(&x, &RngStream::new(0, 0))
            .unwrap();
        assert!(dp.sub(&emp).frobenius_norm() < 1e-12);
    }

    #[test]
    fn dp_noise_scale() {
        // Δ = 2·4/10 = 0.8, σ = 0.8·√(2 ln 1.25e5)
        let s = dp_noise_sigma(1.0, 1e-5, 2.0, 10);
        assert!((s - 0.8 * (2.0 * 125_000f64.ln()).sqrt()).abs() < 1e-12);
        assert!((default_clip_radius(10) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn dp_clips_large_columns() {
        // One huge column: clipped to radius 1, so without noise the output is e1e1ᵀ/1.
        let x = data(&[&[1e6, 0.0]]);
        let m = MechanismSpec::gaussian_dp(f64::INFINITY, 0.5, Some(1.0))
            .unwrap()
            .evaluate(&x, &RngStream::new(0, 0))
            .unwrap();
        assert!((m.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_ignores_data() {
        let spec = MechanismSpec::constant(SymMatrix::identity(2)).unwrap();
        for seed in 0..5 {
            let x = sample_gaussian_dataset(&SymMatrix::identity(2), 7, &RngStream::new(seed, 0)).unwrap();
            assert_eq!(
                spec.evaluate(&x, &RngStream::new(seed, 1)).unwrap(),
                SymMatrix::identity(2)
            );
        }
        let x = data(&[&[1.0, 0.0, 0.0]]);
        assert!(spec.evaluate(&x, &RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn oracle_needs_truth() {
        let x = data(&[&[1.0, 0.0]]);
        assert!(MechanismSpec::oracle().evaluate(&x, &RngStream::new(0, 0)).is_err());
        let truth = SymMatrix::identity(2).scale(3.0);
        let m = MechanismSpec::oracle()
            .evaluate_with_truth(&x, Some(&truth), &mut RngStream::new(0, 0).rng())
            .unwrap();
        assert_eq!(m, truth);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(MechanismSpec::gaussian_dp(0.0, 1e-5, None).is_err());
        assert!(MechanismSpec::gaussian_dp(f64::NAN, 1e-5, None).is_err());
        assert!(MechanismSpec::gaussian_dp(1.0, 1.0, None).is_err());
        assert!(MechanismSpec::gaussian_dp(1.0, 0.0, None).is_err());
        assert!(MechanismSpec::gaussian_dp(1.0, 0.1, Some(-1.0)).is_err());
        let outside = SymMatrix::identity(2).scale(20.0);
        assert!(MechanismSpec::constant(outside.clone()).unwrap().projected().is_err());
        assert!(MechanismSpec::constant(outside).is_ok());
    }

    #[test]
    fn projected_outputs_in_w() {
        let w = WellConditionedSet::default();
        let spec = MechanismSpec::gaussian_dp(0.05, 1e-5, None)
            .unwrap()
            .projected()
            .unwrap();
        for seed in 0..50 {
            let x = sample_gaussian_dataset(&SymMatrix::identity(4), 5, &RngStream::new(seed, 0)).unwrap();
            let m = spec.evaluate(&x, &RngStream::new(seed, 1)).unwrap();
            assert!(w.contains(&m).unwrap(), "seed {seed}");
        }
    }

    #[test]
    fn serde_roundtrip_and_strictness() {
        let specs = [
            MechanismSpec::empirical(),
            MechanismSpec::oracle(),
            MechanismSpec::gaussian_dp(0.5, 1e-6, Some(3.0))
                .unwrap()
                .projected()
                .unwrap(),
            MechanismSpec::gaussian_dp(2.0, 1e-3, None).unwrap(),
            MechanismSpec::constant(SymMatrix::identity(3))
                .unwrap()
                .projected()
                .unwrap(),
        ];
        for s in specs {
            let json = serde_json::to_string(&s).unwrap();
            let back: MechanismSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(back, s, "{json}");
        }
        for bad in [
            r#"{"kind":"empirical","epsilon":1.0}"#,
            r#"{"kind":"gaussian_dp","epsilon":1.0}"#,
            r#"{"kind":"gaussian_dp","epsilon":-1.0,"delta":0.1}"#,
            r#"{"kind":"constant"}"#,
            r#"{"kind":"constant","constant_value":[[1,2],[3,4]]}"#,
            r#"{"kind":"oracle","colour":"red"}"#,
            r#"{"kind":"laplace"}"#,
        ] {
            assert!(serde_json::from_str::<MechanismSpec>(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn oracle_error_is_exactly_zero() {
        let prior = NormalizedWishartPrior::new(4).unwrap();
        let r = measure_error(&MechanismSpec::oracle(), &prior, 10, 200, &RngStream::new(3, 0)).unwrap();
        assert_eq!(r.alpha.mean, 0.0);
        assert_eq!(r.alpha.std_error, 0.0);
        assert!((0.0..=1.0).contains(&r.reject_rate));
        assert!(measure_error(&MechanismSpec::oracle(), &prior, 10, 99, &RngStream::new(3, 0)).is_err());
        assert!(measure_error(&MechanismSpec::oracle(), &prior, 0, 200, &RngStream::new(3, 0)).is_err());
    }

    #[test]
    fn constant_identity_error_matches_unconditional_closed_form() {
        // Σ_ii ~ χ²_D / D has variance 2/D, and Σ_ij (i ≠ j) is a sum of D
        // products of independent normals over D, variance 1/D. Summing over
        // all d² entries: E‖Σ − I‖_F² = (2d + d(d−1))/D = d(d+1)/D = 3.
        let d = 5;
        let prior = NormalizedWishartPrior::new(d).unwrap();
        let spec = MechanismSpec::constant(SymMatrix::identity(d)).unwrap();
        let r = measure_error(&spec, &prior, 1, 20_000, &RngStream::new(11, 0)).unwrap();
        let u = r.unconditional_alpha_sq;
        assert!(u.z_score(3.0).abs() < 4.0, "{u:?}");
    }

    #[test]
    fn error_estimates_are_deterministic() {
        let prior = NormalizedWishartPrior::new(3).unwrap();
        let spec = MechanismSpec::gaussian_dp(1.0, 1e-5, None).unwrap();
        let a = measure_error(&spec, &prior, 50, 300, &RngStream::new(5, 5)).unwrap();
        let b = measure_error(&spec, &prior, 50, 300, &RngStream::new(5, 5)).unwrap();
        assert_eq!(a, b);
    }
}
