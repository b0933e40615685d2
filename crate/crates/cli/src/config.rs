//! Experiment configuration: built-in defaults, an optional JSON file, then flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use covaudit::harness::upper_bound_max_delta;
use covaudit::mechanism::{MechanismKind, MechanismSpec};
use covaudit::SymMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable read for the default master seed.
pub const SEED_ENV: &str = "COVAUDIT_SEED";

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_D: usize = 5;
pub const DEFAULT_N: usize = 500;
pub const DEFAULT_TRIALS: usize = 2000;
pub const DEFAULT_EPSILONS: [f64; 3] = [1.0, 0.3, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    VerifyIdentities,
    VerifyTails,
    RunAttack,
    LowerBound,
    UpperBound,
    ErrorCurve,
}

impl Command {
    pub fn as_str(&self) -> &'static str {
        match self {
            Command::VerifyIdentities => "verify-identities",
            Command::VerifyTails => "verify-tails",
            Command::RunAttack => "run-attack",
            Command::LowerBound => "lower-bound",
            Command::UpperBound => "upper-bound",
            Command::ErrorCurve => "error-curve",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Mechanism names accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum MechanismArg {
    Empirical,
    GaussianDp,
    /// The identity matrix, whatever the data.
    Constant,
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub command: Command,
    pub d: usize,
    pub n: usize,
    pub trials: usize,
    pub mechanism: MechanismSpec,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub master_seed: u64,
    /// `None` writes to stdout.
    pub output_path: Option<PathBuf>,
    pub format: Format,
    /// Privacy budgets for `upper-bound`, strictly decreasing.
    pub epsilons: Vec<f64>,
    /// Sample sizes for `error-curve`. Empty means `n/4, n/2, n, 2n`.
    pub n_grid: Vec<usize>,
    /// Raise trials adaptively up to this many. `None` keeps `trials` fixed.
    pub max_trials: Option<usize>,
    /// `lower-bound` only: pick `n` by bisection instead of using `n`.
    pub bisect: bool,
}

/// A rejected configuration. `key` names the offending setting.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Parser)]
#[command(
    name = "covaudit",
    version,
    about = "Seeded score-attack and matrix-moment experiments"
)]
pub struct Args {
    /// Check suite to run. May also come from the config file.
    #[arg(value_enum)]
    pub command: Option<Command>,
    /// JSON config file. Flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dimension. Default 5.
    #[arg(long)]
    pub d: Option<usize>,
    /// Samples per dataset. Default 500.
    #[arg(long)]
    pub n: Option<usize>,
    /// Monte Carlo trials per check. Default 2000.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, value_enum)]
    pub mechanism: Option<MechanismArg>,
    /// Privacy budget for gaussian_dp. Default 1.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// In (0, 1). Default 1/(3n ln(en)).
    #[arg(long)]
    pub delta: Option<f64>,
    /// gaussian_dp clips samples to this norm. Default 2 sqrt(10 d).
    #[arg(long)]
    pub clip_radius: Option<f64>,
    /// Project mechanism output onto the well-conditioned set.
    #[arg(long, overrides_with = "no_project")]
    pub project: bool,
    #[arg(long, overrides_with = "project")]
    pub no_project: bool,
    /// Master seed. Defaults to $COVAUDIT_SEED, then 42.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Strictly decreasing budgets for the monotonicity check.
    #[arg(long, value_delimiter = ',')]
    pub epsilons: Option<Vec<f64>>,
    /// Sample sizes for error-curve. Default n/4, n/2, n, 2n.
    #[arg(long, value_delimiter = ',')]
    pub n_grid: Option<Vec<usize>>,
    /// Let undecided checks double their trials up to this count.
    #[arg(long)]
    pub max_trials: Option<usize>,
    /// lower-bound: search for the n that makes the error small enough.
    #[arg(long)]
    pub bisect: bool,
}

/// Keys accepted in the config file.
pub const FILE_KEYS: [&str; 14] = [
    "command",
    "d",
    "n",
    "trials",
    "mechanism",
    "epsilon",
    "delta",
    "master_seed",
    "output_path",
    "format",
    "epsilons",
    "n_grid",
    "max_trials",
    "bisect",
];

/// Values read from a config file, each already type-checked.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct FileConfig {
    pub command: Option<Command>,
    pub d: Option<usize>,
    pub n: Option<usize>,
    pub trials: Option<usize>,
    pub mechanism: Option<MechanismSpec>,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub master_seed: Option<u64>,
    pub output_path: Option<PathBuf>,
    pub format: Option<Format>,
    pub epsilons: Option<Vec<f64>>,
    pub n_grid: Option<Vec<usize>>,
    pub max_trials: Option<usize>,
    pub bisect: Option<bool>,
}

fn take<T: DeserializeOwned>(map: &mut BTreeMap<String, Value>, key: &str) -> Result<Option<T>, ConfigError> {
    match map.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v)
            .map(Some)
            .map_err(|e| ConfigError::new(key, e.to_string())),
    }
}

impl FileConfig {
    /// Parses a JSON object. Each type error names its key.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::new("config", e.to_string()))?;
        let Value::Object(obj) = value else {
            return Err(ConfigError::new("config", "top level must be a JSON object"));
        };
        let mut map: BTreeMap<String, Value> = obj.into_iter().collect();
        if let Some(unknown) = map.keys().find(|k| !FILE_KEYS.contains(&k.as_str())) {
            return Err(ConfigError::new(unknown.clone(), "unknown key"));
        }
        Ok(Self {
            command: take(&mut map, "command")?,
            d: take(&mut map, "d")?,
            n: take(&mut map, "n")?,
            trials: take(&mut map, "trials")?,
            mechanism: take(&mut map, "mechanism")?,
            epsilon: take(&mut map, "epsilon")?,
            delta: take(&mut map, "delta")?,
            master_seed: take(&mut map, "master_seed")?,
            output_path: take(&mut map, "output_path")?,
            format: take(&mut map, "format")?,
            epsilons: take(&mut map, "epsilons")?,
            n_grid: take(&mut map, "n_grid")?,
            max_trials: take(&mut map, "max_trials")?,
            bisect: take(&mut map, "bisect")?,
        })
    }
}

/// Parses `$COVAUDIT_SEED`.
pub fn seed_from_env(value: Option<&str>) -> Result<Option<u64>, ConfigError> {
    value
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| ConfigError::new(SEED_ENV, format!("`{s}`: {e}")))
        })
        .transpose()
}

fn positive(key: &str, v: usize) -> Result<usize, ConfigError> {
    if v == 0 {
        return Err(ConfigError::new(key, "must be positive"));
    }
    Ok(v)
}

fn positive_real(key: &str, v: f64) -> Result<f64, ConfigError> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(ConfigError::new(key, format!("must be positive and finite, got {v}")));
    }
    Ok(v)
}

fn check_delta(v: f64) -> Result<f64, ConfigError> {
    if !(v > 0.0 && v < 1.0) {
        return Err(ConfigError::new("delta", format!("must lie in (0, 1), got {v}")));
    }
    Ok(v)
}

fn mechanism_error(e: covaudit::Error) -> ConfigError {
    match e {
        covaudit::Error::InvalidParameter { name, reason } => ConfigError::new(name, reason),
        other => ConfigError::new("mechanism", other.to_string()),
    }
}

/// Builds the mechanism from flags, falling back to the file's.
fn resolve_mechanism(args: &Args, file: &FileConfig, d: usize, n: usize) -> Result<MechanismSpec, ConfigError> {
    let base = match args.mechanism {
        None => file.mechanism.clone().unwrap_or_else(MechanismSpec::empirical),
        Some(MechanismArg::Empirical) => MechanismSpec::empirical(),
        Some(MechanismArg::Oracle) => MechanismSpec::oracle(),
        Some(MechanismArg::Constant) => MechanismSpec::constant(SymMatrix::identity(d)).map_err(mechanism_error)?,
        Some(MechanismArg::GaussianDp) => {
            // ε = 1 and δ = 1/(3n ln(en)) unless overridden below
            MechanismSpec::gaussian_dp(1.0, upper_bound_max_delta(n), None).map_err(mechanism_error)?
        }
    };
    let from_flag = args.mechanism.is_some();
    let project = if args.project {
        true
    } else if args.no_project {
        false
    } else if from_flag {
        file.mechanism.as_ref().is_some_and(|m| m.project_output())
    } else {
        base.project_output()
    };
    let kind = match base.kind().clone() {
        MechanismKind::GaussianDp {
            epsilon,
            delta,
            clip_radius,
        } => MechanismKind::GaussianDp {
            epsilon: args.epsilon.or(file.epsilon).unwrap_or(epsilon),
            delta: args.delta.or(file.delta).unwrap_or(delta),
            clip_radius: args.clip_radius.or(clip_radius),
        },
        other => {
            if args.clip_radius.is_some() {
                return Err(ConfigError::new("clip_radius", "only applies to gaussian_dp"));
            }
            other
        }
    };
    if let MechanismKind::Constant(c) = &kind {
        if c.dim() != d {
            return Err(ConfigError::new(
                "mechanism",
                format!("constant_value is {0}x{0} but d = {d}", c.dim()),
            ));
        }
    }
    MechanismSpec::new(kind, project).map_err(mechanism_error)
}

impl ExperimentConfig {
    /// Merges defaults, the environment seed, the file and the flags, in
    /// increasing precedence, then validates.
    pub fn resolve(args: &Args, file: &FileConfig, env_seed: Option<u64>) -> Result<Self, ConfigError> {
        let command = args
            .command
            .or(file.command)
            .ok_or_else(|| ConfigError::new("command", "missing; give it as the first argument"))?;
        let d = positive("d", args.d.or(file.d).unwrap_or(DEFAULT_D))?;
        let n = positive("n", args.n.or(file.n).unwrap_or(DEFAULT_N))?;
        let trials = positive("trials", args.trials.or(file.trials).unwrap_or(DEFAULT_TRIALS))?;
        let epsilon = args
            .epsilon
            .or(file.epsilon)
            .map(|e| positive_real("epsilon", e))
            .transpose()?;
        let delta = args.delta.or(file.delta).map(check_delta).transpose()?;
        if let Some(c) = args.clip_radius {
            positive_real("clip_radius", c)?;
        }
        let mechanism = resolve_mechanism(args, file, d, n)?;
        if (epsilon.is_some() || delta.is_some()) && !matches!(mechanism.kind(), MechanismKind::GaussianDp { .. }) {
            let key = if epsilon.is_some() { "epsilon" } else { "delta" };
            return Err(ConfigError::new(
                key,
                format!("only applies to gaussian_dp, mechanism is {mechanism}"),
            ));
        }
        let epsilons = args
            .epsilons
            .clone()
            .or_else(|| file.epsilons.clone())
            .unwrap_or_else(|| DEFAULT_EPSILONS.to_vec());
        for e in &epsilons {
            positive_real("epsilons", *e)?;
        }
        if epsilons.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(ConfigError::new("epsilons", "must be strictly decreasing"));
        }
        let n_grid = args.n_grid.clone().or_else(|| file.n_grid.clone()).unwrap_or_default();
        for v in &n_grid {
            positive("n_grid", *v)?;
        }
        let max_trials = args
            .max_trials
            .or(file.max_trials)
            .map(|m| positive("max_trials", m))
            .transpose()?;
        if max_trials.is_some_and(|m| m < trials) {
            return Err(ConfigError::new("max_trials", "must be at least `trials`"));
        }
        Ok(Self {
            command,
            d,
            n,
            trials,
            mechanism,
            epsilon,
            delta,
            master_seed: args.seed.or(file.master_seed).or(env_seed).unwrap_or(DEFAULT_SEED),
            output_path: args.output.clone().or_else(|| file.output_path.clone()),
            format: args.format.or(file.format).unwrap_or_default(),
            epsilons,
            n_grid,
            max_trials,
            bisect: args.bisect || file.bisect.unwrap_or(false),
        })
    }
}

/// Failure to produce a config: either clap's own error or a validation error.
#[derive(Debug)]
pub enum ParseError {
    Clap(clap::Error),
    Config(ConfigError),
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseError::Clap(e) => write!(f, "{e}"),
            ParseError::Config(e) => write!(f, "{e}"),
        }
    }
}

/// Parses argv (including the program name) plus the config file it names.
pub fn parse_config<I, T>(argv: I, env_seed: Option<&str>) -> Result<ExperimentConfig, ParseError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = Args::try_parse_from(argv).map_err(ParseError::Clap)?;
    let file = match &args.config {
        None => FileConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ParseError::Config(ConfigError::new("config", format!("{}: {e}", path.display()))))?;
            FileConfig::from_json(&text).map_err(ParseError::Config)?
        }
    };
    let env_seed = seed_from_env(env_seed).map_err(ParseError::Config)?;
    ExperimentConfig::resolve(&args, &file, env_seed).map_err(ParseError::Config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(argv: &[&str]) -> Result<ExperimentConfig, ParseError> {
        parse_config(std::iter::once("covaudit").chain(argv.iter().copied()), None)
    }

    fn key_of(r: Result<ExperimentConfig, ParseError>) -> String {
        match r {
            Err(ParseError::Config(e)) => e.key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn example_invocation() {
        let c = parse(&[
            "run-attack",
            "--d",
            "5",
            "--n",
            "500",
            "--trials",
            "2000",
            "--mechanism",
            "empirical",
            "--seed",
            "42",
        ])
        .unwrap();
        assert_eq!(c.command, Command::RunAttack);
        assert_eq!((c.d, c.n, c.trials, c.master_seed), (5, 500, 2000, 42));
        assert_eq!(c.mechanism, MechanismSpec::empirical());
        assert_eq!(c.format, Format::Csv);
    }

    #[test]
    fn delta_out_of_range_names_delta() {
        assert_eq!(
            key_of(parse(&["upper-bound", "--mechanism", "gaussian_dp", "--delta", "2.0"])),
            "delta"
        );
        assert_eq!(
            key_of(parse(&["upper-bound", "--mechanism", "gaussian_dp", "--epsilon=-1"])),
            "epsilon"
        );
        assert_eq!(key_of(parse(&["run-attack", "--d", "0"])), "d");
        assert_eq!(key_of(parse(&["run-attack", "--epsilon", "1"])), "epsilon");
        assert_eq!(key_of(parse(&[])), "command");
    }

    #[test]
    fn unknown_flag_is_clap_error() {
        assert!(matches!(
            parse(&["run-attack", "--bogus", "1"]),
            Err(ParseError::Clap(_))
        ));
        assert!(matches!(
            parse(&["run-attack", "--d", "five"]),
            Err(ParseError::Clap(_))
        ));
        assert!(matches!(parse(&["no-such-command"]), Err(ParseError::Clap(_))));
    }

    #[test]
    fn flags_override_file() {
        let file = FileConfig::from_json(r#"{"command": "run-attack", "d": 5, "n": 50}"#).unwrap();
        let args = Args::try_parse_from(["covaudit", "--d", "10"]).unwrap();
        let c = ExperimentConfig::resolve(&args, &file, None).unwrap();
        assert_eq!((c.command, c.d, c.n), (Command::RunAttack, 10, 50));
    }

    #[test]
    fn seed_precedence() {
        let file = FileConfig::default();
        let args = Args::try_parse_from(["covaudit", "verify-tails"]).unwrap();
        assert_eq!(
            ExperimentConfig::resolve(&args, &file, None).unwrap().master_seed,
            DEFAULT_SEED
        );
        assert_eq!(ExperimentConfig::resolve(&args, &file, Some(7)).unwrap().master_seed, 7);
        let file = FileConfig::from_json(r#"{"master_seed": 9}"#).unwrap();
        assert_eq!(ExperimentConfig::resolve(&args, &file, Some(7)).unwrap().master_seed, 9);
        let args = Args::try_parse_from(["covaudit", "verify-tails", "--seed", "11"]).unwrap();
        assert_eq!(
            ExperimentConfig::resolve(&args, &file, Some(7)).unwrap().master_seed,
            11
        );
        assert_eq!(seed_from_env(Some("x")).unwrap_err().key, SEED_ENV);
    }

    #[test]
    fn file_errors_name_the_key() {
        assert_eq!(FileConfig::from_json(r#"{"d": "five"}"#).unwrap_err().key, "d");
        assert_eq!(FileConfig::from_json(r#"{"dd": 5}"#).unwrap_err().key, "dd");
        assert_eq!(FileConfig::from_json(r#"{"format": "xml"}"#).unwrap_err().key, "format");
        assert_eq!(
            FileConfig::from_json(r#"{"master_seed": -1}"#).unwrap_err().key,
            "master_seed"
        );
        assert_eq!(FileConfig::from_json("[1]").unwrap_err().key, "config");
        assert_eq!(FileConfig::from_json("{").unwrap_err().key, "config");
        let err = FileConfig::from_json(r#"{"mechanism": {"kind": "gaussian_dp", "epsilon": 1.0}}"#).unwrap_err();
        assert_eq!(err.key, "mechanism");
    }

    #[test]
    fn file_mechanism_with_overrides() {
        let file = FileConfig::from_json(
            r#"{"command": "upper-bound",
                "mechanism": {"kind": "gaussian_dp", "epsilon": 1.0, "delta": 1e-6, "project_output": true}}"#,
        )
        .unwrap();
        let args = Args::try_parse_from(["covaudit", "--epsilon", "0.3"]).unwrap();
        let c = ExperimentConfig::resolve(&args, &file, None).unwrap();
        assert!(c.mechanism.project_output());
        match c.mechanism.kind() {
            MechanismKind::GaussianDp { epsilon, delta, .. } => assert_eq!((*epsilon, *delta), (0.3, 1e-6)),
            k => panic!("{k:?}"),
        }
        let args = Args::try_parse_from(["covaudit", "--no-project"]).unwrap();
        assert!(!ExperimentConfig::resolve(&args, &file, None)
            .unwrap()
            .mechanism
            .project_output());
    }

    #[test]
    fn constant_flag_uses_identity_of_dimension_d() {
        let c = parse(&["run-attack", "--mechanism", "constant", "--d", "3"]).unwrap();
        assert_eq!(c.mechanism.kind(), &MechanismKind::Constant(SymMatrix::identity(3)));
        let file = FileConfig::from_json(r#"{"mechanism": {"kind": "constant", "constant_value": [[1.0]]}}"#).unwrap();
        let args = Args::try_parse_from(["covaudit", "run-attack", "--d", "2"]).unwrap();
        assert_eq!(
            ExperimentConfig::resolve(&args, &file, None).unwrap_err().key,
            "mechanism"
        );
    }

    #[test]
    fn epsilon_grid_validation() {
        assert_eq!(key_of(parse(&["upper-bound", "--epsilons", "0.1,0.3"])), "epsilons");
        let c = parse(&["upper-bound", "--epsilons", "2,1,0.5"]).unwrap();
        assert_eq!(c.epsilons, vec![2.0, 1.0, 0.5]);
        assert_eq!(key_of(parse(&["error-curve", "--n-grid", "10,0"])), "n_grid");
        assert_eq!(
            key_of(parse(&["run-attack", "--trials", "100", "--max-trials", "50"])),
            "max_trials"
        );
    }
}
