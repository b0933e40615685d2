//! Command-line runner for the covaudit checks.
//!
//! Exit codes: 0 when every row is satisfied, 1 when some row is not (the
//! report is still written), 2 for usage, configuration or I/O errors.

pub mod commands;
pub mod config;
pub mod report;

use std::fs::File;
use std::io::{self, BufWriter, Write};

pub use commands::run_checks;
pub use config::{parse_config, ExperimentConfig, Format};
pub use report::{ReportRecord, ReportRow};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED_CHECKS: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Writes the records in the configured format to `out`.
pub fn write_report<W: Write>(records: &[ReportRecord], format: Format, out: W) -> io::Result<()> {
    match format {
        Format::Csv => {
            let rows: Vec<ReportRow> = records.iter().map(|r| r.row.clone()).collect();
            report::write_csv(&rows, out).map_err(io::Error::other)
        }
        Format::Json => report::write_jsonl(records, out),
    }
}

/// Runs a parsed config, writes its report and returns the exit code.
pub fn run(config: &ExperimentConfig) -> i32 {
    let records = match run_checks(config) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let written = match &config.output_path {
        Some(path) => File::create(path).and_then(|f| write_report(&records, config.format, BufWriter::new(f))),
        None => write_report(&records, config.format, io::stdout().lock()),
    };
    if let Err(e) = written {
        eprintln!("error: writing report: {e}");
        return EXIT_USAGE;
    }
    if records.iter().all(|r| r.row.satisfied) {
        EXIT_OK
    } else {
        EXIT_FAILED_CHECKS
    }
}

/// Entry point shared by the binary and the tests. `argv` includes the
/// program name; `env_seed` is the raw value of `$COVAUDIT_SEED`.
pub fn main_with<I, T>(argv: I, env_seed: Option<&str>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match parse_config(argv, env_seed) {
        Ok(config) => run(&config),
        Err(config::ParseError::Clap(e)) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}
