//! Report rows, their CSV and JSON-lines encodings, and parsers for both.
//!
//! Non-finite reals are written as `NaN`, `inf` and `-inf` in CSV, and as the
//! strings `"NaN"`, `"inf"` and `"-inf"` in JSON.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use covaudit::mc::{BoundReport, CheckStatus, Direction, SLACK_SE};
use serde::{Deserialize, Serialize};

/// CSV header, in order.
pub const CSV_COLUMNS: [&str; 9] = [
    "check_id",
    "estimate",
    "std_error",
    "bound",
    "direction",
    "satisfied",
    "trials",
    "seed",
    "wall_ms",
];

/// Suffix marking rows whose hypotheses were not met. Their `satisfied` is
/// vacuously true and is not recomputed from the numbers.
pub const VACUOUS_SUFFIX: &str = "#vacuous";

/// JSON Schema for one line of a JSON-lines report.
pub const JSON_SCHEMA: &str = r##"{
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "covaudit report row",
  "type": "object",
  "additionalProperties": false,
  "required": ["check_id", "estimate", "std_error", "bound", "direction", "satisfied", "trials", "seed", "wall_ms", "status", "notes"],
  "properties": {
    "check_id": {"type": "string", "minLength": 1},
    "estimate": {"$ref": "#/$defs/real"},
    "std_error": {"$ref": "#/$defs/real"},
    "bound": {"$ref": "#/$defs/real"},
    "direction": {"enum": ["le", "ge", "eq-within"]},
    "satisfied": {"type": "boolean"},
    "trials": {"type": "integer", "minimum": 0},
    "seed": {"type": "integer", "minimum": 0, "maximum": 18446744073709551615},
    "wall_ms": {"type": "integer", "minimum": 0},
    "status": {"enum": ["evaluated", "hypotheses-not-met", "not-applicable"]},
    "reason": {"type": "string"},
    "notes": {"type": "object", "additionalProperties": {"$ref": "#/$defs/real"}}
  },
  "$defs": {
    "real": {"oneOf": [{"type": "number"}, {"enum": ["NaN", "inf", "-inf"]}]}
  }
}"##;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub check_id: String,
    pub estimate: f64,
    pub std_error: f64,
    pub bound: f64,
    pub direction: Direction,
    pub satisfied: bool,
    pub trials: usize,
    pub seed: u64,
    pub wall_ms: u64,
}

impl ReportRow {
    pub fn is_vacuous(&self) -> bool {
        self.check_id.ends_with(VACUOUS_SUFFIX)
    }

    /// `satisfied` as implied by the numbers, or `true` for vacuous rows.
    pub fn recomputed_satisfied(&self) -> bool {
        self.is_vacuous()
            || self
                .direction
                .holds(self.estimate, self.std_error, self.bound, SLACK_SE)
    }

    /// Copy with `wall_ms` zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_ms: 0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Evaluated,
    HypothesesNotMet,
    NotApplicable,
}

/// A row plus the status and auxiliary values carried only by JSON output.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRecord {
    pub row: ReportRow,
    pub status: Status,
    pub reason: Option<String>,
    pub notes: BTreeMap<String, f64>,
}

impl ReportRecord {
    pub fn from_report(check_id: &str, report: &BoundReport, wall_ms: u64) -> Self {
        let (status, reason) = match &report.status {
            CheckStatus::Evaluated => (Status::Evaluated, None),
            CheckStatus::HypothesesNotMet(r) => (Status::HypothesesNotMet, Some(r.clone())),
            CheckStatus::NotApplicable(r) => (Status::NotApplicable, Some(r.clone())),
        };
        let check_id = if status == Status::Evaluated {
            check_id.to_string()
        } else {
            format!("{check_id}{VACUOUS_SUFFIX}")
        };
        Self {
            row: ReportRow {
                check_id,
                estimate: report.estimate.mean,
                std_error: report.estimate.std_error,
                bound: report.bound_value,
                direction: report.direction,
                satisfied: report.satisfied(),
                trials: report.estimate.trials,
                seed: report.estimate.master_seed,
                wall_ms,
            },
            status,
            reason,
            notes: report.notes.iter().cloned().collect(),
        }
    }
}

/// A malformed report. `line` is 1-based and counts the header.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportError {
    pub line: usize,
    pub field: Option<String>,
    pub message: String,
}

impl ReportError {
    fn new(line: usize, field: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            line,
            field: field.map(str::to_string),
            message: message.into(),
        }
    }
}

impl fmt::Display for ReportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.field {
            Some(field) => write!(f, "line {}: `{field}`: {}", self.line, self.message),
            None => write!(f, "line {}: {}", self.line, self.message),
        }
    }
}

impl std::error::Error for ReportError {}

/// Shortest round-tripping decimal; `NaN`, `inf`, `-inf` otherwise.
pub fn format_real(x: f64) -> String {
    format!("{x}")
}

fn parse_real(s: &str) -> Option<f64> {
    match s {
        "NaN" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse::<f64>().ok().filter(|x| x.is_finite()),
    }
}

fn csv_fields(row: &ReportRow) -> [String; 9] {
    [
        row.check_id.clone(),
        format_real(row.estimate),
        format_real(row.std_error),
        format_real(row.bound),
        row.direction.as_str().to_string(),
        row.satisfied.to_string(),
        row.trials.to_string(),
        row.seed.to_string(),
        row.wall_ms.to_string(),
    ]
}

/// Writes an RFC 4180 CSV report with the header from [`CSV_COLUMNS`].
pub fn write_csv<W: Write>(rows: &[ReportRow], out: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for row in rows {
        w.write_record(csv_fields(row))?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(rows: &[ReportRow]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("csv output is utf-8")
}

fn check_row(row: ReportRow, line: usize) -> Result<ReportRow, ReportError> {
    if row.check_id.is_empty() {
        return Err(ReportError::new(line, Some("check_id"), "empty"));
    }
    if row.satisfied != row.recomputed_satisfied() {
        return Err(ReportError::new(
            line,
            Some("satisfied"),
            format!(
                "says {} but the numbers give {}",
                row.satisfied,
                row.recomputed_satisfied()
            ),
        ));
    }
    Ok(row)
}

/// Parses a CSV report, checking the header and that every `satisfied`
/// agrees with its numbers.
pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>, ReportError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| ReportError::new(1, None, e.to_string()))?;
    if header.iter().ne(CSV_COLUMNS) {
        return Err(ReportError::new(
            1,
            None,
            format!("header must be {}", CSV_COLUMNS.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| ReportError::new(line, None, e.to_string()))?;
        let field = |i: usize| rec.get(i).expect("csv reader enforces equal field counts");
        let real = |i: usize| {
            parse_real(field(i)).ok_or_else(|| ReportError::new(line, Some(CSV_COLUMNS[i]), "not a real number"))
        };
        let int = |i: usize| {
            field(i)
                .parse::<u64>()
                .map_err(|e| ReportError::new(line, Some(CSV_COLUMNS[i]), e.to_string()))
        };
        let row = ReportRow {
            check_id: field(0).to_string(),
            estimate: real(1)?,
            std_error: real(2)?,
            bound: real(3)?,
            direction: field(4)
                .parse()
                .map_err(|e: String| ReportError::new(line, Some("direction"), e))?,
            satisfied: field(5)
                .parse()
                .map_err(|_| ReportError::new(line, Some("satisfied"), "expected true or false"))?,
            trials: usize::try_from(int(6)?).map_err(|e| ReportError::new(line, Some("trials"), e.to_string()))?,
            seed: int(7)?,
            wall_ms: int(8)?,
        };
        rows.push(check_row(row, line)?);
    }
    Ok(rows)
}

mod real_json {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_str(&super::format_real(*x))
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Real {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Real::deserialize(d)? {
            Real::Number(x) => Ok(x),
            Real::Text(t) => super::parse_real(&t)
                .filter(|x| !x.is_finite())
                .ok_or_else(|| serde::de::Error::custom(format!("`{t}` is not NaN, inf or -inf"))),
        }
    }
}

mod notes_json {
    use std::collections::BTreeMap;

    use serde::ser::SerializeMap;
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(serde::Serialize, Deserialize)]
    struct Real(#[serde(with = "super::real_json")] f64);

    pub fn serialize<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(m.len()))?;
        for (k, v) in m {
            map.serialize_entry(k, &Real(*v))?;
        }
        map.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
        let m = BTreeMap::<String, Real>::deserialize(d)?;
        Ok(m.into_iter().map(|(k, v)| (k, v.0)).collect())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRow {
    check_id: String,
    #[serde(with = "real_json")]
    estimate: f64,
    #[serde(with = "real_json")]
    std_error: f64,
    #[serde(with = "real_json")]
    bound: f64,
    direction: Direction,
    satisfied: bool,
    trials: usize,
    seed: u64,
    wall_ms: u64,
    status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
    #[serde(with = "notes_json")]
    notes: BTreeMap<String, f64>,
}

impl From<&ReportRecord> for JsonRow {
    fn from(r: &ReportRecord) -> Self {
        let row = &r.row;
        Self {
            check_id: row.check_id.clone(),
            estimate: row.estimate,
            std_error: row.std_error,
            bound: row.bound,
            direction: row.direction,
            satisfied: row.satisfied,
            trials: row.trials,
            seed: row.seed,
            wall_ms: row.wall_ms,
            status: r.status,
            reason: r.reason.clone(),
            notes: r.notes.clone(),
        }
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write>(records: &[ReportRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, &JsonRow::from(r))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn to_jsonl_string(records: &[ReportRecord]) -> String {
    let mut buf = Vec::new();
    write_jsonl(records, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("json output is utf-8")
}

/// Parses a JSON-lines report. Blank lines are skipped.
pub fn parse_jsonl(text: &str) -> Result<Vec<ReportRecord>, ReportError> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let j: JsonRow = serde_json::from_str(line).map_err(|e| ReportError::new(k + 1, None, e.to_string()))?;
        let vacuous = j.check_id.ends_with(VACUOUS_SUFFIX);
        if vacuous == (j.status == Status::Evaluated) {
            return Err(ReportError::new(
                k + 1,
                Some("status"),
                format!("`{VACUOUS_SUFFIX}` suffix must appear exactly on rows that were not evaluated"),
            ));
        }
        let row = ReportRow {
            check_id: j.check_id,
            estimate: j.estimate,
            std_error: j.std_error,
            bound: j.bound,
            direction: j.direction,
            satisfied: j.satisfied,
            trials: j.trials,
            seed: j.seed,
            wall_ms: j.wall_ms,
        };
        out.push(ReportRecord {
            row: check_row(row, k + 1)?,
            status: j.status,
            reason: j.reason,
            notes: j.notes,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use covaudit::McEstimate;

    fn record(id: &str, mean: f64, se: f64, bound: f64, dir: Direction) -> ReportRecord {
        let rep = BoundReport::new(
            McEstimate {
                mean,
                std_error: se,
                trials: 10,
                master_seed: 42,
            },
            bound,
            dir,
        )
        .with_note("alpha", 0.25);
        ReportRecord::from_report(id, &rep, 7)
    }

    #[test]
    fn csv_header_and_quoting() {
        let mut r = record("run-attack/in-sample, \"quoted\"", 15.1, 0.2, 15.0, Direction::EqWithin).row;
        r.estimate = 0.1 + 0.2;
        r.satisfied = r.recomputed_satisfied();
        let text = to_csv_string(&[r.clone()]);
        assert!(text.starts_with("check_id,estimate,std_error,bound,direction,satisfied,trials,seed,wall_ms\r\n"));
        assert!(text.contains("\"run-attack/in-sample, \"\"quoted\"\"\""));
        let back = parse_csv(&text).unwrap();
        assert_eq!(back, vec![r]);
    }

    #[test]
    fn non_finite_round_trip() {
        let mut rec = record("x", f64::INFINITY, f64::NAN, 1.0, Direction::Le);
        rec.row.satisfied = rec.row.recomputed_satisfied();
        rec.notes.insert("nan".into(), f64::NAN);
        let csv_back = parse_csv(&to_csv_string(&[rec.row.clone()])).unwrap();
        assert!(csv_back[0].estimate.is_infinite() && csv_back[0].std_error.is_nan());
        let text = to_jsonl_string(&[rec]);
        assert!(text.contains("\"estimate\":\"inf\""));
        let back = parse_jsonl(&text).unwrap();
        assert!(back[0].row.std_error.is_nan() && back[0].notes["nan"].is_nan());
    }

    #[test]
    fn inconsistent_satisfied_rejected() {
        let mut r = record("x", 20.0, 1.0, 15.0, Direction::EqWithin).row;
        assert!(!r.satisfied);
        r.satisfied = true;
        let err = parse_csv(&to_csv_string(&[r])).unwrap_err();
        assert_eq!((err.line, err.field.as_deref()), (2, Some("satisfied")));
    }

    #[test]
    fn vacuous_rows() {
        let rep = BoundReport::skipped(
            CheckStatus::HypothesesNotMet("d too small".into()),
            McEstimate::exact(0.0, 10, 1),
            100.0,
            Direction::Ge,
        );
        let rec = ReportRecord::from_report("lower-bound", &rep, 0);
        assert_eq!(rec.row.check_id, "lower-bound#vacuous");
        assert!(rec.row.satisfied && rec.row.recomputed_satisfied());
        let back = parse_jsonl(&to_jsonl_string(std::slice::from_ref(&rec))).unwrap();
        assert_eq!(back, vec![rec.clone()]);
        let bad = to_jsonl_string(&[rec]).replace("hypotheses-not-met", "evaluated");
        assert_eq!(parse_jsonl(&bad).unwrap_err().field.as_deref(), Some("status"));
    }

    #[test]
    fn malformed_inputs() {
        assert_eq!(parse_csv("a,b\n1,2\n").unwrap_err().line, 1);
        let head = CSV_COLUMNS.join(",");
        let e = parse_csv(&format!("{head}\nx,abc,0,0,le,true,1,1,0\n")).unwrap_err();
        assert_eq!(e.field.as_deref(), Some("estimate"));
        let e = parse_csv(&format!("{head}\nx,0,0,0,lt,true,1,1,0\n")).unwrap_err();
        assert_eq!(e.field.as_deref(), Some("direction"));
        let e = parse_csv(&format!("{head}\nx,0,0,0,le,true,1,-1,0\n")).unwrap_err();
        assert_eq!(e.field.as_deref(), Some("seed"));
        assert!(parse_csv(&format!("{head}\nx,0,0\n")).is_err());
        assert!(parse_jsonl("{\"check_id\": 1}").is_err());
        assert!(parse_jsonl("[]").is_err());
        let ok = to_jsonl_string(&[record("x", 1.0, 0.0, 1.0, Direction::Le)]);
        assert!(parse_jsonl(&ok.replace("\"notes\"", "\"extra\":1,\"notes\"")).is_err());
        assert!(parse_jsonl(&ok.replace("\"le\"", "\"\"")).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = vec![
            record("a", 1.0, 0.1, 1.2, Direction::Le),
            record("b", -3.5e-12, 2.0e-13, 0.0, Direction::EqWithin),
        ];
        let text = to_jsonl_string(&recs);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_jsonl(&text).unwrap(), recs);
    }
}
