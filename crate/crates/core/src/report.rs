//! Check reports: one row per compared quantity, a pass rule shared by
//! deterministic and simulation-based checks, and CSV/JSON output.

use std::fmt::Write as _;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::choiceprob::IntegrationSpec;

/// Pass rule for agreement: `abs_err ≤ abs`, or `rel_err ≤ rel`, or
/// `abs_err ≤ k_se · mc_se`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerance {
    #[serde(default = "Tolerance::default_abs")]
    pub abs: f64,
    #[serde(default = "Tolerance::default_rel")]
    pub rel: f64,
    #[serde(default = "Tolerance::default_k")]
    pub k_se: f64,
}

impl Tolerance {
    fn default_abs() -> f64 {
        1e-9
    }
    fn default_rel() -> f64 {
        0.01
    }
    fn default_k() -> f64 {
        3.0
    }

    pub fn rel(rel: f64) -> Self {
        Self {
            rel,
            ..Self::default()
        }
    }

    pub fn agrees(&self, abs_err: f64, rel_err: f64, se: f64) -> bool {
        abs_err <= self.abs || rel_err <= self.rel || abs_err <= self.k_se * se
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            abs: Self::default_abs(),
            rel: Self::default_rel(),
            k_se: Self::default_k(),
        }
    }
}

/// What a row asserts about its two sides.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Criterion {
    Agree(Tolerance),
    /// The sides must be separated: `abs_err > max(k_se · mc_se, abs)`.
    Differ { k_se: f64, abs: f64 },
    /// `lhs ≤ bound`.
    AtMost(f64),
    /// Reported only; never fails.
    Info,
}

impl Criterion {
    pub fn differ() -> Self {
        Criterion::Differ { k_se: 5.0, abs: 1e-9 }
    }

    fn tag(&self) -> &'static str {
        match self {
            Criterion::Agree(_) => "agree",
            Criterion::Differ { .. } => "differ",
            Criterion::AtMost(_) => "at_most",
            Criterion::Info => "info",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub x: Vec<f64>,
    pub component: String,
    pub lhs: f64,
    pub rhs: f64,
    pub mc_se: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub pass: bool,
    pub criterion: Criterion,
}

impl Row {
    pub fn new(
        x: &[f64],
        component: impl Into<String>,
        lhs: f64,
        rhs: f64,
        mc_se: f64,
        criterion: Criterion,
    ) -> Self {
        let abs_err = (lhs - rhs).abs();
        let rel_err = if rhs != 0.0 {
            abs_err / rhs.abs()
        } else if abs_err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        let pass = match criterion {
            Criterion::Agree(t) => t.agrees(abs_err, rel_err, mc_se),
            Criterion::Differ { k_se, abs } => abs_err > (k_se * mc_se).max(abs),
            Criterion::AtMost(bound) => lhs <= bound,
            Criterion::Info => true,
        };
        Self {
            x: x.to_vec(),
            component: component.into(),
            lhs,
            rhs,
            mc_se,
            abs_err,
            rel_err,
            pass,
            criterion,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Status {
    Pass,
    Fail,
    /// The design violates a hypothesis of the check; rows are reported but
    /// carry no verdict.
    PreconditionFailed(String),
    Skipped(String),
}

impl Status {
    pub fn tag(&self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::PreconditionFailed(_) => "precondition_failed",
            Status::Skipped(_) => "skipped",
        }
    }
}

/// Reproducibility metadata attached to every row.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub config_hash: String,
    pub seed: u64,
    pub draws: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeReport {
    pub label: String,
    pub rows: Vec<Row>,
    pub status: Status,
    pub meta: Metadata,
    pub notes: Vec<String>,
}

impl DerivativeReport {
    pub fn new(label: impl Into<String>, meta: Metadata) -> Self {
        Self {
            label: label.into(),
            rows: Vec::new(),
            status: Status::Pass,
            meta,
            notes: Vec::new(),
        }
    }

    pub fn skipped(label: impl Into<String>, meta: Metadata, reason: impl Into<String>) -> Self {
        let mut r = Self::new(label, meta);
        r.status = Status::Skipped(reason.into());
        r
    }

    pub fn push(&mut self, row: Row) {
        self.rows.push(row);
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    /// Sets the status from the rows unless a precondition already failed.
    pub fn finish(mut self) -> Self {
        if matches!(self.status, Status::Pass | Status::Fail) {
            self.status = if self.rows.iter().all(|r| r.pass) {
                Status::Pass
            } else {
                Status::Fail
            };
        }
        self
    }

    pub fn with_precondition_failure(mut self, reason: impl Into<String>) -> Self {
        self.status = Status::PreconditionFailed(reason.into());
        self
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    /// Whether the report counts as a failure for an overall verdict.
    pub fn failed(&self) -> bool {
        self.status == Status::Fail
    }

    /// Rows whose component name equals `component`.
    pub fn rows_named<'a>(&'a self, component: &'a str) -> impl Iterator<Item = &'a Row> + 'a {
        self.rows.iter().filter(move |r| r.component == component)
    }

    /// Rows whose component name starts with `prefix`.
    pub fn rows_prefixed<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Row> + 'a {
        self.rows.iter().filter(move |r| r.component.starts_with(prefix))
    }

    pub fn failing_rows(&self) -> Vec<&Row> {
        self.rows.iter().filter(|r| !r.pass).collect()
    }
}

/// Integration rule, tolerances and metadata shared by a batch of checks.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckContext {
    pub integ: IntegrationSpec,
    pub tol: Tolerance,
    pub meta: Metadata,
}

impl CheckContext {
    pub fn new(integ: IntegrationSpec) -> Self {
        let meta = Metadata {
            config_hash: String::new(),
            seed: integ.seed,
            draws: integ.reported_draws(),
        };
        Self {
            integ,
            tol: Tolerance::default(),
            meta,
        }
    }

    pub fn with_tolerance(mut self, tol: Tolerance) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_hash(mut self, hash: impl Into<String>) -> Self {
        self.meta.config_hash = hash.into();
        self
    }

    pub fn agree(&self) -> Criterion {
        Criterion::Agree(self.tol)
    }

    pub fn report(&self, label: &str) -> DerivativeReport {
        DerivativeReport::new(label, self.meta.clone())
    }
}

pub const CSV_HEADER: &str =
    "label,x,component,lhs,rhs,mc_se,abs_err,rel_err,pass,criterion,status,config_hash,seed,draws";

fn join_x(x: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in x.iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        write!(s, "{v}").expect("write to string");
    }
    s
}

/// Writes one CSV line per row of every report, preceded by the header.
pub fn write_csv<W: Write>(reports: &[DerivativeReport], out: &mut W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for rep in reports {
        for r in &rep.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                rep.label,
                join_x(&r.x),
                r.component,
                r.lhs,
                r.rhs,
                r.mc_se,
                r.abs_err,
                r.rel_err,
                r.pass,
                r.criterion.tag(),
                rep.status.tag(),
                rep.meta.config_hash,
                rep.meta.seed,
                rep.meta.draws
            )?;
        }
    }
    Ok(())
}

fn finite_or_string(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(v.to_string())
    }
}

/// Per-report summary: status, row counts and the worst errors.
pub fn summary_json(reports: &[DerivativeReport]) -> Value {
    let items: Vec<Value> = reports
        .iter()
        .map(|rep| {
            let judged: Vec<&Row> = rep
                .rows
                .iter()
                .filter(|r| r.criterion != Criterion::Info)
                .collect();
            let agree = judged
                .iter()
                .filter(|r| matches!(r.criterion, Criterion::Agree(_)));
            let max_abs = agree.clone().map(|r| r.abs_err).fold(0.0, f64::max);
            let max_rel = agree
                .map(|r| r.rel_err)
                .filter(|v| v.is_finite())
                .fold(0.0, f64::max);
            let reason = match &rep.status {
                Status::PreconditionFailed(s) | Status::Skipped(s) => Value::String(s.clone()),
                _ => Value::Null,
            };
            json!({
                "label": rep.label,
                "status": rep.status.tag(),
                "reason": reason,
                "rows": rep.rows.len(),
                "judged_rows": judged.len(),
                "failing_rows": rep.failing_rows().len(),
                "max_abs_err": finite_or_string(max_abs),
                "max_rel_err": finite_or_string(max_rel),
                "notes": rep.notes,
                "config_hash": rep.meta.config_hash,
                "seed": rep.meta.seed,
                "draws": rep.meta.draws,
            })
        })
        .collect();
    let failed = reports.iter().filter(|r| r.failed()).count();
    json!({
        "reports": items,
        "failed": failed,
        "passed": reports.iter().filter(|r| r.passed()).count(),
        "total": reports.len(),
    })
}

/// Fixed-width text table of a JSON summary.
pub fn summary_table(summary: &Value) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:<28} {:<20} {:>6} {:>8} {:>12} {:>12}",
        "check", "status", "rows", "failing", "max_abs_err", "max_rel_err"
    )
    .expect("write to string");
    if let Some(items) = summary["reports"].as_array() {
        for it in items {
            let num = |k: &str| match &it[k] {
                Value::Number(n) => format!("{:.3e}", n.as_f64().unwrap_or(f64::NAN)),
                other => other.as_str().unwrap_or("").to_string(),
            };
            writeln!(
                s,
                "{:<28} {:<20} {:>6} {:>8} {:>12} {:>12}",
                it["label"].as_str().unwrap_or(""),
                it["status"].as_str().unwrap_or(""),
                it["rows"].as_u64().unwrap_or(0),
                it["failing_rows"].as_u64().unwrap_or(0),
                num("max_abs_err"),
                num("max_rel_err"),
            )
            .expect("write to string");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_rule_is_a_disjunction() {
        let t = Tolerance::default();
        assert!(Row::new(&[], "a", 1.005, 1.0, 0.0, Criterion::Agree(t)).pass);
        assert!(!Row::new(&[], "a", 1.05, 1.0, 0.0, Criterion::Agree(t)).pass);
        assert!(Row::new(&[], "a", 1.05, 1.0, 0.02, Criterion::Agree(t)).pass);
        assert!(Row::new(&[], "a", 1e-12, 0.0, 0.0, Criterion::Agree(t)).pass);
        assert!(Row::new(&[], "gap", 1.0, 0.0, 0.1, Criterion::differ()).pass);
        assert!(!Row::new(&[], "gap", 0.4, 0.0, 0.1, Criterion::differ()).pass);
        assert!(Row::new(&[], "angle", 1e-4, 0.0, 0.0, Criterion::AtMost(1e-3)).pass);
    }

    #[test]
    fn precondition_failure_survives_finish() {
        let mut r = DerivativeReport::new("cor6", Metadata::default());
        r.push(Row::new(&[], "gap", 1.0, 0.0, 0.0, Criterion::Agree(Tolerance::default())));
        let r = r.with_precondition_failure("support").finish();
        assert_eq!(r.status.tag(), "precondition_failed");
        assert!(!r.failed() && !r.passed());
    }

    #[test]
    fn csv_lines_carry_metadata() {
        let meta = Metadata {
            config_hash: "abc".into(),
            seed: 7,
            draws: 1000,
        };
        let mut r = DerivativeReport::new("thm2", meta);
        r.push(Row::new(&[0.5, -1.0], "d1", 0.25, 0.25, 0.0, Criterion::Info));
        let r = r.finish();
        let mut buf = Vec::new();
        write_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let line = text.lines().nth(1).unwrap();
        assert_eq!(line, "thm2,0.5;-1,d1,0.25,0.25,0,0,0,true,info,pass,abc,7,1000");
    }
}
