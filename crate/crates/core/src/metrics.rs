//! Robustness metrics and report emission.
//!
//! Accuracies are percentages; performance drop is a ratio. Values are kept
//! at full precision and only rounded when rendered.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorio::Split;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("method {method:?}: {message}")]
    Inconsistent { method: String, message: String },
}

/// `(acc_id − acc_ood) / acc_id`; `None` when `acc_id` is zero.
pub fn compute_pd(acc_id: f64, acc_ood: f64) -> Option<f64> {
    (acc_id != 0.0).then(|| (acc_id - acc_ood) / acc_id)
}

/// Harmonic mean of the two accuracies. Both zero gives 0 with the flag set.
pub fn compute_h(acc_id: f64, acc_ood: f64) -> (f64, bool) {
    let sum = acc_id + acc_ood;
    if sum == 0.0 {
        (0.0, true)
    } else {
        (2.0 * acc_id * acc_ood / sum, false)
    }
}

/// Two decimals, half away from zero, applied to the shortest decimal
/// representation of `x` so that e.g. `1.005` rounds up.
pub fn round2(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let text = x.abs().to_string();
    let (int, frac) = text.split_once('.').unwrap_or((&text, ""));
    let mut digits = frac.bytes().chain(std::iter::repeat(b'0'));
    let (d1, d2, d3) = (digits.next().unwrap(), digits.next().unwrap(), digits.next().unwrap());
    let scaled: f64 = format!("{int}{}{}", d1 as char, d2 as char)
        .parse()
        .expect("decimal digits");
    let scaled = if d3 >= b'5' { scaled + 1.0 } else { scaled };
    (scaled / 100.0).copysign(x)
}

pub fn format2(x: f64) -> String {
    format!("{:.2}", round2(x))
}

/// Percentage from integer counts.
pub fn accuracy(correct: u64, total: u64) -> Option<f64> {
    (total > 0).then(|| (100 * correct) as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsolationDiagnostic {
    pub monotone: bool,
    pub id_minus_isolation: f64,
    pub isolation_minus_ood: f64,
}

pub fn isolation_diagnostic(acc_id: f64, acc_iso: f64, acc_ood: f64) -> IsolationDiagnostic {
    IsolationDiagnostic {
        monotone: acc_id >= acc_iso && acc_iso >= acc_ood,
        id_minus_isolation: acc_id - acc_iso,
        isolation_minus_ood: acc_iso - acc_ood,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTally {
    pub correct: u64,
    pub total: u64,
}

impl ClassTally {
    pub fn accuracy(&self) -> Option<f64> {
        accuracy(self.correct, self.total)
    }
}

/// Output of one evaluation run over one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    pub method: String,
    pub split: Split,
    pub correct: u64,
    pub total: u64,
    pub per_class: BTreeMap<String, ClassTally>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl SplitEval {
    pub fn new(method: impl Into<String>, split: Split) -> Self {
        Self {
            method: method.into(),
            split,
            correct: 0,
            total: 0,
            per_class: BTreeMap::new(),
            config: serde_json::Value::Null,
        }
    }

    pub fn record(&mut self, class_label: &str, correct: bool) {
        let t = self.per_class.entry(class_label.to_string()).or_default();
        t.total += 1;
        self.total += 1;
        if correct {
            t.correct += 1;
            self.correct += 1;
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        accuracy(self.correct, self.total)
    }

    pub fn averages(&self) -> Averages {
        Averages::of(&self.per_class)
    }
}

/// Micro (pooled) and macro (per-class mean) accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub micro: Option<f64>,
    pub macro_: Option<f64>,
    /// Every class has the same number of videos.
    pub balanced: bool,
}

impl Averages {
    pub fn of(per_class: &BTreeMap<String, ClassTally>) -> Self {
        let correct: u64 = per_class.values().map(|t| t.correct).sum();
        let total: u64 = per_class.values().map(|t| t.total).sum();
        let accs: Vec<f64> = per_class.values().filter_map(ClassTally::accuracy).collect();
        let macro_ = (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64);
        let mut sizes = per_class.values().map(|t| t.total);
        let first = sizes.next();
        let balanced = first.is_some_and(|n| n > 0 && sizes.all(|m| m == n));
        Self {
            micro: accuracy(correct, total),
            macro_,
            balanced,
        }
    }

    /// Macro and micro agree, as they must on a class-balanced split.
    pub fn agree(&self) -> bool {
        match (self.micro, self.macro_) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-9 * a.abs().max(1.0),
            (None, None) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub id_acc: Option<f64>,
    pub ood_acc: Option<f64>,
}

/// Per-method summary: one row of a robustness table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub acc_id: f64,
    pub acc_ood: f64,
    pub acc_isolation: Option<f64>,
    pub pd: Option<f64>,
    pub h: f64,
    pub h_degenerate: bool,
    pub isolation: Option<IsolationDiagnostic>,
    pub per_class: BTreeMap<String, ClassBreakdown>,
    pub id_averages: Option<Averages>,
    pub ood_averages: Option<Averages>,
    pub config_echo: serde_json::Value,
}

impl EvalReport {
    pub fn from_accuracies(method: impl Into<String>, acc_id: f64, acc_ood: f64, acc_isolation: Option<f64>) -> Self {
        let (h, h_degenerate) = compute_h(acc_id, acc_ood);
        Self {
            method: method.into(),
            acc_id,
            acc_ood,
            acc_isolation,
            pd: compute_pd(acc_id, acc_ood),
            h,
            h_degenerate,
            isolation: acc_isolation.map(|iso| isolation_diagnostic(acc_id, iso, acc_ood)),
            per_class: BTreeMap::new(),
            id_averages: None,
            ood_averages: None,
            config_echo: serde_json::Value::Null,
        }
    }

    /// Combine the ID, OOD and optional isolation runs of one method.
    pub fn from_splits(id: &SplitEval, ood: &SplitEval, isolation: Option<&SplitEval>) -> Result<Self, ReportError> {
        let method = id.method.clone();
        let bad = |message: String| ReportError::Inconsistent {
            method: method.clone(),
            message,
        };
        if ood.method != method || isolation.is_some_and(|i| i.method != method) {
            return Err(bad("runs belong to different methods".into()));
        }
        let acc = |e: &SplitEval| e.accuracy().ok_or_else(|| bad(format!("{} run is empty", e.split)));
        let mut report = Self::from_accuracies(
            method.clone(),
            acc(id)?,
            acc(ood)?,
            isolation.map(acc).transpose()?,
        );
        for (class, t) in &id.per_class {
            report.per_class.entry(class.clone()).or_default().id_acc = t.accuracy();
        }
        for (class, t) in &ood.per_class {
            report.per_class.entry(class.clone()).or_default().ood_acc = t.accuracy();
        }
        for (run, slot) in [(id, &mut report.id_averages), (ood, &mut report.ood_averages)] {
            let avg = run.averages();
            if avg.balanced && !avg.agree() {
                return Err(bad(format!("{} macro and micro averages differ on a balanced split", run.split)));
            }
            *slot = Some(avg);
        }
        let mut echo = serde_json::Map::new();
        for run in [Some(id), Some(ood), isolation].into_iter().flatten() {
            echo.insert(run.split.to_string(), run.config.clone());
        }
        report.config_echo = serde_json::Value::Object(echo);
        Ok(report)
    }
}

/// Group split runs by method and build one report per method. Methods
/// without both an ID and an OOD run are returned by name.
pub fn assemble_reports(runs: &[SplitEval]) -> Result<(Vec<EvalReport>, Vec<String>), ReportError> {
    let mut by_method: BTreeMap<&str, BTreeMap<Split, &SplitEval>> = BTreeMap::new();
    for r in runs {
        if by_method.entry(&r.method).or_default().insert(r.split, r).is_some() {
            return Err(ReportError::Inconsistent {
                method: r.method.clone(),
                message: format!("duplicate {} run", r.split),
            });
        }
    }
    let mut reports = Vec::new();
    let mut incomplete = Vec::new();
    for (method, splits) in by_method {
        match (splits.get(&Split::IdTest), splits.get(&Split::OodTest)) {
            (Some(id), Some(ood)) => {
                reports.push(EvalReport::from_splits(id, ood, splits.get(&Split::Isolation).copied())?)
            }
            _ => incomplete.push(method.to_string()),
        }
    }
    Ok((reports, incomplete))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub acc_id: String,
    pub acc_ood: String,
    pub acc_isolation: String,
    pub pd: String,
    pub h: String,
}

impl From<&EvalReport> for TableRow {
    fn from(r: &EvalReport) -> Self {
        let opt = |x: Option<f64>| x.map(format2).unwrap_or_default();
        Self {
            method: r.method.clone(),
            acc_id: format2(r.acc_id),
            acc_ood: format2(r.acc_ood),
            acc_isolation: opt(r.acc_isolation),
            pd: r.pd.map(format2).unwrap_or_else(|| "undefined".into()),
            h: format2(r.h),
        }
    }
}

pub fn table_csv(reports: &[EvalReport]) -> Result<String, ReportError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in reports {
        w.serialize(TableRow::from(r))?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Aligned plain-text table followed by one line per diagnostic.
pub fn render_text(reports: &[EvalReport]) -> String {
    let header = TableRow {
        method: "method".into(),
        acc_id: "ID".into(),
        acc_ood: "OOD".into(),
        acc_isolation: "Iso".into(),
        pd: "PD".into(),
        h: "H".into(),
    };
    let rows: Vec<TableRow> = std::iter::once(header).chain(reports.iter().map(TableRow::from)).collect();
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in &rows {
        let iso = if r.acc_isolation.is_empty() { "-" } else { &r.acc_isolation };
        let line = format!(
            "{:<width$}  {:>7}  {:>7}  {:>7}  {:>9}  {:>7}",
            r.method, r.acc_id, r.acc_ood, iso, r.pd, r.h
        );
        out.push_str(line.trim_end());
        out.push('\n');
    }

    let mut notes = Vec::new();
    for r in reports {
        if r.h_degenerate {
            notes.push(format!("{}: H is degenerate (both accuracies are zero)", r.method));
        }
        if let Some(d) = r.isolation.filter(|d| !d.monotone) {
            notes.push(format!(
                "{}: isolation band is not monotone (ID-Iso {}, Iso-OOD {})",
                r.method,
                format2(d.id_minus_isolation),
                format2(d.isolation_minus_ood)
            ));
        }
        for (split, avg) in [("id_test", r.id_averages), ("ood_test", r.ood_averages)] {
            if let Some(a) = avg.filter(|a| !a.balanced) {
                let show = |x: Option<f64>| x.map(format2).unwrap_or_else(|| "-".into());
                notes.push(format!(
                    "{}: {split} is not class-balanced (micro {}, macro {})",
                    r.method,
                    show(a.micro),
                    show(a.macro_)
                ));
            }
        }
    }
    if !notes.is_empty() {
        out.push('\n');
        for n in notes {
            out.push_str(&n);
            out.push('\n');
        }
    }
    out
}

pub fn read_table_csv(text: &str) -> Result<Vec<TableRow>, ReportError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}

fn write_file(path: &Path, text: &str) -> Result<(), ReportError> {
    fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Path of the table written next to a report.
pub fn table_path(report_path: &Path) -> PathBuf {
    report_path.with_extension("csv")
}

/// Writes the full reports as JSON to `path` and the summary table to
/// [`table_path`].
pub fn emit_report(reports: &[EvalReport], path: &Path) -> Result<(), ReportError> {
    let mut json = serde_json::to_string_pretty(reports).map_err(|source| ReportError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    json.push('\n');
    write_file(path, &json)?;
    write_file(&table_path(path), &table_csv(reports)?)
}

pub fn read_report(path: &Path) -> Result<Vec<EvalReport>, ReportError> {
    let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ReportError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_split_eval(eval: &SplitEval, path: &Path) -> Result<(), ReportError> {
    let mut json = serde_json::to_string_pretty(eval).map_err(|source| ReportError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    json.push('\n');
    write_file(path, &json)
}

pub fn read_split_eval(path: &Path) -> Result<SplitEval, ReportError> {
    let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ReportError::Json {
        path: path.to_path_buf(),
        source,
    })
}
