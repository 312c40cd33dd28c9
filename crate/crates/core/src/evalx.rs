//! Execution-accuracy evaluation: run predicted and gold SQL against the
//! databases, compare result sets, and aggregate by difficulty.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use rusqlite::types::ValueRef;
use serde::{Deserialize, Serialize};

use crate::corpus::{ident_key, open_read_only, Difficulty, Example};
use crate::error::{Error, Result};
use crate::linkex::SchemaLink;
use crate::postproc::{Extraction, Prediction};

pub const DEFAULT_QUERY_TIMEOUT: Duration = Duration::from_secs(30);

/// A result cell after normalization: integral reals become integers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scalar {
    Null,
    Int(i64),
    /// Bit pattern of a non-integral finite or infinite float.
    Real(u64),
    Text(Vec<u8>),
    Blob(Vec<u8>),
}

impl Scalar {
    pub fn from_f64(x: f64) -> Self {
        if x.fract() == 0.0 && x >= i64::MIN as f64 && x < i64::MAX as f64 {
            Scalar::Int(x as i64)
        } else {
            Scalar::Real(x.to_bits())
        }
    }

    fn from_value(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Scalar::Null,
            ValueRef::Integer(i) => Scalar::Int(i),
            ValueRef::Real(x) => Scalar::from_f64(x),
            ValueRef::Text(t) => Scalar::Text(t.to_vec()),
            ValueRef::Blob(b) => Scalar::Blob(b.to_vec()),
        }
    }
}

pub type Row = Vec<Scalar>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecError {
    /// Not a single read-only SELECT/WITH statement.
    Rejected(String),
    Sql(String),
    Timeout,
    Open(String),
}

impl std::fmt::Display for ExecError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExecError::Rejected(m) => write!(f, "rejected: {m}"),
            ExecError::Sql(m) => write!(f, "sql error: {m}"),
            ExecError::Timeout => f.write_str("timed out"),
            ExecError::Open(m) => write!(f, "cannot open database: {m}"),
        }
    }
}

fn starts_with_query_keyword(sql: &str) -> bool {
    let mut s = sql.trim_start();
    while let Some(rest) = s.strip_prefix('(') {
        s = rest.trim_start();
    }
    let word: String = s.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
    word.eq_ignore_ascii_case("select") || word.eq_ignore_ascii_case("with")
}

/// Runs one read-only query with a hard timeout and returns normalized rows.
pub fn execute_query(db_file: &Path, sql: &str, timeout: Duration) -> Result<Vec<Row>, ExecError> {
    if !starts_with_query_keyword(sql) {
        return Err(ExecError::Rejected("only SELECT or WITH statements are executed".into()));
    }
    let conn = open_read_only(db_file).map_err(|e| ExecError::Open(e.to_string()))?;
    let deadline = Instant::now() + timeout;
    conn.progress_handler(1000, Some(move || Instant::now() >= deadline))
        .map_err(|e| ExecError::Sql(e.to_string()))?;
    let interrupted = |e: rusqlite::Error| {
        if Instant::now() >= deadline
            || matches!(&e, rusqlite::Error::SqliteFailure(f, _) if f.code == rusqlite::ErrorCode::OperationInterrupted)
        {
            ExecError::Timeout
        } else {
            ExecError::Sql(e.to_string())
        }
    };
    let mut stmt = conn.prepare(sql).map_err(interrupted)?;
    if !stmt.readonly() {
        return Err(ExecError::Rejected("statement would modify the database".into()));
    }
    let n = stmt.column_count();
    let mut rows = stmt.query([]).map_err(interrupted)?;
    let mut out = Vec::new();
    while let Some(row) = rows.next().map_err(interrupted)? {
        out.push((0..n).map(|i| Scalar::from_value(row.get_ref(i).expect("index in range"))).collect());
    }
    Ok(out)
}

/// Set equality of rows: order and duplicates ignored, cell order kept.
pub fn compare_results(pred: &[Row], gold: &[Row]) -> bool {
    let p: HashSet<&Row> = pred.iter().collect();
    let g: HashSet<&Row> = gold.iter().collect();
    p == g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Correct,
    Incorrect,
    PredError,
    GoldError,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub question_id: i64,
    pub db_id: String,
    pub difficulty: Difficulty,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_rows: Option<usize>,
    /// Sets matched although row counts differ.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub duplicate_laxity: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    /// Kept out of the JSON report so reruns are byte-identical.
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    /// Examples scored (gold errors excluded).
    pub count: usize,
    pub correct: usize,
    /// Percentage in [0, 100].
    pub accuracy: f64,
}

impl Stratum {
    fn new(count: usize, correct: usize) -> Self {
        let accuracy = if count == 0 { 0.0 } else { 100.0 * correct as f64 / count as f64 };
        Stratum { count, correct, accuracy }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub by_difficulty: BTreeMap<Difficulty, Stratum>,
    pub total: Stratum,
    pub gold_errors: usize,
    pub outcomes: Vec<ExecutionOutcome>,
}

impl EvalReport {
    /// Aggregates outcomes; order of the input does not matter.
    pub fn from_outcomes(mut outcomes: Vec<ExecutionOutcome>) -> Self {
        outcomes.sort_by_key(|o| o.question_id);
        let mut counts: BTreeMap<Difficulty, (usize, usize)> = Difficulty::ALL.iter().map(|d| (*d, (0, 0))).collect();
        let mut gold_errors = 0;
        for o in &outcomes {
            if o.status == Status::GoldError {
                gold_errors += 1;
                continue;
            }
            let e = counts.entry(o.difficulty).or_default();
            e.0 += 1;
            if o.status == Status::Correct {
                e.1 += 1;
            }
        }
        let (n, c) = counts.values().fold((0, 0), |(n, c), (dn, dc)| (n + dn, c + dc));
        EvalReport {
            by_difficulty: counts.into_iter().map(|(d, (n, c))| (d, Stratum::new(n, c))).collect(),
            total: Stratum::new(n, c),
            gold_errors,
            outcomes,
        }
    }

    pub fn stratum(&self, d: Difficulty) -> Stratum {
        self.by_difficulty.get(&d).copied().unwrap_or_default()
    }

    /// JSON form; deterministic for identical outcomes.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub const REPORT_HEADER: &str = "Model & Simple & Moderate & Challenging & Total \\\\";

/// One table row: `label & 20.76\% & ... \\`.
pub fn render_row(label: &str, report: &EvalReport) -> String {
    let cells: Vec<String> = Difficulty::ALL
        .iter()
        .map(|d| report.stratum(*d).accuracy)
        .chain(std::iter::once(report.total.accuracy))
        .map(|a| format!("{a:.2}\\%"))
        .collect();
    format!("{label} & {} \\\\", cells.join(" & "))
}

/// Results table with one row per labelled report, plus a count line.
pub fn render_table(rows: &[(String, EvalReport)]) -> String {
    let mut out = vec![REPORT_HEADER.to_string()];
    for (label, report) in rows {
        out.push(render_row(label, report));
    }
    if let Some((_, first)) = rows.first() {
        let counts: Vec<String> = Difficulty::ALL
            .iter()
            .map(|d| first.stratum(*d).count.to_string())
            .chain(std::iter::once(first.total.count.to_string()))
            .collect();
        out.push(format!("Count & {} \\\\", counts.join(" & ")));
    }
    out.join("\n")
}

/// Evaluates one example. Gold runs first; a failing gold query excludes
/// the example from scoring.
pub fn evaluate_one(example: &Example, prediction: Option<&Prediction>, db_file: &Path, timeout: Duration) -> ExecutionOutcome {
    let start = Instant::now();
    let mut outcome = ExecutionOutcome {
        question_id: example.question_id,
        db_id: example.db_id.clone(),
        difficulty: example.difficulty,
        status: Status::Incorrect,
        pred_rows: None,
        gold_rows: None,
        duplicate_laxity: false,
        detail: None,
        wall_time: Duration::ZERO,
    };
    let finish = |mut o: ExecutionOutcome| {
        o.wall_time = start.elapsed();
        o
    };
    let gold = match execute_query(db_file, &example.gold_sql, timeout) {
        Ok(rows) => rows,
        Err(e) => {
            outcome.status = Status::GoldError;
            outcome.detail = Some(format!("gold {e}"));
            return finish(outcome);
        }
    };
    outcome.gold_rows = Some(gold.len());
    let sql = match prediction {
        None => {
            outcome.status = Status::PredError;
            outcome.detail = Some("no prediction".into());
            return finish(outcome);
        }
        Some(p) if p.extraction == Extraction::Failed || p.sql.trim().is_empty() => {
            outcome.status = Status::PredError;
            outcome.detail = Some(p.error.clone().unwrap_or_else(|| "no SQL could be extracted".into()));
            return finish(outcome);
        }
        Some(p) => &p.sql,
    };
    match execute_query(db_file, sql, timeout) {
        Ok(rows) => {
            outcome.pred_rows = Some(rows.len());
            if compare_results(&rows, &gold) {
                outcome.status = Status::Correct;
                outcome.duplicate_laxity = rows.len() != gold.len();
            }
        }
        Err(ExecError::Timeout) => {
            outcome.status = Status::Timeout;
            outcome.detail = Some("prediction timed out".into());
        }
        Err(e) => {
            outcome.status = Status::PredError;
            outcome.detail = Some(e.to_string());
        }
    }
    finish(outcome)
}

/// Scores every example. Missing predictions count as errors; missing
/// database files abort the run.
pub fn evaluate(
    examples: &[Example],
    predictions: &[Prediction],
    db_path: &(dyn Fn(&str) -> PathBuf + Sync),
    timeout: Duration,
    parallelism: usize,
) -> Result<EvalReport> {
    if parallelism == 0 {
        return Err(Error::Config("parallelism must be at least 1".into()));
    }
    let mut missing: Vec<&str> = examples
        .iter()
        .map(|e| e.db_id.as_str())
        .filter(|id| !db_path(id).is_file())
        .collect();
    missing.sort_unstable();
    missing.dedup();
    if !missing.is_empty() {
        return Err(Error::Validation(format!("missing database files for: {}", missing.join(", "))));
    }
    let by_id: HashMap<i64, &Prediction> = predictions.iter().map(|p| (p.question_id, p)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let outcomes: Vec<ExecutionOutcome> = pool.install(|| {
        examples
            .par_iter()
            .map(|ex| evaluate_one(ex, by_id.get(&ex.question_id).copied(), &db_path(&ex.db_id), timeout))
            .collect()
    });
    Ok(EvalReport::from_outcomes(outcomes))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 { if fn_ == 0 { 1.0 } else { 0.0 } } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Prf { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleLinkMetrics {
    pub question_id: i64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub scores: Prf,
    pub table_recall: f64,
    pub missing_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    pub table_recall: f64,
    pub per_example: Vec<ExampleLinkMetrics>,
}

fn pair_keys(link: &SchemaLink) -> HashSet<(String, String)> {
    link.columns().map(|(t, c)| (ident_key(t), ident_key(c))).collect()
}

/// Column-pair precision/recall/F1 and table recall against gold links.
/// Gold ids define the key space; a missing prediction is an empty link.
pub fn link_metrics(pred: &BTreeMap<i64, SchemaLink>, gold: &BTreeMap<i64, SchemaLink>) -> LinkMetrics {
    let empty = SchemaLink::new();
    let mut per_example = Vec::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for (qid, g) in gold {
        let p = pred.get(qid).unwrap_or(&empty);
        let (gp, pp) = (pair_keys(g), pair_keys(p));
        let tp = gp.intersection(&pp).count();
        let fp = pp.len() - tp;
        let fn_ = gp.len() - tp;
        let gold_tables: HashSet<String> = g.table_names().map(ident_key).collect();
        let hit = gold_tables.iter().filter(|t| p.contains_table(t)).count();
        let table_recall = if gold_tables.is_empty() { 1.0 } else { hit as f64 / gold_tables.len() as f64 };
        let mut missing: Vec<String> = g
            .columns()
            .filter(|(t, c)| !p.contains_column(t, c))
            .map(|(t, c)| format!("{t}.{c}"))
            .collect();
        missing.sort();
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        per_example.push(ExampleLinkMetrics {
            question_id: *qid,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            scores: Prf::from_counts(tp, fp, fn_),
            table_recall,
            missing_columns: missing,
        });
    }
    let n = per_example.len().max(1) as f64;
    let mean = |f: &dyn Fn(&ExampleLinkMetrics) -> f64| per_example.iter().map(f).sum::<f64>() / n;
    let macro_avg = Prf {
        precision: mean(&|e| e.scores.precision),
        recall: mean(&|e| e.scores.recall),
        f1: mean(&|e| e.scores.f1),
    };
    let table_recall = mean(&|e| e.table_recall);
    LinkMetrics { micro: Prf::from_counts(tp_all, fp_all, fn_all), macro_avg, table_recall, per_example }
}
