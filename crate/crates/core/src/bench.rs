//! Yes/no relational QA benchmarking.
//!
//! Datasets are normalized JSONL (`{"id", "image_ref", "question", "gold",
//! "category"?}`). "Yes" is the positive class. Answers without a yes/no
//! decision count as wrong for accuracy and as "not yes" for precision and
//! recall. Samples whose backend call fails are excluded from the metrics
//! and tallied separately.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Backend;
use crate::chain::{run_chain, run_vanilla, ChainConfig, ChainError, Label};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("failed to read dataset {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("duplicate sample id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gold {
    Yes,
    No,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Spatial,
    Action,
    Comparative,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchSample {
    pub id: String,
    pub image_ref: String,
    pub question: String,
    pub gold: Gold,
    #[serde(default)]
    pub category: Category,
}

/// Parses JSONL text; blank lines are skipped, line numbers are 1-based.
pub fn parse_dataset(text: &str) -> Result<Vec<BenchSample>, BenchError> {
    let mut seen = BTreeSet::new();
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample: BenchSample = serde_json::from_str(line).map_err(|e| BenchError::Record {
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(sample.id.clone()) {
            return Err(BenchError::DuplicateId {
                id: sample.id,
                line: line_no,
            });
        }
        samples.push(sample);
    }
    Ok(samples)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<BenchSample>, BenchError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text)
}

/// Confusion counts with "yes" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub unparseable: usize,
    /// Unparseable predictions whose gold label is yes; they are misses
    /// for recall.
    pub unparseable_positive: usize,
}

impl Counts {
    pub fn record(&mut self, gold: Gold, predicted: Label) {
        match (gold, predicted) {
            (Gold::Yes, Label::Yes) => self.tp += 1,
            (Gold::No, Label::Yes) => self.fp += 1,
            (Gold::Yes, Label::No) => self.fn_ += 1,
            (Gold::No, Label::No) => self.tn += 1,
            (gold, Label::Unparseable) => {
                self.unparseable += 1;
                if gold == Gold::Yes {
                    self.unparseable_positive += 1;
                }
            }
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn + self.unparseable
    }

    fn merge(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
        self.unparseable += other.unparseable;
        self.unparseable_positive += other.unparseable_positive;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Metrics whose denominator was zero (reported as 0).
    pub undefined: Vec<String>,
}

fn ratio(num: usize, den: usize, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(c: &Counts) -> Metrics {
    let mut undefined = Vec::new();
    let accuracy = ratio(c.tp + c.tn, c.total(), "accuracy", &mut undefined);
    let precision = ratio(c.tp, c.tp + c.fp, "precision", &mut undefined);
    let recall = ratio(
        c.tp,
        c.tp + c.fn_ + c.unparseable_positive,
        "recall",
        &mut undefined,
    );
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        undefined.push("f1".into());
        0.0
    };
    Metrics {
        accuracy,
        precision,
        recall,
        f1,
        undefined,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunnerKind {
    Vanilla,
    Chain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub counts: Counts,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub id: String,
    pub category: Category,
    pub gold: Gold,
    pub label: Option<Label>,
    pub answer: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub runner: RunnerKind,
    pub samples: usize,
    pub counts: Counts,
    pub metrics: Metrics,
    pub per_category: BTreeMap<Category, CategoryReport>,
    pub errored: usize,
    /// False when any sample errored.
    pub comparable: bool,
    pub config: Option<ChainConfig>,
    pub outcomes: Vec<SampleOutcome>,
}

fn run_sample<B: Backend + ?Sized>(
    runner: RunnerKind,
    backend: &B,
    sample: &BenchSample,
    config: &ChainConfig,
) -> SampleOutcome {
    let result: Result<(String, Label), String> = match runner {
        RunnerKind::Vanilla => run_vanilla(backend, &sample.image_ref, &sample.question)
            .map(|v| (v.answer, v.label))
            .map_err(|e| e.to_string()),
        RunnerKind::Chain => {
            match run_chain(backend, &sample.image_ref, &sample.question, config) {
                Ok(t) => Ok((t.final_answer, t.final_label)),
                // A question the grammar cannot decompose still has an answer,
                // just not a decision; a backend failure does not.
                Err(ChainError::Parse(e)) => {
                    Ok((format!("<unparseable question: {e}>"), Label::Unparseable))
                }
                Err(e) => Err(e.to_string()),
            }
        }
    };
    let (answer, label, error) = match result {
        Ok((a, l)) => (Some(a), Some(l), None),
        Err(e) => (None, None, Some(e)),
    };
    SampleOutcome {
        id: sample.id.clone(),
        category: sample.category,
        gold: sample.gold,
        label,
        answer,
        error,
    }
}

/// Evaluates a runner over a dataset with `jobs` worker threads.
///
/// Outcomes are ordered by sample id, so the report does not depend on
/// dataset order or scheduling.
pub fn evaluate<B: Backend + ?Sized>(
    runner: RunnerKind,
    backend: &B,
    dataset: &[BenchSample],
    config: &ChainConfig,
    jobs: usize,
) -> Result<BenchReport, BenchError> {
    if dataset.is_empty() {
        return Err(BenchError::Precondition("dataset is empty".into()));
    }
    let mut order: Vec<&BenchSample> = dataset.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));

    let outcomes: Vec<SampleOutcome> = if jobs <= 1 {
        order
            .iter()
            .map(|s| run_sample(runner, backend, s, config))
            .collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<SampleOutcome>>> = Mutex::new(vec![None; order.len()]);
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(order.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(sample) = order.get(i) else { break };
                    let outcome = run_sample(runner, backend, sample, config);
                    slots.lock().expect("worker panicked")[i] = Some(outcome);
                });
            }
        });
        slots
            .into_inner()
            .expect("worker panicked")
            .into_iter()
            .map(|o| o.expect("every sample evaluated"))
            .collect()
    };

    let mut counts = Counts::default();
    let mut per_category: BTreeMap<Category, Counts> = BTreeMap::new();
    let mut errored = 0;
    for o in &outcomes {
        match o.label {
            Some(label) => {
                counts.record(o.gold, label);
                per_category
                    .entry(o.category)
                    .or_default()
                    .record(o.gold, label);
            }
            None => errored += 1,
        }
    }
    debug_assert_eq!(
        {
            let mut sum = Counts::default();
            per_category.values().for_each(|c| sum.merge(c));
            sum
        },
        counts
    );

    Ok(BenchReport {
        runner,
        samples: dataset.len(),
        metrics: compute_metrics(&counts),
        counts,
        per_category: per_category
            .into_iter()
            .map(|(cat, c)| {
                (
                    cat,
                    CategoryReport {
                        metrics: compute_metrics(&c),
                        counts: c,
                    },
                )
            })
            .collect(),
        errored,
        comparable: errored == 0,
        config: (runner == RunnerKind::Chain).then(|| config.clone()),
        outcomes,
    })
}

/// Plain-text summary table.
pub fn render_table(report: &BenchReport) -> String {
    let mut out = String::new();
    let runner = match report.runner {
        RunnerKind::Vanilla => "vanilla",
        RunnerKind::Chain => "chain",
    };
    let _ = writeln!(
        out,
        "runner: {runner}  samples: {}  errored: {}{}",
        report.samples,
        report.errored,
        if report.comparable {
            ""
        } else {
            "  (NOT COMPARABLE)"
        }
    );
    let _ = writeln!(
        out,
        "{:<12} {:>5} {:>4} {:>4} {:>4} {:>4} {:>5} {:>8} {:>9} {:>8} {:>8}",
        "category", "n", "tp", "fp", "fn", "tn", "unp", "acc", "prec", "recall", "f1"
    );
    let mut row = |name: &str, c: &Counts, m: &Metrics| {
        let _ = writeln!(
            out,
            "{:<12} {:>5} {:>4} {:>4} {:>4} {:>4} {:>5} {:>8.4} {:>9.4} {:>8.4} {:>8.4}",
            name,
            c.total(),
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            c.unparseable,
            m.accuracy,
            m.precision,
            m.recall,
            m.f1
        );
    };
    for (cat, r) in &report.per_category {
        let name = serde_json::to_value(cat)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        row(&name, &r.counts, &r.metrics);
    }
    row("all", &report.counts, &report.metrics);
    out
}

/// One cell of a (λ, k_max) sweep. Metrics are absent if the cell failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub k_max: usize,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub errored: usize,
}

pub const DEFAULT_SWEEP_LAMBDAS: [f64; 3] = [3.0, 5.0, 7.0];
pub const DEFAULT_SWEEP_K_MAXES: [usize; 4] = [10, 20, 70, 120];

/// Runs the chain once per (λ, k_max) cell, λ-major.
pub fn sweep<B: Backend + ?Sized>(
    lambdas: &[f64],
    k_maxes: &[usize],
    backend: &B,
    dataset: &[BenchSample],
    base_config: &ChainConfig,
    jobs: usize,
) -> Result<Vec<SweepRow>, BenchError> {
    if lambdas.is_empty() {
        return Err(BenchError::Precondition("lambda axis is empty".into()));
    }
    if k_maxes.is_empty() {
        return Err(BenchError::Precondition("k_max axis is empty".into()));
    }
    let mut rows = Vec::with_capacity(lambdas.len() * k_maxes.len());
    for &lambda in lambdas {
        for &k_max in k_maxes {
            let config = ChainConfig {
                lambda,
                k_max,
                ..base_config.clone()
            };
            let row = match config
                .validate()
                .map_err(|e| BenchError::Precondition(e.to_string()))
                .and_then(|_| evaluate(RunnerKind::Chain, backend, dataset, &config, jobs))
            {
                Ok(r) => SweepRow {
                    lambda,
                    k_max,
                    accuracy: Some(r.metrics.accuracy),
                    precision: Some(r.metrics.precision),
                    f1: Some(r.metrics.f1),
                    errored: r.errored,
                },
                Err(e) => {
                    log::error!("sweep cell lambda={lambda} k_max={k_max} failed: {e}");
                    SweepRow {
                        lambda,
                        k_max,
                        accuracy: None,
                        precision: None,
                        f1: None,
                        errored: dataset.len(),
                    }
                }
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Writes `lambda,k_max,accuracy,precision,f1,errored`.
pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], writer: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
