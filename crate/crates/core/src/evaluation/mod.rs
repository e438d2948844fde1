//! Metrics, seed aggregation, significance testing and error analysis.

mod errors;
mod metrics;
mod stats;

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Instance, Label, Language, SplitName};

pub use errors::{decide, error_report, Classifier, ErrorCase, ErrorReport, Redaction};
pub use metrics::{compute_metrics, BinaryClass, ClassMetrics, ConfusionMatrix, MetricRecord};
pub use stats::{aggregate_seeds, significance_test, AggregateMetrics, MeanStd};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no predictions to evaluate")]
    Empty,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("non-finite score in sample")]
    NonFinite,
    #[error("statistics error: {0}")]
    Statistics(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record in {path}: {message}")]
    Malformed { path: String, message: String },
}

/// Per-instance model output, persisted for every seed and evaluated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance_id: String,
    pub gold: Label,
    pub predicted: Label,
    pub reclamatory_probability: f64,
}

impl PredictionRecord {
    pub fn new(instance_id: impl Into<String>, gold: Label, reclamatory_probability: f64) -> Self {
        Self {
            instance_id: instance_id.into(),
            gold,
            predicted: decide(reclamatory_probability),
            reclamatory_probability,
        }
    }
}

pub fn write_predictions(
    path: impl AsRef<Path>,
    records: &[PredictionRecord],
) -> Result<(), EvalError> {
    let path = path.as_ref();
    let io_err = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for r in records {
        let line = serde_json::to_string(r).expect("prediction serialises");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>, EvalError> {
    let path = path.as_ref();
    let io_err = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| EvalError::Malformed {
                path: path.display().to_string(),
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Stored predictions used as a classifier, for error analysis after the fact.
pub struct PredictionTable(HashMap<String, f64>);

impl PredictionTable {
    pub fn new(records: &[PredictionRecord]) -> Self {
        Self(
            records
                .iter()
                .map(|r| (r.instance_id.clone(), r.reclamatory_probability))
                .collect(),
        )
    }

    pub fn covers(&self, instance: &Instance) -> bool {
        self.0.contains_key(&instance.id)
    }
}

impl Classifier for PredictionTable {
    fn reclamatory_probability(&self, instance: &Instance) -> f64 {
        self.0.get(&instance.id).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub metrics: MetricRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub language: Language,
    pub split: SplitName,
    pub per_seed: Vec<SeedMetrics>,
    pub aggregate: AggregateMetrics,
    /// Welch p-value of macro F1 against [`EvalReport::compared_to`].
    pub p_value: Option<f64>,
    pub compared_to: Option<String>,
}

impl EvalReport {
    pub fn from_predictions(
        model: impl Into<String>,
        language: Language,
        split: SplitName,
        per_seed: &[(u64, Vec<PredictionRecord>)],
    ) -> Result<Self, EvalError> {
        let per_seed = per_seed
            .iter()
            .map(|(seed, records)| {
                let pairs: Vec<(Label, Label)> =
                    records.iter().map(|r| (r.gold, r.predicted)).collect();
                Ok(SeedMetrics {
                    seed: *seed,
                    metrics: compute_metrics(&pairs)?,
                })
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        let records: Vec<MetricRecord> = per_seed.iter().map(|s| s.metrics.clone()).collect();
        Ok(Self {
            model: model.into(),
            language,
            split,
            aggregate: aggregate_seeds(&records)?,
            per_seed,
            p_value: None,
            compared_to: None,
        })
    }

    pub fn macro_f1s(&self) -> Vec<f64> {
        self.per_seed.iter().map(|s| s.metrics.macro_f1).collect()
    }

    /// Attaches the p-value of this report's macro F1 against `baseline`.
    pub fn compare_with(&mut self, baseline: &EvalReport) -> Result<f64, EvalError> {
        if baseline.per_seed.len() != self.per_seed.len() {
            log::warn!(
                "seed count mismatch: {} has {}, {} has {}",
                self.model,
                self.per_seed.len(),
                baseline.model,
                baseline.per_seed.len()
            );
        }
        let p = significance_test(&baseline.macro_f1s(), &self.macro_f1s())?;
        self.p_value = Some(p);
        self.compared_to = Some(baseline.model.clone());
        Ok(p)
    }

    /// Largest discrepancy between stored and recomputed values: per-seed
    /// metrics from confusion matrices and the aggregate from per-seed values.
    pub fn max_recompute_error(&self) -> f64 {
        let per_seed = self
            .per_seed
            .iter()
            .map(|s| s.metrics.max_recompute_error())
            .fold(0.0, f64::max);
        let records: Vec<MetricRecord> = self.per_seed.iter().map(|s| s.metrics.clone()).collect();
        let aggregate = match aggregate_seeds(&records) {
            Ok(a) => [
                (a.accuracy, self.aggregate.accuracy),
                (a.macro_precision, self.aggregate.macro_precision),
                (a.macro_recall, self.aggregate.macro_recall),
                (a.macro_f1, self.aggregate.macro_f1),
            ]
            .iter()
            .map(|(x, y)| {
                let std = match (x.std, y.std) {
                    (Some(a), Some(b)) => (a - b).abs(),
                    (None, None) => 0.0,
                    _ => f64::INFINITY,
                };
                (x.mean - y.mean).abs().max(std)
            })
            .fold(0.0, f64::max),
            Err(_) => f64::INFINITY,
        };
        per_seed.max(aggregate)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{} / {} / {}\n", self.model, self.language, self.split);
        out.push_str(&format!(
            "{:>8} {:>9} {:>9} {:>9} {:>9}\n",
            "seed", "accuracy", "precision", "recall", "macro-F1"
        ));
        for s in &self.per_seed {
            let m = &s.metrics;
            out.push_str(&format!(
                "{:>8} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
                s.seed, m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1
            ));
        }
        let a = &self.aggregate;
        if self.per_seed.len() > 1 {
            out.push_str(&format!(
                "{:>8} {} {} {} {}\n",
                "mean±sd", a.accuracy, a.macro_precision, a.macro_recall, a.macro_f1
            ));
        }
        if let (Some(p), Some(other)) = (self.p_value, &self.compared_to) {
            out.push_str(&format!("p-value vs {other} (Welch, macro-F1): {p:.4}\n"));
        }
        out
    }
}
