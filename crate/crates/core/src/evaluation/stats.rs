use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{EvalError, MetricRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); undefined for one seed.
    pub std: Option<f64>,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self, EvalError> {
        if values.is_empty() {
            return Err(EvalError::TooFewSamples { needed: 1, got: 0 });
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Ok(Self { mean, std })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.std {
            Some(std) => write!(f, "{:.3} ± {:.3}", self.mean, std),
            None => write!(f, "{:.3} (1 seed)", self.mean),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub accuracy: MeanStd,
    pub macro_precision: MeanStd,
    pub macro_recall: MeanStd,
    pub macro_f1: MeanStd,
}

pub fn aggregate_seeds(reports: &[MetricRecord]) -> Result<AggregateMetrics, EvalError> {
    let field =
        |f: fn(&MetricRecord) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateMetrics {
        accuracy: field(|r| r.accuracy)?,
        macro_precision: field(|r| r.macro_precision)?,
        macro_recall: field(|r| r.macro_recall)?,
        macro_f1: field(|r| r.macro_f1)?,
    })
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided p-value of Welch's unequal-variance t-test.
///
/// When both samples have zero variance the statistic is undefined: equal
/// means give `p = 1`, different means give `p = 0`.
pub fn significance_test(baseline: &[f64], candidate: &[f64]) -> Result<f64, EvalError> {
    for xs in [baseline, candidate] {
        if xs.len() < 2 {
            return Err(EvalError::TooFewSamples {
                needed: 2,
                got: xs.len(),
            });
        }
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(EvalError::NonFinite);
        }
    }
    let (m1, v1) = mean_var(baseline);
    let (m2, v2) = mean_var(candidate);
    let (n1, n2) = (baseline.len() as f64, candidate.len() as f64);
    let s1 = v1 / n1;
    let s2 = v2 / n2;
    let se2 = s1 + s2;
    if se2 == 0.0 {
        return Ok(if m1 == m2 { 1.0 } else { 0.0 });
    }
    let t = (m1 - m2) / se2.sqrt();
    let df = se2 * se2 / (s1 * s1 / (n1 - 1.0) + s2 * s2 / (n2 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| EvalError::Statistics(e.to_string()))?;
    // sf(|t|) avoids cancellation in 1 - cdf for large |t|
    let p = 2.0 * dist.sf(t.abs());
    Ok(p.clamp(0.0, 1.0))
}
