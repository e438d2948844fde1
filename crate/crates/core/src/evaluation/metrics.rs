use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::Label;
use crate::weak_labeler::Affiliation;

/// A two-class label that can index a confusion matrix.
pub trait BinaryClass: Copy {
    fn class_index(self) -> usize;
}

impl BinaryClass for Label {
    fn class_index(self) -> usize {
        self.index()
    }
}

impl BinaryClass for Affiliation {
    fn class_index(self) -> usize {
        self.index()
    }
}

impl BinaryClass for usize {
    fn class_index(self) -> usize {
        self
    }
}

/// Counts indexed `[gold][predicted]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[u64; 2]; 2]);

impl ConfusionMatrix {
    pub fn from_pairs<L: BinaryClass>(pairs: impl IntoIterator<Item = (L, L)>) -> Self {
        let mut counts = [[0u64; 2]; 2];
        for (gold, predicted) in pairs {
            counts[gold.class_index()][predicted.class_index()] += 1;
        }
        Self(counts)
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn gold_count(&self, class: usize) -> u64 {
        self.0[class].iter().sum()
    }

    pub fn predicted_count(&self, class: usize) -> u64 {
        self.0[0][class] + self.0[1][class]
    }

    pub fn correct(&self) -> u64 {
        self.0[0][0] + self.0[1][1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: [ClassMetrics; 2],
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(a/b + c/d) / 2` as one integer fraction, so the result is the correctly
/// rounded value of the exact average. A zero denominator contributes 0.
fn mean_ratio((a, b): (u64, u64), (c, d): (u64, u64)) -> f64 {
    let (a, b, c, d) = (a as u128, b as u128, c as u128, d as u128);
    let (num, den) = match (b, d) {
        (0, 0) => return 0.0,
        (0, _) => (c, 2 * d),
        (_, 0) => (a, 2 * b),
        _ => (a * d + c * b, 2 * b * d),
    };
    // reduced terms below 2^53 convert exactly, leaving a single rounding
    let g = gcd(num, den);
    (num / g) as f64 / (den / g) as f64
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

impl MetricRecord {
    /// Macro-averaged metrics from a confusion matrix. Undefined ratios
    /// (no predictions or no gold members for a class) count as 0.
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self, EvalError> {
        let total = confusion.total();
        if total == 0 {
            return Err(EvalError::Empty);
        }
        // (numerator, denominator) per class; F1 = 2TP / (2TP + FP + FN)
        let fractions = [0usize, 1].map(|c| {
            let tp = confusion.0[c][c];
            let predicted = confusion.predicted_count(c);
            let gold = confusion.gold_count(c);
            [(tp, predicted), (tp, gold), (2 * tp, predicted + gold)]
        });
        let per_class = [0usize, 1].map(|c| {
            let [(tp, predicted), (_, gold), (f_num, f_den)] = fractions[c];
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, gold);
            let f1 = ratio(f_num, f_den);
            ClassMetrics {
                precision,
                recall,
                f1,
                support: confusion.gold_count(c),
            }
        });
        for (c, m) in per_class.iter().enumerate() {
            if m.support == 0 {
                log::warn!(
                    "class {c} absent from gold labels; its F1 counts as 0 in the macro average"
                );
            }
        }
        Ok(Self {
            accuracy: confusion.correct() as f64 / total as f64,
            macro_precision: mean_ratio(fractions[0][0], fractions[1][0]),
            macro_recall: mean_ratio(fractions[0][1], fractions[1][1]),
            macro_f1: mean_ratio(fractions[0][2], fractions[1][2]),
            per_class,
            confusion,
        })
    }

    /// Checks the stored values against a recomputation from the confusion matrix.
    pub fn max_recompute_error(&self) -> f64 {
        let fresh = match Self::from_confusion(self.confusion) {
            Ok(m) => m,
            Err(_) => return f64::INFINITY,
        };
        [
            (self.accuracy, fresh.accuracy),
            (self.macro_precision, fresh.macro_precision),
            (self.macro_recall, fresh.macro_recall),
            (self.macro_f1, fresh.macro_f1),
        ]
        .iter()
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
    }
}

/// Accuracy and macro precision/recall/F1 over `(gold, predicted)` pairs.
pub fn compute_metrics<L: BinaryClass>(predictions: &[(L, L)]) -> Result<MetricRecord, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    MetricRecord::from_confusion(ConfusionMatrix::from_pairs(predictions.iter().copied()))
}
