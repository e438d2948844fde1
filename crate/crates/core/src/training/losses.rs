//! Class weights, weighted cross-entropy and focal loss on single examples.
//! The batched tensor versions in `training::batch` reduce to these.

use serde::{Deserialize, Serialize};

use super::TrainingError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    WeightedCrossEntropy,
    Focal,
}

/// `w_c = N / (K · n_c)` with `K = 2`.
pub fn class_weights(counts: [usize; 2]) -> Result<[f64; 2], TrainingError> {
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(TrainingError::EmptyClass(class));
    }
    let total = (counts[0] + counts[1]) as f64;
    Ok([
        total / (2.0 * counts[0] as f64),
        total / (2.0 * counts[1] as f64),
    ])
}

/// `log softmax(logits)[label]`, stable for large logits.
pub fn log_softmax_at(logits: [f64; 2], label: usize) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    logits[label] - lse
}

/// `softmax(logits)[1]`.
pub fn positive_probability(logits: [f64; 2]) -> f64 {
    log_softmax_at(logits, 1).exp()
}

/// `−w[label] · log p_label`.
pub fn weighted_cross_entropy(logits: [f64; 2], label: usize, weights: [f64; 2]) -> f64 {
    -weights[label] * log_softmax_at(logits, label)
}

/// `−w[label] · (1 − p_label)^γ · log p_label`.
pub fn focal_loss(logits: [f64; 2], label: usize, weights: [f64; 2], gamma: f64) -> f64 {
    let log_p = log_softmax_at(logits, label);
    let factor = if gamma == 0.0 {
        1.0
    } else {
        (-log_p.exp_m1()).powf(gamma)
    };
    -weights[label] * factor * log_p
}

pub fn loss(kind: LossKind, logits: [f64; 2], label: usize, weights: [f64; 2], gamma: f64) -> f64 {
    match kind {
        LossKind::WeightedCrossEntropy => weighted_cross_entropy(logits, label, weights),
        LossKind::Focal => focal_loss(logits, label, weights, gamma),
    }
}

/// Batch reduction: `Σ w_{y_i} ℓ_i / Σ w_{y_i}`, where `ℓ_i` is the
/// unweighted per-example loss.
pub fn batch_loss(
    kind: LossKind,
    logits: &[[f64; 2]],
    labels: &[usize],
    weights: [f64; 2],
    gamma: f64,
) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (l, &y) in logits.iter().zip(labels) {
        num += loss(kind, *l, y, weights, gamma);
        den += weights[y];
    }
    num / den
}
