use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Instance, Label};

/// Anything that scores an instance with the probability of the reclamatory class.
pub trait Classifier {
    fn reclamatory_probability(&self, instance: &Instance) -> f64;
}

impl<F: Fn(&Instance) -> f64> Classifier for F {
    fn reclamatory_probability(&self, instance: &Instance) -> f64 {
        self(instance)
    }
}

/// Decision rule shared by every scorer: reclamatory iff `p > 0.5`.
pub fn decide(reclamatory_probability: f64) -> Label {
    if reclamatory_probability > 0.5 {
        Label::Reclamatory
    } else {
        Label::NonReclamatory
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCase {
    pub instance_id: String,
    pub gold: Label,
    pub predicted: Label,
    /// Probability the model assigned to its (wrong) prediction.
    pub predicted_probability: f64,
    pub tweet: String,
    pub bio: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Most confident mistakes first.
    pub cases: Vec<ErrorCase>,
    /// Gold non-reclamatory predicted reclamatory.
    pub false_positives: usize,
    /// Gold reclamatory predicted non-reclamatory.
    pub false_negatives: usize,
    pub evaluated: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Redaction {
    #[default]
    None,
    /// Ids replaced by their SHA-256 and text fields dropped.
    HashIdsOnly,
}

pub fn error_report(
    model: &impl Classifier,
    split: &[Instance],
    redaction: Redaction,
) -> ErrorReport {
    let mut report = ErrorReport {
        evaluated: split.len(),
        ..Default::default()
    };
    for instance in split {
        let p = model.reclamatory_probability(instance);
        let predicted = decide(p);
        if predicted == instance.label {
            continue;
        }
        match predicted {
            Label::Reclamatory => report.false_positives += 1,
            Label::NonReclamatory => report.false_negatives += 1,
        }
        let predicted_probability = match predicted {
            Label::Reclamatory => p,
            Label::NonReclamatory => 1.0 - p,
        };
        let case = match redaction {
            Redaction::None => ErrorCase {
                instance_id: instance.id.clone(),
                gold: instance.label,
                predicted,
                predicted_probability,
                tweet: instance.tweet.clone(),
                bio: instance.bio.clone(),
            },
            Redaction::HashIdsOnly => ErrorCase {
                instance_id: hex::encode(Sha256::digest(instance.id.as_bytes())),
                gold: instance.label,
                predicted,
                predicted_probability,
                tweet: String::new(),
                bio: String::new(),
            },
        };
        report.cases.push(case);
    }
    report.cases.sort_by(|a, b| {
        b.predicted_probability
            .total_cmp(&a.predicted_probability)
            .then_with(|| a.instance_id.cmp(&b.instance_id))
    });
    report
}

impl ErrorReport {
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for case in &self.cases {
            serde_json::to_writer(&mut out, case)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn summary(&self) -> String {
        format!(
            "misclassified {} of {} (false positives {}, false negatives {})",
            self.cases.len(),
            self.evaluated,
            self.false_positives,
            self.false_negatives
        )
    }
}
