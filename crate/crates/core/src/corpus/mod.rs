//! Corpus records, loading and deterministic stratified splitting.

mod io;
mod split;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_corpus, write_corpus};
pub use split::{stratified_split, CorpusSplit, SplitManifest, SplitName, SplitRatios};

/// Gold label for the reclamation task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    NonReclamatory = 0,
    Reclamatory = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::NonReclamatory, Label::Reclamatory];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        match index {
            0 => Some(Label::NonReclamatory),
            1 => Some(Label::Reclamatory),
            _ => None,
        }
    }

    /// Parses the tokens accepted in corpus files: `0`/`1` or the snake-case names.
    pub fn parse_token(token: &str) -> Option<Self> {
        match token.trim() {
            "0" | "non_reclamatory" => Some(Label::NonReclamatory),
            "1" | "reclamatory" => Some(Label::Reclamatory),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::NonReclamatory => "non_reclamatory",
            Label::Reclamatory => "reclamatory",
        }
    }
}

impl From<Label> for u8 {
    fn from(label: Label) -> u8 {
        label as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Label::from_index(value as usize).ok_or_else(|| format!("label out of range: {value}"))
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Language {
    #[serde(rename = "IT", alias = "it")]
    It,
    #[serde(rename = "ES", alias = "es")]
    Es,
}

impl Language {
    pub fn code(self) -> &'static str {
        match self {
            Language::It => "IT",
            Language::Es => "ES",
        }
    }
}

impl FromStr for Language {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "IT" => Ok(Language::It),
            "ES" => Ok(Language::Es),
            other => Err(CorpusError::UnknownLanguage(other.to_string())),
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// One corpus record. Text fields are NFC-normalised at load time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub tweet: String,
    #[serde(default)]
    pub bio: String,
    pub label: Label,
    pub language: Language,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        tweet: impl Into<String>,
        bio: impl Into<String>,
        label: Label,
        language: Language,
    ) -> Self {
        Self {
            id: id.into(),
            tweet: tweet.into(),
            bio: bio.into(),
            label,
            language,
        }
    }
}

/// A single validation failure, with its 1-based line number in the source file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordProblem {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for RecordProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus file not found: {0}")]
    MissingFile(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported corpus format for {0} (expected .jsonl, .csv or .tsv)")]
    UnsupportedFormat(String),
    #[error("{} invalid record(s): {}", .0.len(), format_problems(.0))]
    InvalidRecords(Vec<RecordProblem>),
    #[error("unknown language tag {0:?}")]
    UnknownLanguage(String),
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("class {label} has {count} instance(s); at least 3 are needed to stratify")]
    TooFewToStratify { label: Label, count: usize },
    #[error("split manifest references unknown instance id {0:?}")]
    UnknownId(String),
    #[error("split manifest does not cover instance id {0:?}")]
    UncoveredId(String),
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

fn format_problems(problems: &[RecordProblem]) -> String {
    const SHOWN: usize = 5;
    let mut out = problems
        .iter()
        .take(SHOWN)
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ");
    if problems.len() > SHOWN {
        out.push_str(&format!("; ... and {} more", problems.len() - SHOWN));
    }
    out
}

/// Per-class `(count, fraction)` for the classes present in a list.
pub type ClassDistribution = BTreeMap<Label, (usize, f64)>;

pub fn class_distribution(instances: &[Instance]) -> ClassDistribution {
    let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
    for instance in instances {
        *counts.entry(instance.label).or_default() += 1;
    }
    let total = instances.len() as f64;
    counts
        .into_iter()
        .map(|(label, count)| (label, (count, count as f64 / total)))
        .collect()
}

/// Counts indexed by [`Label::index`].
pub fn label_counts(instances: &[Instance]) -> [usize; 2] {
    let mut counts = [0usize; 2];
    for instance in instances {
        counts[instance.label.index()] += 1;
    }
    counts
}

/// Human-readable distribution table, one row per class.
pub fn format_distribution(distribution: &ClassDistribution) -> String {
    let mut out = String::new();
    for (label, (count, fraction)) in distribution {
        out.push_str(&format!(
            "{:<16} {:>6} ({:>6.2}%)\n",
            label.name(),
            count,
            fraction * 100.0
        ));
    }
    out
}
