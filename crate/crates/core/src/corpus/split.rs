use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{class_distribution, ClassDistribution, CorpusError, Instance, Label, Language};

/// Train / validation / test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            validation: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self, CorpusError> {
        let ratios = Self {
            train,
            validation,
            test,
        };
        ratios.validate()?;
        Ok(ratios)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let parts = [self.train, self.validation, self.test];
        let finite_positive = parts.iter().all(|r| r.is_finite() && *r > 0.0);
        if !finite_positive || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CorpusError::BadRatios(parts));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<Instance>,
    pub validation: Vec<Instance>,
    pub test: Vec<Instance>,
    pub seed: u64,
    pub ratios: SplitRatios,
}

impl CorpusSplit {
    pub fn get(&self, name: SplitName) -> &[Instance] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn manifest(&self, language: Language) -> SplitManifest {
        let ids = |xs: &[Instance]| xs.iter().map(|i| i.id.clone()).collect();
        SplitManifest {
            language,
            seed: self.seed,
            ratios: self.ratios,
            train: ids(&self.train),
            validation: ids(&self.validation),
            test: ids(&self.test),
        }
    }
}

/// Count per class taken by a two-stage stratified draw: `(train, validation, test)`.
///
/// Classes with at least three members always get one member in every split.
fn class_allocation(count: usize, ratios: &SplitRatios) -> (usize, usize, usize) {
    let held_out_fraction = ratios.validation + ratios.test;
    let mut held_out = (count as f64 * held_out_fraction).round() as usize;
    if count >= 3 {
        held_out = held_out.clamp(2, count - 1);
    }
    let mut validation = (held_out as f64 * ratios.validation / held_out_fraction).round() as usize;
    if held_out >= 2 {
        validation = validation.clamp(1, held_out - 1);
    }
    (count - held_out, validation, held_out - validation)
}

/// Deterministic two-stage stratified split.
///
/// Instances are sorted by id and shuffled with a ChaCha generator seeded by
/// `seed`, so the result does not depend on input order. The first draw
/// separates train from the held-out remainder per class; the second divides
/// the remainder into validation and test per class.
pub fn stratified_split(
    corpus: &[Instance],
    ratios: SplitRatios,
    seed: u64,
) -> Result<CorpusSplit, CorpusError> {
    ratios.validate()?;
    let mut ordered: Vec<&Instance> = corpus.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ordered.shuffle(&mut rng);

    let mut by_class: BTreeMap<Label, Vec<&Instance>> = BTreeMap::new();
    for instance in ordered {
        by_class.entry(instance.label).or_default().push(instance);
    }
    for (&label, members) in &by_class {
        if members.len() < 3 {
            return Err(CorpusError::TooFewToStratify {
                label,
                count: members.len(),
            });
        }
    }

    let mut split = CorpusSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
        ratios,
    };
    for members in by_class.values() {
        let (n_train, n_val, _) = class_allocation(members.len(), &ratios);
        let (train, rest) = members.split_at(n_train);
        let (validation, test) = rest.split_at(n_val);
        split.train.extend(train.iter().map(|i| (*i).clone()));
        split
            .validation
            .extend(validation.iter().map(|i| (*i).clone()));
        split.test.extend(test.iter().map(|i| (*i).clone()));
    }
    for part in [&mut split.train, &mut split.validation, &mut split.test] {
        part.sort_by(|a, b| a.id.cmp(&b.id));
    }
    Ok(split)
}

/// Auditable record of split membership; re-applying it to the same corpus
/// reproduces the split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub language: Language,
    pub seed: u64,
    pub ratios: SplitRatios,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn apply(&self, corpus: &[Instance]) -> Result<CorpusSplit, CorpusError> {
        let by_id: HashMap<&str, &Instance> = corpus.iter().map(|i| (i.id.as_str(), i)).collect();
        let pick = |ids: &[String]| -> Result<Vec<Instance>, CorpusError> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|i| (*i).clone())
                        .ok_or_else(|| CorpusError::UnknownId(id.clone()))
                })
                .collect()
        };
        let split = CorpusSplit {
            train: pick(&self.train)?,
            validation: pick(&self.validation)?,
            test: pick(&self.test)?,
            seed: self.seed,
            ratios: self.ratios,
        };
        if split.len() != corpus.len() {
            let listed: std::collections::HashSet<&str> = self
                .train
                .iter()
                .chain(&self.validation)
                .chain(&self.test)
                .map(String::as_str)
                .collect();
            if let Some(missing) = corpus.iter().find(|i| !listed.contains(i.id.as_str())) {
                return Err(CorpusError::UncoveredId(missing.id.clone()));
            }
        }
        Ok(split)
    }

    pub fn distributions(
        &self,
        corpus: &[Instance],
    ) -> Result<[ClassDistribution; 3], CorpusError> {
        let split = self.apply(corpus)?;
        Ok([
            class_distribution(&split.train),
            class_distribution(&split.validation),
            class_distribution(&split.test),
        ])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}
