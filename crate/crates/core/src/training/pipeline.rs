//! The three-stage pipeline, per seed:
//!
//! 1. fine-tune a text encoder on reclamation labels (the baseline);
//! 2. fine-tune a user encoder on proxy affiliation labels;
//! 3. fuse both towers, train gate and head with the towers frozen, then
//!    fine-tune everything at the reduced rate.
//!
//! With an output directory each seed writes
//!
//! ```text
//! seed-<s>/baseline_text/      encoder checkpoint
//! seed-<s>/user_encoder/       encoder checkpoint
//! seed-<s>/fusion_probe/       gate + head after the probe stage
//! seed-<s>/dual/               full dual-model checkpoint
//! seed-<s>/predictions/<model>_<split>.jsonl
//! seed-<s>/metrics.jsonl       one record per epoch
//! seed-<s>/reports.json        stage reports
//! ```

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use super::stage::{
    derive_seed, dual_probabilities, encoder_probabilities, train_stage, Example, StageData,
    StageModel,
};
use super::{EpochRecord, Precision, RunConfig, Stage, StageReport, TrainingError};
use crate::corpus::{CorpusSplit, Instance, Label, Language, SplitName};
use crate::encoder::{BundleOptions, EncoderBundle};
use crate::evaluation::{compute_metrics, write_predictions, MetricRecord, PredictionRecord};
use crate::fusion::DualEncoderModel;
use crate::weak_labeler::{Affiliation, ProxyRecord};

pub const BASELINE_DIR: &str = "baseline_text";
pub const USER_DIR: &str = "user_encoder";
pub const PROBE_DIR: &str = "fusion_probe";
pub const DUAL_DIR: &str = "dual";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const BASELINE_MODEL: &str = "baseline_text";
pub const DUAL_MODEL: &str = "dual";

/// Which of the three stages to run; skipped earlier stages are loaded from
/// the seed directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSelection {
    pub baseline: bool,
    pub user: bool,
    pub fusion: bool,
}

impl StageSelection {
    pub fn all() -> Self {
        Self {
            baseline: true,
            user: true,
            fusion: true,
        }
    }
}

/// Outcome of one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub reports: Vec<StageReport>,
    /// Validation metrics of the (restored) best models.
    pub baseline_validation: Option<MetricRecord>,
    pub dual_validation: Option<MetricRecord>,
    pub dir: Option<PathBuf>,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

pub fn prediction_path(seed_dir: &Path, model: &str, split: SplitName) -> PathBuf {
    seed_dir
        .join(PREDICTIONS_DIR)
        .join(format!("{model}_{split}.jsonl"))
}

fn reclamation_examples(instances: &[Instance]) -> Vec<Example> {
    instances
        .iter()
        .map(|i| Example {
            id: i.id.clone(),
            tweet: i.tweet.clone(),
            bio: i.bio.clone(),
            label: i.label.index(),
        })
        .collect()
}

/// Instances with a proxy label; the rest are counted as dropped.
fn proxy_examples(
    instances: &[Instance],
    proxies: &HashMap<&str, Affiliation>,
) -> (Vec<Example>, usize) {
    let mut dropped = 0;
    let examples = instances
        .iter()
        .filter_map(|i| match proxies.get(i.id.as_str()) {
            Some(a) => Some(Example {
                id: i.id.clone(),
                tweet: i.tweet.clone(),
                bio: i.bio.clone(),
                label: a.index(),
            }),
            None => {
                dropped += 1;
                None
            }
        })
        .collect();
    (examples, dropped)
}

fn dtype(config: &RunConfig) -> DType {
    match config.precision {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    }
}

struct SeedContext<'a> {
    config: &'a RunConfig,
    split: &'a CorpusSplit,
    language: Language,
    seed: u64,
    dir: Option<PathBuf>,
}

impl SeedContext<'_> {
    fn bundle_options(&self, purpose: u64) -> BundleOptions {
        BundleOptions {
            max_sequence_length: self.config.max_sequence_length,
            hidden_dropout: self.config.hidden_dropout,
            dtype: dtype(self.config),
            device: Device::Cpu,
            seed: derive_seed(self.seed, 0, purpose),
            ..Default::default()
        }
    }

    fn fresh_encoder(&self, purpose: u64) -> Result<EncoderBundle, TrainingError> {
        let texts = self
            .split
            .train
            .iter()
            .flat_map(|i| [i.tweet.as_str(), i.bio.as_str()]);
        Ok(EncoderBundle::from_identifier(
            &self.config.backbone_for(self.language),
            texts,
            &self.bundle_options(purpose),
        )?)
    }

    fn load_encoder(&self, stage: Stage, name: &str) -> Result<EncoderBundle, TrainingError> {
        let missing = |path: PathBuf| TrainingError::MissingCheckpoint { stage, path };
        let Some(dir) = &self.dir else {
            return Err(missing(PathBuf::from(name)));
        };
        let path = dir.join(name);
        if !path.join("config.json").exists() {
            return Err(missing(path));
        }
        Ok(EncoderBundle::load(
            &path,
            dtype(self.config),
            &Device::Cpu,
        )?)
    }

    fn save_predictions(
        &self,
        model: &str,
        split: SplitName,
        probs: &[f64],
    ) -> Result<(), TrainingError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let instances = self.split.get(split);
        let records: Vec<PredictionRecord> = instances
            .iter()
            .zip(probs)
            .map(|(i, &p)| PredictionRecord::new(i.id.clone(), i.label, p))
            .collect();
        let path = prediction_path(dir, model, split);
        std::fs::create_dir_all(path.parent().expect("has parent"))
            .map_err(|e| TrainingError::io(&path, e))?;
        write_predictions(&path, &records)?;
        Ok(())
    }

    fn checkpoint_path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

fn metrics_of(split: &[Instance], probs: &[f64]) -> Result<Option<MetricRecord>, TrainingError> {
    if split.is_empty() {
        return Ok(None);
    }
    let pairs: Vec<(Label, Label)> = split
        .iter()
        .zip(probs)
        .map(|(i, &p)| (i.label, crate::evaluation::decide(p)))
        .collect();
    Ok(Some(compute_metrics(&pairs)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainingError> {
    let json = serde_json::to_string_pretty(value).expect("serialisable") + "\n";
    std::fs::write(path, json).map_err(|e| TrainingError::io(path, e))
}

fn write_logs(dir: &Path, reports: &[StageReport]) -> Result<(), TrainingError> {
    let path = dir.join("metrics.jsonl");
    let mut text = String::new();
    for record in reports.iter().flat_map(|r| &r.epochs) {
        text.push_str(&serde_json::to_string::<EpochRecord>(record).expect("serialisable"));
        text.push('\n');
    }
    std::fs::write(&path, text).map_err(|e| TrainingError::io(&path, e))?;
    write_json(&dir.join("reports.json"), &reports)
}

/// Runs the selected stages for one seed. `dir` is this seed's directory.
pub fn run_seed(
    config: &RunConfig,
    split: &CorpusSplit,
    proxies: &[ProxyRecord],
    language: Language,
    seed: u64,
    dir: Option<&Path>,
    stages: StageSelection,
) -> Result<SeedRun, TrainingError> {
    config.validate()?;
    let ctx = SeedContext {
        config,
        split,
        language,
        seed,
        dir: dir.map(Path::to_path_buf),
    };
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| TrainingError::io(d, e))?;
    }
    let validation = reclamation_examples(&split.validation);
    let test = reclamation_examples(&split.test);
    let mut reports = Vec::new();
    let mut run = SeedRun {
        seed,
        reports: Vec::new(),
        baseline_validation: None,
        dual_validation: None,
        dir: ctx.dir.clone(),
    };

    // (i) text baseline
    let baseline = if stages.baseline {
        let model = ctx.fresh_encoder(1)?;
        let data = StageData {
            train: reclamation_examples(&split.train),
            validation: validation.clone(),
            dropped: 0,
        };
        let mut report = train_stage(
            StageModel::Encoder(&model),
            &data,
            config,
            Stage::BaselineText,
            seed,
        )?;
        if let Some(path) = ctx.checkpoint_path(BASELINE_DIR) {
            model.save(&path)?;
            report.checkpoint = Some(path);
        }
        let val_probs = encoder_probabilities(&model, &validation)?;
        ctx.save_predictions(BASELINE_MODEL, SplitName::Validation, &val_probs)?;
        ctx.save_predictions(
            BASELINE_MODEL,
            SplitName::Test,
            &encoder_probabilities(&model, &test)?,
        )?;
        run.baseline_validation = metrics_of(&split.validation, &val_probs)?;
        reports.push(report);
        if let Some(d) = dir {
            write_logs(d, &reports)?;
        }
        Some(model)
    } else {
        None
    };

    // (ii) user encoder on proxy labels
    let user = if stages.user {
        let lookup: HashMap<&str, Affiliation> = proxies
            .iter()
            .map(|p| (p.instance_id.as_str(), p.affiliated))
            .collect();
        let (train, dropped) = proxy_examples(&split.train, &lookup);
        if train.is_empty() {
            return Err(TrainingError::MissingProxies);
        }
        if dropped > 0 {
            log::warn!("seed {seed}: {dropped} training instances without a proxy label are left out of the user stage");
        }
        let (val, _) = proxy_examples(&split.validation, &lookup);
        let model = ctx.fresh_encoder(2)?;
        let data = StageData {
            train,
            validation: val,
            dropped,
        };
        let mut report = train_stage(
            StageModel::Encoder(&model),
            &data,
            config,
            Stage::UserProxy,
            seed,
        )?;
        if let Some(path) = ctx.checkpoint_path(USER_DIR) {
            model.save(&path)?;
            report.checkpoint = Some(path);
        }
        reports.push(report);
        if let Some(d) = dir {
            write_logs(d, &reports)?;
        }
        Some(model)
    } else {
        None
    };

    // (iii) dual encoder: probe, then joint fine-tuning
    if stages.fusion {
        let user = match user {
            Some(u) => u,
            None => ctx.load_encoder(Stage::FusionProbe, USER_DIR)?,
        };
        let text = if config.init_text_from_baseline {
            match &baseline {
                Some(b) => b.duplicate()?,
                None => ctx.load_encoder(Stage::FusionProbe, BASELINE_DIR)?,
            }
        } else {
            ctx.fresh_encoder(1)?
        };
        let dual = DualEncoderModel::new(
            text,
            user,
            config.gate_dim,
            config.fusion_bias,
            derive_seed(seed, 0, 3),
        )?;
        let data = StageData {
            train: reclamation_examples(&split.train),
            validation: validation.clone(),
            dropped: 0,
        };
        let mut probe = train_stage(
            StageModel::Dual(&dual),
            &data,
            config,
            Stage::FusionProbe,
            seed,
        )?;
        if let Some(path) = ctx.checkpoint_path(PROBE_DIR) {
            std::fs::create_dir_all(&path).map_err(|e| TrainingError::io(&path, e))?;
            dual.fusion().save(path.join("fusion.safetensors"))?;
            dual.head().params().save(path.join("head.safetensors"))?;
            probe.checkpoint = Some(path);
        }
        reports.push(probe);
        let mut joint = train_stage(
            StageModel::Dual(&dual),
            &data,
            config,
            Stage::JointFinetune,
            seed,
        )?;
        if let Some(path) = ctx.checkpoint_path(DUAL_DIR) {
            dual.save(&path)?;
            joint.checkpoint = Some(path);
        }
        reports.push(joint);
        let val_probs = dual_probabilities(&dual, &validation)?;
        ctx.save_predictions(DUAL_MODEL, SplitName::Validation, &val_probs)?;
        ctx.save_predictions(
            DUAL_MODEL,
            SplitName::Test,
            &dual_probabilities(&dual, &test)?,
        )?;
        run.dual_validation = metrics_of(&split.validation, &val_probs)?;
        if let Some(d) = dir {
            write_logs(d, &reports)?;
        }
    }
    run.reports = reports;
    Ok(run)
}

/// Per-seed status recorded in `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub baseline_validation_macro_f1: Option<f64>,
    pub dual_validation_macro_f1: Option<f64>,
}

/// One seed and how its run ended.
pub type SeedOutcome = (u64, Result<SeedRun, TrainingError>);

/// Runs every configured seed. A failing seed is logged and recorded; the
/// remaining seeds still run. With `parallel`, seeds run on separate threads.
pub fn run_pipeline(
    config: &RunConfig,
    split: &CorpusSplit,
    proxies: &[ProxyRecord],
    language: Language,
    out: Option<&Path>,
    stages: StageSelection,
    parallel: bool,
) -> Result<Vec<SeedOutcome>, TrainingError> {
    config.validate()?;
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(|e| TrainingError::io(out, e))?;
        write_json(&out.join("config.json"), config)?;
    }
    let one = |seed: u64| {
        let dir = out.map(|o| seed_dir(o, seed));
        let result = run_seed(
            config,
            split,
            proxies,
            language,
            seed,
            dir.as_deref(),
            stages,
        );
        if let Err(e) = &result {
            log::error!("seed {seed} failed: {e}");
        }
        (seed, result)
    };
    let results: Vec<_> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = config
                .seeds
                .iter()
                .map(|&seed| s.spawn(move || one(seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("seed worker panicked"))
                .collect()
        })
    } else {
        config.seeds.iter().map(|&seed| one(seed)).collect()
    };
    if let Some(out) = out {
        let summary: Vec<SeedSummary> = results
            .iter()
            .map(|(seed, r)| SeedSummary {
                seed: *seed,
                ok: r.is_ok(),
                error: r.as_ref().err().map(|e| e.to_string()),
                baseline_validation_macro_f1: r
                    .as_ref()
                    .ok()
                    .and_then(|r| r.baseline_validation.as_ref().map(|m| m.macro_f1)),
                dual_validation_macro_f1: r
                    .as_ref()
                    .ok()
                    .and_then(|r| r.dual_validation.as_ref().map(|m| m.macro_f1)),
            })
            .collect();
        write_json(&out.join("summary.json"), &summary)?;
    }
    Ok(results)
}
