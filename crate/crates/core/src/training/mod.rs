//! Losses, class weighting, the linear-probe/fine-tune schedule and the
//! three-stage pipeline (text baseline → user encoder on proxy labels →
//! fused dual encoder).

pub mod losses;

#[cfg(feature = "nn")]
pub mod batch;
#[cfg(feature = "nn")]
pub mod pipeline;
#[cfg(feature = "nn")]
pub mod stage;

use serde::{Deserialize, Serialize};

pub use losses::{batch_loss, class_weights, focal_loss, weighted_cross_entropy, LossKind};
#[cfg(feature = "nn")]
pub use pipeline::{run_pipeline, run_seed, SeedRun, StageSelection};
#[cfg(feature = "nn")]
pub use stage::{train_stage, Example, StageData, StageModel};

use crate::corpus::Language;
use crate::evaluation::MetricRecord;

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("class {0} has no examples; class weights are undefined")]
    EmptyClass(usize),
    #[error("{0}: empty training split")]
    EmptySplit(Stage),
    #[error("{stage}: non-finite loss {loss} at epoch {epoch}, step {step}")]
    Divergence {
        stage: Stage,
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("{stage} needs the checkpoint at {path}; run the earlier stage first")]
    MissingCheckpoint {
        stage: Stage,
        path: std::path::PathBuf,
    },
    #[error("no proxy labels cover the training split")]
    MissingProxies,
    #[error("{0} is the wrong model type for this stage")]
    WrongModel(Stage),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
    #[cfg(feature = "nn")]
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[cfg(feature = "nn")]
    #[error(transparent)]
    Fusion(#[from] crate::fusion::FusionError),
    #[cfg(feature = "nn")]
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

impl TrainingError {
    #[cfg(feature = "nn")]
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        TrainingError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    BaselineText,
    UserProxy,
    FusionProbe,
    JointFinetune,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::BaselineText,
        Stage::UserProxy,
        Stage::FusionProbe,
        Stage::JointFinetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::BaselineText => "baseline_text",
            Stage::UserProxy => "user_proxy",
            Stage::FusionProbe => "fusion_probe",
            Stage::JointFinetune => "joint_finetune",
        }
    }

    #[cfg(feature = "nn")]
    pub(crate) fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageEpochs {
    pub baseline_text: usize,
    pub user_proxy: usize,
    pub fusion_probe: usize,
    pub joint_finetune: usize,
}

impl Default for StageEpochs {
    fn default() -> Self {
        Self {
            baseline_text: 10,
            user_proxy: 10,
            fusion_probe: 10,
            joint_finetune: 10,
        }
    }
}

impl StageEpochs {
    pub fn get(&self, stage: Stage) -> usize {
        match stage {
            Stage::BaselineText => self.baseline_text,
            Stage::UserProxy => self.user_proxy,
            Stage::FusionProbe => self.fusion_probe,
            Stage::JointFinetune => self.joint_finetune,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingMetric {
    #[default]
    ValidationMacroF1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStopping {
    pub metric: StoppingMetric,
    /// Epochs without improvement before stopping; 0 disables early stopping.
    pub patience: usize,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self {
            metric: StoppingMetric::ValidationMacroF1,
            patience: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Rate for the baseline, user-encoder and fusion-probe stages.
    pub learning_rate: f64,
    /// Reduced rate for joint fine-tuning.
    pub joint_finetune_learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub focal_gamma: f64,
    pub seeds: Vec<u64>,
    pub epochs_per_stage: StageEpochs,
    pub early_stopping: EarlyStopping,
    pub gradient_clip_norm: f64,
    /// Start the dual model's text tower from the trained baseline.
    pub init_text_from_baseline: bool,
    /// Backbone for both towers; `None` picks the language default.
    pub backbone: Option<String>,
    pub max_sequence_length: usize,
    pub hidden_dropout: f64,
    /// Gate hidden width; `None` means equal to the encoder width.
    pub gate_dim: Option<usize>,
    pub fusion_bias: bool,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            joint_finetune_learning_rate: 5e-6,
            batch_size: 8,
            weight_decay: 0.1,
            loss: LossKind::WeightedCrossEntropy,
            focal_gamma: 2.0,
            seeds: vec![13, 42, 123, 2024, 31337],
            epochs_per_stage: StageEpochs::default(),
            early_stopping: EarlyStopping::default(),
            gradient_clip_norm: 1.0,
            init_text_from_baseline: true,
            backbone: None,
            max_sequence_length: 128,
            hidden_dropout: 0.1,
            gate_dim: None,
            fusion_bias: true,
            precision: Precision::F32,
        }
    }
}

pub fn default_backbone(language: Language) -> &'static str {
    match language {
        Language::It => "nickprock/setfit-italian-hate-speech",
        Language::Es => "cardiffnlp/twitter-xlm-roberta-base",
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let fail = |m: &str| Err(TrainingError::Config(m.to_string()));
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.learning_rate) || !positive(self.joint_finetune_learning_rate) {
            return fail("learning rates must be positive");
        }
        if self.joint_finetune_learning_rate >= self.learning_rate {
            return fail("joint_finetune_learning_rate must be below learning_rate");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if [self.weight_decay, self.focal_gamma]
            .iter()
            .any(|v| v.is_nan() || *v < 0.0)
        {
            return fail("weight_decay and focal_gamma must be nonnegative");
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required");
        }
        let mut unique = self.seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() != self.seeds.len() {
            return fail("seeds must be distinct");
        }
        if Stage::ALL
            .iter()
            .any(|&s| self.epochs_per_stage.get(s) == 0)
        {
            return fail("epochs_per_stage entries must be positive");
        }
        if !positive(self.gradient_clip_norm) {
            return fail("gradient_clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.hidden_dropout) {
            return fail("hidden_dropout must lie in [0, 1)");
        }
        if self.gate_dim == Some(0) {
            return fail("gate_dim must be positive");
        }
        Ok(())
    }

    pub fn backbone_for(&self, language: Language) -> String {
        self.backbone
            .clone()
            .unwrap_or_else(|| default_backbone(language).to_string())
    }

    pub fn stage_learning_rate(&self, stage: Stage) -> f64 {
        match stage {
            Stage::JointFinetune => self.joint_finetune_learning_rate,
            _ => self.learning_rate,
        }
    }
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub seed: u64,
    pub stage: Stage,
    pub epoch: usize,
    /// Mean of the per-batch losses.
    pub train_loss: f64,
    pub validation: Option<MetricRecord>,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_validation_macro_f1: Option<f64>,
    pub stopped_early: bool,
    pub train_size: usize,
    pub validation_size: usize,
    /// Training examples dropped for lack of a label (unresolved proxies).
    pub dropped: usize,
    pub checkpoint: Option<std::path::PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.seeds.len(), 5);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), c);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = |f: fn(&mut RunConfig)| {
            let mut c = RunConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.joint_finetune_learning_rate = c.learning_rate));
        assert!(bad(|c| c.learning_rate = 0.0));
        assert!(bad(|c| c.batch_size = 0));
        assert!(bad(|c| c.seeds = vec![]));
        assert!(bad(|c| c.seeds = vec![1, 1]));
        assert!(bad(|c| c.epochs_per_stage.fusion_probe = 0));
        assert!(serde_json::from_str::<RunConfig>(r#"{"learning_rat": 1}"#).is_err());
    }
}
