//! One training stage: shuffled mini-batches, AdamW with decoupled weight
//! decay, global-norm clipping, per-epoch validation and early stopping that
//! restores the best weights.

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::{loss_tensor, scalar};
use super::losses::{class_weights, positive_probability};
use super::{EpochRecord, RunConfig, Stage, StageReport, TrainingError};
use crate::encoder::{to_rows, EncodedPair, EncoderBundle, ForwardCtx};
use crate::evaluation::{compute_metrics, decide, MetricRecord};
use crate::fusion::{DualEncoderModel, DualInput};

const EVAL_CHUNK: usize = 32;

/// A labelled pair; `label` is the reclamation label or the proxy
/// affiliation depending on the stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub tweet: String,
    pub bio: String,
    pub label: usize,
}

#[derive(Debug, Clone, Default)]
pub struct StageData {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    /// Training instances left out for lack of a label.
    pub dropped: usize,
}

#[derive(Clone, Copy)]
pub enum StageModel<'a> {
    Encoder(&'a EncoderBundle),
    Dual(&'a DualEncoderModel),
}

/// Seeds derived per (run seed, stage, purpose).
pub(crate) fn derive_seed(seed: u64, stage: u64, purpose: u64) -> u64 {
    let mut z = seed
        ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ purpose.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

trait Learner {
    type Input;
    fn prepare(&self, examples: &[Example]) -> Result<Vec<Self::Input>, TrainingError>;
    fn logits(
        &self,
        inputs: &[&Self::Input],
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor, TrainingError>;
    fn trainable(&self) -> Vec<Var>;
    fn device(&self) -> Device;
}

struct EncoderLearner<'a>(&'a EncoderBundle);

impl Learner for EncoderLearner<'_> {
    type Input = EncodedPair;

    fn prepare(&self, examples: &[Example]) -> Result<Vec<EncodedPair>, TrainingError> {
        Ok(examples
            .iter()
            .map(|e| self.0.build_input(&e.tweet, &e.bio))
            .collect())
    }

    fn logits(
        &self,
        inputs: &[&EncodedPair],
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor, TrainingError> {
        Ok(self.0.logits(&self.0.batch(inputs)?, ctx)?)
    }

    fn trainable(&self) -> Vec<Var> {
        self.0.all_vars()
    }

    fn device(&self) -> Device {
        self.0.device().clone()
    }
}

/// Fusion and head only. Encoder outputs are computed once in evaluation
/// mode and detached, so no gradient can reach the encoders.
struct ProbeLearner<'a>(&'a DualEncoderModel);

impl Learner for ProbeLearner<'_> {
    type Input = (Tensor, Tensor);

    fn prepare(&self, examples: &[Example]) -> Result<Vec<(Tensor, Tensor)>, TrainingError> {
        let inputs: Vec<DualInput> = examples
            .iter()
            .map(|e| self.0.build_input(&e.tweet, &e.bio))
            .collect();
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(EVAL_CHUNK) {
            let refs: Vec<&DualInput> = chunk.iter().collect();
            let (h_text, h_user) = self.0.encode(&refs, &mut ForwardCtx::eval())?;
            let (h_text, h_user) = (h_text.detach(), h_user.detach());
            for i in 0..chunk.len() {
                out.push((h_text.narrow(0, i, 1)?, h_user.narrow(0, i, 1)?));
            }
        }
        Ok(out)
    }

    fn logits(
        &self,
        inputs: &[&(Tensor, Tensor)],
        _ctx: &mut ForwardCtx,
    ) -> Result<Tensor, TrainingError> {
        let text: Vec<&Tensor> = inputs.iter().map(|i| &i.0).collect();
        let user: Vec<&Tensor> = inputs.iter().map(|i| &i.1).collect();
        Ok(self
            .0
            .fused_logits(&Tensor::cat(&text, 0)?, &Tensor::cat(&user, 0)?)?)
    }

    fn trainable(&self) -> Vec<Var> {
        self.0.probe_vars()
    }

    fn device(&self) -> Device {
        self.0.text_encoder().device().clone()
    }
}

struct JointLearner<'a>(&'a DualEncoderModel);

impl Learner for JointLearner<'_> {
    type Input = DualInput;

    fn prepare(&self, examples: &[Example]) -> Result<Vec<DualInput>, TrainingError> {
        Ok(examples
            .iter()
            .map(|e| self.0.build_input(&e.tweet, &e.bio))
            .collect())
    }

    fn logits(&self, inputs: &[&DualInput], ctx: &mut ForwardCtx) -> Result<Tensor, TrainingError> {
        Ok(self.0.logits(inputs, ctx)?)
    }

    fn trainable(&self) -> Vec<Var> {
        self.0.all_vars()
    }

    fn device(&self) -> Device {
        self.0.text_encoder().device().clone()
    }
}

/// Hyperparameters of a single stage, resolved from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct StageOptions {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub loss: super::LossKind,
    pub focal_gamma: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps (for tests and smoke runs).
    pub max_steps: Option<usize>,
}

impl StageOptions {
    pub fn from_config(config: &RunConfig, stage: Stage, seed: u64) -> Self {
        Self {
            learning_rate: config.stage_learning_rate(stage),
            weight_decay: config.weight_decay,
            batch_size: config.batch_size,
            epochs: config.epochs_per_stage.get(stage),
            patience: config.early_stopping.patience,
            clip_norm: config.gradient_clip_norm,
            loss: config.loss,
            focal_gamma: config.focal_gamma,
            seed,
            max_steps: None,
        }
    }
}

/// Trains `model` for `stage` and leaves it holding the best weights.
pub fn train_stage(
    model: StageModel,
    data: &StageData,
    config: &RunConfig,
    stage: Stage,
    seed: u64,
) -> Result<StageReport, TrainingError> {
    train_stage_with(
        model,
        data,
        &StageOptions::from_config(config, stage, seed),
        stage,
    )
}

pub fn train_stage_with(
    model: StageModel,
    data: &StageData,
    options: &StageOptions,
    stage: Stage,
) -> Result<StageReport, TrainingError> {
    match (stage, model) {
        (Stage::BaselineText | Stage::UserProxy, StageModel::Encoder(m)) => {
            fit(&EncoderLearner(m), data, options, stage)
        }
        (Stage::FusionProbe, StageModel::Dual(m)) => fit(&ProbeLearner(m), data, options, stage),
        (Stage::JointFinetune, StageModel::Dual(m)) => fit(&JointLearner(m), data, options, stage),
        _ => Err(TrainingError::WrongModel(stage)),
    }
}

fn snapshot(vars: &[Var]) -> Result<Vec<Tensor>, TrainingError> {
    vars.iter().map(|v| Ok(v.as_tensor().copy()?)).collect()
}

fn restore(vars: &[Var], values: &[Tensor]) -> Result<(), TrainingError> {
    for (v, t) in vars.iter().zip(values) {
        v.set(t)?;
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
fn clip_gradients(
    grads: &mut GradStore,
    vars: &[Var],
    max_norm: f64,
) -> Result<f64, TrainingError> {
    let mut total = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = total.sqrt();
    if norm > max_norm {
        let factor = max_norm / (norm + 1e-6);
        for v in vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                let scaled = (g * factor)?;
                grads.insert(v.as_tensor(), scaled);
            }
        }
    }
    Ok(norm)
}

fn probabilities<L: Learner>(learner: &L, inputs: &[L::Input]) -> Result<Vec<f64>, TrainingError> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_CHUNK) {
        let refs: Vec<&L::Input> = chunk.iter().collect();
        for row in to_rows(&learner.logits(&refs, &mut ForwardCtx::eval())?)? {
            out.push(positive_probability([row[0], row[1]]));
        }
    }
    Ok(out)
}

fn validation_metrics(probs: &[f64], examples: &[Example]) -> Result<MetricRecord, TrainingError> {
    let pairs: Vec<(usize, usize)> = examples
        .iter()
        .zip(probs)
        .map(|(e, &p)| (e.label, decide(p).index()))
        .collect();
    Ok(compute_metrics(&pairs)?)
}

fn fit<L: Learner>(
    learner: &L,
    data: &StageData,
    o: &StageOptions,
    stage: Stage,
) -> Result<StageReport, TrainingError> {
    if data.train.is_empty() {
        return Err(TrainingError::EmptySplit(stage));
    }
    let mut counts = [0usize; 2];
    for e in &data.train {
        counts[e.label] += 1;
    }
    let weights = class_weights(counts)?;
    let train_inputs = learner.prepare(&data.train)?;
    let val_inputs = learner.prepare(&data.validation)?;
    let vars = learner.trainable();
    let mut optimizer = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: o.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: o.weight_decay,
        },
    )?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(o.seed, stage.tag(), 1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(o.seed, stage.tag(), 2));
    let device = learner.device();

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut steps = 0;
    let mut order: Vec<usize> = (0..train_inputs.len()).collect();

    'epochs: for epoch in 1..=o.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(o.batch_size).enumerate() {
            if o.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let inputs: Vec<&L::Input> = chunk.iter().map(|&i| &train_inputs[i]).collect();
            let labels: Vec<u32> = chunk.iter().map(|&i| data.train[i].label as u32).collect();
            let labels = Tensor::from_vec(labels, chunk.len(), &device)?;
            let logits = learner.logits(&inputs, &mut ForwardCtx::train(&mut dropout_rng))?;
            let loss = loss_tensor(&logits, &labels, weights, o.loss, o.focal_gamma)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(TrainingError::Divergence {
                    stage,
                    epoch,
                    step: step + 1,
                    loss: value,
                });
            }
            let mut grads = loss.backward()?;
            clip_gradients(&mut grads, &vars, o.clip_norm)?;
            optimizer.step(&grads)?;
            loss_sum += value;
            batches += 1;
            steps += 1;
        }
        if batches == 0 {
            break;
        }
        let validation = if data.validation.is_empty() {
            None
        } else {
            Some(validation_metrics(
                &probabilities(learner, &val_inputs)?,
                &data.validation,
            )?)
        };
        // without validation data the latest weights count as best
        let score = validation.as_ref().map_or(f64::INFINITY, |m| m.macro_f1);
        let improved = best
            .as_ref()
            .is_none_or(|(b, _, _)| score > *b || score.is_infinite());
        if improved {
            best = Some((score, epoch, snapshot(&vars)?));
            since_best = 0;
        } else {
            since_best += 1;
        }
        log::info!(
            "seed {} {stage} epoch {epoch}: loss {:.4}{}",
            o.seed,
            loss_sum / batches as f64,
            validation
                .as_ref()
                .map(|m| format!(", val macro-F1 {:.4}", m.macro_f1))
                .unwrap_or_default()
        );
        epochs.push(EpochRecord {
            seed: o.seed,
            stage,
            epoch,
            train_loss: loss_sum / batches as f64,
            validation,
            improved,
        });
        if o.patience > 0 && since_best >= o.patience && epoch < o.epochs {
            stopped_early = true;
            break 'epochs;
        }
    }

    let (best_score, best_epoch) = match best {
        Some((score, epoch, values)) => {
            restore(&vars, &values)?;
            (score.is_finite().then_some(score), epoch)
        }
        None => (None, 0),
    };
    Ok(StageReport {
        stage,
        seed: o.seed,
        epochs,
        best_epoch,
        best_validation_macro_f1: best_score,
        stopped_early,
        train_size: data.train.len(),
        validation_size: data.validation.len(),
        dropped: data.dropped,
        checkpoint: None,
    })
}

/// Evaluation-mode reclamatory probabilities for a plain encoder.
pub fn encoder_probabilities(
    model: &EncoderBundle,
    examples: &[Example],
) -> Result<Vec<f64>, TrainingError> {
    let learner = EncoderLearner(model);
    probabilities(&learner, &learner.prepare(examples)?)
}

/// Evaluation-mode reclamatory probabilities for the dual model.
pub fn dual_probabilities(
    model: &DualEncoderModel,
    examples: &[Example],
) -> Result<Vec<f64>, TrainingError> {
    let learner = JointLearner(model);
    probabilities(&learner, &learner.prepare(examples)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::BundleOptions;

    fn examples() -> Vec<Example> {
        (0..24)
            .map(|i| Example {
                id: format!("x{i}"),
                tweet: if i % 2 == 0 {
                    "alfa beta".into()
                } else {
                    "gamma delta".into()
                },
                bio: "bio".into(),
                label: i % 2,
            })
            .collect()
    }

    fn bundle(seed: u64) -> EncoderBundle {
        let options = BundleOptions {
            max_sequence_length: 16,
            hidden_dropout: 0.1,
            seed,
            ..Default::default()
        };
        EncoderBundle::from_identifier(
            "tiny-bert:L1-H8-A2-I16",
            ["alfa beta gamma delta bio"],
            &options,
        )
        .unwrap()
    }

    fn options(lr: f64, epochs: usize) -> StageOptions {
        let config = RunConfig {
            learning_rate: lr,
            ..RunConfig::default()
        };
        let mut o = StageOptions::from_config(&config, Stage::BaselineText, 5);
        o.epochs = epochs;
        o
    }

    #[test]
    fn learns_a_trivial_task_and_reports_every_epoch() {
        let model = bundle(1);
        let data = StageData {
            train: examples(),
            validation: examples(),
            dropped: 0,
        };
        let mut o = options(2e-2, 12);
        o.patience = 0;
        let report =
            train_stage_with(StageModel::Encoder(&model), &data, &o, Stage::BaselineText).unwrap();
        assert_eq!(report.epochs.len(), 12);
        assert!(report.epochs.iter().all(|e| e.validation.is_some()));
        assert_eq!(report.best_validation_macro_f1, Some(1.0));
        let probs = encoder_probabilities(&model, &data.validation).unwrap();
        let best = &report.epochs[report.best_epoch - 1];
        assert_eq!(
            validation_metrics(&probs, &data.validation).unwrap(),
            *best.validation.as_ref().unwrap()
        );
    }

    #[test]
    fn deterministic_given_seed() {
        let run = || {
            let model = bundle(2);
            let data = StageData {
                train: examples(),
                validation: examples(),
                dropped: 0,
            };
            let r = train_stage_with(
                StageModel::Encoder(&model),
                &data,
                &options(1e-3, 2),
                Stage::BaselineText,
            )
            .unwrap();
            (r.epochs, model.backbone_fingerprint().unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_empty_split_and_wrong_model() {
        let model = bundle(3);
        let o = options(1e-3, 1);
        let empty = StageData::default();
        assert!(matches!(
            train_stage_with(StageModel::Encoder(&model), &empty, &o, Stage::BaselineText),
            Err(TrainingError::EmptySplit(Stage::BaselineText))
        ));
        assert!(matches!(
            train_stage_with(StageModel::Encoder(&model), &empty, &o, Stage::FusionProbe),
            Err(TrainingError::WrongModel(Stage::FusionProbe))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let model = bundle(4);
        // poison one weight
        let var = model
            .backbone_params()
            .get("embeddings.LayerNorm.weight")
            .unwrap();
        var.set(&(var.as_tensor().ones_like().unwrap() * f64::NAN).unwrap())
            .unwrap();
        let data = StageData {
            train: examples(),
            validation: vec![],
            dropped: 0,
        };
        let err = train_stage_with(
            StageModel::Encoder(&model),
            &data,
            &options(1e-3, 1),
            Stage::BaselineText,
        )
        .unwrap_err();
        assert!(
            matches!(
                err,
                TrainingError::Divergence {
                    epoch: 1,
                    step: 1,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..4)
            .flat_map(|a| (0..4).map(move |b| derive_seed(7, a, b)))
            .collect();
        assert_eq!(s.len(), 16);
    }
}
