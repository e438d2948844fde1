use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::input::{build_input, Batch, EncodedPair};
use super::model::{to_rows, Backbone, EncoderConfig, ForwardCtx, Pooling};
use super::params::ParamStore;
use super::tokenizer::WordPieceTokenizer;
use super::EncoderError;

const CONFIG_FILE: &str = "config.json";
const BACKBONE_FILE: &str = "backbone.safetensors";
const HEAD_FILE: &str = "head.safetensors";
const VOCAB_FILE: &str = "vocab.txt";

/// Scale of the uniform classification-head initialisation.
pub const HEAD_INIT_SCALE: f64 = 0.02;

/// Linear map `hidden_dim → 2`.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    params: ParamStore,
    weight: Tensor,
    bias: Tensor,
}

impl ClassifierHead {
    pub fn new(
        hidden_dim: usize,
        dtype: DType,
        device: &Device,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, EncoderError> {
        let mut params = ParamStore::new(dtype, device);
        let weight = params.uniform("classifier.weight", &[2, hidden_dim], HEAD_INIT_SCALE, rng)?;
        let bias = params.constant("classifier.bias", &[2], 0.0)?;
        Ok(Self {
            params,
            weight,
            bias,
        })
    }

    pub fn forward(&self, pooled: &Tensor) -> Result<Tensor, EncoderError> {
        Ok(pooled
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn set(&self, weight: &Tensor, bias: &Tensor) -> Result<(), EncoderError> {
        self.params
            .get("classifier.weight")
            .expect("head weight")
            .set(weight)?;
        self.params
            .get("classifier.bias")
            .expect("head bias")
            .set(bias)?;
        Ok(())
    }
}

/// A backbone with its tokenizer and classification head.
#[derive(Debug, Clone)]
pub struct EncoderBundle {
    config: EncoderConfig,
    tokenizer: WordPieceTokenizer,
    backbone_params: ParamStore,
    backbone: Backbone,
    head: ClassifierHead,
}

/// Parsed form of a backbone identifier.
#[derive(Debug, Clone, PartialEq)]
pub enum BackboneSource {
    /// `tiny-bert[:L<layers>-H<hidden>-A<heads>-I<intermediate>]`, randomly initialised.
    Tiny {
        layers: usize,
        hidden: usize,
        heads: usize,
        intermediate: usize,
    },
    /// A local checkpoint directory.
    Local(PathBuf),
}

/// Environment variable naming a directory of locally mirrored checkpoints,
/// laid out as `<dir>/<org>/<model>`.
pub const MODEL_DIR_ENV: &str = "RECLAIM_MODEL_DIR";

impl BackboneSource {
    pub fn resolve(identifier: &str) -> Result<Self, EncoderError> {
        if let Some(rest) = identifier.strip_prefix("tiny-bert") {
            let mut source = (2, 32, 2, 64);
            let dims = rest.strip_prefix(':').unwrap_or(rest);
            for part in dims.split('-').filter(|p| !p.is_empty()) {
                let (key, value) = part.split_at(1);
                let value: usize = value
                    .parse()
                    .map_err(|_| EncoderError::Config(format!("bad tiny-bert field {part:?}")))?;
                match key {
                    "L" => source.0 = value,
                    "H" => source.1 = value,
                    "A" => source.2 = value,
                    "I" => source.3 = value,
                    _ => {
                        return Err(EncoderError::Config(format!(
                            "bad tiny-bert field {part:?}"
                        )))
                    }
                }
            }
            return Ok(BackboneSource::Tiny {
                layers: source.0,
                hidden: source.1,
                heads: source.2,
                intermediate: source.3,
            });
        }
        let direct = PathBuf::from(identifier);
        if direct.join(CONFIG_FILE).exists() {
            return Ok(BackboneSource::Local(direct));
        }
        if let Ok(root) = std::env::var(MODEL_DIR_ENV) {
            let mirrored = Path::new(&root).join(identifier);
            if mirrored.join(CONFIG_FILE).exists() {
                return Ok(BackboneSource::Local(mirrored));
            }
        }
        Err(EncoderError::BackboneUnavailable(identifier.to_string()))
    }
}

/// Subset of a BERT `config.json` needed to rebuild the encoder.
#[derive(Debug, Deserialize)]
struct BertJsonConfig {
    vocab_size: usize,
    hidden_size: usize,
    num_hidden_layers: usize,
    num_attention_heads: usize,
    intermediate_size: usize,
    max_position_embeddings: usize,
    #[serde(default = "default_bert_eps")]
    layer_norm_eps: f64,
    #[serde(default)]
    hidden_dropout_prob: f64,
}

fn default_bert_eps() -> f64 {
    1e-12
}

/// Options applied when instantiating a backbone for training.
#[derive(Debug, Clone)]
pub struct BundleOptions {
    pub max_sequence_length: usize,
    pub hidden_dropout: f64,
    pub dtype: DType,
    pub device: Device,
    pub seed: u64,
    /// Vocabulary size cap when a tokenizer has to be built from text.
    pub vocab_limit: usize,
}

impl Default for BundleOptions {
    fn default() -> Self {
        Self {
            max_sequence_length: 128,
            hidden_dropout: 0.1,
            dtype: DType::F32,
            device: Device::Cpu,
            seed: 0,
            vocab_limit: 30_000,
        }
    }
}

impl EncoderBundle {
    /// Random initialisation from `seed`.
    pub fn new(
        config: EncoderConfig,
        tokenizer: WordPieceTokenizer,
        dtype: DType,
        device: &Device,
        seed: u64,
    ) -> Result<Self, EncoderError> {
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(EncoderError::Config(format!(
                "tokenizer has {} tokens, config says {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone_params = ParamStore::new(dtype, device);
        let backbone = Backbone::new(&config, &mut backbone_params, &mut rng)?;
        let head = ClassifierHead::new(config.hidden_dim, dtype, device, &mut rng)?;
        Ok(Self {
            config,
            tokenizer,
            backbone_params,
            backbone,
            head,
        })
    }

    /// Instantiates the backbone named by `identifier`. Tiny backbones build
    /// their vocabulary from `texts`; local checkpoints bring their own.
    pub fn from_identifier<'a>(
        identifier: &str,
        texts: impl IntoIterator<Item = &'a str>,
        options: &BundleOptions,
    ) -> Result<Self, EncoderError> {
        match BackboneSource::resolve(identifier)? {
            BackboneSource::Tiny {
                layers,
                hidden,
                heads,
                intermediate,
            } => {
                let tokenizer = WordPieceTokenizer::build(texts, 1, options.vocab_limit, false);
                let config = EncoderConfig {
                    backbone_identifier: identifier.to_string(),
                    vocab_size: tokenizer.vocab_size(),
                    hidden_dim: hidden,
                    num_layers: layers,
                    num_heads: heads,
                    intermediate_dim: intermediate,
                    max_sequence_length: options.max_sequence_length,
                    pooling: Pooling::Cls,
                    hidden_dropout: options.hidden_dropout,
                    layer_norm_eps: 1e-12,
                    lowercase: false,
                };
                Self::new(
                    config,
                    tokenizer,
                    options.dtype,
                    &options.device,
                    options.seed,
                )
            }
            BackboneSource::Local(dir) => {
                let mut bundle =
                    Self::load_with_seed(&dir, options.dtype, &options.device, options.seed)?;
                bundle.config.backbone_identifier = identifier.to_string();
                bundle.config.hidden_dropout = options.hidden_dropout;
                if options.max_sequence_length < bundle.config.max_sequence_length {
                    bundle.config.max_sequence_length = options.max_sequence_length;
                }
                bundle.backbone.set_config(bundle.config.clone());
                Ok(bundle)
            }
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn tokenizer(&self) -> &WordPieceTokenizer {
        &self.tokenizer
    }

    pub fn backbone_params(&self) -> &ParamStore {
        &self.backbone_params
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn dtype(&self) -> DType {
        self.backbone_params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.backbone_params.device()
    }

    pub fn backbone_vars(&self) -> Vec<Var> {
        self.backbone_params.vars()
    }

    pub fn head_vars(&self) -> Vec<Var> {
        self.head.params().vars()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        let mut vars = self.backbone_vars();
        vars.extend(self.head_vars());
        vars
    }

    pub fn backbone_fingerprint(&self) -> Result<String, EncoderError> {
        self.backbone_params.fingerprint()
    }

    pub fn build_input(&self, tweet: &str, bio: &str) -> EncodedPair {
        build_input(tweet, bio, &self.tokenizer, self.config.max_sequence_length)
    }

    pub fn batch(&self, pairs: &[&EncodedPair]) -> Result<Batch, EncoderError> {
        Batch::new(pairs, &self.tokenizer, self.dtype(), self.device())
    }

    /// Pooled hidden states `[batch, hidden_dim]`.
    pub fn pooled(&self, batch: &Batch, ctx: &mut ForwardCtx) -> Result<Tensor, EncoderError> {
        self.backbone.pooled(batch, ctx)
    }

    /// Logits `[batch, 2]`.
    pub fn logits(&self, batch: &Batch, ctx: &mut ForwardCtx) -> Result<Tensor, EncoderError> {
        self.head.forward(&self.pooled(batch, ctx)?)
    }

    /// Evaluation-mode pooled state for one input.
    pub fn encode(&self, input: &EncodedPair) -> Result<Vec<f64>, EncoderError> {
        self.check_len(input)?;
        let batch = self.batch(&[input])?;
        let pooled = self.pooled(&batch, &mut ForwardCtx::eval())?;
        Ok(to_rows(&pooled)?.remove(0))
    }

    /// Evaluation-mode logits for one input.
    pub fn classify(&self, input: &EncodedPair) -> Result<[f64; 2], EncoderError> {
        self.check_len(input)?;
        let batch = self.batch(&[input])?;
        let logits = to_rows(&self.logits(&batch, &mut ForwardCtx::eval())?)?.remove(0);
        Ok([logits[0], logits[1]])
    }

    fn check_len(&self, input: &EncodedPair) -> Result<(), EncoderError> {
        if input.len() > self.config.max_sequence_length {
            return Err(EncoderError::TooLong {
                len: input.len(),
                max: self.config.max_sequence_length,
            });
        }
        Ok(())
    }

    /// Independent copy with its own parameter storage. `clone()` shares the
    /// underlying variables, so training one clone moves the other.
    pub fn duplicate(&self) -> Result<Self, EncoderError> {
        let copy = Self::new(
            self.config.clone(),
            self.tokenizer.clone(),
            self.dtype(),
            &self.device().clone(),
            0,
        )?;
        copy.backbone_params
            .restore(&self.backbone_params.snapshot()?)?;
        copy.head
            .params()
            .restore(&self.head.params().snapshot()?)?;
        Ok(copy)
    }

    /// Re-draws the classification head (uniform weights, zero bias).
    pub fn reset_head(&mut self, seed: u64) -> Result<(), EncoderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.head = ClassifierHead::new(
            self.config.hidden_dim,
            self.dtype(),
            &self.device().clone(),
            &mut rng,
        )?;
        Ok(())
    }

    /// Writes `config.json`, `backbone.safetensors`, `head.safetensors` and `vocab.txt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), EncoderError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| EncoderError::io(dir, e))?;
        let config = serde_json::to_string_pretty(&self.config).expect("config serialises");
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, config + "\n").map_err(|e| EncoderError::io(&path, e))?;
        self.backbone_params.save(dir.join(BACKBONE_FILE))?;
        self.head.params().save(dir.join(HEAD_FILE))?;
        self.tokenizer.save(dir.join(VOCAB_FILE))
    }

    pub fn load(
        dir: impl AsRef<Path>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self, EncoderError> {
        Self::load_with_seed(dir, dtype, device, 0)
    }

    /// Loads a checkpoint written by [`EncoderBundle::save`] or a BERT-layout
    /// directory (`config.json`, `model.safetensors`, `vocab.txt`). A missing
    /// head is initialised from `seed`.
    pub fn load_with_seed(
        dir: impl AsRef<Path>,
        dtype: DType,
        device: &Device,
        seed: u64,
    ) -> Result<Self, EncoderError> {
        let dir = dir.as_ref();
        let config_path = dir.join(CONFIG_FILE);
        let text =
            std::fs::read_to_string(&config_path).map_err(|e| EncoderError::io(&config_path, e))?;
        let config = match serde_json::from_str::<EncoderConfig>(&text) {
            Ok(c) => c,
            Err(_) => {
                let bert: BertJsonConfig = serde_json::from_str(&text).map_err(|e| {
                    EncoderError::Checkpoint(format!("{}: {e}", config_path.display()))
                })?;
                EncoderConfig {
                    backbone_identifier: dir.display().to_string(),
                    vocab_size: bert.vocab_size,
                    hidden_dim: bert.hidden_size,
                    num_layers: bert.num_hidden_layers,
                    num_heads: bert.num_attention_heads,
                    intermediate_dim: bert.intermediate_size,
                    max_sequence_length: bert.max_position_embeddings,
                    pooling: Pooling::Cls,
                    hidden_dropout: bert.hidden_dropout_prob,
                    layer_norm_eps: bert.layer_norm_eps,
                    lowercase: false,
                }
            }
        };
        let tokenizer = WordPieceTokenizer::load(dir.join(VOCAB_FILE), config.lowercase)?;
        let bundle = Self::new(config, tokenizer, dtype, device, seed)?;
        let backbone_file = [BACKBONE_FILE, "model.safetensors"]
            .iter()
            .map(|f| dir.join(f))
            .find(|p| p.exists())
            .ok_or_else(|| {
                EncoderError::Checkpoint(format!("no backbone weights in {}", dir.display()))
            })?;
        bundle
            .backbone_params
            .load_values(&backbone_file, Some("bert"))?;
        let head_file = dir.join(HEAD_FILE);
        if head_file.exists() {
            bundle.head.params().load_values(&head_file, None)?;
        }
        Ok(bundle)
    }
}
