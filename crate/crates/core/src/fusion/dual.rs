//! Two parallel encoders over the same tweet/bio input, combined by the gate
//! and classified from `h_fused` alone.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{FusionConfig, GatedFusion};
use super::FusionError;
use crate::encoder::{to_rows, ClassifierHead, EncodedPair, EncoderBundle, ForwardCtx};

const DUAL_CONFIG_FILE: &str = "dual_config.json";
const FUSION_FILE: &str = "fusion.safetensors";
const HEAD_FILE: &str = "head.safetensors";
const TEXT_DIR: &str = "text";
const USER_DIR: &str = "user";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualConfig {
    pub hidden_dim: usize,
    pub gate_dim: usize,
    pub bias: bool,
    pub text_backbone: String,
    pub user_backbone: String,
}

/// The same pair tokenized for each tower (the towers may use different
/// vocabularies).
#[derive(Debug, Clone, PartialEq)]
pub struct DualInput {
    pub text: EncodedPair,
    pub user: EncodedPair,
}

#[derive(Debug, Clone)]
pub struct DualEncoderModel {
    text: EncoderBundle,
    user: EncoderBundle,
    fusion: GatedFusion,
    head: ClassifierHead,
}

impl DualEncoderModel {
    /// Wraps two encoders with a fresh gate and head drawn from `seed`.
    /// The encoders' own classification heads are kept but unused.
    pub fn new(
        text: EncoderBundle,
        user: EncoderBundle,
        gate_dim: Option<usize>,
        bias: bool,
        seed: u64,
    ) -> Result<Self, FusionError> {
        let d = text.hidden_dim();
        if user.hidden_dim() != d {
            return Err(FusionError::DimensionMismatch {
                expected: d,
                text: d,
                user: user.hidden_dim(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = FusionConfig {
            hidden_dim: d,
            gate_dim: gate_dim.unwrap_or(d),
            bias,
        };
        let fusion = GatedFusion::new(config, text.dtype(), text.device(), &mut rng)?;
        let head = ClassifierHead::new(d, text.dtype(), text.device(), &mut rng)?;
        Ok(Self {
            text,
            user,
            fusion,
            head,
        })
    }

    pub fn with_fusion(mut self, fusion: GatedFusion) -> Result<Self, FusionError> {
        if fusion.config().hidden_dim != self.hidden_dim() {
            return Err(FusionError::Shape(format!(
                "fusion hidden_dim {} does not match encoders ({})",
                fusion.config().hidden_dim,
                self.hidden_dim()
            )));
        }
        self.fusion = fusion;
        Ok(self)
    }

    pub fn hidden_dim(&self) -> usize {
        self.text.hidden_dim()
    }

    pub fn text_encoder(&self) -> &EncoderBundle {
        &self.text
    }

    pub fn user_encoder(&self) -> &EncoderBundle {
        &self.user
    }

    pub fn fusion(&self) -> &GatedFusion {
        &self.fusion
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn config(&self) -> DualConfig {
        let f = self.fusion.config();
        DualConfig {
            hidden_dim: f.hidden_dim,
            gate_dim: f.gate_dim,
            bias: f.bias,
            text_backbone: self.text.config().backbone_identifier.clone(),
            user_backbone: self.user.config().backbone_identifier.clone(),
        }
    }

    /// Backbone parameters of both towers.
    pub fn encoder_vars(&self) -> Vec<Var> {
        let mut v = self.text.backbone_vars();
        v.extend(self.user.backbone_vars());
        v
    }

    /// Gate and head parameters.
    pub fn probe_vars(&self) -> Vec<Var> {
        let mut v = self.fusion.vars();
        v.extend(self.head.params().vars());
        v
    }

    pub fn all_vars(&self) -> Vec<Var> {
        let mut v = self.encoder_vars();
        v.extend(self.probe_vars());
        v
    }

    /// Hash over both towers' backbone weights.
    pub fn encoder_fingerprint(&self) -> Result<String, FusionError> {
        Ok(format!(
            "{}:{}",
            self.text.backbone_fingerprint()?,
            self.user.backbone_fingerprint()?
        ))
    }

    pub fn build_input(&self, tweet: &str, bio: &str) -> DualInput {
        DualInput {
            text: self.text.build_input(tweet, bio),
            user: self.user.build_input(tweet, bio),
        }
    }

    /// Pooled `(h_text, h_user)` for a batch. Each tower gets its own
    /// dropout context drawn from `ctx`.
    pub fn encode(
        &self,
        inputs: &[&DualInput],
        ctx: &mut ForwardCtx,
    ) -> Result<(Tensor, Tensor), FusionError> {
        let text: Vec<&EncodedPair> = inputs.iter().map(|i| &i.text).collect();
        let user: Vec<&EncodedPair> = inputs.iter().map(|i| &i.user).collect();
        let h_text = self.text.pooled(&self.text.batch(&text)?, ctx)?;
        let h_user = self.user.pooled(&self.user.batch(&user)?, ctx)?;
        Ok((h_text, h_user))
    }

    /// Logits from precomputed pooled states.
    pub fn fused_logits(&self, h_text: &Tensor, h_user: &Tensor) -> Result<Tensor, FusionError> {
        let (_, fused) = self.fusion.forward(h_text, h_user)?;
        Ok(self.head.forward(&fused)?)
    }

    pub fn logits(
        &self,
        inputs: &[&DualInput],
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor, FusionError> {
        let (h_text, h_user) = self.encode(inputs, ctx)?;
        self.fused_logits(&h_text, &h_user)
    }

    /// Evaluation-mode logits for one input.
    pub fn dual_forward(&self, input: &DualInput) -> Result<[f64; 2], FusionError> {
        let logits = to_rows(&self.logits(&[input], &mut ForwardCtx::eval())?)?.remove(0);
        Ok([logits[0], logits[1]])
    }

    /// Evaluation-mode gate and fused vector for one input.
    pub fn fusion_state(
        &self,
        input: &DualInput,
    ) -> Result<crate::fusion::FusionState, FusionError> {
        let (h_text, h_user) = self.encode(&[input], &mut ForwardCtx::eval())?;
        let (g, fused) = self.fusion.forward(&h_text, &h_user)?;
        let row = |t: &Tensor| -> Result<Vec<f64>, FusionError> { Ok(to_rows(t)?.remove(0)) };
        Ok(crate::fusion::FusionState {
            h_text: row(&h_text)?,
            h_user: row(&h_user)?,
            g: row(&g)?,
            h_fused: row(&fused)?,
        })
    }

    /// Layout: `text/`, `user/` (encoder checkpoints), `fusion.safetensors`,
    /// `head.safetensors`, `dual_config.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), FusionError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| FusionError::Checkpoint {
            path: dir.to_path_buf(),
            message: e.to_string(),
        })?;
        self.text.save(dir.join(TEXT_DIR))?;
        self.user.save(dir.join(USER_DIR))?;
        self.fusion.save(dir.join(FUSION_FILE))?;
        self.head.params().save(dir.join(HEAD_FILE))?;
        let path = dir.join(DUAL_CONFIG_FILE);
        let json = serde_json::to_string_pretty(&self.config()).expect("config serialises") + "\n";
        std::fs::write(&path, json).map_err(|e| FusionError::Checkpoint {
            path: path.clone(),
            message: e.to_string(),
        })
    }

    pub fn load(dir: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<Self, FusionError> {
        let dir = dir.as_ref();
        let path = dir.join(DUAL_CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| FusionError::Checkpoint {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let config: DualConfig =
            serde_json::from_str(&text).map_err(|e| FusionError::Checkpoint {
                path: path.clone(),
                message: e.to_string(),
            })?;
        let text_enc = EncoderBundle::load(dir.join(TEXT_DIR), dtype, device)?;
        let user_enc = EncoderBundle::load(dir.join(USER_DIR), dtype, device)?;
        let model = Self::new(text_enc, user_enc, Some(config.gate_dim), config.bias, 0)?;
        if model.hidden_dim() != config.hidden_dim {
            return Err(FusionError::Checkpoint {
                path,
                message: format!(
                    "config says d = {}, encoders have {}",
                    config.hidden_dim,
                    model.hidden_dim()
                ),
            });
        }
        model.fusion.load_values(dir.join(FUSION_FILE))?;
        model.head.params().load_values(dir.join(HEAD_FILE), None)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::BundleOptions;
    use crate::fusion::GatedFusionParams;

    fn towers(dtype: DType) -> (EncoderBundle, EncoderBundle) {
        let texts = ["ciao frocio orgoglio", "bio marker 🏳️‍🌈"];
        let opts = |seed| BundleOptions {
            max_sequence_length: 32,
            seed,
            dtype,
            ..Default::default()
        };
        (
            EncoderBundle::from_identifier("tiny-bert:L1-H8-A2-I16", texts, &opts(1)).unwrap(),
            EncoderBundle::from_identifier("tiny-bert:L1-H8-A2-I16", texts, &opts(2)).unwrap(),
        )
    }

    fn saturated(b2: f64) -> GatedFusion {
        let mut p = GatedFusionParams::zeros(8, 8, true);
        p.b2 = Some(vec![b2; 8]);
        GatedFusion::from_params(&p, DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn saturated_gate_selects_one_tower() {
        let (t, u) = towers(DType::F64);
        let input = ("ciao frocio", "bio 🏳️‍🌈");
        for (b2, pick_text) in [(40.0, true), (-40.0, false)] {
            let model = DualEncoderModel::new(t.clone(), u.clone(), None, true, 0)
                .unwrap()
                .with_fusion(saturated(b2))
                .unwrap();
            let dual_in = model.build_input(input.0, input.1);
            let logits = model.dual_forward(&dual_in).unwrap();
            let tower = if pick_text { &t } else { &u };
            let h = tower.encode(&dual_in.text).unwrap();
            let h = Tensor::from_vec(h, (1, 8), &Device::Cpu).unwrap();
            let want = to_rows(&model.head().forward(&h).unwrap())
                .unwrap()
                .remove(0);
            assert!((logits[0] - want[0]).abs() < 1e-4 && (logits[1] - want[1]).abs() < 1e-4);
        }
    }

    #[test]
    fn deterministic_and_checkpointable() {
        let (t, u) = towers(DType::F32);
        let model = DualEncoderModel::new(t, u, Some(4), false, 9).unwrap();
        let input = model.build_input("orgoglio frocio", "marker");
        let a = model.dual_forward(&input).unwrap();
        assert_eq!(a, model.dual_forward(&input).unwrap());

        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let loaded = DualEncoderModel::load(dir.path(), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(loaded.config(), model.config());
        assert_eq!(loaded.dual_forward(&input).unwrap(), a);
        assert_eq!(
            loaded.encoder_fingerprint().unwrap(),
            model.encoder_fingerprint().unwrap()
        );
    }

    #[test]
    fn fusion_state_invariants() {
        let (t, u) = towers(DType::F64);
        let model = DualEncoderModel::new(t, u, None, true, 4).unwrap();
        let s = model
            .fusion_state(&model.build_input("ciao", "bio"))
            .unwrap();
        for i in 0..8 {
            assert!(s.g[i] > 0.0 && s.g[i] < 1.0);
            let (lo, hi) = (s.h_text[i].min(s.h_user[i]), s.h_text[i].max(s.h_user[i]));
            assert!(lo <= s.h_fused[i] && s.h_fused[i] <= hi);
        }
    }
}
