//! Trainable gated fusion:
//! `g = σ(W2 · tanh(W1 · [h_text :: h_user] + b1) + b2)`,
//! `h_fused = h_user + g ⊙ (h_text − h_user)`.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::oracle::GatedFusionParams;
use super::FusionError;
use crate::encoder::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub hidden_dim: usize,
    pub gate_dim: usize,
    /// `false` drops `b1`/`b2`, leaving exactly `σ(W2 · tanh(W1 · z))`.
    pub bias: bool,
}

impl FusionConfig {
    /// `gate_dim = hidden_dim`, biases on.
    pub fn new(hidden_dim: usize) -> Self {
        Self {
            hidden_dim,
            gate_dim: hidden_dim,
            bias: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GatedFusion {
    config: FusionConfig,
    params: ParamStore,
    w1: Tensor,
    b1: Option<Tensor>,
    w2: Tensor,
    b2: Option<Tensor>,
}

impl GatedFusion {
    /// `W1`, `W2` uniform in `±1/sqrt(fan_in)`, `b1` likewise, `b2 = 0` so the
    /// gate starts close to 0.5.
    pub fn new(
        config: FusionConfig,
        dtype: DType,
        device: &Device,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, FusionError> {
        let (d, dg) = (config.hidden_dim, config.gate_dim);
        if d == 0 || dg == 0 {
            return Err(FusionError::Shape("dimensions must be positive".into()));
        }
        let mut params = ParamStore::new(dtype, device);
        let s1 = 1.0 / ((2 * d) as f64).sqrt();
        let s2 = 1.0 / (dg as f64).sqrt();
        let w1 = params.uniform("fusion.w1", &[dg, 2 * d], s1, rng)?;
        let b1 = if config.bias {
            Some(params.uniform("fusion.b1", &[dg], s1, rng)?)
        } else {
            None
        };
        let w2 = params.uniform("fusion.w2", &[d, dg], s2, rng)?;
        let b2 = if config.bias {
            Some(params.constant("fusion.b2", &[d], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn from_params(
        p: &GatedFusionParams,
        dtype: DType,
        device: &Device,
    ) -> Result<Self, FusionError> {
        p.validate()?;
        if p.b1.is_some() != p.b2.is_some() {
            return Err(FusionError::Shape(
                "b1 and b2 must both be present or both absent".into(),
            ));
        }
        let (d, dg) = (p.hidden_dim, p.gate_dim);
        let mut params = ParamStore::new(dtype, device);
        let w1 = params.from_values("fusion.w1", &[dg, 2 * d], p.w1.clone())?;
        let b1 =
            p.b1.as_ref()
                .map(|b| params.from_values("fusion.b1", &[dg], b.clone()))
                .transpose()?;
        let w2 = params.from_values("fusion.w2", &[d, dg], p.w2.clone())?;
        let b2 =
            p.b2.as_ref()
                .map(|b| params.from_values("fusion.b2", &[d], b.clone()))
                .transpose()?;
        Ok(Self {
            config: FusionConfig {
                hidden_dim: d,
                gate_dim: dg,
                bias: b1.is_some(),
            },
            params,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn to_params(&self) -> Result<GatedFusionParams, FusionError> {
        let flat = |t: &Tensor| -> Result<Vec<f64>, FusionError> {
            Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
        };
        Ok(GatedFusionParams {
            hidden_dim: self.config.hidden_dim,
            gate_dim: self.config.gate_dim,
            w1: flat(&self.w1)?,
            b1: self.b1.as_ref().map(flat).transpose()?,
            w2: flat(&self.w2)?,
            b2: self.b2.as_ref().map(flat).transpose()?,
        })
    }

    pub fn config(&self) -> FusionConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.vars()
    }

    /// Gate `[batch, d]` for `[batch, d]` inputs.
    pub fn gate(&self, h_text: &Tensor, h_user: &Tensor) -> Result<Tensor, FusionError> {
        let (_, d) = h_text.dims2()?;
        let (_, du) = h_user.dims2()?;
        if d != self.config.hidden_dim || du != self.config.hidden_dim {
            return Err(FusionError::DimensionMismatch {
                expected: self.config.hidden_dim,
                text: d,
                user: du,
            });
        }
        let z = Tensor::cat(&[h_text, h_user], 1)?;
        let mut pre = z.matmul(&self.w1.t()?)?;
        if let Some(b1) = &self.b1 {
            pre = pre.broadcast_add(b1)?;
        }
        let mut act = pre.tanh()?.matmul(&self.w2.t()?)?;
        if let Some(b2) = &self.b2 {
            act = act.broadcast_add(b2)?;
        }
        Ok(candle_nn::ops::sigmoid(&act)?)
    }

    /// Returns `(g, h_fused)`.
    pub fn forward(
        &self,
        h_text: &Tensor,
        h_user: &Tensor,
    ) -> Result<(Tensor, Tensor), FusionError> {
        let g = self.gate(h_text, h_user)?;
        let fused = (h_user + g.mul(&(h_text - h_user)?)?)?;
        Ok((g, fused))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FusionError> {
        Ok(self.params.save(path)?)
    }

    pub fn load_values(&self, path: impl AsRef<Path>) -> Result<(), FusionError> {
        Ok(self.params.load_values(path, None)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.to_dtype(DType::F64).unwrap().to_vec2().unwrap()
    }

    #[test]
    fn matches_oracle_and_round_trips_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for bias in [true, false] {
            let p = GatedFusionParams::random(6, 5, bias, 0.8, &mut rng);
            let layer = GatedFusion::from_params(&p, DType::F64, &Device::Cpu).unwrap();
            assert_eq!(layer.to_params().unwrap(), p);
            let t: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
            let u: Vec<f64> = (0..6).map(|i| (i as f64 * 1.3).cos()).collect();
            let ht = Tensor::from_vec(t.clone(), (1, 6), &Device::Cpu).unwrap();
            let hu = Tensor::from_vec(u.clone(), (1, 6), &Device::Cpu).unwrap();
            let (g, fused) = layer.forward(&ht, &hu).unwrap();
            let want = p.fuse(&t, &u).unwrap();
            for (a, b) in rows(&g)[0].iter().zip(&want.g) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            for (a, b) in rows(&fused)[0].iter().zip(&want.h_fused) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn fresh_gate_starts_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer =
            GatedFusion::new(FusionConfig::new(8), DType::F64, &Device::Cpu, &mut rng).unwrap();
        let zero = Tensor::zeros((1, 8), DType::F64, &Device::Cpu).unwrap();
        let g = rows(&layer.gate(&zero, &zero).unwrap());
        // z = 0 → tanh(b1) feeds W2; bounded well inside (0.1, 0.9)
        assert!(g[0].iter().all(|&x| x > 0.1 && x < 0.9));
    }

    #[test]
    fn dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer =
            GatedFusion::new(FusionConfig::new(4), DType::F32, &Device::Cpu, &mut rng).unwrap();
        let a = Tensor::zeros((1, 4), DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            layer.forward(&a, &b),
            Err(FusionError::DimensionMismatch { .. })
        ));
    }
}
