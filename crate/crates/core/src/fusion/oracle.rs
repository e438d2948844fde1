//! Plain `f64` gated fusion with a hand-derived backward pass.
//!
//! Forward:
//!
//! ```text
//! z       = [h_text :: h_user]                  (2d)
//! g       = sigmoid(W2 · tanh(W1 · z + b1) + b2)   (d)
//! h_fused = h_user + g ⊙ (h_text − h_user)        = g ⊙ h_text + (1 − g) ⊙ h_user
//! ```
//!
//! The interpolation is evaluated in the `h_user + g ⊙ (h_text − h_user)`
//! form: it is the same function, but under rounding it returns `h` exactly
//! when both inputs equal `h` and never leaves `[min, max]` of the inputs.
//! This module shares no code with the tensor layer in `fusion::layer`, so
//! either can check the other.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FusionError;

/// Gate parameters. Matrices are row-major: `w1` is `gate_dim × 2·hidden_dim`,
/// `w2` is `hidden_dim × gate_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedFusionParams {
    pub hidden_dim: usize,
    pub gate_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Option<Vec<f64>>,
    pub w2: Vec<f64>,
    pub b2: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionState {
    pub h_text: Vec<f64>,
    pub h_user: Vec<f64>,
    pub g: Vec<f64>,
    pub h_fused: Vec<f64>,
}

/// Gradients of `⟨upstream, h_fused⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub h_text: Vec<f64>,
    pub h_user: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Trace {
    z: Vec<f64>,
    hidden: Vec<f64>,
    g: Vec<f64>,
    h_fused: Vec<f64>,
}

impl GatedFusionParams {
    pub fn new(
        hidden_dim: usize,
        gate_dim: usize,
        w1: Vec<f64>,
        b1: Option<Vec<f64>>,
        w2: Vec<f64>,
        b2: Option<Vec<f64>>,
    ) -> Result<Self, FusionError> {
        let params = Self {
            hidden_dim,
            gate_dim,
            w1,
            b1,
            w2,
            b2,
        };
        params.validate()?;
        Ok(params)
    }

    /// All-zero parameters; with or without biases.
    pub fn zeros(hidden_dim: usize, gate_dim: usize, bias: bool) -> Self {
        Self {
            hidden_dim,
            gate_dim,
            w1: vec![0.0; gate_dim * 2 * hidden_dim],
            b1: bias.then(|| vec![0.0; gate_dim]),
            w2: vec![0.0; hidden_dim * gate_dim],
            b2: bias.then(|| vec![0.0; hidden_dim]),
        }
    }

    /// Every entry drawn uniformly from `[-scale, scale]`.
    pub fn random(
        hidden_dim: usize,
        gate_dim: usize,
        bias: bool,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut draw = |n: usize| {
            (0..n)
                .map(|_| rng.gen_range(-scale..=scale))
                .collect::<Vec<_>>()
        };
        let w1 = draw(gate_dim * 2 * hidden_dim);
        let b1 = bias.then(|| draw(gate_dim));
        let w2 = draw(hidden_dim * gate_dim);
        let b2 = bias.then(|| draw(hidden_dim));
        Self {
            hidden_dim,
            gate_dim,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn has_bias(&self) -> bool {
        self.b1.is_some() || self.b2.is_some()
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let (d, dg) = (self.hidden_dim, self.gate_dim);
        if d == 0 || dg == 0 {
            return Err(FusionError::Shape("dimensions must be positive".into()));
        }
        let check = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(FusionError::Shape(format!(
                    "{name}: expected {want} entries, got {got}"
                )))
            }
        };
        check("w1", self.w1.len(), dg * 2 * d)?;
        check("w2", self.w2.len(), d * dg)?;
        if let Some(b1) = &self.b1 {
            check("b1", b1.len(), dg)?;
        }
        if let Some(b2) = &self.b2 {
            check("b2", b2.len(), d)?;
        }
        let all = self
            .w1
            .iter()
            .chain(&self.w2)
            .chain(self.b1.iter().flatten())
            .chain(self.b2.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite);
        }
        Ok(())
    }

    fn check_inputs(&self, h_text: &[f64], h_user: &[f64]) -> Result<(), FusionError> {
        if h_text.len() != self.hidden_dim || h_user.len() != self.hidden_dim {
            return Err(FusionError::DimensionMismatch {
                expected: self.hidden_dim,
                text: h_text.len(),
                user: h_user.len(),
            });
        }
        Ok(())
    }

    fn trace(&self, h_text: &[f64], h_user: &[f64]) -> Trace {
        let (d, dg) = (self.hidden_dim, self.gate_dim);
        let z: Vec<f64> = h_text.iter().chain(h_user).copied().collect();
        let hidden: Vec<f64> = (0..dg)
            .map(|j| {
                let row = &self.w1[j * 2 * d..(j + 1) * 2 * d];
                let mut acc: f64 = row.iter().zip(&z).map(|(w, x)| w * x).sum();
                if let Some(b1) = &self.b1 {
                    acc += b1[j];
                }
                acc.tanh()
            })
            .collect();
        let g: Vec<f64> = (0..d)
            .map(|i| {
                let row = &self.w2[i * dg..(i + 1) * dg];
                let mut acc: f64 = row.iter().zip(&hidden).map(|(w, x)| w * x).sum();
                if let Some(b2) = &self.b2 {
                    acc += b2[i];
                }
                sigmoid(acc)
            })
            .collect();
        let h_fused = (0..d)
            .map(|i| h_user[i] + g[i] * (h_text[i] - h_user[i]))
            .collect();
        Trace {
            z,
            hidden,
            g,
            h_fused,
        }
    }

    pub fn fuse(&self, h_text: &[f64], h_user: &[f64]) -> Result<FusionState, FusionError> {
        self.check_inputs(h_text, h_user)?;
        let trace = self.trace(h_text, h_user);
        Ok(FusionState {
            h_text: h_text.to_vec(),
            h_user: h_user.to_vec(),
            g: trace.g,
            h_fused: trace.h_fused,
        })
    }

    /// Analytic gradients of `⟨upstream, h_fused⟩` with respect to every
    /// parameter and both inputs. Bias gradients are returned even in no-bias
    /// mode (they are the gradients the biases would receive at zero).
    pub fn fuse_backward_oracle(
        &self,
        h_text: &[f64],
        h_user: &[f64],
        upstream: &[f64],
    ) -> Result<FusionGradients, FusionError> {
        self.check_inputs(h_text, h_user)?;
        if upstream.len() != self.hidden_dim {
            return Err(FusionError::DimensionMismatch {
                expected: self.hidden_dim,
                text: upstream.len(),
                user: upstream.len(),
            });
        }
        let (d, dg) = (self.hidden_dim, self.gate_dim);
        let Trace { z, hidden, g, .. } = self.trace(h_text, h_user);

        // through the interpolation
        let d_pre_gate: Vec<f64> = (0..d)
            .map(|i| upstream[i] * (h_text[i] - h_user[i]) * g[i] * (1.0 - g[i]))
            .collect();
        let mut w2 = vec![0.0; d * dg];
        for i in 0..d {
            for j in 0..dg {
                w2[i * dg + j] = d_pre_gate[i] * hidden[j];
            }
        }
        let d_pre_hidden: Vec<f64> = (0..dg)
            .map(|j| {
                let back: f64 = (0..d).map(|i| self.w2[i * dg + j] * d_pre_gate[i]).sum();
                back * (1.0 - hidden[j] * hidden[j])
            })
            .collect();
        let mut w1 = vec![0.0; dg * 2 * d];
        for j in 0..dg {
            for k in 0..2 * d {
                w1[j * 2 * d + k] = d_pre_hidden[j] * z[k];
            }
        }
        let dz: Vec<f64> = (0..2 * d)
            .map(|k| {
                (0..dg)
                    .map(|j| self.w1[j * 2 * d + k] * d_pre_hidden[j])
                    .sum()
            })
            .collect();
        let grad_text = (0..d).map(|i| upstream[i] * g[i] + dz[i]).collect();
        let grad_user = (0..d)
            .map(|i| upstream[i] * (1.0 - g[i]) + dz[d + i])
            .collect();
        Ok(FusionGradients {
            w1,
            b1: d_pre_hidden,
            w2,
            b2: d_pre_gate,
            h_text: grad_text,
            h_user: grad_user,
        })
    }
}
