//! Batched tensor losses used for backpropagation.

use candle_core::{DType, Tensor, D};

use super::losses::LossKind;
use super::TrainingError;

/// Weighted-mean loss over `logits: [batch, 2]` and `labels: [batch]` (u32).
pub fn loss_tensor(
    logits: &Tensor,
    labels: &Tensor,
    weights: [f64; 2],
    kind: LossKind,
    gamma: f64,
) -> Result<Tensor, TrainingError> {
    let dtype = logits.dtype();
    let device = logits.device();
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = log_probs.gather(&labels.unsqueeze(1)?, 1)?.squeeze(1)?;
    let per_example = match kind {
        LossKind::WeightedCrossEntropy => picked.neg()?,
        LossKind::Focal if gamma == 0.0 => picked.neg()?,
        LossKind::Focal => {
            // (1 − p)^γ, with 1 − p kept away from 0 so the power's gradient stays finite
            let one_minus_p = (1.0 - picked.exp()?)?.clamp(1e-12, 1.0)?;
            one_minus_p.powf(gamma)?.mul(&picked.neg()?)?
        }
    };
    let w = Tensor::new(&weights, device)?.to_dtype(dtype)?;
    let w_y = w.index_select(labels, 0)?;
    let num = per_example.mul(&w_y)?.sum_all()?;
    let den = w_y.sum_all()?;
    Ok(num.div(&den)?)
}

pub fn scalar(t: &Tensor) -> Result<f64, TrainingError> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::losses::batch_loss;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn agrees_with_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(1..12);
            let logits: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)])
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let w = [rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0)];
            let flat: Vec<f64> = logits.iter().flatten().copied().collect();
            let t = Tensor::from_vec(flat, (n, 2), &Device::Cpu).unwrap();
            let y = Tensor::from_vec(
                labels.iter().map(|&l| l as u32).collect::<Vec<_>>(),
                n,
                &Device::Cpu,
            )
            .unwrap();
            for (kind, gamma) in [
                (LossKind::WeightedCrossEntropy, 0.0),
                (LossKind::Focal, 0.0),
                (LossKind::Focal, 2.0),
            ] {
                let got = scalar(&loss_tensor(&t, &y, w, kind, gamma).unwrap()).unwrap();
                let want = batch_loss(kind, &logits, &labels, w, gamma);
                assert!(
                    (got - want).abs() < 1e-12 * want.max(1.0),
                    "{kind:?} {got} {want}"
                );
            }
        }
    }
}
