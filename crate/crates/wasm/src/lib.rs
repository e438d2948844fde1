//! Three explorers for the static demo page. Each returns a JSON string; on
//! bad input the object has a single `error` field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reclaim::corpus::{stratified_split, Instance, Label, Language, SplitName, SplitRatios};
use reclaim::fusion::GatedFusionParams;
use reclaim::training::{focal_loss, weighted_cross_entropy};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const MAX_DIM: usize = 64;
const MAX_POINTS: usize = 2000;
const MAX_CORPUS: usize = 20_000;

fn respond(result: Result<Value, String>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

/// Random gate at width `d`, evaluated on random representations. `gate_bias`
/// is added to every output bias, pushing the gate towards the text tower
/// (positive) or the user tower (negative).
pub fn gate(
    d: usize,
    gate_dim: usize,
    seed: u64,
    weight_scale: f64,
    gate_bias: f64,
) -> Result<Value, String> {
    if !(1..=MAX_DIM).contains(&d) || !(1..=MAX_DIM).contains(&gate_dim) {
        return Err(format!("dimensions must be between 1 and {MAX_DIM}"));
    }
    if !(weight_scale.is_finite() && weight_scale >= 0.0) || !gate_bias.is_finite() {
        return Err("weight scale must be non-negative and the bias finite".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = GatedFusionParams::random(d, gate_dim, true, weight_scale, &mut rng);
    if let Some(b2) = params.b2.as_mut() {
        b2.iter_mut().for_each(|b| *b += gate_bias);
    }
    let h_text: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let h_user: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let state = params.fuse(&h_text, &h_user).map_err(|e| e.to_string())?;
    let mean_gate = state.g.iter().sum::<f64>() / d as f64;
    Ok(json!({
        "h_text": h_text,
        "h_user": h_user,
        "g": state.g,
        "h_fused": state.h_fused,
        "mean_gate": mean_gate,
    }))
}

/// Loss against the probability `p` assigned to the true class, for weighted
/// cross-entropy and focal loss with the same class weight.
pub fn loss_curves(gamma: f64, class_weight: f64, points: usize) -> Result<Value, String> {
    if !(gamma.is_finite() && gamma >= 0.0) || !(class_weight.is_finite() && class_weight > 0.0) {
        return Err("gamma must be >= 0 and the class weight > 0".into());
    }
    if !(2..=MAX_POINTS).contains(&points) {
        return Err(format!("points must be between 2 and {MAX_POINTS}"));
    }
    let weights = [1.0, class_weight];
    let mut p = Vec::with_capacity(points);
    let mut ce = Vec::with_capacity(points);
    let mut focal = Vec::with_capacity(points);
    for i in 0..points {
        // open interval, so both ends stay finite
        let prob = (i as f64 + 0.5) / points as f64;
        let logits = [0.0, (prob / (1.0 - prob)).ln()];
        p.push(prob);
        ce.push(weighted_cross_entropy(logits, 1, weights));
        focal.push(focal_loss(logits, 1, weights, gamma));
    }
    Ok(json!({ "p": p, "cross_entropy": ce, "focal": focal }))
}

/// Splits a corpus of `negatives` + `positives` placeholder instances and
/// reports per-split class counts next to their proportional targets.
pub fn split(
    negatives: usize,
    positives: usize,
    train: f64,
    validation: f64,
    seed: u64,
) -> Result<Value, String> {
    if negatives + positives > MAX_CORPUS {
        return Err(format!("at most {MAX_CORPUS} instances"));
    }
    let ratios =
        SplitRatios::new(train, validation, 1.0 - train - validation).map_err(|e| e.to_string())?;
    let corpus: Vec<Instance> = (0..negatives + positives)
        .map(|i| {
            let label = if i < negatives {
                Label::NonReclamatory
            } else {
                Label::Reclamatory
            };
            Instance::new(format!("{i}"), "", "", label, Language::It)
        })
        .collect();
    let split = stratified_split(&corpus, ratios, seed).map_err(|e| e.to_string())?;
    let total = corpus.len() as f64;
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for name in [SplitName::Train, SplitName::Validation, SplitName::Test] {
        let part = split.get(name);
        let pos = part
            .iter()
            .filter(|i| i.label == Label::Reclamatory)
            .count();
        let target = part.len() as f64 * positives as f64 / total;
        worst = worst.max((pos as f64 - target).abs());
        parts.push(json!({
            "name": name.to_string(),
            "size": part.len(),
            "negatives": part.len() - pos,
            "positives": pos,
            "target_positives": target,
            "first_ids": part.iter().take(8).map(|i| i.id.clone()).collect::<Vec<_>>(),
        }));
    }
    Ok(json!({ "splits": parts, "max_deviation": worst }))
}

#[wasm_bindgen]
pub fn gate_explorer(
    d: usize,
    gate_dim: usize,
    seed: u32,
    weight_scale: f64,
    gate_bias: f64,
) -> String {
    respond(gate(d, gate_dim, seed as u64, weight_scale, gate_bias))
}

#[wasm_bindgen]
pub fn loss_explorer(gamma: f64, class_weight: f64, points: usize) -> String {
    respond(loss_curves(gamma, class_weight, points))
}

#[wasm_bindgen]
pub fn split_explorer(
    negatives: usize,
    positives: usize,
    train: f64,
    validation: f64,
    seed: u32,
) -> String {
    respond(split(negatives, positives, train, validation, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn floats(v: &Value) -> Vec<f64> {
        v.as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect()
    }

    #[test]
    fn gate_output_is_convex_and_bias_moves_it() {
        let v = gate(8, 8, 1, 1.0, 0.0).unwrap();
        let (t, u, g, h) = (
            floats(&v["h_text"]),
            floats(&v["h_user"]),
            floats(&v["g"]),
            floats(&v["h_fused"]),
        );
        for i in 0..8 {
            assert!(g[i] > 0.0 && g[i] < 1.0);
            assert!(t[i].min(u[i]) <= h[i] && h[i] <= t[i].max(u[i]));
        }
        let high = gate(8, 8, 1, 1.0, 30.0).unwrap();
        let low = gate(8, 8, 1, 1.0, -30.0).unwrap();
        assert!(high["mean_gate"].as_f64().unwrap() > 0.999);
        assert!(low["mean_gate"].as_f64().unwrap() < 0.001);
        // zero weights: tanh(0) = 0, so the gate is sigmoid(b2) = 0.5
        let flat = gate(4, 4, 3, 0.0, 0.0).unwrap();
        assert!(floats(&flat["g"]).iter().all(|&x| x == 0.5));
    }

    #[test]
    fn focal_with_zero_gamma_is_cross_entropy() {
        let v = loss_curves(0.0, 2.5, 50).unwrap();
        assert_eq!(floats(&v["cross_entropy"]), floats(&v["focal"]));
        let v = loss_curves(2.0, 1.0, 4).unwrap();
        // p = 0.625: CE = -ln p, focal = (1 - p)^2 CE
        let ce = floats(&v["cross_entropy"])[2];
        assert!((ce + 0.625f64.ln()).abs() < 1e-12);
        assert!((floats(&v["focal"])[2] - 0.375f64.powi(2) * ce).abs() < 1e-12);
    }

    #[test]
    fn split_matches_proportions() {
        let v = split(879, 207, 0.7, 0.15, 42).unwrap();
        assert!(v["max_deviation"].as_f64().unwrap() <= 1.0);
        let sizes: Vec<u64> = v["splits"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| s["size"].as_u64().unwrap())
            .collect();
        assert_eq!(sizes.iter().sum::<u64>(), 1086);
    }

    #[test]
    fn bad_input_becomes_an_error_object() {
        let v: Value = serde_json::from_str(&split_explorer(10, 10, 0.9, 0.3, 1)).unwrap();
        assert!(v["error"].is_string());
        let v: Value = serde_json::from_str(&gate_explorer(0, 4, 1, 1.0, 0.0)).unwrap();
        assert!(v["error"].is_string());
        let v: Value = serde_json::from_str(&loss_explorer(-1.0, 1.0, 10)).unwrap();
        assert!(v["error"].is_string());
    }
}
