//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reclaim::corpus::{stratified_split, Instance, Label, Language, SplitName, SplitRatios};
use reclaim::encoder::{to_rows, BundleOptions, EncoderBundle};
use reclaim::evaluation::{
    compute_metrics, significance_test, ConfusionMatrix, EvalReport, MetricRecord, PredictionRecord,
};
use reclaim::fusion::{DualEncoderModel, GatedFusion, GatedFusionParams};
use reclaim::synthetic;
use reclaim::training::stage::{train_stage_with, Example, StageData, StageModel, StageOptions};
use reclaim::training::{
    batch::loss_tensor, focal_loss, run_pipeline, weighted_cross_entropy, LossKind, RunConfig,
    Stage, StageSelection,
};
use reclaim::weak_labeler::{
    annotate_corpus, AnnotateOptions, AnnotationCache, LabelerError, MockLlmClient,
};

// Tolerances and budgets
const GRAD_FD_STEP: f64 = 1e-5;
const GRAD_MAX_REL_ERR: f64 = 1e-5;
const GRAD_DRAWS: usize = 100;
const GRAD_BUDGET: Duration = Duration::from_secs(30);
const ORACLE_CASES: usize = 1000;
const ORACLE_MAX_REL_ERR: f64 = 1e-6;
const SATURATION_TOL: f64 = 1e-4;
const LOSS_DRAWS: usize = 10_000;
const FOCAL_CE_TOL: f64 = 1e-9;
const LN2_TOL: f64 = 1e-12;
const E2E_BUDGET: Duration = Duration::from_secs(300);
const E2E_MIN_DUAL_F1: f64 = 0.90;
const E2E_BASELINE_SLACK: f64 = 0.02;
const WELCH_TOL: f64 = 1e-6;
const RECOMPUTE_TOL: f64 = 1e-12;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Relative error with the denominator floored at 1e-6, so entries that are
/// zero in exact arithmetic are compared absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| rel_err(*x, *y))
        .fold(0.0, f64::max)
}

/// Gradient-check relative error `‖a − b‖₂ / ‖a + b‖₂` over one gradient
/// tensor. Entry-wise ratios are dominated by finite-difference roundoff
/// (about 3e-11 absolute at this step) wherever a true gradient is ~1e-6.
fn tensor_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(a.iter().zip(b).map(|(x, y)| x - y).collect());
    let sum = norm(a.iter().zip(b).map(|(x, y)| x + y).collect());
    if diff == 0.0 {
        0.0
    } else {
        diff / sum
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..=scale)).collect()
}

fn row(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec(), (1, v.len()), &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1()
        .unwrap()
}

/// `⟨upstream, h_fused⟩` through the production layer.
fn production_objective(p: &GatedFusionParams, t: &[f64], u: &[f64], up: &[f64]) -> f64 {
    let layer = GatedFusion::from_params(p, DType::F64, &Device::Cpu).unwrap();
    let (_, fused) = layer.forward(&row(t), &row(u)).unwrap();
    flat(&fused).iter().zip(up).map(|(a, b)| a * b).sum()
}

/// Autograd gradients of the production layer, in oracle field order.
fn production_gradients(
    p: &GatedFusionParams,
    t: &[f64],
    u: &[f64],
    up: &[f64],
) -> Vec<(&'static str, Vec<f64>)> {
    let layer = GatedFusion::from_params(p, DType::F64, &Device::Cpu).unwrap();
    let tv = Var::from_tensor(&row(t)).unwrap();
    let uv = Var::from_tensor(&row(u)).unwrap();
    let (_, fused) = layer.forward(tv.as_tensor(), uv.as_tensor()).unwrap();
    let objective = fused.mul(&row(up)).unwrap().sum_all().unwrap();
    let grads = objective.backward().unwrap();
    let get = |t: &Tensor| flat(grads.get(t).expect("gradient present"));
    let param = |name: &str| get(layer.params().get(name).unwrap().as_tensor());
    let mut out = vec![("w1", param("fusion.w1")), ("w2", param("fusion.w2"))];
    if p.has_bias() {
        out.push(("b1", param("fusion.b1")));
        out.push(("b2", param("fusion.b2")));
    }
    out.push(("h_text", get(tv.as_tensor())));
    out.push(("h_user", get(uv.as_tensor())));
    out
}

fn central_difference(
    p: &GatedFusionParams,
    t: &[f64],
    u: &[f64],
    up: &[f64],
    field: &str,
) -> Vec<f64> {
    let h = GRAD_FD_STEP;
    let n = match field {
        "w1" => p.w1.len(),
        "w2" => p.w2.len(),
        "b1" => p.gate_dim,
        "b2" => p.hidden_dim,
        _ => p.hidden_dim,
    };
    (0..n)
        .map(|i| {
            let eval = |delta: f64| {
                let mut q = p.clone();
                let (mut t2, mut u2) = (t.to_vec(), u.to_vec());
                match field {
                    "w1" => q.w1[i] += delta,
                    "w2" => q.w2[i] += delta,
                    "b1" => q.b1.as_mut().unwrap()[i] += delta,
                    "b2" => q.b2.as_mut().unwrap()[i] += delta,
                    "h_text" => t2[i] += delta,
                    _ => u2[i] += delta,
                }
                production_objective(&q, &t2, &u2, up)
            };
            (eval(h) - eval(-h)) / (2.0 * h)
        })
        .collect()
}

fn fusion_gradient_check() -> Outcome {
    let start = Instant::now();
    let dims = [4usize, 8, 16];
    let grid: Vec<(usize, usize)> = dims
        .iter()
        .flat_map(|&d| dims.iter().map(move |&g| (d, g)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6AD);
    let mut worst = 0.0f64;
    let mut worst_entry = 0.0f64;
    for draw in 0..GRAD_DRAWS {
        let (d, dg) = grid[draw % grid.len()];
        let bias = draw % 2 == 0;
        let p = GatedFusionParams::random(d, dg, bias, 1.0, &mut rng);
        let (t, u, up) = (
            uniform(&mut rng, d, 1.0),
            uniform(&mut rng, d, 1.0),
            uniform(&mut rng, d, 1.0),
        );
        for (field, analytic) in production_gradients(&p, &t, &u, &up) {
            let numeric = central_difference(&p, &t, &u, &up, field);
            worst = worst.max(tensor_rel_err(&analytic, &numeric));
            worst_entry = worst_entry.max(max_rel(&analytic, &numeric));
        }
    }
    let elapsed = start.elapsed();
    check(
        worst < GRAD_MAX_REL_ERR && elapsed < GRAD_BUDGET,
        format!(
            "max per-tensor rel err {worst:.2e} (< {GRAD_MAX_REL_ERR:e}; worst single entry {worst_entry:.1e}) over {GRAD_DRAWS} draws on d, d_g in {{4, 8, 16}}; {:.1}s (< {}s)",
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

struct RandomCase {
    p: GatedFusionParams,
    t: Vec<f64>,
    u: Vec<f64>,
    up: Vec<f64>,
}

fn random_cases(n: usize, seed: u64) -> Vec<RandomCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let d = [4, 8, 16][i % 3];
            let dg = [4, 8, 16][(i / 3) % 3];
            let scale = [0.1, 1.0, 3.0][(i / 9) % 3];
            RandomCase {
                p: GatedFusionParams::random(d, dg, i % 2 == 0, scale, &mut rng),
                t: uniform(&mut rng, d, 2.0),
                u: uniform(&mut rng, d, 2.0),
                up: uniform(&mut rng, d, 1.0),
            }
        })
        .collect()
}

fn fusion_oracle_equivalence() -> Outcome {
    let mut forward = 0.0f64;
    let mut backward = 0.0f64;
    for c in random_cases(ORACLE_CASES, 0x0AC1E) {
        let oracle = c.p.fuse(&c.t, &c.u).unwrap();
        let layer = GatedFusion::from_params(&c.p, DType::F64, &Device::Cpu).unwrap();
        let (g, fused) = layer.forward(&row(&c.t), &row(&c.u)).unwrap();
        forward = forward
            .max(max_rel(&flat(&g), &oracle.g))
            .max(max_rel(&flat(&fused), &oracle.h_fused));

        let grads = c.p.fuse_backward_oracle(&c.t, &c.u, &c.up).unwrap();
        for (field, got) in production_gradients(&c.p, &c.t, &c.u, &c.up) {
            let want = match field {
                "w1" => &grads.w1,
                "w2" => &grads.w2,
                "b1" => &grads.b1,
                "b2" => &grads.b2,
                "h_text" => &grads.h_text,
                _ => &grads.h_user,
            };
            backward = backward.max(max_rel(&got, want));
        }
    }
    check(
        forward < ORACLE_MAX_REL_ERR && backward < ORACLE_MAX_REL_ERR,
        format!(
            "{ORACLE_CASES} cases: forward max rel err {forward:.2e}, backward {backward:.2e} (< {ORACLE_MAX_REL_ERR:e})"
        ),
    )
}

fn tiny_towers(dtype: DType) -> (EncoderBundle, EncoderBundle) {
    let texts = [
        "io amo essere frocio viva i finocchi",
        "cogito ergo cum he/him 🏳️‍🌈",
    ];
    let opts = |seed| BundleOptions {
        max_sequence_length: 32,
        seed,
        dtype,
        ..Default::default()
    };
    (
        EncoderBundle::from_identifier("tiny-bert:L2-H32-A2-I64", texts, &opts(1)).unwrap(),
        EncoderBundle::from_identifier("tiny-bert:L2-H32-A2-I64", texts, &opts(2)).unwrap(),
    )
}

fn gate_invariants() -> Outcome {
    let mut violations = 0;
    let cases = random_cases(ORACLE_CASES, 0x6A7E);
    for c in &cases {
        let oracle = c.p.fuse(&c.t, &c.u).unwrap();
        let layer = GatedFusion::from_params(&c.p, DType::F64, &Device::Cpu).unwrap();
        let (g, fused) = layer.forward(&row(&c.t), &row(&c.u)).unwrap();
        for (gs, hs) in [
            (flat(&g), flat(&fused)),
            (oracle.g.clone(), oracle.h_fused.clone()),
        ] {
            for i in 0..c.t.len() {
                let (lo, hi) = (c.t[i].min(c.u[i]), c.t[i].max(c.u[i]));
                if !(gs[i] > 0.0 && gs[i] < 1.0 && lo <= hs[i] && hs[i] <= hi) {
                    violations += 1;
                }
            }
        }
    }

    // saturation: W = 0, b2 = ±40 drives g to 1 or 0
    let (text, user) = tiny_towers(DType::F64);
    let mut worst = 0.0f64;
    for (b2, use_text) in [(40.0, true), (-40.0, false)] {
        let mut p = GatedFusionParams::zeros(32, 32, true);
        p.b2 = Some(vec![b2; 32]);
        let model = DualEncoderModel::new(text.clone(), user.clone(), None, true, 5)
            .unwrap()
            .with_fusion(GatedFusion::from_params(&p, DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        for (tweet, bio) in [
            ("io amo essere frocio", "he/him"),
            ("viva i finocchi", ""),
            ("ergo", "🏳️‍🌈 cogito"),
        ] {
            let input = model.build_input(tweet, bio);
            let logits = model.dual_forward(&input).unwrap();
            let (tower, pair) = if use_text {
                (model.text_encoder(), &input.text)
            } else {
                (model.user_encoder(), &input.user)
            };
            let h = row(&tower.encode(pair).unwrap());
            let want = to_rows(&model.head().forward(&h).unwrap())
                .unwrap()
                .remove(0);
            worst = worst
                .max((logits[0] - want[0]).abs())
                .max((logits[1] - want[1]).abs());
        }
    }
    check(
        violations == 0 && worst < SATURATION_TOL,
        format!(
            "{} random cases x 2 implementations: {violations} range/convexity violations; saturated gate vs head(h_text)/head(h_user) max |diff| {worst:.2e} (< {SATURATION_TOL:e})",
            cases.len()
        ),
    )
}

fn no_bias_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE0);
    let mut worst_ulps = 0.0f64;
    let mut gate_exact = true;
    for i in 0..300 {
        let d = [4, 8, 16][i % 3];
        // zero pre-activation two ways: W2 = 0, or W1 = 0 (tanh(0) = 0)
        let mut p = GatedFusionParams::random(d, d, false, 1.0, &mut rng);
        if i % 2 == 0 {
            p.w2.iter_mut().for_each(|w| *w = 0.0);
        } else {
            p.w1.iter_mut().for_each(|w| *w = 0.0);
        }
        let (t, u) = (uniform(&mut rng, d, 5.0), uniform(&mut rng, d, 5.0));
        let oracle = p.fuse(&t, &u).unwrap();
        let layer = GatedFusion::from_params(&p, DType::F64, &Device::Cpu).unwrap();
        let (g, fused) = layer.forward(&row(&t), &row(&u)).unwrap();
        for (gs, hs) in [(flat(&g), flat(&fused)), (oracle.g, oracle.h_fused)] {
            gate_exact &= gs.iter().all(|&x| x == 0.5);
            for k in 0..d {
                let mid = (t[k] + u[k]) / 2.0;
                let ulp = f64::EPSILON * t[k].abs().max(u[k].abs());
                worst_ulps = worst_ulps.max((hs[k] - mid).abs() / ulp);
            }
        }
    }
    check(
        gate_exact && worst_ulps <= 1.0,
        format!("g == 0.5 exactly: {gate_exact}; h_fused vs midpoint within {worst_ulps:.2} x eps x max|h| (<= 1)"),
    )
}

fn corpus_with(counts: [usize; 2], language: Language) -> Vec<Instance> {
    (0..counts[0] + counts[1])
        .map(|i| {
            let label = if i < counts[0] {
                Label::NonReclamatory
            } else {
                Label::Reclamatory
            };
            Instance::new(format!("{i:05}"), format!("tweet {i}"), "", label, language)
        })
        .collect()
}

fn split_stratification() -> Outcome {
    let mut worst = 0.0f64;
    let mut deterministic = true;
    for (counts, language) in [([879, 207], Language::It), ([743, 133], Language::Es)] {
        let corpus = corpus_with(counts, language);
        let total = corpus.len() as f64;
        for seed in 0..20u64 {
            let split = stratified_split(&corpus, SplitRatios::default(), seed).unwrap();
            for name in [SplitName::Train, SplitName::Validation, SplitName::Test] {
                let part = split.get(name);
                for (c, &n) in counts.iter().enumerate() {
                    let got = part.iter().filter(|i| i.label.index() == c).count() as f64;
                    let want = part.len() as f64 * n as f64 / total;
                    worst = worst.max((got - want).abs());
                }
            }
            let again = stratified_split(&corpus, SplitRatios::default(), seed).unwrap();
            deterministic &=
                split.manifest(language).to_json() == again.manifest(language).to_json();
        }
    }
    check(
        worst <= 1.0 && deterministic,
        format!("879/207 and 743/133 over 20 seeds: max deviation {worst:.3} instances (<= 1); same seed, same manifest: {deterministic}"),
    )
}

fn loss_equivalences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1055);
    let mut worst = 0.0f64;
    let mut logits = Vec::with_capacity(LOSS_DRAWS);
    let mut labels = Vec::with_capacity(LOSS_DRAWS);
    for _ in 0..LOSS_DRAWS {
        let l = [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)];
        let y = rng.gen_range(0..2usize);
        let w = [rng.gen_range(0.05..5.0), rng.gen_range(0.05..5.0)];
        worst = worst.max((focal_loss(l, y, w, 0.0) - weighted_cross_entropy(l, y, w)).abs());
        logits.push(l);
        labels.push(y);
    }
    // batched tensor path
    let t = Tensor::from_vec(
        logits.iter().flatten().copied().collect::<Vec<f64>>(),
        (LOSS_DRAWS, 2),
        &Device::Cpu,
    )
    .unwrap();
    let y = Tensor::from_vec(
        labels.iter().map(|&l| l as u32).collect::<Vec<_>>(),
        LOSS_DRAWS,
        &Device::Cpu,
    )
    .unwrap();
    let w = [0.6177, 2.6232];
    let ce = loss_tensor(&t, &y, w, LossKind::WeightedCrossEntropy, 0.0).unwrap();
    let fl = loss_tensor(&t, &y, w, LossKind::Focal, 0.0).unwrap();
    let batched = (ce.to_scalar::<f64>().unwrap() - fl.to_scalar::<f64>().unwrap()).abs();
    let ln2 = (weighted_cross_entropy([0.0, 0.0], 0, [1.0, 1.0]) - std::f64::consts::LN_2)
        .abs()
        .max((weighted_cross_entropy([0.0, 0.0], 1, [1.0, 1.0]) - std::f64::consts::LN_2).abs());
    check(
        worst < FOCAL_CE_TOL && batched < FOCAL_CE_TOL && ln2 < LN2_TOL,
        format!(
            "{LOSS_DRAWS} draws: |focal(0) - CE| max {worst:.1e}, batched {batched:.1e} (< {FOCAL_CE_TOL:e}); |CE(0,0) - ln 2| {ln2:.1e} (< {LN2_TOL:e})"
        ),
    )
}

fn lpft_freeze_contract() -> Outcome {
    let (text, user) = tiny_towers(DType::F32);
    let model = DualEncoderModel::new(text, user, None, true, 3).unwrap();
    let data = StageData {
        train: (0..16)
            .map(|i| Example {
                id: i.to_string(),
                tweet: if i % 2 == 0 {
                    "io amo essere frocio".into()
                } else {
                    "viva i finocchi".into()
                },
                bio: if i % 2 == 0 {
                    "he/him 🏳️‍🌈".into()
                } else {
                    "cogito".into()
                },
                label: i % 2,
            })
            .collect(),
        validation: vec![],
        dropped: 0,
    };
    let mut options = StageOptions::from_config(&RunConfig::default(), Stage::FusionProbe, 1);
    options.learning_rate = 1e-2;
    options.epochs = 2;
    let before = model.encoder_fingerprint().unwrap();
    let probe_before = model.fusion().params().fingerprint().unwrap();
    train_stage_with(
        StageModel::Dual(&model),
        &data,
        &options,
        Stage::FusionProbe,
    )
    .unwrap();
    let after_probe = model.encoder_fingerprint().unwrap();
    let probe_moved = model.fusion().params().fingerprint().unwrap() != probe_before;

    options.learning_rate = RunConfig::default().joint_finetune_learning_rate;
    options.epochs = 1;
    options.max_steps = Some(1);
    train_stage_with(
        StageModel::Dual(&model),
        &data,
        &options,
        Stage::JointFinetune,
    )
    .unwrap();
    let after_joint = model.encoder_fingerprint().unwrap();
    check(
        before == after_probe && probe_moved && after_joint != after_probe,
        format!(
            "encoders unchanged across probe: {}; gate trained: {probe_moved}; encoders changed after one joint step: {}",
            before == after_probe,
            after_joint != after_probe
        ),
    )
}

fn end_to_end_synthetic() -> Outcome {
    let corpus = synthetic::generate(400, Language::It, 7);
    let split = stratified_split(&corpus.instances, SplitRatios::default(), 7).unwrap();
    let config = synthetic::tiny_run_config(vec![1, 2, 3]);
    let start = Instant::now();
    let runs = run_pipeline(
        &config,
        &split,
        &corpus.proxies,
        Language::It,
        None,
        StageSelection::all(),
        false,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let mut ok = elapsed < E2E_BUDGET;
    let mut lines = Vec::new();
    for (seed, run) in runs {
        match run {
            Ok(run) => {
                let base = run.baseline_validation.map_or(f64::NAN, |m| m.macro_f1);
                let dual = run.dual_validation.map_or(f64::NAN, |m| m.macro_f1);
                ok &= dual >= E2E_MIN_DUAL_F1 && dual >= base - E2E_BASELINE_SLACK;
                lines.push(format!("seed {seed}: dual {dual:.3} / baseline {base:.3}"));
            }
            Err(e) => {
                ok = false;
                lines.push(format!("seed {seed}: {e}"));
            }
        }
    }
    check(
        ok,
        format!(
            "{}; {:.1}s (< {}s); need dual >= {E2E_MIN_DUAL_F1} and >= baseline - {E2E_BASELINE_SLACK}",
            lines.join(", "),
            elapsed.as_secs_f64(),
            E2E_BUDGET.as_secs()
        ),
    )
}

fn weak_labeler_contract() -> Outcome {
    let corpus = synthetic::generate(1000, Language::It, 11).instances;
    let options = AnnotateOptions {
        backoff: Duration::ZERO,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let labels = |o: &reclaim::weak_labeler::AnnotationOutcome| {
        o.signals
            .iter()
            .map(|s| (s.instance_id.clone(), s.affiliated, s.raw_response.clone()))
            .collect::<Vec<_>>()
    };

    let cold_a = {
        let mut cache = AnnotationCache::open(dir.path().join("a.jsonl")).unwrap();
        annotate_corpus(&corpus, &MockLlmClient::keyword(), &mut cache, &options).unwrap()
    };
    let cold_b = {
        let mut cache = AnnotationCache::open(dir.path().join("b.jsonl")).unwrap();
        annotate_corpus(&corpus, &MockLlmClient::keyword(), &mut cache, &options).unwrap()
    };
    let client = MockLlmClient::keyword();
    let warm = {
        let mut cache = AnnotationCache::open(dir.path().join("a.jsonl")).unwrap();
        annotate_corpus(&corpus, &client, &mut cache, &options).unwrap()
    };
    let deterministic = labels(&cold_a) == labels(&cold_b) && cold_a.signals.len() == corpus.len();
    let cached = client.calls() == 0 && warm.network_calls == 0 && labels(&warm) == labels(&cold_a);

    let adversarial: Vec<String> =
        serde_json::from_str(include_str!("fixtures/adversarial_replies.json")).unwrap();
    let mut silent = Vec::new();
    for reply in &adversarial {
        let direct = matches!(
            reclaim::weak_labeler::parse_response(reply),
            Err(LabelerError::ParseFailure { .. })
        );
        let fixed = reply.clone();
        let client = MockLlmClient::with_rule("adversarial", move |_| fixed.clone());
        let outcome = annotate_corpus(
            &corpus[..1],
            &client,
            &mut AnnotationCache::in_memory(),
            &options,
        )
        .unwrap();
        if !direct || !outcome.signals.is_empty() || outcome.unresolved.len() != 1 {
            silent.push(reply.clone());
        }
    }
    check(
        deterministic && cached && silent.is_empty(),
        format!(
            "1000 instances: deterministic {deterministic}; warm rerun made {} calls; {} adversarial replies, {} turned into labels",
            client.calls(),
            adversarial.len(),
            silent.len()
        ),
    )
}

fn significance_oracle() -> Outcome {
    #[derive(serde::Deserialize)]
    struct Case {
        baseline: Vec<f64>,
        candidate: Vec<f64>,
        p_value: f64,
    }
    #[derive(serde::Deserialize)]
    struct Doc {
        cases: Vec<Case>,
    }
    let doc: Doc = serde_json::from_str(include_str!("fixtures/welch_reference.json")).unwrap();
    let worst = doc
        .cases
        .iter()
        .map(|c| (significance_test(&c.baseline, &c.candidate).unwrap() - c.p_value).abs())
        .fold(0.0, f64::max);
    let same = [0.8123, 0.7931, 0.8264, 0.8012, 0.7899];
    let p_same = significance_test(&same, &same).unwrap();
    check(
        doc.cases.len() == 20 && worst < WELCH_TOL && p_same == 1.0,
        format!("{} reference pairs: max |dp| {worst:.2e} (< {WELCH_TOL:e}); identical samples p = {p_same}", doc.cases.len()),
    )
}

fn metric_recomputability() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3E7);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        // per-seed predictions → report → JSON → recompute from stored matrices
        let per_seed: Vec<(u64, Vec<PredictionRecord>)> = (0..5u64)
            .map(|seed| {
                let n = rng.gen_range(5..300);
                let records = (0..n)
                    .map(|i| {
                        let gold = if rng.gen_bool(0.2) {
                            Label::Reclamatory
                        } else {
                            Label::NonReclamatory
                        };
                        PredictionRecord::new(format!("{i}"), gold, rng.gen::<f64>())
                    })
                    .collect();
                (seed, records)
            })
            .collect();
        let report =
            EvalReport::from_predictions("m", Language::It, SplitName::Test, &per_seed).unwrap();
        let stored: EvalReport =
            serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
        for s in &stored.per_seed {
            let fresh = MetricRecord::from_confusion(s.metrics.confusion).unwrap();
            for (a, b) in [
                (s.metrics.macro_f1, fresh.macro_f1),
                (s.metrics.macro_precision, fresh.macro_precision),
                (s.metrics.macro_recall, fresh.macro_recall),
            ] {
                worst = worst.max((a - b).abs());
            }
        }
    }
    // hand tally: TP 3, FN 1, FP 2, TN 4
    let pairs = [
        (1usize, 1usize),
        (1, 1),
        (1, 1),
        (1, 0),
        (0, 1),
        (0, 1),
        (0, 0),
        (0, 0),
        (0, 0),
        (0, 0),
    ];
    let m = compute_metrics(&pairs).unwrap();
    let hand = m.confusion == ConfusionMatrix([[4, 2], [1, 3]])
        && m.accuracy == 7.0 / 10.0
        && m.macro_precision == 7.0 / 10.0
        && m.macro_recall == 17.0 / 24.0
        && m.macro_f1 == 23.0 / 33.0;
    check(
        worst <= RECOMPUTE_TOL && hand,
        format!("1000 stored seed reports: max |stored - recomputed| {worst:.1e} (<= {RECOMPUTE_TOL:e}); 10-item hand case exact: {hand}"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("fusion gradient check", fusion_gradient_check),
        ("fusion oracle equivalence", fusion_oracle_equivalence),
        ("gate invariants", gate_invariants),
        ("no-bias gating exactness", no_bias_exactness),
        ("split stratification", split_stratification),
        ("loss equivalences", loss_equivalences),
        ("LPFT freeze contract", lpft_freeze_contract),
        ("end-to-end synthetic run", end_to_end_synthetic),
        ("weak-labeler contract", weak_labeler_contract),
        ("significance test", significance_oracle),
        ("metric recomputability", metric_recomputability),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in criteria {
        if filter.as_ref().is_some_and(|f| !name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let result = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("\nacceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
