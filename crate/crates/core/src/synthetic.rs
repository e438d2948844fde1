//! Planted-signal corpora for end-to-end checks.
//!
//! Every tweet contains a slur. An instance is reclamatory exactly when the
//! bio carries the community marker *and* the tweet carries a self-affirming
//! keyword, so the bio is genuinely informative. The proxy affiliation label
//! is the marker itself.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Instance, Label, Language};
use crate::training::{RunConfig, StageEpochs};
use crate::weak_labeler::{Affiliation, ProxyRecord};

pub const SYNTHETIC_MODEL: &str = "synthetic-oracle";

struct Lexicon {
    slurs: &'static [&'static str],
    affirming: &'static [&'static str],
    hostile: &'static [&'static str],
    filler: &'static [&'static str],
    marker: &'static [&'static str],
    bio_filler: &'static [&'static str],
}

const IT: Lexicon = Lexicon {
    slurs: &["frocio", "finocchio", "ricchione"],
    affirming: &["orgoglioso", "fiero"],
    hostile: &["schifoso", "vergogna"],
    filler: &[
        "oggi", "sempre", "che", "giornata", "amici", "sera", "davvero", "tutti",
    ],
    marker: &["🏳️‍🌈", "lgbtq+"],
    bio_filler: &[
        "calcio", "musica", "viaggi", "caffè", "studente", "milano", "libri", "cinema",
    ],
};

const ES: Lexicon = Lexicon {
    slurs: &["maricón", "marica", "joto"],
    affirming: &["orgulloso", "feliz"],
    hostile: &["asco", "vergüenza"],
    filler: &[
        "hoy", "siempre", "que", "día", "amigos", "noche", "verdad", "todos",
    ],
    marker: &["🏳️‍🌈", "lgbtq+"],
    bio_filler: &[
        "fútbol",
        "música",
        "viajes",
        "café",
        "estudiante",
        "madrid",
        "libros",
        "cine",
    ],
};

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub instances: Vec<Instance>,
    pub proxies: Vec<ProxyRecord>,
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words.choose(rng).expect("non-empty word list")
}

/// `n` instances; marker and keyword are independent fair coins, so about a
/// quarter of the corpus is reclamatory.
pub fn generate(n: usize, language: Language, seed: u64) -> SyntheticCorpus {
    let lex = match language {
        Language::It => &IT,
        Language::Es => &ES,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(n);
    let mut proxies = Vec::with_capacity(n);
    for i in 0..n {
        let marked = rng.gen_bool(0.5);
        let affirming = rng.gen_bool(0.5);
        let mut tweet: Vec<&str> = (0..rng.gen_range(2..5))
            .map(|_| pick(&mut rng, lex.filler))
            .collect();
        tweet.push(pick(&mut rng, lex.slurs));
        tweet.push(pick(
            &mut rng,
            if affirming {
                lex.affirming
            } else {
                lex.hostile
            },
        ));
        tweet.shuffle(&mut rng);
        let mut bio: Vec<&str> = (0..rng.gen_range(1..4))
            .map(|_| pick(&mut rng, lex.bio_filler))
            .collect();
        if marked {
            bio.push(pick(&mut rng, lex.marker));
            bio.shuffle(&mut rng);
        }
        let label = if marked && affirming {
            Label::Reclamatory
        } else {
            Label::NonReclamatory
        };
        let id = format!("syn-{i:04}");
        let affiliated = if marked {
            Affiliation::Affiliated
        } else {
            Affiliation::NotAffiliated
        };
        proxies.push(ProxyRecord {
            instance_id: id.clone(),
            affiliated,
            model_identifier: SYNTHETIC_MODEL.to_string(),
        });
        instances.push(Instance::new(
            id,
            tweet.join(" "),
            bio.join(" "),
            label,
            language,
        ));
    }
    SyntheticCorpus { instances, proxies }
}

/// Backbone used for planted-signal runs: 2 layers, d = 32, randomly initialised.
pub const TINY_BACKBONE: &str = "tiny-bert:L2-H32-A2-I64";

/// Run configuration for planted-signal corpora. Encoders trained from a
/// random start need far larger steps than fine-tuning a pretrained
/// checkpoint, so the rates are raised (keeping joint < stage).
pub fn tiny_run_config(seeds: Vec<u64>) -> RunConfig {
    RunConfig {
        learning_rate: 3e-3,
        joint_finetune_learning_rate: 5e-4,
        seeds,
        epochs_per_stage: StageEpochs {
            baseline_text: 15,
            user_proxy: 10,
            fusion_probe: 10,
            joint_finetune: 5,
        },
        backbone: Some(TINY_BACKBONE.into()),
        max_sequence_length: 32,
        ..RunConfig::default()
    }
}
