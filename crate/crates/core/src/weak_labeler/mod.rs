//! LLM-assisted proxy labels for user affiliation.
//!
//! Each instance is rendered into the annotation prompt for its language, sent
//! to an [`LlmClient`], and the reply is parsed strictly: only a lone `0` or
//! `1` is accepted. Non-conforming replies are retried with a clarifying
//! suffix; instances that never conform are reported as unresolved and carry
//! no label. Responses are cached by prompt hash so reruns are free.

mod cache;
mod client;
mod prompt;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Instance, Language};

pub use cache::{prompt_hash, AnnotationCache, CacheRecord};
pub use client::{
    rendered_instance, ClientError, LlmClient, LlmSettings, MockLlmClient, MOCK_AFFILIATION_CUES,
};
pub use prompt::{render_pair, render_prompt, split_rendered_pair, PromptTemplate, LGBTQ_FLAG};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Affiliation {
    NotAffiliated = 0,
    Affiliated = 1,
}

impl Affiliation {
    pub fn index(self) -> usize {
        self as usize
    }
}

impl From<Affiliation> for u8 {
    fn from(a: Affiliation) -> u8 {
        a as u8
    }
}

impl TryFrom<u8> for Affiliation {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            0 => Ok(Affiliation::NotAffiliated),
            1 => Ok(Affiliation::Affiliated),
            v => Err(format!("affiliation out of range: {v}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxySignal {
    pub instance_id: String,
    pub affiliated: Affiliation,
    pub raw_response: String,
    pub prompt_language: Language,
    pub model_identifier: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Error)]
pub enum LabelerError {
    #[error("prompt language {template} does not match instance language {instance}")]
    LanguageMismatch {
        template: Language,
        instance: Language,
    },
    #[error("response is not a lone 0/1 token: {raw:?}")]
    ParseFailure { raw: String },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt cache record at line {line}: {message}")]
    CorruptCache { line: usize, message: String },
    #[error("malformed proxy file at line {line}: {message}")]
    ProxyFile { line: usize, message: String },
}

/// Accepts exactly `0` or `1`, optionally surrounded by whitespace.
pub fn parse_response(raw: &str) -> Result<Affiliation, LabelerError> {
    match raw.trim() {
        "0" => Ok(Affiliation::NotAffiliated),
        "1" => Ok(Affiliation::Affiliated),
        _ => Err(LabelerError::ParseFailure {
            raw: raw.to_string(),
        }),
    }
}

#[derive(Debug, Clone)]
pub struct AnnotateOptions {
    /// Extra attempts after a non-conforming reply.
    pub parse_retries: usize,
    /// Total attempts per request on transient network errors.
    pub network_attempts: usize,
    pub backoff: Duration,
    pub fan_out: usize,
    /// Re-query instances whose cached outcome is unresolved.
    pub retry_unresolved: bool,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        Self {
            parse_retries: 3,
            network_attempts: 4,
            backoff: Duration::from_millis(500),
            fan_out: 4,
            retry_unresolved: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unresolved {
    pub instance_id: String,
    pub reason: String,
    pub raw_response: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct AnnotationOutcome {
    /// Sorted by instance id.
    pub signals: Vec<ProxySignal>,
    /// Sorted by instance id.
    pub unresolved: Vec<Unresolved>,
    pub network_calls: usize,
    pub cache_hits: usize,
}

impl AnnotationOutcome {
    /// `(affiliated, not_affiliated)`.
    pub fn counts(&self) -> (usize, usize) {
        let affiliated = self
            .signals
            .iter()
            .filter(|s| s.affiliated == Affiliation::Affiliated)
            .count();
        (affiliated, self.signals.len() - affiliated)
    }

    pub fn summary(&self) -> String {
        let (yes, no) = self.counts();
        let total = (yes + no).max(1) as f64;
        format!(
            "affiliated: {yes} ({:.2}%)\nnot affiliated: {no} ({:.2}%)\nunresolved: {}\nnetwork calls: {}\ncache hits: {}\n",
            100.0 * yes as f64 / total,
            100.0 * no as f64 / total,
            self.unresolved.len(),
            self.network_calls,
            self.cache_hits,
        )
    }
}

enum Resolution {
    Signal(ProxySignal),
    Unresolved(Unresolved),
}

struct Annotator<'a, C: ?Sized> {
    client: &'a C,
    cache: &'a Mutex<&'a mut AnnotationCache>,
    options: &'a AnnotateOptions,
    calls: AtomicUsize,
    hits: AtomicUsize,
}

impl<C: LlmClient + ?Sized> Annotator<'_, C> {
    fn request(&self, prompt: &str) -> Result<String, ClientError> {
        let mut delay = self.options.backoff;
        let attempts = self.options.network_attempts.max(1);
        for attempt in 1..=attempts {
            self.calls.fetch_add(1, Ordering::SeqCst);
            match self.client.complete(prompt) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    log::warn!("attempt {attempt}/{attempts} failed: {e}; retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                }
                Err(e) => return Err(e),
            }
        }
        unreachable!("loop returns on the final attempt")
    }

    fn annotate(&self, instance: &Instance) -> Result<Resolution, LabelerError> {
        let template = PromptTemplate::for_language(instance.language);
        let prompt = render_prompt(&template, instance)?;
        let model = self.client.model_identifier();
        let hash = prompt_hash(&prompt, model);

        let cached = self.cache.lock().unwrap().get(&hash).cloned();
        let record = match cached {
            Some(record) if record.parsed_label.is_some() || !self.options.retry_unresolved => {
                self.hits.fetch_add(1, Ordering::SeqCst);
                record
            }
            _ => {
                let mut raw = match self.request(&prompt) {
                    Ok(raw) => raw,
                    Err(e) if e.is_retryable() => {
                        return Ok(Resolution::Unresolved(Unresolved {
                            instance_id: instance.id.clone(),
                            reason: e.to_string(),
                            raw_response: None,
                        }))
                    }
                    Err(e) => return Err(e.into()),
                };
                let mut parsed = parse_response(&raw).ok();
                let retry_prompt = prompt::with_retry_suffix(&template, &prompt);
                let mut retries = 0;
                while parsed.is_none() && retries < self.options.parse_retries {
                    retries += 1;
                    log::debug!(
                        "instance {}: non-conforming reply {raw:?}, retry {retries}",
                        instance.id
                    );
                    raw = match self.request(&retry_prompt) {
                        Ok(raw) => raw,
                        Err(e) if e.is_retryable() => break,
                        Err(e) => return Err(e.into()),
                    };
                    parsed = parse_response(&raw).ok();
                }
                let record = CacheRecord {
                    prompt_hash: hash,
                    model_identifier: model.to_string(),
                    raw_response: raw,
                    parsed_label: parsed,
                    timestamp: Utc::now(),
                };
                self.cache.lock().unwrap().insert(record.clone())?;
                record
            }
        };

        Ok(match record.parsed_label {
            Some(affiliated) => Resolution::Signal(ProxySignal {
                instance_id: instance.id.clone(),
                affiliated,
                raw_response: record.raw_response,
                prompt_language: instance.language,
                model_identifier: record.model_identifier,
                timestamp: record.timestamp,
            }),
            None => Resolution::Unresolved(Unresolved {
                instance_id: instance.id.clone(),
                reason: "no conforming reply".into(),
                raw_response: Some(record.raw_response),
            }),
        })
    }
}

/// Annotates every instance, using at most `options.fan_out` concurrent requests.
///
/// Authentication and request errors abort the run; transient network
/// failures that survive all attempts leave the instance unresolved (and
/// uncached, so a later run retries it).
pub fn annotate_corpus<C: LlmClient + ?Sized>(
    instances: &[Instance],
    client: &C,
    cache: &mut AnnotationCache,
    options: &AnnotateOptions,
) -> Result<AnnotationOutcome, LabelerError> {
    let cache = Mutex::new(cache);
    let annotator = Annotator {
        client,
        cache: &cache,
        options,
        calls: AtomicUsize::new(0),
        hits: AtomicUsize::new(0),
    };
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<Resolution, LabelerError>)>> = Mutex::new(Vec::new());
    let workers = options.fan_out.clamp(1, instances.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(instance) = instances.get(i) else {
                    break;
                };
                let result = annotator.annotate(instance);
                let failed = result.is_err();
                results.lock().unwrap().push((i, result));
                if failed {
                    // stop handing out work to every worker
                    next.store(instances.len(), Ordering::SeqCst);
                    break;
                }
            });
        }
    });

    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);
    let mut outcome = AnnotationOutcome {
        network_calls: annotator.calls.load(Ordering::SeqCst),
        cache_hits: annotator.hits.load(Ordering::SeqCst),
        ..Default::default()
    };
    for (_, result) in results {
        match result? {
            Resolution::Signal(s) => outcome.signals.push(s),
            Resolution::Unresolved(u) => outcome.unresolved.push(u),
        }
    }
    outcome
        .signals
        .sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    outcome
        .unresolved
        .sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    Ok(outcome)
}

/// One line of the proxy-label file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyRecord {
    pub instance_id: String,
    pub affiliated: Affiliation,
    pub model_identifier: String,
}

impl From<&ProxySignal> for ProxyRecord {
    fn from(s: &ProxySignal) -> Self {
        Self {
            instance_id: s.instance_id.clone(),
            affiliated: s.affiliated,
            model_identifier: s.model_identifier.clone(),
        }
    }
}

pub fn write_proxy_file(
    path: impl AsRef<Path>,
    signals: &[ProxySignal],
) -> Result<(), LabelerError> {
    let path = path.as_ref();
    let io_err = |source| LabelerError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for signal in signals {
        let line =
            serde_json::to_string(&ProxyRecord::from(signal)).expect("proxy record serialises");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn read_proxy_file(path: impl AsRef<Path>) -> Result<Vec<ProxyRecord>, LabelerError> {
    let path = path.as_ref();
    let io_err = |source| LabelerError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| LabelerError::ProxyFile {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Id → affiliation lookup for training the user encoder.
pub fn proxy_lookup<'a>(
    records: impl IntoIterator<Item = &'a ProxyRecord>,
) -> HashMap<String, Affiliation> {
    records
        .into_iter()
        .map(|r| (r.instance_id.clone(), r.affiliated))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label;

    /// Replies the labeler must never turn into a label.
    pub(crate) fn adversarial() -> Vec<String> {
        serde_json::from_str(include_str!(
            "../../tests/fixtures/adversarial_replies.json"
        ))
        .unwrap()
    }

    #[test]
    fn accepts_lone_digits() {
        assert_eq!(parse_response("1").unwrap(), Affiliation::Affiliated);
        assert_eq!(parse_response("  0\n").unwrap(), Affiliation::NotAffiliated);
        assert_eq!(
            parse_response("\r\n\t1 \n").unwrap(),
            Affiliation::Affiliated
        );
    }

    #[test]
    fn rejects_adversarial_replies() {
        for raw in &adversarial() {
            match parse_response(raw) {
                Err(LabelerError::ParseFailure { raw: kept }) => assert_eq!(&kept, raw),
                other => panic!("{raw:?} produced {other:?}"),
            }
        }
    }

    fn corpus(n: usize) -> Vec<Instance> {
        (0..n)
            .map(|i| {
                let bio = if i % 3 == 0 {
                    "queer, she/her"
                } else {
                    "calcio"
                };
                Instance::new(
                    format!("{i:04}"),
                    format!("tweet {i}"),
                    bio,
                    Label::NonReclamatory,
                    Language::It,
                )
            })
            .collect()
    }

    #[test]
    fn warm_cache_makes_no_calls_and_is_idempotent() {
        let client = MockLlmClient::keyword();
        let mut cache = AnnotationCache::in_memory();
        let instances = corpus(30);
        let first =
            annotate_corpus(&instances, &client, &mut cache, &AnnotateOptions::default()).unwrap();
        assert_eq!(first.network_calls, 30);
        assert_eq!(first.counts(), (10, 20));
        let second =
            annotate_corpus(&instances, &client, &mut cache, &AnnotateOptions::default()).unwrap();
        assert_eq!(second.network_calls, 0);
        assert_eq!(second.cache_hits, 30);
        assert_eq!(first.signals, second.signals);
        assert_eq!(client.calls(), 30);
    }

    #[test]
    fn retries_then_gives_up() {
        let client = MockLlmClient::with_rule("chatty", |_| "The user is LGBT: 1".into());
        let mut cache = AnnotationCache::in_memory();
        let out =
            annotate_corpus(&corpus(2), &client, &mut cache, &AnnotateOptions::default()).unwrap();
        assert!(out.signals.is_empty());
        assert_eq!(out.unresolved.len(), 2);
        // one initial request and three clarifying retries each
        assert_eq!(client.calls(), 8);
        assert_eq!(
            out.unresolved[0].raw_response.as_deref(),
            Some("The user is LGBT: 1")
        );
    }

    #[test]
    fn clarifying_suffix_recovers() {
        let client = MockLlmClient::with_rule("drifty", |prompt| {
            if prompt.ends_with("0 oppure 1.") {
                "1".into()
            } else {
                "Sì, 1".into()
            }
        });
        let mut cache = AnnotationCache::in_memory();
        let out =
            annotate_corpus(&corpus(3), &client, &mut cache, &AnnotateOptions::default()).unwrap();
        assert_eq!(out.signals.len(), 3);
        assert_eq!(client.calls(), 6);
    }

    struct Flaky {
        failures_left: Mutex<usize>,
        error: ClientError,
    }

    impl LlmClient for Flaky {
        fn model_identifier(&self) -> &str {
            "flaky"
        }
        fn complete(&self, _: &str) -> Result<String, ClientError> {
            let mut left = self.failures_left.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                return Err(self.error.clone());
            }
            Ok("0".into())
        }
    }

    #[test]
    fn network_errors_are_retried_with_backoff() {
        let client = Flaky {
            failures_left: Mutex::new(2),
            error: ClientError::Network("reset".into()),
        };
        let options = AnnotateOptions {
            backoff: Duration::from_millis(1),
            fan_out: 1,
            ..Default::default()
        };
        let out = annotate_corpus(
            &corpus(1),
            &client,
            &mut AnnotationCache::in_memory(),
            &options,
        )
        .unwrap();
        assert_eq!(out.signals.len(), 1);
        assert_eq!(out.network_calls, 3);
    }

    #[test]
    fn auth_errors_abort() {
        let client = Flaky {
            failures_left: Mutex::new(usize::MAX),
            error: ClientError::Auth("bad key".into()),
        };
        let err = annotate_corpus(
            &corpus(5),
            &client,
            &mut AnnotationCache::in_memory(),
            &AnnotateOptions::default(),
        );
        assert!(matches!(
            err,
            Err(LabelerError::Client(ClientError::Auth(_)))
        ));
    }

    #[test]
    fn proxy_file_round_trip() {
        let client = MockLlmClient::keyword();
        let out = annotate_corpus(
            &corpus(6),
            &client,
            &mut AnnotationCache::in_memory(),
            &AnnotateOptions::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proxy.jsonl");
        write_proxy_file(&path, &out.signals).unwrap();
        let records = read_proxy_file(&path).unwrap();
        assert_eq!(records.len(), 6);
        let lookup = proxy_lookup(&records);
        assert_eq!(lookup["0000"], Affiliation::Affiliated);
        assert_eq!(lookup["0001"], Affiliation::NotAffiliated);
    }
}
