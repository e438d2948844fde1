use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::prompt::split_rendered_pair;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ClientError {
    /// Transient failure; retried with backoff.
    #[error("network error: {0}")]
    Network(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("bad request: {0}")]
    Request(String),
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ClientError::Network(_))
    }
}

/// Text in, text out. Implementations decode greedily (temperature 0).
pub trait LlmClient: Send + Sync {
    fn model_identifier(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String, ClientError>;
}

/// Endpoint settings for an OpenAI-compatible chat-completions service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSettings {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key; the key itself never
    /// appears in config files.
    pub api_key_env: String,
    pub fan_out: usize,
    pub temperature: f64,
    pub timeout_secs: u64,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            base_url: "https://api.deepseek.com/v1".into(),
            model: "deepseek-chat".into(),
            api_key_env: "LLM_API_KEY".into(),
            fan_out: 4,
            temperature: 0.0,
            timeout_secs: 60,
        }
    }
}

type Rule = dyn Fn(&str) -> String + Send + Sync;

/// Deterministic offline client. The reply is a pure function of the prompt.
#[derive(Clone)]
pub struct MockLlmClient {
    model: String,
    rule: Arc<Rule>,
    calls: Arc<AtomicUsize>,
}

/// Surface cues the default mock rule treats as evidence of affiliation.
pub const MOCK_AFFILIATION_CUES: &[&str] = &[
    super::prompt::LGBTQ_FLAG,
    "🏳️‍⚧️",
    "she/her",
    "he/him",
    "they/them",
    "elle",
    "lgbt",
    "queer",
    "orgullo",
    "pride",
    "genderqueer",
    "pansexual",
    "bisex",
    "gay",
    "lesbica",
    "lesbiana",
    "trans",
];

impl MockLlmClient {
    /// Answers `1` when the rendered tweet or bio contains any of
    /// [`MOCK_AFFILIATION_CUES`] (case-insensitive), else `0`.
    pub fn keyword() -> Self {
        Self::with_rule("mock-keyword", |prompt| {
            let Some((tweet, bio)) = rendered_instance(prompt) else {
                return "0".into();
            };
            let text = format!("{tweet} {bio}").to_lowercase();
            let hit = MOCK_AFFILIATION_CUES.iter().any(|cue| text.contains(cue));
            if hit { "1" } else { "0" }.into()
        })
    }

    pub fn with_rule(
        model: impl Into<String>,
        rule: impl Fn(&str) -> String + Send + Sync + 'static,
    ) -> Self {
        Self {
            model: model.into(),
            rule: Arc::new(rule),
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Number of completions served so far (shared across clones).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl std::fmt::Debug for MockLlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockLlmClient")
            .field("model", &self.model)
            .field("calls", &self.calls())
            .finish()
    }
}

impl LlmClient for MockLlmClient {
    fn model_identifier(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok((self.rule)(prompt))
    }
}

/// Extracts the `(tweet, bio)` pair rendered at the end of an annotation prompt,
/// ignoring any retry suffix.
pub fn rendered_instance(prompt: &str) -> Option<(String, String)> {
    // The instance is the first paragraph after the template's final "1" line;
    // scan candidate starts from the end so quoted text inside the example is skipped.
    let body = prompt
        .rfind("OUTPUT: 1\n\n")
        .map(|i| i + "OUTPUT: 1\n\n".len())
        .or_else(|| {
            prompt
                .rfind("SALIDA: 1\n\n")
                .map(|i| i + "SALIDA: 1\n\n".len())
        })?;
    let rest = &prompt[body..];
    // A retry suffix is separated by a blank line that cannot occur inside the
    // rendered pair's closing quote.
    if let Some(pair) = split_rendered_pair(rest) {
        return Some(pair);
    }
    let cut = rest.rfind("\"\n\n")?;
    split_rendered_pair(&rest[..=cut])
}
