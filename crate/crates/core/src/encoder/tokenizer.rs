//! WordPiece tokenizer compatible with BERT `vocab.txt` files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::EncoderError;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct WordPieceTokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    lowercase: bool,
}

/// Characters split off as their own pre-tokens.
fn is_isolated(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32,
            0x00A1..=0x00BF          // ¡ « » ¿ and friends
            | 0x2000..=0x206F        // general punctuation, incl. ZWJ
            | 0x2190..=0x2BFF        // arrows, symbols, dingbats
            | 0x3000..=0x303F
            | 0xFE00..=0xFE0F        // variation selectors
            | 0x1F000..=0x1FAFF) // emoji
}

/// Whitespace and punctuation pre-tokenization.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() || c.is_control() {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        } else if is_isolated(c) {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            out.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

impl WordPieceTokenizer {
    pub fn from_vocab(tokens: Vec<String>, lowercase: bool) -> Result<Self, EncoderError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, token) in tokens.iter().enumerate() {
            if index.insert(token.clone(), i as u32).is_some() {
                return Err(EncoderError::Vocab(format!("duplicate token {token:?}")));
            }
        }
        for special in [PAD, UNK, CLS, SEP] {
            if !index.contains_key(special) {
                return Err(EncoderError::Vocab(format!(
                    "missing special token {special}"
                )));
            }
        }
        Ok(Self {
            vocab: tokens,
            index,
            lowercase,
        })
    }

    /// Builds a vocabulary from raw texts: special tokens, then every seen
    /// character (standalone and as a `##` continuation), then whole words with
    /// at least `min_count` occurrences, most frequent first, up to `max_size`.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        min_count: usize,
        max_size: usize,
        lowercase: bool,
    ) -> Self {
        let mut words: BTreeMap<String, usize> = BTreeMap::new();
        let mut chars: BTreeMap<char, ()> = BTreeMap::new();
        for text in texts {
            let text = if lowercase {
                text.to_lowercase()
            } else {
                text.to_string()
            };
            for word in pre_tokenize(&text) {
                chars.extend(word.chars().map(|c| (c, ())));
                *words.entry(word).or_default() += 1;
            }
        }
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for &c in chars.keys() {
            vocab.push(c.to_string());
            vocab.push(format!("##{c}"));
        }
        let mut frequent: Vec<(String, usize)> = words
            .into_iter()
            .filter(|(w, n)| *n >= min_count && w.chars().count() > 1)
            .collect();
        frequent.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = max_size.saturating_sub(vocab.len());
        vocab.extend(frequent.into_iter().take(room).map(|(w, _)| w));
        Self::from_vocab(vocab, lowercase).expect("built vocabulary is well-formed")
    }

    pub fn load(path: impl AsRef<Path>, lowercase: bool) -> Result<Self, EncoderError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EncoderError::io(path, e))?;
        Self::from_vocab(text.lines().map(str::to_string).collect(), lowercase)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EncoderError> {
        let path = path.as_ref();
        let mut text = self.vocab.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| EncoderError::io(path, e))
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_of(&self, special: &str) -> u32 {
        self.index[special]
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    fn word_pieces(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(self.id_of(UNK));
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut candidate: String = chars[start..end].iter().collect();
                if start > 0 {
                    candidate.insert_str(0, "##");
                }
                if let Some(&id) = self.index.get(&candidate) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => pieces.push(id),
                None => {
                    out.push(self.id_of(UNK));
                    return;
                }
            }
            start = end;
        }
        out.extend(pieces);
    }

    /// Token ids without special tokens.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let text = if self.lowercase {
            text.to_lowercase()
        } else {
            text.to_string()
        };
        let mut ids = Vec::new();
        for word in pre_tokenize(&text) {
            self.word_pieces(&word, &mut ids);
        }
        ids
    }

    /// Joins pieces back into text, dropping special tokens. Whitespace
    /// between pre-tokens is not recoverable and comes back as single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let Some(token) = self.token(id) else {
                continue;
            };
            if SPECIALS.contains(&token) {
                continue;
            }
            if let Some(rest) = token.strip_prefix("##") {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(token);
            }
        }
        out
    }
}
