use candle_core::{DType, Device, Tensor};

use super::tokenizer::{WordPieceTokenizer, CLS, PAD, SEP};
use super::EncoderError;

/// Two-segment encoder input: `[CLS] tweet [SEP] bio [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub token_ids: Vec<u32>,
    /// Segment ids: 0 for `[CLS] tweet [SEP]`, 1 for `bio [SEP]`.
    pub type_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

impl EncodedPair {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of unmasked positions.
    pub fn content_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Right-pads with `[PAD]` (masked) up to `len`.
    pub fn padded(&self, len: usize, pad_id: u32) -> Self {
        let mut out = self.clone();
        while out.token_ids.len() < len {
            out.token_ids.push(pad_id);
            out.type_ids.push(0);
            out.attention_mask.push(0);
        }
        out
    }
}

/// Encodes a tweet/bio pair, truncating the bio tail first and then the tweet
/// tail so the result fits in `max_len` tokens.
pub fn build_input(
    tweet: &str,
    bio: &str,
    tokenizer: &WordPieceTokenizer,
    max_len: usize,
) -> EncodedPair {
    let mut tweet_ids = tokenizer.tokenize(tweet);
    let mut bio_ids = tokenizer.tokenize(bio);
    let budget = max_len.saturating_sub(3);
    if tweet_ids.len() + bio_ids.len() > budget {
        tweet_ids.truncate(budget);
        bio_ids.truncate(budget - tweet_ids.len());
    }
    let mut token_ids = Vec::with_capacity(tweet_ids.len() + bio_ids.len() + 3);
    token_ids.push(tokenizer.id_of(CLS));
    token_ids.extend(&tweet_ids);
    token_ids.push(tokenizer.id_of(SEP));
    let first = token_ids.len();
    token_ids.extend(&bio_ids);
    token_ids.push(tokenizer.id_of(SEP));
    let mut type_ids = vec![0; first];
    type_ids.resize(token_ids.len(), 1);
    let attention_mask = vec![1; token_ids.len()];
    EncodedPair {
        token_ids,
        type_ids,
        attention_mask,
    }
}

/// A padded batch ready for the encoder.
#[derive(Debug, Clone)]
pub struct Batch {
    pub token_ids: Tensor,
    pub type_ids: Tensor,
    /// 1.0 for real tokens, 0.0 for padding, in the model dtype.
    pub mask: Tensor,
}

impl Batch {
    pub fn new(
        pairs: &[&EncodedPair],
        tokenizer: &WordPieceTokenizer,
        dtype: DType,
        device: &Device,
    ) -> Result<Self, EncoderError> {
        if pairs.is_empty() {
            return Err(EncoderError::EmptyBatch);
        }
        let width = pairs.iter().map(|p| p.len()).max().unwrap_or(0);
        let pad = tokenizer.id_of(PAD);
        let mut ids = Vec::with_capacity(pairs.len() * width);
        let mut types = Vec::with_capacity(pairs.len() * width);
        let mut mask = Vec::with_capacity(pairs.len() * width);
        for pair in pairs {
            let p = pair.padded(width, pad);
            ids.extend(p.token_ids);
            types.extend(p.type_ids);
            mask.extend(p.attention_mask.iter().map(|&m| m as f32));
        }
        let shape = (pairs.len(), width);
        Ok(Self {
            token_ids: Tensor::from_vec(ids, shape, device)?,
            type_ids: Tensor::from_vec(types, shape, device)?,
            mask: Tensor::from_vec(mask, shape, device)?.to_dtype(dtype)?,
        })
    }
}
