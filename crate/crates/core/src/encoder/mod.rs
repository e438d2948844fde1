//! Transformer text and user encoders.
//!
//! Both towers share one architecture: a BERT-style backbone over the paired
//! input `[CLS] tweet [SEP] bio [SEP]`, pooled at `[CLS]`, followed by a
//! two-way linear classification head.

pub mod bundle;
pub mod input;
pub mod model;
pub mod params;
pub mod tokenizer;

use std::path::{Path, PathBuf};

pub use bundle::{BackboneSource, BundleOptions, ClassifierHead, EncoderBundle, MODEL_DIR_ENV};
pub use input::{build_input, Batch, EncodedPair};
pub use model::{to_rows, Backbone, EncoderConfig, ForwardCtx, Pooling};
pub use params::ParamStore;
pub use tokenizer::WordPieceTokenizer;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("input has {len} tokens, encoder accepts at most {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(
        "backbone {0:?} is not available locally; pass a checkpoint directory, \
         mirror it under ${MODEL_DIR_ENV}, or use a tiny-bert identifier"
    )]
    BackboneUnavailable(String),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

impl EncoderError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        EncoderError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
