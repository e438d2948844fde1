//! Hierarchical dual-encoder pipeline for slur-reclamation detection.
//!
//! The crate is organised along the pipeline:
//!
//! * [`corpus`]: tweet + biography records, validation and stratified splits.
//! * [`weak_labeler`]: LLM-assisted proxy labels for user affiliation, with a
//!   response cache and strict output parsing.
//! * [`encoder`]: BERT-style encoder with CLS pooling and a linear head.
//! * [`fusion`]: the learned per-dimension gate mixing text and user
//!   representations, plus a plain `f64` reference implementation.
//! * [`training`]: losses, class weights, the linear-probe/fine-tune schedule
//!   and the three-stage pipeline.
//! * [`evaluation`]: macro metrics, seed aggregation, Welch's t-test and
//!   error analysis.
//!
//! Tensor-backed pieces (`encoder`, the trainable fusion layer and the
//! training loops) live behind the default `nn` feature so the numeric core
//! also builds for `wasm32`.

pub mod corpus;
pub mod evaluation;
pub mod fusion;
pub mod synthetic;
pub mod training;
pub mod weak_labeler;

#[cfg(feature = "nn")]
pub mod encoder;

pub use corpus::{ClassDistribution, CorpusSplit, Instance, Label, Language, SplitRatios};
pub use evaluation::{ConfusionMatrix, EvalReport, MetricRecord};
pub use fusion::oracle::{FusionState, GatedFusionParams};
pub use weak_labeler::{Affiliation, ProxySignal};
