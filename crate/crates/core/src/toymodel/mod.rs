//! Tiny conditional captioner standing in for a multimodal LLM.
//!
//! Parameters are partitioned into a frozen scene encoder, the trainable
//! mapping layer (the only block unlearning touches), the decoder, and
//! optional low-rank adapters.

mod checkpoint;
mod decode;
mod lora;
mod model;
mod vocab;

pub use checkpoint::CHECKPOINT_VERSION;
pub use decode::{DecodeMode, DecodeRequest};
pub use lora::DEFAULT_LORA_TARGETS;
pub use model::{CaptionModel, LoraSpec, ModelDims, ParamEntry, Partition, SeqItem, TrainableSet};
pub use vocab::{Token, Vocab};

use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("sequence of length {len} exceeds context {max}")]
    PrefixOverflow { len: usize, max: usize },
    #[error("unknown token id {0}")]
    UnknownToken(u32),
    #[error("empty sequence")]
    EmptySequence,
    #[error("caption does not end with EOS")]
    MissingEos,
    #[error("scene encoding has {got} entries, expected {expected}")]
    Encoding { expected: usize, got: usize },
    #[error("no parameter named {0}")]
    MissingParam(String),
    #[error("parameter vector has {got} entries, expected {expected}")]
    Layout { expected: usize, got: usize },
    #[error("LoRA rank {rank} outside 1..={max}")]
    LoraRank { rank: usize, max: usize },
    #[error("LoRA: {0}")]
    Lora(String),
    #[error("decode: {0}")]
    Decode(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
