//! The compression target: a small decoder-only character transformer with
//! its tokenizer, batching, training loop, evaluation, and sampling.

mod data;
mod generate;
mod model;
mod tokenizer;
mod train;

pub use data::{eval_batches, Batch, BatchSampler, Corpus};
pub use generate::generate;
pub use model::{
    dense_projection, forward, Backbone, BlockNorms, BoundBackbone, DenseProjections, LanguageModel, LayerId, LayerKind, Linear, Projections, Transformer,
    TransformerConfig,
};
pub use tokenizer::TokenizerSpec;
pub use train::{mean_nll, nll_loss, perplexity, train_base, TrainOptions};

use crate::autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("corpus too small: need at least {needed} training tokens, have {available}")]
    CorpusTooSmall { needed: usize, available: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("character {ch:?} at byte {position} is not in the tokenizer alphabet")]
    Untokenizable { ch: char, position: usize },
    #[error("sequence length {len} is outside 1..={max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
