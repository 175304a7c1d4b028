//! Multitask metaphor generation: a dual-head causal transformer that both
//! models text and scores metaphoricity, trained with per-token metaphor
//! weighting and corpus-level self-training.
//!
//! The crate is organised bottom-up:
//!
//! - [`numeric`]: tensors, reverse-mode tape, Adam, gradient checking, checkpoints
//! - [`corpus`]: JSONL corpora, vocabulary, synthetic grammar with an oracle
//! - [`model`]: shared causal encoder with a text head and an identification head
//! - [`weighting`]: prefix metaphor probabilities turned into token weights
//! - [`training`]: both losses, identifier pre-training, self-training loops
//! - [`generation`]: greedy, beam and top-k decoding from a target word
//! - [`evaluation`]: perplexity, distinct-n, metaphor ratio

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod model;
pub mod numeric;
pub mod seed;
pub mod training;
pub mod weighting;

pub use corpus::{RawExample, TokenSequence, Vocab};
pub use error::{Error, Result};
pub use model::{LMParams, ModelConfig};

