//! Hierarchical transformer for utterance-level emotion recognition in
//! dialogs, built from scratch: dense-tensor autodiff, WordPiece
//! tokenization, configurable transformer encoders, weighted cross-entropy
//! training, and the matching evaluation metrics.
//!
//! The model encodes each utterance with a word-level transformer, max-pools
//! the contextual token vectors into one embedding per utterance, then runs a
//! dialog-level transformer over the utterance sequence before a SELU
//! classifier. The speaker-aware variant concatenates per-dialog speaker
//! one-hots onto the utterance embeddings so the upper encoder can tell
//! speakers apart.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
