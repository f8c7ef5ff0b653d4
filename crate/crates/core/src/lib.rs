//! OCR-robust English to Spanish translation.
//!
//! The pipeline normalizes an ANKI-style parallel corpus, augments it with
//! OCR-misfit source sentences produced by a character-confusion channel,
//! trains LSTM encoder-decoder models (plain and Luong dot attention) on a
//! small tape-based reverse-mode autodiff core, and scores translations with
//! corpus-level BLEU-4.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod model;
pub mod noise;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
