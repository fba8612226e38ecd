//! xptlab: a desk-scale laboratory for studying why prompt tuning transfers
//! across languages better than full fine-tuning.
//!
//! Everything runs from scratch on a CPU in minutes: a small pre-norm
//! transformer encoder with its own reverse-mode tape, deep prompts injected
//! as past keys and values, a synthetic multilingual benchmark built from
//! vocabulary permutations, and the analysis stack (representation drift,
//! translation-pair alignment, transfer gaps, exact t-SNE with per-language
//! decision boundaries) used to compare the two tuning methods.

pub mod cli;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod projection;
pub mod prompts;
pub mod synthlang;
pub mod tensor;
pub mod tuning;

pub use error::{Error, Result};
