//! A desk-scale laboratory for studying when extra input modalities help
//! noisy speech recognition.
//!
//! The pipeline is fully synthetic and deterministic: random arithmetic
//! equations are verbalized into spoken-word transcripts, pushed through
//! lossy symbolic channels (audio units with SNR-controlled corruption,
//! viseme lip streams, hashed image tokens, character-level OCR), and fed
//! to a small decoder-only transformer as one concatenated discrete token
//! sequence. Word error rate over an SNR grid, and the relative benefit of
//! each added modality, are the measurements of interest.
//!
//! Module map:
//! - [`eqgen`] — equation generation and verbalization (the ground truth)
//! - [`channels`] — vocabulary layout and the four modality encoders
//! - [`dataset`] — example assembly, splits, persistence, FQ word filter
//! - [`model`] — the transformer, sequence assembly, loss, decoding
//! - [`trainer`] — AdamW-style fine-tuning with dev-WER early stopping
//! - [`evalkit`] — normalization, WER, relative benefit, report tables
//! - [`harness`] — experiment plans, multi-seed runs, trend verdicts

pub mod channels;
pub mod dataset;
pub mod eqgen;
pub mod evalkit;
pub mod harness;
pub mod model;
pub mod trainer;

mod util;

pub use util::fnv1a64;
