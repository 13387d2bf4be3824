//! Toucan: a token-aware character-level language model at desk scale.
//!
//! The model reads raw characters, learns where tokens end, pools characters
//! into token vectors, and decodes whole tokens with only its last few
//! layers. The crate bundles:
//!
//! - [`numerics`]: dense f64 tensors, deterministic RNG, reverse-mode
//!   autodiff — gradient-checkable and bit-reproducible.
//! - [`model`]: the three-stack architecture (tokenizer, token model,
//!   character decoder) with the boundary predictor, dynamic pooling, NULL
//!   offset, end-of-token up-sampling, and checkpoint I/O.
//! - [`training`]: corpus ingestion, the combined loss (character
//!   cross-entropy plus a boundary-rate prior), Adam with warmup and
//!   clipping, and BPC/BPT/SF evaluation.
//! - [`decoding`]: the naive full-reprocess generator, the token-aware fast
//!   path, an exact equivalence oracle, and a speed benchmark harness.
//! - [`tokenizers`]: BPE and WordPiece trainers/encoders plus segmentation
//!   statistics for comparing learned and fixed-vocabulary tokenization.
//! - [`cli`]: the `toucan` command-line binding every subsystem together.
//!
//! Start with the `examples/` directory: each example is a runnable tour of
//! one capability.

pub mod cli;
pub mod decoding;
pub mod error;
pub mod model;
pub mod numerics;
pub mod tokenizers;
pub mod training;

pub use error::{Error, Result};
