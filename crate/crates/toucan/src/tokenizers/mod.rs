//! Subword tokenizer baselines (BPE, WordPiece), learned-segmentation
//! extraction, and the comparison statistics pipeline.

pub mod learned;
pub mod stats;
pub mod subword;

pub use learned::{extract_learned_tokens, unseen_tokens, vocab_size_matching, LearnedToken};
pub use stats::{
    first_occurrence, js_divergence, phrase_dump_model, phrase_dump_subword, render_token,
    ComparisonReport, StatsSource, TokenStats,
};
pub use subword::{train_bpe, train_wordpiece, SubwordKind, SubwordTokenizer, MIN_PAIR_COUNT};
