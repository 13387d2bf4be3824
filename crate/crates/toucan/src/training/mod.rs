//! Corpus ingestion, batching, the combined loss, the optimization loop,
//! and BPC/BPT/SF evaluation.

pub mod corpus;
pub mod loss;
pub mod optimizer;
pub mod trainer;

pub use corpus::{
    ingest_text, make_batches, synthetic_text, AlphabetPolicy, Batch, Corpus, IngestReport, Split,
};
pub use loss::{cross_entropy_totals, prior_loss_bits, CeTotals};
pub use optimizer::{clip_global_norm, Adam};
pub use trainer::{
    evaluate, evaluate_windows, train_loop, train_step, EvalReport, LossBreakdown, MetricsLog, TrainConfig,
    TrainEvent, TrainOutcome, METRICS_HEADER,
};
