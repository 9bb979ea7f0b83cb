//! Fine-tuning, decoding and downstream metrics.

mod beam;
mod finetune;
mod metrics;
mod report;
mod tasks;

pub use beam::{beam_search, exhaustive_best, GenConfig, Hypothesis, Scorer};
pub use finetune::{
    evaluate, finetune, prepare_model, EpochRecord, FinetuneConfig, FinetuneOutcome, Metric, TABLE8,
};
pub use metrics::{chunks, entity_f1, lcs_len, perplexity, rouge, sciem, Prf, Rouge};
pub use report::{aggregate, mean_std, MetricRecord, Summary};
pub use tasks::{word_sentinels, Example, TaskData, TaskKind};
