//! PreLayerNorm transformer encoder / seq2seq models, parameter tying, task
//! heads and the weight-transfer operations used by the two recipes.

mod config;
mod heads;
mod params;
mod surgery;
mod transformer;

pub use config::{CrossAttention, ModelConfig};
pub use heads::{Attachment, HeadKind, HeadSpec, TaskHead};
pub use params::ParameterStore;
pub use surgery::{extract_encoder, warm_start_seq2seq};
pub use transformer::{fuse_memory, Binder, Dropout, Model, TokenBatch, INIT_STD};
