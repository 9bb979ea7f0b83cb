//! Pre-training recipes for a multilingual encoder and a seq2seq model that
//! share weights: MLM encoders, de-noising seq2seq models, encoder
//! extraction with continued MLM, and two-stage warm-started seq2seq
//! training with freeze/unfreeze and attention fusion. Includes the
//! training-unit compute-cost model and the fine-tuning metrics.

pub mod cost;
pub mod data;
pub mod error;
pub mod evalft;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ParameterStore};
pub use tensor::{Graph, Label, Tensor, Var};
