use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How decoder cross-attention reads the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossAttention {
    /// Attend to the final encoder layer only.
    #[default]
    Standard,
    /// Attend to a learned per-decoder-layer mixture of all encoder layer outputs.
    Fusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    /// Zero for an encoder-only model.
    pub decoder_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub attention_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default)]
    pub cross_attention: CrossAttention,
    #[serde(default)]
    pub dropout: f64,
    /// Whether fusion mixes the embedding output (state 0) as well as every layer.
    #[serde(default = "default_true")]
    pub fusion_includes_embeddings: bool,
    /// Initial logit of the final encoder state in each fusion vector; all
    /// other logits start at zero.
    #[serde(default = "default_fusion_margin")]
    pub fusion_init_margin: f64,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

fn default_true() -> bool {
    true
}

fn default_fusion_margin() -> f64 {
    6.0
}

fn default_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Width settings of the reference models (hidden 1024, FFN 4096, 16 heads).
    pub fn reference(encoder_layers: usize, decoder_layers: usize) -> Self {
        ModelConfig {
            encoder_layers,
            decoder_layers,
            d_model: 1024,
            d_ffn: 4096,
            attention_heads: 16,
            vocab_size: 250_000,
            max_positions: 514,
            cross_attention: CrossAttention::Standard,
            dropout: 0.1,
            fusion_includes_embeddings: true,
            fusion_init_margin: default_fusion_margin(),
            layer_norm_eps: default_eps(),
        }
    }

    /// A small configuration for tests and desk-scale runs.
    pub fn tiny(encoder_layers: usize, decoder_layers: usize) -> Self {
        ModelConfig {
            encoder_layers,
            decoder_layers,
            d_model: 16,
            d_ffn: 32,
            attention_heads: 2,
            vocab_size: 32,
            max_positions: 16,
            cross_attention: CrossAttention::Standard,
            dropout: 0.0,
            fusion_includes_embeddings: true,
            fusion_init_margin: default_fusion_margin(),
            layer_norm_eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(format!("model config: {m}")));
        if self.encoder_layers == 0 {
            return fail("encoder_layers must be at least 1");
        }
        if self.d_model == 0 || self.d_ffn == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            return fail("widths, vocab_size and max_positions must be positive");
        }
        if self.attention_heads == 0 || !self.d_model.is_multiple_of(self.attention_heads) {
            return fail("d_model must be divisible by attention_heads");
        }
        if self.cross_attention == CrossAttention::Fusion && self.decoder_layers == 0 {
            return fail("fusion cross-attention requires a decoder");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if self.layer_norm_eps <= 0.0 {
            return fail("layer_norm_eps must be positive");
        }
        Ok(())
    }

    pub fn is_seq2seq(&self) -> bool {
        self.decoder_layers > 0
    }

    /// Number of encoder states fed to fusion.
    pub fn fusion_states(&self) -> usize {
        if self.fusion_includes_embeddings {
            self.encoder_layers + 1
        } else {
            self.encoder_layers
        }
    }

    /// The same encoder with no decoder.
    pub fn encoder_only(&self) -> Self {
        ModelConfig {
            decoder_layers: 0,
            cross_attention: CrossAttention::Standard,
            ..self.clone()
        }
    }

    /// Whether two configs describe identically shaped encoders.
    pub fn encoder_compatible(&self, other: &ModelConfig) -> bool {
        self.encoder_layers == other.encoder_layers
            && self.d_model == other.d_model
            && self.d_ffn == other.d_ffn
            && self.vocab_size == other.vocab_size
            && self.max_positions == other.max_positions
    }
}
