//! The ten pre-training plans of the model table, by name, at a chosen scale.

use serde::{Deserialize, Serialize};

use super::plan::{Donor, FreezeTag, Init, Objective, StageLr, TrainPlan, TrainStage};
use super::schedule::LrSchedule;
use crate::data::{NoiseConfig, NoiseMode};
use crate::error::{Error, Result};
use crate::model::{CrossAttention, ModelConfig};
use crate::tensor::AdamW;

pub const TABLE1: [&str; 10] = [
    "roberta-12e",
    "bart-12e12d",
    "bart-12e12d-mask",
    "bart-12e2d",
    "bart-12e2d-mask",
    "bart-12e1d-mask",
    "bart-12e12d+mlm",
    "2stage-bart-12e12d",
    "2stage-bart-12e12d-attn-f",
    "2stage-bart-12e12d-unfrz",
];

const PEAK_LR: f64 = 1.5e-4;
const END_LR: f64 = 5e-6;
const WARMUP: u64 = 5_000;
const RECIPE1_PEAK_LR: f64 = 1e-4;
const RECIPE1_WARMUP: u64 = 1_000;

/// How the reference plans are shrunk. Layer counts are divided (rounding
/// up), step counts divided, and learning rates multiplied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub d_model: usize,
    pub d_ffn: usize,
    pub attention_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub layer_divisor: usize,
    pub step_divisor: u64,
    pub lr_multiplier: f64,
    pub batch_size: usize,
    pub batch_tokens: u64,
}

impl Scale {
    /// The reference configuration.
    pub fn reference() -> Self {
        Scale {
            d_model: 1024,
            d_ffn: 4096,
            attention_heads: 16,
            vocab_size: 250_000,
            max_positions: 514,
            dropout: 0.1,
            layer_divisor: 1,
            step_divisor: 1,
            lr_multiplier: 1.0,
            batch_size: 2048,
            batch_tokens: 1_000_000,
        }
    }

    /// Single-workstation size with the reference layer counts.
    pub fn desk() -> Self {
        Scale {
            d_model: 64,
            d_ffn: 256,
            attention_heads: 4,
            vocab_size: 256,
            max_positions: 64,
            dropout: 0.1,
            layer_divisor: 1,
            step_divisor: 250,
            lr_multiplier: 5.0,
            batch_size: 16,
            batch_tokens: 16 * 64,
        }
    }

    /// [`Scale::desk`] with every stack cut to at most two layers.
    pub fn desk_shallow() -> Self {
        Scale {
            layer_divisor: 6,
            ..Self::desk()
        }
    }

    fn layers(&self, n: usize) -> usize {
        n.div_ceil(self.layer_divisor)
    }

    fn steps(&self, n: u64) -> u64 {
        (n / self.step_divisor).max(1)
    }

    fn model(&self, enc: usize, dec: usize, cross: CrossAttention) -> ModelConfig {
        ModelConfig {
            encoder_layers: self.layers(enc),
            decoder_layers: self.layers(dec),
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            attention_heads: self.attention_heads,
            vocab_size: self.vocab_size,
            max_positions: self.max_positions,
            cross_attention: cross,
            dropout: self.dropout,
            ..ModelConfig::tiny(1, 0)
        }
    }

    fn schedule(&self, peak: f64, warmup: u64, total: u64) -> LrSchedule {
        LrSchedule::linear(
            peak * self.lr_multiplier,
            self.steps(warmup).min(total),
            END_LR * self.lr_multiplier,
            total,
        )
    }

    fn stage(
        &self,
        name: &str,
        objective: Objective,
        steps: u64,
        freeze: Vec<FreezeTag>,
    ) -> TrainStage {
        TrainStage {
            name: name.to_string(),
            objective,
            steps,
            freeze,
            lr: StageLr::Plan,
            batch_tokens: self.batch_tokens,
            batch_size: self.batch_size,
        }
    }

    fn plan(
        &self,
        name: &str,
        model: ModelConfig,
        init: Init,
        stages: Vec<TrainStage>,
    ) -> TrainPlan {
        let total = stages.iter().map(|s| s.steps).sum();
        TrainPlan {
            name: name.to_string(),
            model,
            init,
            schedule: Some(self.schedule(PEAK_LR, WARMUP, total)),
            stages,
            noise: NoiseConfig::mlm(),
            optimizer: AdamW::default(),
        }
    }

    fn scratch_plan(&self, name: &str, enc: usize, dec: usize, objective: Objective) -> TrainPlan {
        let steps = self.steps(500_000);
        self.plan(
            name,
            self.model(enc, dec, CrossAttention::Standard),
            Init::Random,
            vec![self.stage("pretrain", objective, steps, vec![])],
        )
    }

    fn two_stage(&self, name: &str, cross: CrossAttention, unfreeze_at: Option<u64>) -> TrainPlan {
        let donor = Donor::Plan(Box::new(self.scratch_plan(
            "roberta-12e",
            12,
            0,
            Objective::Mlm,
        )));
        let drop = Objective::Denoise(NoiseMode::SpanDrop);
        let stages = match unfreeze_at {
            None => vec![self.stage(
                "frozen",
                drop,
                self.steps(500_000),
                vec![FreezeTag::Encoder],
            )],
            Some(k) => vec![
                self.stage("frozen", drop, self.steps(k), vec![FreezeTag::Encoder]),
                self.stage("unfrozen", drop, self.steps(150_000), vec![]),
            ],
        };
        self.plan(
            name,
            self.model(12, 12, cross),
            Init::WarmStartEncoder(donor),
            stages,
        )
    }
}

/// Looks up a plan by its model-table name.
pub fn preset(name: &str, scale: &Scale) -> Result<TrainPlan> {
    let drop = Objective::Denoise(NoiseMode::SpanDrop);
    let mask = Objective::Denoise(NoiseMode::SpanMask);
    Ok(match name {
        "roberta-12e" => scale.scratch_plan(name, 12, 0, Objective::Mlm),
        "bart-12e12d" => scale.scratch_plan(name, 12, 12, drop),
        "bart-12e12d-mask" => scale.scratch_plan(name, 12, 12, mask),
        "bart-12e2d" => scale.scratch_plan(name, 12, 2, drop),
        "bart-12e2d-mask" => scale.scratch_plan(name, 12, 2, mask),
        "bart-12e1d-mask" => scale.scratch_plan(name, 12, 1, mask),
        "bart-12e12d+mlm" => {
            let donor = Donor::Plan(Box::new(scale.scratch_plan("bart-12e12d", 12, 12, drop)));
            let steps = scale.steps(100_000);
            let mut stage = scale.stage("mlm", Objective::Mlm, steps, vec![]);
            stage.lr = StageLr::Own(scale.schedule(RECIPE1_PEAK_LR, RECIPE1_WARMUP, steps));
            TrainPlan {
                schedule: None,
                ..scale.plan(
                    name,
                    scale.model(12, 0, CrossAttention::Standard),
                    Init::ExtractEncoder(donor),
                    vec![stage],
                )
            }
        }
        "2stage-bart-12e12d" => scale.two_stage(name, CrossAttention::Standard, None),
        "2stage-bart-12e12d-attn-f" => scale.two_stage(name, CrossAttention::Fusion, None),
        "2stage-bart-12e12d-unfrz" => {
            scale.two_stage(name, CrossAttention::Standard, Some(200_000))
        }
        _ => {
            return Err(Error::UnknownPreset {
                name: name.to_string(),
                known: TABLE1.iter().map(|s| s.to_string()).collect(),
            })
        }
    })
}
