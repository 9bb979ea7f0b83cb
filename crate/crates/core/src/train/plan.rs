use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::schedule::LrSchedule;
use crate::data::{NoiseConfig, NoiseMode};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterStore};
use crate::tensor::AdamW;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Mlm,
    Denoise(NoiseMode),
}

/// Named groups of parameters a stage can freeze.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeTag {
    /// Every `encoder.*` parameter, including token and position embeddings.
    Encoder,
    /// The decoder token embedding (tied to the encoder's in seq2seq models).
    DecoderEmbedding,
    /// Every `decoder.*` parameter.
    Decoder,
    /// The MLM or LM output projection.
    LmHead,
    /// Token and position embeddings of both stacks.
    Embeddings,
    /// A fine-tuning task head.
    Head,
    /// Attention-fusion mixing logits.
    Fusion,
}

impl FreezeTag {
    pub fn matches(self, name: &str) -> bool {
        match self {
            FreezeTag::Encoder => name.starts_with("encoder."),
            FreezeTag::DecoderEmbedding => name == "decoder.embed_tokens",
            FreezeTag::Decoder => name.starts_with("decoder."),
            FreezeTag::LmHead => name.starts_with("lm_head.") || name.starts_with("mlm_head."),
            FreezeTag::Embeddings => matches!(
                name,
                "encoder.embed_tokens"
                    | "encoder.embed_positions"
                    | "decoder.embed_tokens"
                    | "decoder.embed_positions"
            ),
            FreezeTag::Head => name.starts_with("head."),
            FreezeTag::Fusion => name.starts_with("decoder.fusion."),
        }
    }
}

/// Sets trainability exactly per `freeze`: named groups frozen, all else
/// trainable. Tied names share one flag, so freezing the encoder embedding
/// also freezes a decoder embedding tied to it.
pub fn apply_freeze_plan(params: &mut ParameterStore, freeze: &[FreezeTag]) -> Result<()> {
    let mut frozen = Vec::new();
    for &tag in freeze {
        let hit: Vec<String> = params
            .names()
            .filter(|n| tag.matches(n))
            .map(str::to_string)
            .collect();
        if hit.is_empty() {
            return Err(Error::EmptyFreezeTag(format!("{tag:?}")));
        }
        frozen.extend(hit);
    }
    params.set_all_trainable(true);
    for name in frozen {
        params.set_trainable(&name, false)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageLr {
    /// The plan-wide schedule, continued across stage boundaries.
    Plan,
    /// A schedule restarted at this stage.
    Own(LrSchedule),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStage {
    pub name: String,
    pub objective: Objective,
    pub steps: u64,
    #[serde(default)]
    pub freeze: Vec<FreezeTag>,
    pub lr: StageLr,
    /// Tokens per update at the modeled scale; used only for cost accounting.
    pub batch_tokens: u64,
    /// Packed sequences per update in actual runs.
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Donor {
    Checkpoint(PathBuf),
    Plan(Box<TrainPlan>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Random,
    FromCheckpoint(PathBuf),
    /// Seq2seq model whose encoder is copied from the donor's.
    WarmStartEncoder(Donor),
    /// Encoder-only model cut out of a seq2seq donor.
    ExtractEncoder(Donor),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub name: String,
    /// Shape of the model the stages train (after any surgery in `init`).
    pub model: ModelConfig,
    pub init: Init,
    pub stages: Vec<TrainStage>,
    /// Continuous schedule over all stages using [`StageLr::Plan`].
    #[serde(default)]
    pub schedule: Option<LrSchedule>,
    /// Corruption parameters; the mode comes from each stage's objective.
    #[serde(default = "NoiseConfig::mlm")]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub optimizer: AdamW,
}

impl TrainPlan {
    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.stages.is_empty() {
            return Err(Error::invalid(format!(
                "plan `{}` has no stages",
                self.name
            )));
        }
        for s in &self.stages {
            if s.steps == 0 || s.batch_size == 0 {
                return Err(Error::invalid(format!(
                    "stage `{}` needs positive steps and batch size",
                    s.name
                )));
            }
            if matches!(s.objective, Objective::Denoise(NoiseMode::MlmMask)) {
                return Err(Error::invalid(format!(
                    "stage `{}`: de-noising needs a span mode",
                    s.name
                )));
            }
            if matches!(s.objective, Objective::Denoise(_)) && !self.model.is_seq2seq() {
                return Err(Error::invalid(format!(
                    "stage `{}`: de-noising needs a decoder",
                    s.name
                )));
            }
            match &s.lr {
                StageLr::Own(sched) => {
                    sched.validate()?;
                    if sched.total_steps != s.steps {
                        return Err(Error::invalid(format!(
                            "stage `{}` schedule covers {} steps, stage has {}",
                            s.name, sched.total_steps, s.steps
                        )));
                    }
                }
                StageLr::Plan => {
                    let sched = self.schedule.as_ref().ok_or_else(|| {
                        Error::invalid(format!(
                            "stage `{}` uses the plan schedule but none is set",
                            s.name
                        ))
                    })?;
                    sched.validate()?;
                    if sched.total_steps != self.total_steps() {
                        return Err(Error::invalid(format!(
                            "plan schedule covers {} steps, stages total {}",
                            sched.total_steps,
                            self.total_steps()
                        )));
                    }
                }
            }
        }
        match &self.init {
            Init::WarmStartEncoder(_) if !self.model.is_seq2seq() => {
                Err(Error::invalid("warm start needs a seq2seq model"))
            }
            Init::ExtractEncoder(_) if self.model.is_seq2seq() => Err(Error::invalid(
                "encoder extraction yields an encoder-only model",
            )),
            Init::WarmStartEncoder(Donor::Plan(d)) | Init::ExtractEncoder(Donor::Plan(d)) => {
                d.validate()?;
                if !self.model.encoder_compatible(&d.model) {
                    return Err(Error::invalid(format!(
                        "donor plan `{}` encoder does not match plan `{}`",
                        d.name, self.name
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn noise_for(&self, objective: Objective) -> NoiseConfig {
        NoiseConfig {
            mode: match objective {
                Objective::Mlm => NoiseMode::MlmMask,
                Objective::Denoise(m) => m,
            },
            ..self.noise
        }
    }
}
