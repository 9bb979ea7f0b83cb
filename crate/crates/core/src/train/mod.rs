//! Staged pre-training: learning-rate schedules, freeze plans, the training
//! loop, checkpoints and the model-table presets.

pub mod batch;
pub mod checkpoint;
pub mod eval;
mod plan;
pub mod presets;
mod runner;
mod schedule;

pub use checkpoint::{Checkpoint, Provenance};
pub use eval::{denoise_eval, mlm_eval, seq2seq_eval, EvalStats};
pub use plan::{
    apply_freeze_plan, Donor, FreezeTag, Init, Objective, StageLr, TrainPlan, TrainStage,
};
pub use presets::{preset, Scale, TABLE1};
pub use runner::{
    initial_trainer, mlm_forward, run_plan, run_stage, run_stages, seq2seq_forward, PlanRun,
    StagePosition, StageTrace, TraceRecord, Trainer,
};
pub use schedule::{Decay, LrSchedule, Warmup};
