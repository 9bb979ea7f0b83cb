use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{
    denoise_batch, mlm_batch, MlmBatch, Seq2SeqBatch, STREAM_DROPOUT, STREAM_INIT, STREAM_ORDER,
};
use super::checkpoint;
use super::plan::{apply_freeze_plan, Donor, Init, Objective, StageLr, TrainPlan, TrainStage};
use super::schedule::LrSchedule;
use crate::data::{derive_seed, NoiseConfig};
use crate::error::{Error, Result};
use crate::model::{
    extract_encoder, warm_start_seq2seq, Binder, Dropout, Model, ModelConfig, ParameterStore,
};
use crate::tensor::{AdamW, Graph, OptimState, Var};

/// One optimizer update as written to a trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: String,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// A model together with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub state: OptimState,
}

impl Trainer {
    pub fn new(model: Model, optimizer: AdamW) -> Self {
        Trainer {
            model,
            optimizer,
            state: OptimState::new(),
        }
    }

    /// Builds the loss with `forward`, backpropagates and applies one AdamW
    /// update. A non-finite loss aborts before any parameter changes.
    pub fn update<F>(&mut self, lr: f64, stage: &str, step: u64, forward: F) -> Result<f64>
    where
        F: FnOnce(&Model, &mut Graph, &mut Binder) -> Result<Var>,
    {
        let (loss, grads) = {
            let mut g = Graph::new();
            let mut bind = Binder::new(&self.model.params);
            let loss = forward(&self.model, &mut g, &mut bind)?;
            let value = g
                .value(loss)
                .item()
                .ok_or_else(|| Error::NonScalarLoss(g.value(loss).shape().to_vec()))?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: stage.to_string(),
                    step,
                });
            }
            let grads = g.backward(loss)?;
            (value, bind.gradients(&grads))
        };
        self.optimizer
            .step(&mut self.model.params, &grads, &mut self.state, lr)?;
        Ok(loss)
    }
}

pub fn mlm_forward(
    model: &Model,
    g: &mut Graph,
    bind: &mut Binder,
    batch: &MlmBatch,
    drop: Option<&mut Dropout>,
) -> Result<Var> {
    let logits = model.mlm_logits(g, bind, &batch.input, drop)?;
    g.cross_entropy(logits, &batch.labels)
}

pub fn seq2seq_forward(
    model: &Model,
    g: &mut Graph,
    bind: &mut Binder,
    batch: &Seq2SeqBatch,
    mut drop: Option<&mut Dropout>,
) -> Result<Var> {
    let states = model.encode(g, bind, &batch.source, drop.as_deref_mut())?;
    let logits = model.decode(g, bind, &batch.target_in, &states, &batch.source, drop)?;
    g.cross_entropy(logits, &batch.target_out)
}

/// Cycles through `data` in a fresh seeded permutation per epoch.
struct Order {
    seed: u64,
    epoch: Option<u64>,
    perm: Vec<usize>,
}

impl Order {
    fn new(seed: u64, n: usize) -> Self {
        Order {
            seed,
            epoch: None,
            perm: (0..n).collect(),
        }
    }

    fn get(&mut self, item: u64) -> usize {
        let n = self.perm.len() as u64;
        let epoch = item / n;
        if self.epoch != Some(epoch) {
            self.perm.sort_unstable();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, STREAM_ORDER, epoch));
            self.perm.shuffle(&mut rng);
            self.epoch = Some(epoch);
        }
        self.perm[(item % n) as usize]
    }
}

/// Where a stage sits within its plan.
#[derive(Clone, Copy, Debug)]
pub struct StagePosition<'a> {
    /// Updates performed by earlier stages of the plan.
    pub offset: u64,
    /// The plan-wide schedule, if any.
    pub plan_schedule: Option<&'a LrSchedule>,
}

/// Runs exactly `stage.steps` updates on packed sequences `data`.
///
/// Trainability is set from the stage's freeze list first; moments of
/// parameters that became frozen are discarded.
pub fn run_stage(
    trainer: &mut Trainer,
    stage: &TrainStage,
    pos: StagePosition,
    data: &[Vec<u32>],
    noise: &NoiseConfig,
    seed: u64,
) -> Result<Vec<TraceRecord>> {
    if data.is_empty() {
        return Err(Error::invalid(format!(
            "stage `{}` has no training data",
            stage.name
        )));
    }
    apply_freeze_plan(&mut trainer.model.params, &stage.freeze)?;
    trainer.state.retain_trainable(&trainer.model.params);
    let (schedule, base) = match &stage.lr {
        StageLr::Own(s) => (s, 0),
        StageLr::Plan => (
            pos.plan_schedule.ok_or_else(|| {
                Error::invalid(format!("stage `{}` needs a plan schedule", stage.name))
            })?,
            pos.offset,
        ),
    };
    let mut order = Order::new(seed, data.len());
    let bs = stage.batch_size as u64;
    let mut trace = Vec::with_capacity(stage.steps as usize);
    for k in 1..=stage.steps {
        let step = pos.offset + k;
        let lr = schedule.lr_at(base + k)?;
        let first = (step - 1) * bs;
        let seqs: Vec<&[u32]> = (0..bs)
            .map(|j| data[order.get(first + j)].as_slice())
            .collect();
        let mut drop = Dropout::new(
            trainer.model.cfg.dropout,
            derive_seed(seed, STREAM_DROPOUT, step),
        );
        let loss = match stage.objective {
            Objective::Mlm => {
                let batch = mlm_batch(&seqs, noise, trainer.model.cfg.vocab_size, seed, first)?;
                trainer.update(lr, &stage.name, step, |m, g, b| {
                    mlm_forward(m, g, b, &batch, Some(&mut drop))
                })?
            }
            Objective::Denoise(_) => {
                let batch = denoise_batch(&seqs, noise, seed, first)?;
                trainer.update(lr, &stage.name, step, |m, g, b| {
                    seq2seq_forward(m, g, b, &batch, Some(&mut drop))
                })?
            }
        };
        trace.push(TraceRecord {
            stage: stage.name.clone(),
            step,
            lr,
            loss,
        });
    }
    Ok(trace)
}

#[derive(Clone, Debug)]
pub struct StageTrace {
    pub stage: String,
    pub records: Vec<TraceRecord>,
}

#[derive(Clone, Debug)]
pub struct PlanRun {
    pub trainer: Trainer,
    pub traces: Vec<StageTrace>,
}

fn donor_params(
    donor: &Donor,
    data: &[Vec<u32>],
    seed: u64,
) -> Result<(ModelConfig, ParameterStore)> {
    match donor {
        Donor::Checkpoint(path) => {
            let ck = checkpoint::load(path)?;
            Ok((ck.model.cfg, ck.model.params))
        }
        Donor::Plan(plan) => {
            let run = run_plan(plan, data, derive_seed(seed, STREAM_INIT, 1))?;
            Ok((run.trainer.model.cfg, run.trainer.model.params))
        }
    }
}

/// The trainer a plan starts from, after any surgery named by its init.
pub fn initial_trainer(plan: &TrainPlan, data: &[Vec<u32>], seed: u64) -> Result<Trainer> {
    plan.validate()?;
    let init_seed = derive_seed(seed, STREAM_INIT, 0);
    match &plan.init {
        Init::Random => Ok(Trainer::new(
            Model::init(plan.model.clone(), init_seed)?,
            plan.optimizer,
        )),
        Init::FromCheckpoint(path) => {
            let ck = checkpoint::load(path)?;
            if ck.model.cfg != plan.model {
                return Err(Error::invalid(format!(
                    "checkpoint {} does not match the plan's model config",
                    path.display()
                )));
            }
            let mut t = Trainer::new(ck.model, plan.optimizer);
            if let Some((_, state)) = ck.optimizer {
                t.state = state;
            }
            Ok(t)
        }
        Init::WarmStartEncoder(donor) => {
            let (_, params) = donor_params(donor, data, seed)?;
            let params = warm_start_seq2seq(&params, &plan.model, init_seed)?;
            Ok(Trainer::new(
                Model::from_parts(plan.model.clone(), params)?,
                plan.optimizer,
            ))
        }
        Init::ExtractEncoder(donor) => {
            let (cfg, params) = donor_params(donor, data, seed)?;
            if !cfg.encoder_compatible(&plan.model) {
                return Err(Error::invalid(
                    "donor encoder does not match the plan's model",
                ));
            }
            let (_, params) = extract_encoder(&params, &cfg)?;
            Ok(Trainer::new(
                Model::from_parts(plan.model.clone(), params)?,
                plan.optimizer,
            ))
        }
    }
}

/// Runs the plan's stages in order on an already initialized trainer.
pub fn run_stages(
    mut trainer: Trainer,
    plan: &TrainPlan,
    data: &[Vec<u32>],
    seed: u64,
) -> Result<PlanRun> {
    plan.validate()?;
    let mut traces = Vec::with_capacity(plan.stages.len());
    let mut offset = 0;
    for stage in &plan.stages {
        let pos = StagePosition {
            offset,
            plan_schedule: plan.schedule.as_ref(),
        };
        let records = run_stage(
            &mut trainer,
            stage,
            pos,
            data,
            &plan.noise_for(stage.objective),
            seed,
        )?;
        traces.push(StageTrace {
            stage: stage.name.clone(),
            records,
        });
        offset += stage.steps;
    }
    Ok(PlanRun { trainer, traces })
}

pub fn run_plan(plan: &TrainPlan, data: &[Vec<u32>], seed: u64) -> Result<PlanRun> {
    let trainer = initial_trainer(plan, data, seed)?;
    run_stages(trainer, plan, data, seed)
}
