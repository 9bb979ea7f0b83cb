use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::beam::{beam_search, GenConfig};
use super::metrics::{entity_f1, perplexity, rouge, sciem};
use super::tasks::{Example, TaskData, TaskKind};
use crate::data::{derive_seed, PAD};
use crate::error::{Error, Result};
use crate::model::{Binder, Dropout, HeadSpec, Model, TokenBatch};
use crate::tensor::{AdamW, Graph, Label, Var};
use crate::train::batch::{frame, seq2seq_batch};
use crate::train::{
    apply_freeze_plan, seq2seq_forward, Decay, FreezeTag, LrSchedule, Trainer, Warmup,
};

const STREAM_HEAD: u64 = 10;
const STREAM_EPOCH: u64 = 11;
const STREAM_DROPOUT: u64 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    SlotF1,
    ExactMatch,
    Perplexity,
}

impl Metric {
    pub fn key(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::SlotF1 => "f1",
            Metric::ExactMatch => "exact_match",
            Metric::Perplexity => "perplexity",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != Metric::Perplexity
    }

    fn fits(self, kind: TaskKind) -> bool {
        matches!(
            (self, kind),
            (Metric::Accuracy, TaskKind::Classification)
                | (Metric::SlotF1, TaskKind::Labeling)
                | (
                    Metric::ExactMatch | Metric::Perplexity,
                    TaskKind::Generation
                )
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub task: String,
    pub kind: TaskKind,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub warmup: Warmup,
    pub decay: Decay,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_updates: u64,
    pub metric: Metric,
    /// Required for classification and labeling; absent for generation.
    #[serde(default)]
    pub head: Option<HeadSpec>,
    #[serde(default = "default_freeze")]
    pub freeze: Vec<FreezeTag>,
    pub dropout: f64,
    #[serde(default)]
    pub generation: GenConfig,
    #[serde(default)]
    pub optimizer: AdamW,
}

fn default_freeze() -> Vec<FreezeTag> {
    vec![FreezeTag::Embeddings]
}

pub const TABLE8: [&str; 6] = ["xnli", "matis", "wikiann", "udpos", "mtop", "xsum"];

impl FinetuneConfig {
    /// Reference fine-tuning hyperparameters for a benchmark.
    pub fn table8(task: &str) -> Result<Self> {
        let encoder =
            |kind, lr, warmup, epochs, max_updates, metric, hidden: &[usize]| FinetuneConfig {
                task: task.to_string(),
                kind,
                peak_lr: lr,
                warmup_steps: warmup,
                warmup: Warmup::LinearFromZero,
                decay: Decay::LinearToZero,
                batch_size: 128,
                epochs,
                max_updates,
                metric,
                head: Some(HeadSpec {
                    kind: match kind {
                        TaskKind::Classification => crate::model::HeadKind::Classification,
                        _ => crate::model::HeadKind::Labeling,
                    },
                    hidden: hidden.to_vec(),
                }),
                freeze: default_freeze(),
                dropout: 0.1,
                generation: GenConfig::default(),
                optimizer: AdamW::default(),
            };
        let seq2seq = |metric| FinetuneConfig {
            task: task.to_string(),
            kind: TaskKind::Generation,
            peak_lr: 5e-6,
            warmup_steps: 1000,
            warmup: Warmup::ExponentialFromFloor { floor: 1e-7 },
            decay: Decay::LinearTo { end: 1e-7 },
            batch_size: 32,
            epochs: 200,
            max_updates: 50_000,
            metric,
            head: None,
            freeze: default_freeze(),
            dropout: 0.1,
            generation: GenConfig::default(),
            optimizer: AdamW::default(),
        };
        use TaskKind::*;
        Ok(match task {
            "xnli" => encoder(
                Classification,
                1e-5,
                1000,
                5,
                30_000,
                Metric::Accuracy,
                &[512],
            ),
            "matis" => encoder(Labeling, 3e-5, 500, 200, 7_000, Metric::SlotF1, &[256, 256]),
            "wikiann" => encoder(Labeling, 3e-5, 300, 20, 3_000, Metric::SlotF1, &[512]),
            "udpos" => encoder(Labeling, 3e-5, 1000, 56, 9_000, Metric::SlotF1, &[512]),
            "mtop" => seq2seq(Metric::ExactMatch),
            "xsum" => seq2seq(Metric::Perplexity),
            _ => {
                return Err(Error::UnknownPreset {
                    name: task.to_string(),
                    known: TABLE8.iter().map(|s| s.to_string()).collect(),
                })
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.metric.fits(self.kind) {
            return Err(Error::invalid(format!(
                "metric {:?} does not fit a {:?} task",
                self.metric, self.kind
            )));
        }
        if (self.kind == TaskKind::Generation) != self.head.is_none() {
            return Err(Error::invalid(
                "classification and labeling need a head; generation takes none",
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.max_updates == 0 {
            return Err(Error::invalid(
                "batch size, epochs and max updates must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    fn schedule(&self, total: u64) -> LrSchedule {
        LrSchedule {
            peak: self.peak_lr,
            warmup_steps: self.warmup_steps.min(total),
            warmup: self.warmup,
            decay: self.decay,
            total_steps: total,
        }
    }
}

/// The model fine-tuning starts from: the encoder plus a fresh head for
/// encoder tasks, the whole seq2seq model for generation.
pub fn prepare_model(
    pretrained: &Model,
    data: &TaskData,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Model> {
    let mut model = match cfg.kind {
        TaskKind::Generation => {
            if !pretrained.cfg.is_seq2seq() {
                return Err(Error::invalid("generation tasks need a seq2seq checkpoint"));
            }
            let mut m = pretrained.clone();
            m.head = None;
            m
        }
        _ => {
            let params = pretrained.params.filtered(|n| n.starts_with("encoder."));
            let mut m = Model::from_parts(pretrained.cfg.encoder_only(), params)?;
            let spec = cfg.head.clone().expect("validated");
            m.attach_head(spec, data.labels.len(), derive_seed(seed, STREAM_HEAD, 0))?;
            m
        }
    };
    model.cfg.dropout = cfg.dropout;
    Ok(model)
}

fn check_head(model: &Model, data: &TaskData) -> Result<()> {
    if data.kind == TaskKind::Generation {
        return Ok(());
    }
    match &model.head {
        None => Err(Error::invalid("model has no fine-tuned task head")),
        Some(h) if h.labels != data.labels.len() => Err(Error::invalid(format!(
            "head has {} labels, task has {}",
            h.labels,
            data.labels.len()
        ))),
        Some(_) => Ok(()),
    }
}

fn encoder_batch(examples: &[&Example]) -> (TokenBatch, Option<Vec<Vec<usize>>>, Vec<Label>) {
    let mut rows = Vec::new();
    let mut starts = Vec::new();
    let mut labels = Vec::new();
    let mut tagging = false;
    for ex in examples {
        match ex {
            Example::Classification { ids, label } => {
                rows.push(frame(ids));
                labels.push(Label::Class(*label));
            }
            Example::Labeling {
                ids,
                word_starts,
                labels: l,
            } => {
                tagging = true;
                rows.push(frame(ids));
                starts.push(word_starts.clone());
                labels.extend(l.iter().map(|&c| Label::Class(c)));
            }
            Example::Generation { .. } => unreachable!("encoder batch of generation examples"),
        }
    }
    (
        TokenBatch::from_seqs(&rows, PAD),
        tagging.then_some(starts),
        labels,
    )
}

fn pairs(examples: &[&Example]) -> Vec<(Vec<u32>, Vec<u32>)> {
    examples
        .iter()
        .map(|ex| match ex {
            Example::Generation { source, target, .. } => (source.clone(), target.clone()),
            _ => unreachable!("seq2seq batch of encoder examples"),
        })
        .collect()
}

fn task_loss(
    model: &Model,
    g: &mut Graph,
    bind: &mut Binder,
    examples: &[&Example],
    drop: Option<&mut Dropout>,
) -> Result<Var> {
    if matches!(examples.first(), Some(Example::Generation { .. })) {
        let batch = seq2seq_batch(&pairs(examples));
        return seq2seq_forward(model, g, bind, &batch, drop);
    }
    let (batch, starts, labels) = encoder_batch(examples);
    let logits = model.task_logits(g, bind, &batch, starts.as_deref(), drop)?;
    g.cross_entropy(logits, &labels)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > row[best] { i } else { best })
}

/// Every metric applicable to the task on `split`.
pub fn evaluate(
    model: &Model,
    data: &TaskData,
    split: &[Example],
    gc: &GenConfig,
) -> Result<BTreeMap<String, f64>> {
    check_head(model, data)?;
    if split.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let mut out = BTreeMap::new();
    const CHUNK: usize = 32;
    match data.kind {
        TaskKind::Classification => {
            let mut correct = 0;
            for chunk in split.chunks(CHUNK) {
                let refs: Vec<&Example> = chunk.iter().collect();
                let (batch, _, labels) = encoder_batch(&refs);
                let mut g = Graph::new();
                let mut bind = Binder::new(&model.params);
                let logits = model.task_logits(&mut g, &mut bind, &batch, None, None)?;
                let v = g.value(logits);
                correct += labels
                    .iter()
                    .enumerate()
                    .filter(|(r, l)| l.class() == Some(argmax(v.row(*r))))
                    .count();
            }
            out.insert("accuracy".into(), correct as f64 / split.len() as f64);
        }
        TaskKind::Labeling => {
            let mut pred = Vec::new();
            let mut gold = Vec::new();
            for chunk in split.chunks(CHUNK) {
                let refs: Vec<&Example> = chunk.iter().collect();
                let (batch, starts, labels) = encoder_batch(&refs);
                let mut g = Graph::new();
                let mut bind = Binder::new(&model.params);
                let logits =
                    model.task_logits(&mut g, &mut bind, &batch, starts.as_deref(), None)?;
                let v = g.value(logits);
                let mut r = 0;
                for ws in starts.as_deref().unwrap_or_default() {
                    let n = ws.len();
                    let name = |c: usize| data.labels[c].clone();
                    pred.push((r..r + n).map(|i| name(argmax(v.row(i)))).collect());
                    gold.push(
                        (r..r + n)
                            .map(|i| name(labels[i].class().unwrap()))
                            .collect(),
                    );
                    r += n;
                }
            }
            let prf = entity_f1(&pred, &gold)?;
            out.insert("precision".into(), prf.precision);
            out.insert("recall".into(), prf.recall);
            out.insert("f1".into(), prf.f1);
        }
        TaskKind::Generation => {
            let mut exact = 0;
            let (mut r1, mut r2, mut rl) = (0.0, 0.0, 0.0);
            let mut nll = 0.0;
            let mut tokens = 0;
            for ex in split {
                let Example::Generation {
                    source,
                    target_text,
                    ..
                } = ex
                else {
                    return Err(Error::invalid("mixed task examples"));
                };
                let hyp = beam_search(model, source, gc)?;
                let text = data.vocab.decode(&hyp.tokens);
                exact += sciem(&text, target_text) as usize;
                let r = rouge(&text, target_text);
                r1 += r.rouge1;
                r2 += r.rouge2;
                rl += r.rouge_l;
            }
            for chunk in split.chunks(CHUNK) {
                let refs: Vec<&Example> = chunk.iter().collect();
                let batch = seq2seq_batch(&pairs(&refs));
                let mut g = Graph::new();
                let mut bind = Binder::new(&model.params);
                let loss = seq2seq_forward(model, &mut g, &mut bind, &batch, None)?;
                let n = batch
                    .target_out
                    .iter()
                    .filter(|l| l.class().is_some())
                    .count();
                nll += g.value(loss).data()[0] * n as f64;
                tokens += n;
            }
            let n = split.len() as f64;
            out.insert("exact_match".into(), exact as f64 / n);
            out.insert("rouge1".into(), r1 / n);
            out.insert("rouge2".into(), r2 / n);
            out.insert("rougeL".into(), rl / n);
            out.insert("perplexity".into(), perplexity(nll, tokens)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub updates: u64,
    pub train_loss: f64,
    pub metric: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// The checkpoint with the best validation metric.
    pub model: Model,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Fine-tunes for `epochs` passes or `max_updates` updates, whichever comes
/// first, validating after every epoch and keeping the best checkpoint.
pub fn finetune(
    pretrained: &Model,
    data: &TaskData,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if cfg.kind != data.kind {
        return Err(Error::invalid(format!(
            "config is for a {:?} task, data is {:?}",
            cfg.kind, data.kind
        )));
    }
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::invalid(
            "fine-tuning needs non-empty train and validation splits",
        ));
    }
    let mut model = prepare_model(pretrained, data, cfg, seed)?;
    apply_freeze_plan(&mut model.params, &cfg.freeze)?;
    let per_epoch = data.train.len().div_ceil(cfg.batch_size) as u64;
    let total = (per_epoch * cfg.epochs as u64).min(cfg.max_updates);
    let schedule = cfg.schedule(total);
    let mut trainer = Trainer::new(model, cfg.optimizer);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut history = Vec::new();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        if step == total {
            break;
        }
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            STREAM_EPOCH,
            epoch as u64,
        )));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if step == total {
                break;
            }
            step += 1;
            let examples: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            let lr = schedule.lr_at(step)?;
            let mut drop = Dropout::new(cfg.dropout, derive_seed(seed, STREAM_DROPOUT, step));
            loss_sum += trainer.update(lr, &cfg.task, step, |m, g, b| {
                task_loss(m, g, b, &examples, Some(&mut drop))
            })?;
            batches += 1;
        }
        let metrics = evaluate(&trainer.model, data, &data.valid, &cfg.generation)?;
        let metric = metrics[cfg.metric.key()];
        history.push(EpochRecord {
            epoch,
            updates: step,
            train_loss: loss_sum / batches.max(1) as f64,
            metric,
        });
        let better = match &best {
            None => true,
            Some((b, _, _)) if cfg.metric.higher_is_better() => metric > *b,
            Some((b, _, _)) => metric < *b,
        };
        if better {
            best = Some((metric, epoch, trainer.model.clone()));
        }
    }
    let (best_metric, best_epoch, model) = best.expect("at least one epoch runs");
    Ok(FinetuneOutcome {
        model,
        best_metric,
        best_epoch,
        history,
    })
}
