//! Held-out losses for the pre-training objectives. No dropout; corruption
//! seeds are fixed so evaluations are repeatable.

use serde::{Deserialize, Serialize};

use super::batch::{denoise_batch, mlm_batch, Seq2SeqBatch};
use super::runner::mlm_forward;
use crate::data::NoiseConfig;
use crate::error::Result;
use crate::model::{Binder, Model};
use crate::tensor::{Graph, Label, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    /// Mean NLL per predicted token.
    pub loss: f64,
    pub tokens: usize,
    /// Fraction of sequences whose every target token is the argmax
    /// prediction under teacher forcing (de-noising only).
    pub exact: Option<f64>,
}

fn counted(labels: &[Label]) -> usize {
    labels.iter().filter(|l| l.class().is_some()).count()
}

pub fn mlm_eval(
    model: &Model,
    data: &[Vec<u32>],
    noise: &NoiseConfig,
    seed: u64,
    batch_size: usize,
) -> Result<EvalStats> {
    let mut total = 0.0;
    let mut tokens = 0;
    for (c, chunk) in data.chunks(batch_size.max(1)).enumerate() {
        let seqs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        let batch = mlm_batch(
            &seqs,
            noise,
            model.cfg.vocab_size,
            seed,
            (c * batch_size) as u64,
        )?;
        let mut g = Graph::new();
        let mut bind = Binder::new(&model.params);
        let loss = mlm_forward(model, &mut g, &mut bind, &batch, None)?;
        let n = counted(&batch.labels);
        total += g.value(loss).data()[0] * n as f64;
        tokens += n;
    }
    Ok(EvalStats {
        loss: if tokens == 0 {
            0.0
        } else {
            total / tokens as f64
        },
        tokens,
        exact: None,
    })
}

/// Per-example flags: every labeled position's argmax equals its label.
pub fn teacher_forced_exact(logits: &Tensor, labels: &[Label], batch: usize) -> Vec<bool> {
    let rows_per = labels.len() / batch.max(1);
    (0..batch)
        .map(|b| {
            (b * rows_per..(b + 1) * rows_per).all(|r| match labels[r] {
                Label::Ignore => true,
                Label::Class(c) => {
                    let row = logits.row(r);
                    let best = row
                        .iter()
                        .enumerate()
                        .fold(0, |best, (i, &x)| if x > row[best] { i } else { best });
                    best == c
                }
            })
        })
        .collect()
}

fn seq2seq_stats(model: &Model, batches: &[Seq2SeqBatch]) -> Result<EvalStats> {
    let mut total = 0.0;
    let mut tokens = 0;
    let mut exact = 0usize;
    let mut examples = 0usize;
    for batch in batches {
        let mut g = Graph::new();
        let mut bind = Binder::new(&model.params);
        let states = model.encode(&mut g, &mut bind, &batch.source, None)?;
        let logits = model.decode(
            &mut g,
            &mut bind,
            &batch.target_in,
            &states,
            &batch.source,
            None,
        )?;
        let loss = g.cross_entropy(logits, &batch.target_out)?;
        let n = counted(&batch.target_out);
        total += g.value(loss).data()[0] * n as f64;
        tokens += n;
        exact += teacher_forced_exact(g.value(logits), &batch.target_out, batch.target_in.batch)
            .into_iter()
            .filter(|&e| e)
            .count();
        examples += batch.target_in.batch;
    }
    Ok(EvalStats {
        loss: if tokens == 0 {
            0.0
        } else {
            total / tokens as f64
        },
        tokens,
        exact: Some(if examples == 0 {
            0.0
        } else {
            exact as f64 / examples as f64
        }),
    })
}

pub fn denoise_eval(
    model: &Model,
    data: &[Vec<u32>],
    noise: &NoiseConfig,
    seed: u64,
    batch_size: usize,
) -> Result<EvalStats> {
    let bs = batch_size.max(1);
    let batches = data
        .chunks(bs)
        .enumerate()
        .map(|(c, chunk)| {
            let seqs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
            denoise_batch(&seqs, noise, seed, (c * bs) as u64)
        })
        .collect::<Result<Vec<_>>>()?;
    seq2seq_stats(model, &batches)
}

/// Loss and exactness on explicit (source, target) pairs.
pub fn seq2seq_eval(
    model: &Model,
    pairs: &[(Vec<u32>, Vec<u32>)],
    batch_size: usize,
) -> Result<EvalStats> {
    let batches: Vec<Seq2SeqBatch> = pairs
        .chunks(batch_size.max(1))
        .map(super::batch::seq2seq_batch)
        .collect();
    seq2seq_stats(model, &batches)
}
