//! Framing and padding of corrupted examples into model batches.

use crate::data::{denoise_corrupt, derive_seed, mlm_corrupt, NoiseConfig, BOS, EOS, PAD};
use crate::error::Result;
use crate::model::TokenBatch;
use crate::tensor::Label;

pub(crate) const STREAM_NOISE: u64 = 1;
pub(crate) const STREAM_ORDER: u64 = 2;
pub(crate) const STREAM_DROPOUT: u64 = 3;
pub(crate) const STREAM_INIT: u64 = 4;

/// Encoder input `BOS ids EOS`.
pub fn frame(ids: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(ids.len() + 2);
    v.push(BOS);
    v.extend_from_slice(ids);
    v.push(EOS);
    v
}

fn pad_labels(rows: &[Vec<Label>], len: usize) -> Vec<Label> {
    let mut out = Vec::with_capacity(rows.len() * len);
    for r in rows {
        out.extend_from_slice(r);
        out.extend(std::iter::repeat_n(Label::Ignore, len - r.len()));
    }
    out
}

#[derive(Clone, Debug)]
pub struct MlmBatch {
    pub input: TokenBatch,
    pub labels: Vec<Label>,
}

/// MLM batch; example `j` is corrupted with the seed for item `first_item + j`.
pub fn mlm_batch(
    seqs: &[&[u32]],
    noise: &NoiseConfig,
    vocab_size: usize,
    seed: u64,
    first_item: u64,
) -> Result<MlmBatch> {
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut labels = Vec::with_capacity(seqs.len());
    for (j, s) in seqs.iter().enumerate() {
        let ex = mlm_corrupt(
            s,
            noise,
            vocab_size,
            derive_seed(seed, STREAM_NOISE, first_item + j as u64),
        )?;
        inputs.push(frame(&ex.input));
        let mut l = Vec::with_capacity(ex.labels.len() + 2);
        l.push(Label::Ignore);
        l.extend(ex.labels);
        l.push(Label::Ignore);
        labels.push(l);
    }
    let input = TokenBatch::from_seqs(&inputs, PAD);
    let labels = pad_labels(&labels, input.len);
    Ok(MlmBatch { input, labels })
}

#[derive(Clone, Debug)]
pub struct Seq2SeqBatch {
    pub source: TokenBatch,
    /// `BOS target`.
    pub target_in: TokenBatch,
    /// `target EOS`, padded with ignored labels.
    pub target_out: Vec<Label>,
}

/// Teacher-forcing batch from explicit (source, target) pairs.
pub fn seq2seq_batch(pairs: &[(Vec<u32>, Vec<u32>)]) -> Seq2SeqBatch {
    let sources: Vec<Vec<u32>> = pairs.iter().map(|(s, _)| frame(s)).collect();
    let mut tin = Vec::with_capacity(pairs.len());
    let mut tout = Vec::with_capacity(pairs.len());
    for (_, t) in pairs {
        let mut i = Vec::with_capacity(t.len() + 1);
        i.push(BOS);
        i.extend_from_slice(t);
        tin.push(i);
        let mut o: Vec<Label> = t.iter().map(|&x| Label::Class(x as usize)).collect();
        o.push(Label::Class(EOS as usize));
        tout.push(o);
    }
    let target_in = TokenBatch::from_seqs(&tin, PAD);
    let target_out = pad_labels(&tout, target_in.len);
    Seq2SeqBatch {
        source: TokenBatch::from_seqs(&sources, PAD),
        target_in,
        target_out,
    }
}

/// De-noising batch; the target is always the uncorrupted sequence.
pub fn denoise_batch(
    seqs: &[&[u32]],
    noise: &NoiseConfig,
    seed: u64,
    first_item: u64,
) -> Result<Seq2SeqBatch> {
    let mut pairs = Vec::with_capacity(seqs.len());
    for (j, s) in seqs.iter().enumerate() {
        let ex = denoise_corrupt(
            s,
            noise,
            derive_seed(seed, STREAM_NOISE, first_item + j as u64),
        )?;
        pairs.push((ex.source, ex.target));
    }
    Ok(seq2seq_batch(&pairs))
}
