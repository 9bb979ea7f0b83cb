use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{Binder, Model, TokenBatch};
use crate::tensor::{kernels, Graph, Tensor};
use crate::train::batch::frame;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub beam_size: usize,
    /// Maximum generated tokens, counting EOS.
    pub max_len: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            beam_size: 3,
            max_len: 64,
        }
    }
}

/// A finished or partial hypothesis: generated ids without BOS, total log-prob.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub score: f64,
}

/// Higher score first; equal scores fall back to the smaller id sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Encodes `source` (framed with BOS/EOS) once and returns a closure giving
/// next-token log-probabilities for a set of prefixes.
pub struct Scorer<'a> {
    model: &'a Model,
    source: TokenBatch,
    states: Vec<Tensor>,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a Model, source: &[u32]) -> Result<Self> {
        if !model.cfg.is_seq2seq() {
            return Err(Error::invalid("generation needs a seq2seq model"));
        }
        let source = TokenBatch::from_seqs(&[frame(source)], PAD);
        let d = model.cfg.d_model;
        let states = model
            .encoder_states(&source)?
            .into_iter()
            .map(|s| s.reshape(&[source.len, d]))
            .collect::<Result<_>>()?;
        Ok(Scorer {
            model,
            source,
            states,
        })
    }

    /// Log-softmax over the vocabulary after each prefix (without BOS).
    pub fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let n = prefixes.len();
        let rows: Vec<Vec<u32>> = prefixes
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
            .collect();
        let target = TokenBatch::from_seqs(&rows, PAD);
        let src = TokenBatch {
            ids: self.source.ids.repeat(n),
            batch: n,
            len: self.source.len,
            pad: self.source.pad.repeat(n),
        };
        let mut g = Graph::new();
        let mut bind = Binder::new(&self.model.params);
        let states: Vec<_> = self
            .states
            .iter()
            .map(|s| {
                let tiled = Tensor::new(vec![n * self.source.len, s.cols()], s.data().repeat(n))?;
                Ok(g.constant(tiled))
            })
            .collect::<Result<_>>()?;
        let logits = self
            .model
            .decode(&mut g, &mut bind, &target, &states, &src, None)?;
        let logits = g.value(logits);
        Ok(prefixes
            .iter()
            .enumerate()
            .map(|(b, p)| {
                let row = logits.row(b * target.len + p.len());
                let lse = kernels::log_sum_exp(row);
                row.iter().map(|x| x - lse).collect()
            })
            .collect())
    }
}

/// Beam search ranked by total log-probability (no length normalization).
///
/// Hypotheses end at EOS (excluded from the returned ids) or when
/// `max_len` tokens have been generated. With `beam_size` 1 this is greedy
/// decoding.
pub fn beam_search(model: &Model, source: &[u32], gc: &GenConfig) -> Result<Hypothesis> {
    if gc.max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    if gc.beam_size == 0 {
        return Err(Error::invalid("beam_size must be at least 1"));
    }
    let scorer = Scorer::new(model, source)?;
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for t in 0..gc.max_len {
        let prefixes: Vec<Vec<u32>> = alive.iter().map(|h| h.tokens.clone()).collect();
        let lps = scorer.next_log_probs(&prefixes)?;
        let mut cands: Vec<Hypothesis> = Vec::with_capacity(alive.len() * model.cfg.vocab_size);
        for (h, lp) in alive.iter().zip(&lps) {
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok as u32);
                cands.push(Hypothesis {
                    tokens,
                    score: h.score + l,
                });
            }
        }
        cands.sort_by(rank);
        cands.truncate(gc.beam_size);
        alive.clear();
        for mut c in cands {
            if *c.tokens.last().unwrap() == EOS {
                c.tokens.pop();
                finished.push(c);
            } else if t + 1 == gc.max_len {
                finished.push(c);
            } else {
                alive.push(c);
            }
        }
        finished.sort_by(rank);
        let best_done = finished.first().map(|h| h.score);
        let best_alive = alive.first().map(|h| h.score);
        match (best_done, best_alive) {
            (_, None) => break,
            (Some(d), Some(a)) if d > a => break,
            _ => {}
        }
    }
    finished.sort_by(rank);
    Ok(finished.swap_remove(0))
}

/// Scores every sequence of at most `max_len` tokens and returns the best
/// one under the same conventions as [`beam_search`]. Exponential in
/// `max_len`; meant as a reference for tiny vocabularies.
pub fn exhaustive_best(model: &Model, source: &[u32], max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let scorer = Scorer::new(model, source)?;
    let mut frontier = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut best: Option<Hypothesis> = None;
    let mut offer = |h: Hypothesis| {
        if best.as_ref().is_none_or(|b| rank(&h, b) == Ordering::Less) {
            best = Some(h);
        }
    };
    for t in 0..max_len {
        let prefixes: Vec<Vec<u32>> = frontier.iter().map(|h| h.tokens.clone()).collect();
        let lps = scorer.next_log_probs(&prefixes)?;
        let mut next = Vec::new();
        for (h, lp) in frontier.iter().zip(&lps) {
            for (tok, &l) in lp.iter().enumerate() {
                let score = h.score + l;
                if tok as u32 == EOS {
                    offer(Hypothesis {
                        tokens: h.tokens.clone(),
                        score,
                    });
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok as u32);
                if t + 1 == max_len {
                    offer(Hypothesis { tokens, score });
                } else {
                    next.push(Hypothesis { tokens, score });
                }
            }
        }
        frontier = next;
    }
    Ok(best.expect("vocabulary is non-empty"))
}
