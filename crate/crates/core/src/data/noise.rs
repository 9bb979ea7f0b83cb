//! Corruption objectives: BERT-style MLM masking and span corruption for
//! seq2seq de-noising (spans dropped, or each span replaced by one MASK).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::vocab::{is_special, MASK, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::tensor::Label;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    MlmMask,
    SpanDrop,
    SpanMask,
}

/// What happens to a token selected for MLM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmSplits {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for MlmSplits {
    fn default() -> Self {
        MlmSplits {
            mask: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub ratio: f64,
    pub span_lambda: f64,
    pub mode: NoiseMode,
    #[serde(default)]
    pub mlm_splits: MlmSplits,
}

impl NoiseConfig {
    pub fn mlm() -> Self {
        NoiseConfig {
            ratio: 0.15,
            span_lambda: 3.0,
            mode: NoiseMode::MlmMask,
            mlm_splits: MlmSplits::default(),
        }
    }

    pub fn span(mode: NoiseMode) -> Self {
        NoiseConfig {
            mode,
            ..Self::mlm()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::invalid("corruption ratio must be in [0, 1]"));
        }
        let s = self.mlm_splits;
        if [s.mask, s.random, s.keep].iter().any(|p| *p < 0.0)
            || (s.mask + s.random + s.keep - 1.0).abs() > 1e-9
        {
            return Err(Error::invalid(
                "MLM splits must be non-negative and sum to 1",
            ));
        }
        if self.mode != NoiseMode::MlmMask && self.span_lambda <= 0.0 {
            return Err(Error::invalid("span lambda must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlmExample {
    pub input: Vec<u32>,
    pub labels: Vec<Label>,
}

/// Independently selects each non-special token with probability `ratio`
/// and replaces it by MASK, a random non-special token, or itself.
pub fn mlm_corrupt(
    seq: &[u32],
    nc: &NoiseConfig,
    vocab_size: usize,
    seed: u64,
) -> Result<MlmExample> {
    nc.validate()?;
    if vocab_size <= NUM_SPECIALS && nc.mlm_splits.random > 0.0 {
        return Err(Error::invalid(
            "random replacement needs non-special tokens",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input = seq.to_vec();
    let mut labels = vec![Label::Ignore; seq.len()];
    for (i, &tok) in seq.iter().enumerate() {
        if is_special(tok) {
            continue;
        }
        if rng.random::<f64>() >= nc.ratio {
            continue;
        }
        labels[i] = Label::Class(tok as usize);
        let u: f64 = rng.random();
        if u < nc.mlm_splits.mask {
            input[i] = MASK;
        } else if u < nc.mlm_splits.mask + nc.mlm_splits.random {
            input[i] = rng.random_range(NUM_SPECIALS as u32..vocab_size as u32);
        }
    }
    Ok(MlmExample { input, labels })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseExample {
    pub source: Vec<u32>,
    /// The uncorrupted sequence.
    pub target: Vec<u32>,
    /// Realized spans as `(start, len)`, in sampling order.
    pub spans: Vec<(usize, usize)>,
}

/// Builds the corrupted source for a given set of selected positions.
///
/// `SpanDrop` removes them; `SpanMask` replaces each maximal contiguous run
/// with a single MASK.
pub fn apply_selection(seq: &[u32], selected: &[bool], mode: NoiseMode) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len());
    for (i, &tok) in seq.iter().enumerate() {
        if !selected[i] {
            out.push(tok);
        } else if mode == NoiseMode::SpanMask && (i == 0 || !selected[i - 1]) {
            out.push(MASK);
        }
    }
    out
}

/// Span corruption.
///
/// Repeatedly draws a length from Poisson(λ) (zero draws are redrawn) and a
/// start uniformly among unselected non-special positions, then selects
/// forward until the length is reached or a special token, an already
/// selected token, or the sequence end stops it. Sampling stops once at
/// least `ratio` of the non-special tokens are selected; the last span may
/// overshoot. Specials, including DOC, are never selected, so spans never
/// cross document boundaries.
pub fn denoise_corrupt(seq: &[u32], nc: &NoiseConfig, seed: u64) -> Result<DenoiseExample> {
    nc.validate()?;
    if nc.mode == NoiseMode::MlmMask {
        return Err(Error::invalid("de-noising needs a span mode"));
    }
    if seq.is_empty() {
        return Err(Error::invalid("cannot corrupt an empty sequence"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poisson = Poisson::new(nc.span_lambda).map_err(|e| Error::invalid(e.to_string()))?;
    let eligible = seq.iter().filter(|&&t| !is_special(t)).count();
    let goal = nc.ratio * eligible as f64;
    let mut selected = vec![false; seq.len()];
    let mut count = 0usize;
    let mut spans = Vec::new();
    let mut candidates: Vec<usize> = Vec::with_capacity(seq.len());
    while (count as f64) < goal {
        candidates.clear();
        candidates.extend((0..seq.len()).filter(|&i| !selected[i] && !is_special(seq[i])));
        if candidates.is_empty() {
            break;
        }
        let len = loop {
            let l: f64 = poisson.sample(&mut rng);
            if l >= 1.0 {
                break l as usize;
            }
        };
        let start = candidates[rng.random_range(0..candidates.len())];
        let mut realized = 0;
        let mut i = start;
        while realized < len && i < seq.len() && !selected[i] && !is_special(seq[i]) {
            selected[i] = true;
            realized += 1;
            i += 1;
        }
        count += realized;
        spans.push((start, realized));
    }
    Ok(DenoiseExample {
        source: apply_selection(seq, &selected, nc.mode),
        target: seq.to_vec(),
        spans,
    })
}
