use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.3;

/// Per-language token counts and the smoothing exponent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub counts: BTreeMap<String, u64>,
    pub alpha: f64,
}

impl SamplingPolicy {
    pub fn probabilities(&self) -> Result<BTreeMap<String, f64>> {
        let counts: Vec<u64> = self.counts.values().copied().collect();
        let p = upsample_weights(&counts, self.alpha)?;
        Ok(self.counts.keys().cloned().zip(p).collect())
    }
}

/// `p_i = q_i^α / Σ_j q_j^α` with `q_i = count_i / Σ count`.
pub fn upsample_weights(counts: &[u64], alpha: f64) -> Result<Vec<f64>> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::invalid("language counts must be positive"));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid("sampling exponent must be positive"));
    }
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    let w: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 / total).powf(alpha))
        .collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}
