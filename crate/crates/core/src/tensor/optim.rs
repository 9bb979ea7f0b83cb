use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::model::ParameterStore;

/// AdamW hyperparameters. Defaults follow the fine-tuning setup:
/// betas (0.9, 0.99), weight decay 0.1, eps 1e-8.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Skip decay on rank-1 tensors (biases, norm gains, mixing logits).
    #[serde(default = "default_true")]
    pub decay_skips_vectors: bool,
}

fn default_true() -> bool {
    true
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.1,
            decay_skips_vectors: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Updates applied to this parameter since its moments were created.
    pub step: u64,
}

/// First/second moments keyed by the owning name of each trainable parameter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops moments of parameters that are no longer trainable so that a
    /// later unfreeze starts them from zero.
    pub fn retain_trainable(&mut self, params: &ParameterStore) {
        self.moments.retain(|name, _| params.is_trainable(name));
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam update with per-parameter bias correction.
    ///
    /// `grads` must hold exactly one entry per trainable parameter group,
    /// keyed by the group owner. Frozen parameters are never touched.
    pub fn step(
        &self,
        params: &mut ParameterStore,
        grads: &BTreeMap<String, Tensor>,
        state: &mut OptimState,
        lr: f64,
    ) -> Result<()> {
        let trainable: Vec<String> = params.trainable_owners().map(str::to_string).collect();
        if trainable.len() != grads.len() || trainable.iter().any(|n| !grads.contains_key(n)) {
            let missing: Vec<String> = trainable
                .iter()
                .filter(|n| !grads.contains_key(*n))
                .cloned()
                .chain(
                    grads
                        .keys()
                        .filter(|n| !trainable.contains(n))
                        .map(|n| format!("{n} (not trainable)")),
                )
                .collect();
            return Err(Error::invalid(format!(
                "gradients do not cover the trainable parameters: {}",
                missing.join(", ")
            )));
        }
        state.retain_trainable(params);
        for name in &trainable {
            let g = &grads[name];
            let w = params.get_mut(name).expect("trainable owner exists");
            if g.shape() != w.shape() {
                return Err(Error::ParamMismatch(vec![format!(
                    "{name}: gradient {:?} vs parameter {:?}",
                    g.shape(),
                    w.shape()
                )]));
            }
            let mom = state
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments {
                    m: Tensor::zeros(w.shape()),
                    v: Tensor::zeros(w.shape()),
                    step: 0,
                });
            if mom.m.shape() != w.shape() {
                return Err(Error::ParamMismatch(vec![format!(
                    "{name}: optimizer state {:?} vs parameter {:?}",
                    mom.m.shape(),
                    w.shape()
                )]));
            }
            mom.step += 1;
            let t = mom.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let decay = if self.decay_skips_vectors && w.shape().len() == 1 {
                0.0
            } else {
                self.weight_decay
            };
            let shrink = 1.0 - lr * decay;
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            for (i, (wi, gi)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *wi = *wi * shrink - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        state.step += 1;
        Ok(())
    }
}
