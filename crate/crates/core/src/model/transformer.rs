//! PreLayerNorm encoder and decoder stacks.
//!
//! Every sublayer computes `x + F(LN(x))`; a final LayerNorm follows the last
//! block of each stack. Activations are `[batch·len, d_model]` matrices.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{CrossAttention, ModelConfig};
use super::heads::TaskHead;
use super::params::ParameterStore;
use crate::error::{Error, Result};
use crate::tensor::{AttentionSpec, Gradients, Graph, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// A padded batch of token ids, row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
    /// `true` at padded positions.
    pub pad: Vec<bool>,
}

impl TokenBatch {
    /// Right-pads `seqs` with `pad_id` to the longest sequence.
    pub fn from_seqs(seqs: &[Vec<u32>], pad_id: u32) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut pad = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            pad.extend(std::iter::repeat_n(false, s.len()));
            ids.extend(std::iter::repeat_n(pad_id, len - s.len()));
            pad.extend(std::iter::repeat_n(true, len - s.len()));
        }
        TokenBatch {
            ids,
            batch: seqs.len(),
            len,
            pad,
        }
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }
}

/// Maps parameter names to graph leaves, creating each storage slot's leaf once.
///
/// Tied names therefore share a single leaf and their gradients accumulate.
pub struct Binder<'a> {
    params: &'a ParameterStore,
    vars: HashMap<usize, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ParameterStore) -> Self {
        Binder {
            params,
            vars: HashMap::new(),
        }
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        let slot = self
            .params
            .storage_id(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if let Some(&v) = self.vars.get(&slot) {
            return Ok(v);
        }
        let t = self.params.tensor(name)?.clone();
        let v = g.leaf(t, self.params.is_trainable(name));
        self.vars.insert(slot, v);
        Ok(v)
    }

    /// Gradient per trainable owner; parameters the loss does not reach get zeros.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .trainable_owners()
            .map(|name| {
                let slot = self.params.storage_id(name).expect("owner exists");
                let grad = self
                    .vars
                    .get(&slot)
                    .and_then(|v| grads.get(*v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.params.get(name).unwrap().shape()));
                (name.to_string(), grad)
            })
            .collect()
    }
}

/// Dropout state for a training forward pass.
pub struct Dropout {
    pub p: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        Dropout {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

fn apply_dropout(g: &mut Graph, x: Var, drop: &mut Option<&mut Dropout>) -> Var {
    match drop {
        Some(d) if d.p > 0.0 => g.dropout(x, d.p, &mut d.rng),
        _ => x,
    }
}

/// A transformer with its parameters and optional task head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParameterStore,
    pub head: Option<TaskHead>,
}

pub(crate) fn linear_names(prefix: &str) -> [String; 2] {
    [format!("{prefix}.weight"), format!("{prefix}.bias")]
}

fn insert_linear<R: Rng>(
    p: &mut ParameterStore,
    prefix: &str,
    din: usize,
    dout: usize,
    rng: &mut R,
) -> Result<()> {
    let [w, b] = linear_names(prefix);
    p.insert(w, Tensor::truncated_normal(&[din, dout], INIT_STD, rng))?;
    p.insert(b, Tensor::zeros(&[dout]))
}

fn insert_norm(p: &mut ParameterStore, prefix: &str, d: usize) -> Result<()> {
    p.insert(format!("{prefix}.gain"), Tensor::full(&[d], 1.0))?;
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]))
}

fn insert_attention<R: Rng>(
    p: &mut ParameterStore,
    prefix: &str,
    d: usize,
    rng: &mut R,
) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        insert_linear(p, &format!("{prefix}.{proj}"), d, d, rng)?;
    }
    Ok(())
}

fn insert_ffn<R: Rng>(
    p: &mut ParameterStore,
    prefix: &str,
    d: usize,
    f: usize,
    rng: &mut R,
) -> Result<()> {
    insert_linear(p, &format!("{prefix}.fc1"), d, f, rng)?;
    insert_linear(p, &format!("{prefix}.fc2"), f, d, rng)
}

/// Fresh encoder parameters (`encoder.*`).
pub(crate) fn init_encoder<R: Rng>(
    cfg: &ModelConfig,
    p: &mut ParameterStore,
    rng: &mut R,
) -> Result<()> {
    let d = cfg.d_model;
    p.insert(
        "encoder.embed_tokens",
        Tensor::truncated_normal(&[cfg.vocab_size, d], INIT_STD, rng),
    )?;
    p.insert(
        "encoder.embed_positions",
        Tensor::truncated_normal(&[cfg.max_positions, d], INIT_STD, rng),
    )?;
    for i in 0..cfg.encoder_layers {
        let l = format!("encoder.layers.{i}");
        insert_norm(p, &format!("{l}.attn_norm"), d)?;
        insert_attention(p, &format!("{l}.attn"), d, rng)?;
        insert_norm(p, &format!("{l}.ffn_norm"), d)?;
        insert_ffn(p, &format!("{l}.ffn"), d, cfg.d_ffn, rng)?;
    }
    insert_norm(p, "encoder.final_norm", d)
}

/// Fresh decoder parameters (`decoder.*`), with the decoder token
/// embedding tied to the encoder's.
pub(crate) fn init_decoder<R: Rng>(
    cfg: &ModelConfig,
    p: &mut ParameterStore,
    rng: &mut R,
) -> Result<()> {
    let d = cfg.d_model;
    p.tie("decoder.embed_tokens", "encoder.embed_tokens")?;
    p.insert(
        "decoder.embed_positions",
        Tensor::truncated_normal(&[cfg.max_positions, d], INIT_STD, rng),
    )?;
    for i in 0..cfg.decoder_layers {
        let l = format!("decoder.layers.{i}");
        insert_norm(p, &format!("{l}.self_attn_norm"), d)?;
        insert_attention(p, &format!("{l}.self_attn"), d, rng)?;
        insert_norm(p, &format!("{l}.cross_attn_norm"), d)?;
        insert_attention(p, &format!("{l}.cross_attn"), d, rng)?;
        insert_norm(p, &format!("{l}.ffn_norm"), d)?;
        insert_ffn(p, &format!("{l}.ffn"), d, cfg.d_ffn, rng)?;
        if cfg.cross_attention == CrossAttention::Fusion {
            let n = cfg.fusion_states();
            let mut logits = vec![0.0; n];
            logits[n - 1] = cfg.fusion_init_margin;
            p.insert(format!("decoder.fusion.{i}"), Tensor::new(vec![n], logits)?)?;
        }
    }
    insert_norm(p, "decoder.final_norm", d)
}

/// An untied output projection whose weight starts as a copy of the
/// encoder token embedding.
pub(crate) fn init_output_head(p: &mut ParameterStore, prefix: &str) -> Result<()> {
    let emb = p.tensor("encoder.embed_tokens")?.clone();
    let vocab = emb.shape()[0];
    p.insert(format!("{prefix}.weight"), emb)?;
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[vocab]))
}

impl Model {
    /// Randomly initialized model. Encoder-only configs get an MLM head,
    /// seq2seq configs a decoder and LM head.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterStore::new();
        init_encoder(&cfg, &mut p, &mut rng)?;
        if cfg.is_seq2seq() {
            init_decoder(&cfg, &mut p, &mut rng)?;
            init_output_head(&mut p, "lm_head")?;
        } else {
            init_output_head(&mut p, "mlm_head")?;
        }
        Ok(Model {
            cfg,
            params: p,
            head: None,
        })
    }

    pub fn from_parts(cfg: ModelConfig, params: ParameterStore) -> Result<Model> {
        cfg.validate()?;
        Ok(Model {
            cfg,
            params,
            head: None,
        })
    }

    fn check_tokens(&self, batch: &TokenBatch) -> Result<()> {
        if batch.len > self.cfg.max_positions {
            return Err(Error::SequenceTooLong {
                len: batch.len,
                max: self.cfg.max_positions,
            });
        }
        if let Some(&id) = batch
            .ids
            .iter()
            .find(|&&i| i as usize >= self.cfg.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(
        &self,
        g: &mut Graph,
        bind: &mut Binder,
        prefix: &str,
        batch: &TokenBatch,
        drop: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        self.check_tokens(batch)?;
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.len).collect();
        let tok = bind.var(g, &format!("{prefix}.embed_tokens"))?;
        let pos = bind.var(g, &format!("{prefix}.embed_positions"))?;
        let te = g.embedding(tok, &ids)?;
        let pe = g.embedding(pos, &positions)?;
        let x = g.add(te, pe)?;
        Ok(apply_dropout(g, x, drop))
    }

    fn linear(&self, g: &mut Graph, bind: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
        let [w, b] = linear_names(prefix);
        let w = bind.var(g, &w)?;
        let b = bind.var(g, &b)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, bind: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
        let gain = bind.var(g, &format!("{prefix}.gain"))?;
        let bias = bind.var(g, &format!("{prefix}.bias"))?;
        g.layer_norm(x, gain, bias, self.cfg.layer_norm_eps)
    }

    fn attention(
        &self,
        g: &mut Graph,
        bind: &mut Binder,
        prefix: &str,
        query: Var,
        memory: Var,
        spec: AttentionSpec,
    ) -> Result<Var> {
        let q = self.linear(g, bind, &format!("{prefix}.q"), query)?;
        let k = self.linear(g, bind, &format!("{prefix}.k"), memory)?;
        let v = self.linear(g, bind, &format!("{prefix}.v"), memory)?;
        let a = g.attention(q, k, v, spec)?;
        self.linear(g, bind, &format!("{prefix}.o"), a)
    }

    fn ffn(&self, g: &mut Graph, bind: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(g, bind, &format!("{prefix}.fc1"), x)?;
        let h = g.gelu(h);
        self.linear(g, bind, &format!("{prefix}.fc2"), h)
    }

    /// Encoder states: `states[0]` is the embedding output, `states[i]` the
    /// output of layer `i`. No final norm is applied here.
    pub fn encode(
        &self,
        g: &mut Graph,
        bind: &mut Binder,
        batch: &TokenBatch,
        mut drop: Option<&mut Dropout>,
    ) -> Result<Vec<Var>> {
        let mut x = self.embed(g, bind, "encoder", batch, &mut drop)?;
        let mut states = vec![x];
        for i in 0..self.cfg.encoder_layers {
            let l = format!("encoder.layers.{i}");
            let h = self.norm(g, bind, &format!("{l}.attn_norm"), x)?;
            let spec = AttentionSpec {
                batch: batch.batch,
                q_len: batch.len,
                k_len: batch.len,
                heads: self.cfg.attention_heads,
                causal: false,
                key_padding: Some(batch.pad.clone()),
            };
            let a = self.attention(g, bind, &format!("{l}.attn"), h, h, spec)?;
            let a = apply_dropout(g, a, &mut drop);
            x = g.add(x, a)?;
            let h = self.norm(g, bind, &format!("{l}.ffn_norm"), x)?;
            let f = self.ffn(g, bind, &format!("{l}.ffn"), h)?;
            let f = apply_dropout(g, f, &mut drop);
            x = g.add(x, f)?;
            states.push(x);
        }
        Ok(states)
    }

    /// Final-normed last encoder state, the input to every head.
    pub fn encoder_output(&self, g: &mut Graph, bind: &mut Binder, states: &[Var]) -> Result<Var> {
        let last = *states
            .last()
            .ok_or_else(|| Error::invalid("no encoder states"))?;
        self.norm(g, bind, "encoder.final_norm", last)
    }

    /// Cross-attention memory for decoder layer `layer`.
    fn memory(
        &self,
        g: &mut Graph,
        bind: &mut Binder,
        states: &[Var],
        layer: usize,
    ) -> Result<Var> {
        match self.cfg.cross_attention {
            CrossAttention::Standard => self.encoder_output(g, bind, states),
            CrossAttention::Fusion => {
                let used = if self.cfg.fusion_includes_embeddings {
                    states
                } else {
                    &states[1..]
                };
                let logits = bind.var(g, &format!("decoder.fusion.{layer}"))?;
                let mixed = g.mix(used, logits)?;
                self.norm(g, bind, "encoder.final_norm", mixed)
            }
        }
    }

    /// Decoder logits `[batch·len, vocab]` for teacher-forced `target_in`.
    pub fn decode(
        &self,
        g: &mut Graph,
        bind: &mut Binder,
        target_in: &TokenBatch,
        states: &[Var],
        source: &TokenBatch,
        mut drop: Option<&mut Dropout>,
    ) -> Result<Var> {
        if !self.cfg.is_seq2seq() {
            return Err(Error::invalid("model has no decoder"));
        }
        if states.len() != self.cfg.encoder_layers + 1 {
            return Err(Error::invalid(format!(
                "decoder needs {} encoder states, got {}",
                self.cfg.encoder_layers + 1,
                states.len()
            )));
        }
        if source.batch != target_in.batch {
            return Err(Error::invalid("source and target batch sizes differ"));
        }
        let shared_memory = match self.cfg.cross_attention {
            CrossAttention::Standard => Some(self.memory(g, bind, states, 0)?),
            CrossAttention::Fusion => None,
        };
        let mut x = self.embed(g, bind, "decoder", target_in, &mut drop)?;
        for i in 0..self.cfg.decoder_layers {
            let l = format!("decoder.layers.{i}");
            let h = self.norm(g, bind, &format!("{l}.self_attn_norm"), x)?;
            let spec = AttentionSpec {
                batch: target_in.batch,
                q_len: target_in.len,
                k_len: target_in.len,
                heads: self.cfg.attention_heads,
                causal: true,
                key_padding: Some(target_in.pad.clone()),
            };
            let a = self.attention(g, bind, &format!("{l}.self_attn"), h, h, spec)?;
            let a = apply_dropout(g, a, &mut drop);
            x = g.add(x, a)?;

            let mem = match shared_memory {
                Some(m) => m,
                None => self.memory(g, bind, states, i)?,
            };
            let h = self.norm(g, bind, &format!("{l}.cross_attn_norm"), x)?;
            let spec = AttentionSpec {
                batch: target_in.batch,
                q_len: target_in.len,
                k_len: source.len,
                heads: self.cfg.attention_heads,
                causal: false,
                key_padding: Some(source.pad.clone()),
            };
            let a = self.attention(g, bind, &format!("{l}.cross_attn"), h, mem, spec)?;
            let a = apply_dropout(g, a, &mut drop);
            x = g.add(x, a)?;

            let h = self.norm(g, bind, &format!("{l}.ffn_norm"), x)?;
            let f = self.ffn(g, bind, &format!("{l}.ffn"), h)?;
            let f = apply_dropout(g, f, &mut drop);
            x = g.add(x, f)?;
        }
        let h = self.norm(g, bind, "decoder.final_norm", x)?;
        self.projection(g, bind, "lm_head", h)
    }

    /// `h · Wᵀ + b` for a vocabulary projection stored as `[vocab, d_model]`.
    pub fn projection(
        &self,
        g: &mut Graph,
        bind: &mut Binder,
        prefix: &str,
        h: Var,
    ) -> Result<Var> {
        let [w, b] = linear_names(prefix);
        let w = bind.var(g, &w)?;
        let b = bind.var(g, &b)?;
        let y = g.matmul_t(h, w)?;
        g.add_row(y, b)
    }

    /// MLM logits `[batch·len, vocab]` for an encoder-only model.
    pub fn mlm_logits(
        &self,
        g: &mut Graph,
        bind: &mut Binder,
        batch: &TokenBatch,
        drop: Option<&mut Dropout>,
    ) -> Result<Var> {
        if !self.params.contains("mlm_head.weight") {
            return Err(Error::invalid("model has no MLM head"));
        }
        let states = self.encode(g, bind, batch, drop)?;
        let h = self.encoder_output(g, bind, &states)?;
        self.projection(g, bind, "mlm_head", h)
    }

    /// Encoder states as `[batch, len, d_model]` tensors, without dropout.
    pub fn encoder_states(&self, batch: &TokenBatch) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let mut bind = Binder::new(&self.params);
        let states = self.encode(&mut g, &mut bind, batch, None)?;
        states
            .iter()
            .map(|&s| {
                g.value(s)
                    .clone()
                    .reshape(&[batch.batch, batch.len, self.cfg.d_model])
            })
            .collect()
    }

    /// Seq2seq logits as `[batch, target_len, vocab]`, without dropout.
    pub fn seq2seq_logits(&self, source: &TokenBatch, target_in: &TokenBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut bind = Binder::new(&self.params);
        let states = self.encode(&mut g, &mut bind, source, None)?;
        let logits = self.decode(&mut g, &mut bind, target_in, &states, source, None)?;
        g.value(logits)
            .clone()
            .reshape(&[target_in.batch, target_in.len, self.cfg.vocab_size])
    }
}

/// Standalone fusion of encoder states for decoder layer `layer`:
/// `Σᵢ softmax(logits[layer])ᵢ · states[i]`.
pub fn fuse_memory(states: &[Tensor], fusion_logits: &[Tensor], layer: usize) -> Result<Tensor> {
    let logits = fusion_logits
        .get(layer)
        .ok_or_else(|| Error::invalid(format!("no fusion weights for decoder layer {layer}")))?;
    if logits.numel() != states.len() {
        return Err(Error::invalid(format!(
            "fusion weights of length {} for {} states",
            logits.numel(),
            states.len()
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = states.iter().map(|s| g.constant(s.clone())).collect();
    let l = g.constant(logits.clone());
    let out = g.mix(&vars, l)?;
    Ok(g.value(out).clone())
}
