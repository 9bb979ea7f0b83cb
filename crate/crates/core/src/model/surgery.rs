//! Checkpoint-to-checkpoint weight transfers between encoder and seq2seq models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::params::ParameterStore;
use super::transformer::{init_decoder, init_encoder, init_output_head};
use crate::error::{Error, Result};

fn is_encoder_name(name: &str) -> bool {
    name.starts_with("encoder.")
}

/// Builds a seq2seq model whose encoder is a bit-exact copy of `donor`'s.
///
/// The decoder is freshly initialized from `seed`. The decoder token
/// embedding is tied to the encoder embedding. The LM head starts as a
/// copy of the embedding table but is stored separately.
pub fn warm_start_seq2seq(
    donor: &ParameterStore,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<ParameterStore> {
    cfg.validate()?;
    if !cfg.is_seq2seq() {
        return Err(Error::invalid("warm start target must have a decoder"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterStore::new();
    init_encoder(cfg, &mut p, &mut rng)?;

    let mut problems = Vec::new();
    let names: Vec<String> = p.owners().map(str::to_string).collect();
    for name in &names {
        match donor.get(name) {
            None => problems.push(format!("{name} (missing in donor)")),
            Some(t) if t.shape() != p.get(name).unwrap().shape() => problems.push(format!(
                "{name} (donor {:?}, expected {:?})",
                t.shape(),
                p.get(name).unwrap().shape()
            )),
            Some(t) => p.set(name, t.clone())?,
        }
    }
    if !problems.is_empty() {
        return Err(Error::ParamMismatch(problems));
    }

    init_decoder(cfg, &mut p, &mut rng)?;
    init_output_head(&mut p, "lm_head")?;
    Ok(p)
}

/// Keeps only the encoder of a seq2seq model and adds an MLM head whose
/// weight is initialized from (then untied from) the input embedding.
pub fn extract_encoder(
    seq2seq: &ParameterStore,
    cfg: &ModelConfig,
) -> Result<(ModelConfig, ParameterStore)> {
    if cfg.encoder_layers == 0 {
        return Err(Error::invalid("seq2seq model has no encoder layers"));
    }
    let enc_cfg = cfg.encoder_only();
    let mut p = seq2seq.filtered(is_encoder_name);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut expected = ParameterStore::new();
    init_encoder(&enc_cfg, &mut expected, &mut rng)?;
    let mut problems = Vec::new();
    for name in expected.owners() {
        match p.get(name) {
            None => problems.push(format!("{name} (missing)")),
            Some(t) if t.shape() != expected.get(name).unwrap().shape() => {
                problems.push(format!("{name} (shape {:?})", t.shape()))
            }
            Some(_) => {}
        }
    }
    if !problems.is_empty() {
        return Err(Error::ParamMismatch(problems));
    }
    p.set_all_trainable(true);
    init_output_head(&mut p, "mlm_head")?;
    Ok((enc_cfg, p))
}
