//! Checkpoint directories: a canonical `manifest.json` plus one raw tensor
//! file per parameter slot and optimizer moment.
//!
//! Saving a freshly loaded checkpoint reproduces every byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParameterStore, TaskHead};
use crate::tensor::io::{read_tensor, write_tensor, Dtype, TensorEntry};
use crate::tensor::{AdamW, Moments, OptimState};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

/// Where a checkpoint came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub plan: String,
    pub stage: String,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<(AdamW, OptimState)>,
    pub provenance: Provenance,
    /// Hash of the configuration that produced this checkpoint.
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    step: u64,
    m: TensorEntry,
    v: TensorEntry,
}

#[derive(Serialize, Deserialize)]
struct OptimManifest {
    adamw: AdamW,
    step: u64,
    moments: Vec<MomentEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    model: ModelConfig,
    head: Option<TaskHead>,
    /// One entry per storage slot, keyed by the slot owner.
    tensors: Vec<TensorEntry>,
    /// Owner first, then its aliases.
    ties: Vec<Vec<String>>,
    trainable: BTreeMap<String, bool>,
    optimizer: Option<OptimManifest>,
    provenance: Provenance,
    config_hash: String,
}

/// Hex SHA-256 of the canonical JSON form of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn put(dir: &Path, sub: &str, name: &str, t: &crate::tensor::Tensor) -> Result<TensorEntry> {
    let mut e = write_tensor(&dir.join(sub), name, t, Dtype::F64)?;
    e.file = format!("{sub}/{}", e.file);
    Ok(e)
}

pub fn save(dir: &Path, ck: &Checkpoint) -> Result<()> {
    for sub in ["params", "optim"] {
        let d = dir.join(sub);
        if d.exists() {
            fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    fs::create_dir_all(dir.join("params")).map_err(|e| Error::io(dir, e))?;
    let p = &ck.model.params;
    let mut tensors = Vec::new();
    let mut ties = Vec::new();
    let mut trainable = BTreeMap::new();
    for owner in p.owners() {
        tensors.push(put(dir, "params", owner, p.tensor(owner)?)?);
        trainable.insert(owner.to_string(), p.is_trainable(owner));
        let aliases = p.aliases(owner);
        if !aliases.is_empty() {
            let mut group = vec![owner.to_string()];
            group.extend(aliases.into_iter().map(str::to_string));
            ties.push(group);
        }
    }
    let optimizer = match &ck.optimizer {
        None => None,
        Some((adamw, state)) => {
            fs::create_dir_all(dir.join("optim")).map_err(|e| Error::io(dir, e))?;
            let mut moments = Vec::new();
            for (name, mom) in &state.moments {
                moments.push(MomentEntry {
                    name: name.clone(),
                    step: mom.step,
                    m: put(dir, "optim", &format!("{name}.m"), &mom.m)?,
                    v: put(dir, "optim", &format!("{name}.v"), &mom.v)?,
                });
            }
            Some(OptimManifest {
                adamw: *adamw,
                step: state.step,
                moments,
            })
        }
    };
    let manifest = Manifest {
        format: FORMAT_VERSION,
        model: ck.model.cfg.clone(),
        head: ck.model.head.clone(),
        tensors,
        ties,
        trainable,
        optimizer,
        provenance: ck.provenance.clone(),
        config_hash: ck.config_hash.clone(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    let path = dir.join(MANIFEST);
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "{}: checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            path.display(),
            m.format
        )));
    }
    let mut params = ParameterStore::new();
    for e in &m.tensors {
        params.insert(e.name.clone(), read_tensor(dir, e)?)?;
    }
    for group in &m.ties {
        let (owner, aliases) = group
            .split_first()
            .ok_or_else(|| Error::invalid("empty tie group in manifest"))?;
        for a in aliases {
            params.tie(a.clone(), owner)?;
        }
    }
    for (name, &flag) in &m.trainable {
        params.set_trainable(name, flag)?;
    }
    let optimizer = match m.optimizer {
        None => None,
        Some(o) => {
            let mut state = OptimState {
                step: o.step,
                moments: BTreeMap::new(),
            };
            for e in o.moments {
                state.moments.insert(
                    e.name,
                    Moments {
                        m: read_tensor(dir, &e.m)?,
                        v: read_tensor(dir, &e.v)?,
                        step: e.step,
                    },
                );
            }
            Some((o.adamw, state))
        }
    };
    let mut model = Model::from_parts(m.model, params)?;
    model.head = m.head;
    Ok(Checkpoint {
        model,
        optimizer,
        provenance: m.provenance,
        config_hash: m.config_hash,
    })
}
