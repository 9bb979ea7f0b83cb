//! Raw little-endian tensor files plus a JSON manifest describing them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// One manifest line: where a named tensor lives and how to decode it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub file: String,
}

pub fn encode(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * dtype.size());
    for &x in t.data() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
        }
    }
    out
}

pub fn decode(bytes: &[u8], shape: &[usize], dtype: Dtype) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if bytes.len() != numel * dtype.size() {
        return Err(Error::invalid(format!(
            "expected {} bytes for {shape:?} {dtype:?}, found {}",
            numel * dtype.size(),
            bytes.len()
        )));
    }
    let data = match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::new(shape.to_vec(), data)
}

/// Writes `t` under `dir/file` and returns its manifest entry.
pub fn write_tensor(dir: &Path, name: &str, t: &Tensor, dtype: Dtype) -> Result<TensorEntry> {
    let file = format!("{name}.bin");
    let path = dir.join(&file);
    fs::write(&path, encode(t, dtype)).map_err(|e| Error::io(&path, e))?;
    Ok(TensorEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        dtype,
        file,
    })
}

pub fn read_tensor(dir: &Path, entry: &TensorEntry) -> Result<Tensor> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode(&bytes, &entry.shape, entry.dtype)
}
