//! Single-file checkpoint format.
//!
//! Layout: the 6-byte magic `CROC1\n`, a little-endian `u64` header length, a JSON
//! header (architecture, config echo, tensor index), then the tensor payloads as
//! contiguous little-endian values in index order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{Architecture, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"CROC1\n";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Exact equality of every parameter value.
    pub fn same_params(&self, other: &Checkpoint) -> Result<bool> {
        if self.params.len() != other.params.len() {
            return Ok(false);
        }
        for (name, a) in &self.params {
            let Some(b) = other.params.get(name) else {
                return Ok(false);
            };
            if a.dims() != b.dims() {
                return Ok(false);
            }
            let a = a.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let b = b.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    architecture: Architecture,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

fn dtype_tag(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut entries = Vec::with_capacity(ckpt.params.len());
    let mut payload = Vec::new();
    for (name, t) in &ckpt.params {
        let tag = dtype_tag(t.dtype())?;
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F32 => flat
                .to_vec1::<f32>()?
                .iter()
                .for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
            _ => flat
                .to_vec1::<f64>()?
                .iter()
                .for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
        }
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: tag.to_string(),
            shape: t.dims().to_vec(),
        });
    }
    let header = serde_json::to_vec(&Header {
        format: "CROC1".into(),
        architecture: ckpt.architecture,
        config: ckpt.config.clone(),
        tensors: entries,
    })?;

    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut write = |bytes: &[u8]| file.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&(header.len() as u64).to_le_bytes())?;
    write(&header)?;
    write(&payload)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("missing CROC1 magic".into()));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[6..14]);
    let header_len = u64::from_le_bytes(len) as usize;
    let body = &bytes[14..];
    if body.len() < header_len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])?;
    let mut payload = &body[header_len..];

    let mut params = BTreeMap::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let t = match entry.dtype.as_str() {
            "f32" => {
                let (chunk, rest) = split(payload, n * 4, &entry.name)?;
                payload = rest;
                let v: Vec<f32> = chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Tensor::from_vec(v, entry.shape.as_slice(), &Device::Cpu)?
            }
            "f64" => {
                let (chunk, rest) = split(payload, n * 8, &entry.name)?;
                payload = rest;
                let v: Vec<f64> = chunk
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                Tensor::from_vec(v, entry.shape.as_slice(), &Device::Cpu)?
            }
            other => return Err(Error::Checkpoint(format!("unknown dtype tag `{other}`"))),
        };
        params.insert(entry.name, t);
    }
    if !payload.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", payload.len())));
    }
    Ok(Checkpoint {
        architecture: header.architecture,
        config: header.config,
        params,
    })
}

fn split<'a>(buf: &'a [u8], n: usize, name: &str) -> Result<(&'a [u8], &'a [u8])> {
    if buf.len() < n {
        return Err(Error::Checkpoint(format!("truncated payload for `{name}`")));
    }
    Ok(buf.split_at(n))
}
