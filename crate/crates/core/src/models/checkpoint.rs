//! Model checkpoints: an 8-byte magic, a little-endian u64 header length,
//! a JSON header naming every parameter and its shape, then all parameter
//! values as little-endian f64 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build, ModelSpec, TapModel};
use crate::data::DatasetSchema;
use crate::error::{Error, Result};
use crate::tensor::{HasParams, Tensor};

const MAGIC: &[u8; 8] = b"TAPMDL01";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    seed: u64,
    spec: ModelSpec,
    schema: DatasetSchema,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(model: &TapModel, schema: &DatasetSchema, path: impl AsRef<Path>) -> Result<()> {
    let params = model.params();
    let header = Header {
        version: FORMAT_VERSION,
        seed: model.spec().seed,
        spec: model.spec().clone(),
        schema: schema.clone(),
        params: params
            .iter()
            .map(|p| ParamEntry {
                name: p.name().to_string(),
                shape: p.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let n_values: usize = params.iter().map(|p| p.value().len()).sum();
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * n_values);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in params {
        for v in p.value().data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TapModel, DatasetSchema)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    let mut model = build(&header.spec, &header.schema)?;
    let mut offset = 16 + header_len;
    let mut params = model.params_mut();
    if params.len() != header.params.len() {
        return Err(Error::Checkpoint("parameter list does not match spec".into()));
    }
    for (p, entry) in params.iter_mut().zip(&header.params) {
        if p.name() != entry.name || p.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` {:?} does not match `{}` {:?}",
                entry.name,
                entry.shape,
                p.name(),
                p.shape()
            )));
        }
        let n = p.value().len();
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated data for `{}`", entry.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *p.value_mut() = Tensor::new(entry.shape.clone(), data)?;
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
    }
    Ok((model, header.schema))
}
