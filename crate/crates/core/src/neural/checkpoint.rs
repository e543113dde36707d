//! Model checkpoints: `"QSMN"`, u32 version, u32 header length, JSON header
//! (config, input statistics, step, tensor manifest), then every tensor as
//! little-endian f64 in manifest order. Optimizer moments are not stored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{build_unet, UNetModel};
use super::unet::UNetConfig;
use crate::error::{Error, Result};
use crate::preprocess::Standardization;

pub const MAGIC: &[u8; 4] = b"QSMN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    standardization: Standardization,
    step: u64,
    tensors: Vec<TensorEntry>,
}

fn tensors(model: &mut UNetModel) -> (Vec<TensorEntry>, Vec<f64>) {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut take = |p: &mut super::layers::Param| {
        entries.push(TensorEntry { name: p.name.clone(), shape: p.shape.clone() });
        payload.extend_from_slice(&p.value);
    };
    model.net.visit_params(&mut take);
    model.net.visit_buffers(&mut take);
    (entries, payload)
}

pub fn encode_checkpoint(model: &mut UNetModel) -> Result<Vec<u8>> {
    let (entries, payload) = tensors(model);
    let header = Header {
        config: model.config().clone(),
        standardization: model.standardization,
        step: model.step,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<UNetModel> {
    if bytes.len() < 12 {
        return Err(Error::Truncated { expected: 12, found: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { expected: String::from_utf8_lossy(MAGIC).into(), found: String::from_utf8_lossy(&bytes[..4]).into() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + hlen {
        return Err(Error::Truncated { expected: 12 + hlen, found: bytes.len() });
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + hlen])?;
    let mut model = build_unet(&header.config, 0)?;
    let (expected, _) = tensors(&mut model);
    if expected != header.tensors {
        return Err(Error::Parse("checkpoint tensor manifest does not match its configuration".into()));
    }
    let total: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let body = &bytes[12 + hlen..];
    if body.len() != 8 * total {
        return Err(Error::Truncated { expected: 12 + hlen + 8 * total, found: bytes.len() });
    }
    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut fill = |p: &mut super::layers::Param| {
        p.value.iter_mut().for_each(|v| *v = values.next().expect("length checked"));
    };
    model.net.visit_params(&mut fill);
    model.net.visit_buffers(&mut fill);
    model.standardization = header.standardization;
    model.step = header.step;
    Ok(model)
}

pub fn save_checkpoint(model: &mut UNetModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<UNetModel> {
    decode_checkpoint(&fs::read(path)?)
}
