//! Binary checkpoints: magic, version, the model configuration, then every
//! tensor as a length-prefixed name, its shape and little-endian `f32`s.

use std::path::Path;

use indexmap::IndexMap;

use super::{ModelConfig, ModelParams};
use crate::binio::{read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"R3DU";
pub const FORMAT_VERSION: u32 = 1;

fn encode(params: &ModelParams) -> Vec<u8> {
    let cfg = params.config();
    let mut out = Vec::with_capacity(64 + params.scalar_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [cfg.base_filters, cfg.depth, cfg.hidden, cfg.recurrent_layers] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in cfg.patch {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in [cfg.dropout, cfg.bn_momentum, cfg.bn_epsilon, cfg.forget_bias] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode(params))
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(ModelConfig, IndexMap<String, Tensor<f32>>)> {
    let mut r = Reader::new(path, bytes);
    if r.take(4)? != MAGIC {
        return Err(r.format_error("not a model checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.format_error(format!("unsupported checkpoint version {version}")));
    }
    let mut next = || r.u32().map(|v| v as usize);
    let (base_filters, depth, hidden, recurrent_layers) = (next()?, next()?, next()?, next()?);
    let patch = [next()?, next()?, next()?, next()?];
    let config = ModelConfig {
        base_filters,
        depth,
        hidden,
        recurrent_layers,
        patch,
        dropout: r.f64()?,
        bn_momentum: r.f64()?,
        bn_epsilon: r.f64()?,
        forget_bias: r.f64()?,
    };
    let count = r.u32()? as usize;
    let mut tensors = IndexMap::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.format_error("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(r.format_error(format!("tensor `{name}` has implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product();
        let data = r.f32s(numel)?;
        let t = Tensor::from_vec(shape, data)
            .map_err(|e| r.format_error(format!("tensor `{name}`: {e}")))?;
        tensors.insert(name, t);
    }
    if r.remaining() != 0 {
        return Err(r.format_error(format!("{} trailing bytes", r.remaining())));
    }
    Ok((config, tensors))
}

/// Loads a checkpoint using the configuration stored in it.
pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let (config, tensors) = decode(path, &read_file(path)?)?;
    ModelParams::from_tensors(config, tensors)
}

/// Loads a checkpoint that must match `expected`. A mismatch names the first
/// layer, in canonical order, whose presence or shape differs.
pub fn load_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<ModelParams> {
    let path = path.as_ref();
    let (config, tensors) = decode(path, &read_file(path)?)?;
    for (name, shape) in expected.layout() {
        match tensors.get(&name) {
            None => {
                return Err(Error::CheckpointMismatch {
                    layer: name,
                    detail: "missing from checkpoint".into(),
                })
            }
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::CheckpointMismatch {
                    layer: name,
                    detail: format!("expected shape {shape:?}, checkpoint has {:?}", t.shape()),
                })
            }
            Some(_) => {}
        }
    }
    if &config != expected {
        // same tensor layout, different hyper-parameters
        return Err(Error::CheckpointMismatch {
            layer: "config".into(),
            detail: format!("stored configuration {config:?} differs from {expected:?}"),
        });
    }
    ModelParams::from_tensors(config, tensors)
}
