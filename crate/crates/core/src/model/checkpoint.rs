//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "MOELABCK"
//! version    u32       1
//! header_len u64       byte length of the JSON header
//! header     UTF-8 JSON (CheckpointHeader)
//! payload    every tensor's values, little-endian f32 or f64, in header order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DomainAccess, ModelConfig, MoeModel};
use crate::error::{Error, Result};
use crate::numerics::{Precision, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"MOELABCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub experts: usize,
    pub adaptive_router: bool,
    pub access: Vec<DomainAccess>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub precision: Precision,
    pub config: ModelConfig,
    pub temperature: Option<f64>,
    pub layers: Vec<LayerLayout>,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata, e.g. an echo of the run configuration.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn write_checkpoint<S: Real>(model: &MoeModel<S>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let width = S::PRECISION.byte_width();
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for id in model.params.ids() {
        let t = model.params.get(id);
        tensors.push(TensorEntry {
            name: model.params.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() * width;
    }
    let header = CheckpointHeader {
        precision: S::PRECISION,
        config: model.config.clone(),
        temperature: model
            .layers()
            .find_map(|l| l.adaptive.as_ref().map(|a| a.temperature)),
        layers: model
            .layers()
            .map(|l| LayerLayout {
                experts: l.num_experts(),
                adaptive_router: l.adaptive.is_some(),
                access: l.access.clone(),
            })
            .collect(),
        tensors,
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in model.params.ids() {
        for &v in model.params.get(id).data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Load("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Load(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(Error::Load("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Load(format!("bad header: {e}")))?;
    Ok((header, &body[hlen..]))
}

pub fn read_checkpoint<S: Real>(bytes: &[u8]) -> Result<(MoeModel<S>, CheckpointHeader)> {
    let (header, payload) = parse_header(bytes)?;
    if header.precision != S::PRECISION {
        return Err(Error::Load(format!(
            "checkpoint holds {:?} values, expected {:?}",
            header.precision,
            S::PRECISION
        )));
    }
    if header.layers.len() != header.config.num_layers {
        return Err(Error::Load("layer layout does not match config".into()));
    }
    // Rebuild the structure, then overwrite every tensor by name.
    let mut model = MoeModel::<S>::new(header.config.clone(), 0)?;
    if header.layers.iter().any(|l| l.adaptive_router) {
        let tau = header
            .temperature
            .ok_or_else(|| Error::Load("adaptive routers without temperature".into()))?;
        model.attach_adaptive_routers(0, tau)?;
    }
    for (l, layout) in header.layers.iter().enumerate() {
        let base = model.layer(l).num_experts();
        if layout.experts < base {
            return Err(Error::Load(format!("layer {l} has fewer experts than config")));
        }
        for _ in base..layout.experts {
            model.add_expert_copy(l, 0)?;
        }
        if layout.access.len() != layout.experts {
            return Err(Error::Load(format!("layer {l} access list length mismatch")));
        }
        model.blocks[l].moe.access = layout.access.clone();
    }
    if header.tensors.len() != model.params.len() {
        return Err(Error::Load(format!(
            "checkpoint has {} tensors, model expects {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    let width = S::PRECISION.byte_width();
    for entry in &header.tensors {
        let id = model
            .params
            .lookup(&entry.name)
            .ok_or_else(|| Error::Load(format!("unexpected tensor {}", entry.name)))?;
        if model.params.get(id).shape() != entry.shape.as_slice() {
            return Err(Error::Load(format!(
                "tensor {} has shape {:?}, expected {:?}",
                entry.name,
                entry.shape,
                model.params.get(id).shape()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n * width;
        if end > payload.len() {
            return Err(Error::Load(format!("tensor {} runs past end of file", entry.name)));
        }
        let data = payload[entry.offset..end]
            .chunks(width)
            .map(S::read_le)
            .collect();
        *model.params.get_mut(id) = Tensor::new(&entry.shape, data)?;
    }
    Ok((model, header))
}

pub fn save_checkpoint<S: Real>(path: &Path, model: &MoeModel<S>, meta: serde_json::Value) -> Result<()> {
    let bytes = write_checkpoint(model, meta)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint<S: Real>(path: &Path) -> Result<(MoeModel<S>, CheckpointHeader)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    read_checkpoint(&bytes)
}

/// Reads only the header, e.g. to find the precision before choosing an element type.
pub fn peek_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    Ok(parse_header(&bytes)?.0)
}
