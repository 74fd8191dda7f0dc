//! Binary model container: magic, JSON header, aligned f32 payload.
//!
//! Layout: `CODEMDL1`, a little-endian `u32` header length, the header
//! (space padded so the payload starts on a 64-byte boundary), then the
//! tensors as little-endian `f32`, each starting at a multiple of 64 bytes
//! from the payload start.

use codenet::net::{CodeHyper, Model, ModelParams, MsHyper, MsModelParams, Toggles};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"CODEMDL1";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: usize = 64;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated header")]
    TruncatedHeader,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("truncated payload: need {need} bytes, have {have}")]
    TruncatedPayload { need: usize, have: usize },
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),
    #[error("shape mismatch for {name}: header {found:?}, model {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("duplicate tensor {0}")]
    DuplicateTensor(String),
    #[error("unknown tensor {0}")]
    UnknownTensor(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("misaligned offset {offset} for {name}")]
    MisalignedOffset { name: String, offset: usize },
    #[error("overlapping tensor {0}")]
    Overlap(String),
    #[error("invalid model: {0}")]
    Model(#[from] codenet::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum Hyper {
    Code(CodeHyper),
    MultiScale(MsHyper),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub arch: String,
    pub hyper: Hyper,
    pub toggles: Toggles,
    pub tensors: Vec<TensorEntry>,
}

fn aligned(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn header_of(model: &Model) -> Header {
    let hyper = match model {
        Model::Code(m) => Hyper::Code(m.hyper),
        Model::MultiScale(m) => Hyper::MultiScale(m.hyper),
    };
    let mut offset = 0;
    let tensors = model
        .params()
        .into_iter()
        .map(|p| {
            let e = TensorEntry {
                name: p.name,
                shape: p.shape,
                byte_offset: offset,
            };
            offset = aligned(offset + 4 * p.data.len());
            e
        })
        .collect();
    Header {
        format_version: FORMAT_VERSION,
        arch: model.arch_name().to_string(),
        hyper,
        toggles: model.toggles(),
        tensors,
    }
}

/// Serializes `model`; parameters are stored as 32-bit floats.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let header = header_of(model);
    let mut json = serde_json::to_vec(&header).expect("header serializes");
    let start = aligned(12 + json.len());
    json.resize(start - 12, b' ');
    let mut out = Vec::with_capacity(start + 4 * model.param_count() + ALIGN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (p, e) in model.params().iter().zip(&header.tensors) {
        out.resize(start + e.byte_offset, 0);
        for v in p.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

fn empty_model(header: &Header) -> Result<Model, ContainerError> {
    Ok(match (header.arch.as_str(), &header.hyper) {
        ("code", Hyper::Code(h)) => Model::Code(ModelParams::zeros(*h, header.toggles)?),
        ("mcode", Hyper::MultiScale(h)) => {
            Model::MultiScale(MsModelParams::zeros(*h, header.toggles)?)
        }
        (arch, _) => {
            return Err(ContainerError::Header(format!(
                "arch {arch:?} does not match its hyperparameters"
            )))
        }
    })
}

/// Parses and validates a container.
pub fn from_bytes(bytes: &[u8]) -> Result<Model, ContainerError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(ContainerError::TruncatedHeader);
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let start = 12 + len;
    if bytes.len() < start {
        return Err(ContainerError::TruncatedHeader);
    }
    let header: Header = serde_json::from_slice(&bytes[12..start])
        .map_err(|e| ContainerError::Header(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(ContainerError::Version(header.format_version));
    }
    let mut model = empty_model(&header)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .params()
        .into_iter()
        .map(|p| (p.name, p.shape))
        .collect();

    let mut seen = std::collections::HashSet::new();
    for e in &header.tensors {
        if !seen.insert(e.name.as_str()) {
            return Err(ContainerError::DuplicateTensor(e.name.clone()));
        }
        if e.byte_offset % ALIGN != 0 {
            return Err(ContainerError::MisalignedOffset {
                name: e.name.clone(),
                offset: e.byte_offset,
            });
        }
    }
    let mut spans = Vec::new();
    for (i, (name, shape)) in expected.iter().enumerate() {
        let Some(e) = header.tensors.iter().find(|e| &e.name == name) else {
            return Err(ContainerError::MissingTensor(name.clone()));
        };
        if &e.shape != shape {
            return Err(ContainerError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: e.shape.clone(),
            });
        }
        let n: usize = shape.iter().product();
        spans.push((e.byte_offset, e.byte_offset + 4 * n, i));
    }
    if let Some(e) = header.tensors.iter().find(|e| !expected.iter().any(|(n, _)| n == &e.name)) {
        return Err(ContainerError::UnknownTensor(e.name.clone()));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(ContainerError::Overlap(expected[w[1].2].0.clone()));
        }
    }
    let end = spans.iter().map(|s| s.1).max().unwrap_or(0);
    let payload = &bytes[start..];
    if payload.len() < end {
        return Err(ContainerError::TruncatedPayload {
            need: end,
            have: payload.len(),
        });
    }
    if payload.len() > end {
        return Err(ContainerError::TrailingBytes(payload.len() - end));
    }
    let lookup: std::collections::HashMap<usize, usize> =
        spans.iter().map(|&(off, _, i)| (i, off)).collect();
    for (i, (_, data)) in model.params_mut().into_iter().enumerate() {
        let off = lookup[&i];
        for (k, v) in data.iter_mut().enumerate() {
            let at = off + 4 * k;
            *v = f32::from_le_bytes(payload[at..at + 4].try_into().expect("4 bytes")) as f64;
        }
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: &Path) -> Result<(), ContainerError> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model, ContainerError> {
    from_bytes(&std::fs::read(path)?)
}

/// Rounds every parameter to 32-bit so the in-memory model equals what a
/// save and load would produce.
pub fn round_to_f32(model: &mut Model) {
    for (_, d) in model.params_mut() {
        d.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
