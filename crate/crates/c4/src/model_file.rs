//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `C4MD` |
//! | 4 | format version (u32) |
//! | 4 | header length `n` (u32) |
//! | n | UTF-8 JSON header: architecture, stage count, input gamma, tensor index |
//! | 8·k | every parameter as f64, in tensor-index order |
//!
//! Nothing may follow the payload.

use std::fs;
use std::path::Path;

use c4_core::autodiff::Tensor;
use c4_core::cascade::{CascadeModel, ConvLayerSpec, StageNet, StageNetConfig};
use serde::{Deserialize, Serialize};

use crate::error::{C4Error, Result};

pub const MAGIC: &[u8; 4] = b"C4MD";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Layer {
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Architecture {
    in_channels: usize,
    layers: Vec<Layer>,
    dropout_p: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    stages: usize,
    input_gamma: f64,
    tensors: Vec<TensorEntry>,
}

/// Error at byte `offset` of an in-memory model image.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("model format error at byte {offset}: {message}")]
pub struct FormatError {
    pub offset: usize,
    pub message: String,
}

fn fail<T>(offset: usize, message: impl Into<String>) -> Result<T, FormatError> {
    Err(FormatError {
        offset,
        message: message.into(),
    })
}

fn tensor_names(stages: usize, layers: usize) -> impl Iterator<Item = String> {
    (0..stages).flat_map(move |s| {
        (0..layers).flat_map(move |l| {
            [
                format!("stage{s}.conv{l}.weight"),
                format!("stage{s}.conv{l}.bias"),
            ]
        })
    })
}

pub fn encode(model: &CascadeModel) -> Vec<u8> {
    let cfg = model.config();
    let names = tensor_names(model.stage_count(), cfg.layers.len());
    let params = model.stages().iter().flat_map(|s| s.params());
    let header = Header {
        architecture: Architecture {
            in_channels: cfg.in_channels,
            layers: cfg
                .layers
                .iter()
                .map(|l| Layer {
                    out_channels: l.out_channels,
                    kernel: l.kernel,
                    stride: l.stride,
                    padding: l.padding,
                })
                .collect(),
            dropout_p: cfg.dropout_p,
        },
        stages: model.stage_count(),
        input_gamma: model.input_gamma(),
        tensors: names
            .zip(params.clone())
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 8 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32, FormatError> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_le_bytes(b.try_into().expect("4 bytes"))),
        None => fail(bytes.len(), format!("file ends inside the {what}")),
    }
}

pub fn decode(bytes: &[u8]) -> Result<CascadeModel, FormatError> {
    match bytes.get(..4) {
        Some(m) if m == MAGIC => {}
        Some(_) => return fail(0, "bad magic, not a model file"),
        None => return fail(bytes.len(), "file ends inside the magic"),
    }
    let version = read_u32(bytes, 4, "version")?;
    if version != VERSION {
        return fail(4, format!("unsupported version {version}"));
    }
    let len = read_u32(bytes, 8, "header length")? as usize;
    let start = 12;
    let Some(json) = bytes.get(start..start + len) else {
        return fail(
            bytes.len(),
            format!("file ends inside the {len}-byte header"),
        );
    };
    let header: Header =
        serde_json::from_slice(json).or_else(|e| fail(start, format!("bad header: {e}")))?;
    let a = &header.architecture;
    let config = StageNetConfig {
        in_channels: a.in_channels,
        layers: a
            .layers
            .iter()
            .map(|l| ConvLayerSpec {
                out_channels: l.out_channels,
                kernel: l.kernel,
                stride: l.stride,
                padding: l.padding,
            })
            .collect(),
        dropout_p: a.dropout_p,
    };
    config
        .validate()
        .or_else(|e| fail(start, format!("bad architecture: {e}")))?;
    if header.stages == 0 {
        return fail(start, "model has no stages");
    }
    let expected: Vec<(String, Vec<usize>)> = tensor_names(header.stages, config.layers.len())
        .zip(
            config
                .param_shapes()
                .into_iter()
                .flat_map(|(w, b)| [w.to_vec(), vec![b]])
                .cycle(),
        )
        .collect();
    let listed: Vec<(String, Vec<usize>)> = header
        .tensors
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    if listed != expected {
        return fail(start, "tensor index does not match the architecture");
    }

    let mut offset = start + len;
    let mut tensors = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let n: usize = shape.iter().product();
        let Some(raw) = bytes.get(offset..offset + 8 * n) else {
            return fail(bytes.len(), format!("file ends inside tensor {name}"));
        };
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(
            Tensor::parameter(shape, data)
                .or_else(|e| fail(offset, format!("tensor {name}: {e}")))?,
        );
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return fail(
            offset,
            format!("{} trailing bytes after the payload", bytes.len() - offset),
        );
    }
    let per_stage = 2 * config.layers.len();
    let mut stages = Vec::with_capacity(header.stages);
    let mut rest = tensors.into_iter();
    for _ in 0..header.stages {
        let params: Vec<Tensor> = rest.by_ref().take(per_stage).collect();
        stages.push(
            StageNet::from_params(config.clone(), params)
                .or_else(|e| fail(start, e.to_string()))?,
        );
    }
    CascadeModel::from_stages(stages)
        .and_then(|m| m.with_input_gamma(header.input_gamma))
        .or_else(|e| fail(start, e.to_string()))
}

pub fn save_model(path: &Path, model: &CascadeModel) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| C4Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<CascadeModel> {
    let bytes = fs::read(path).map_err(|e| C4Error::io(path, e))?;
    decode(&bytes).map_err(|e| C4Error::format(path, e.to_string()))
}
