//! `NNSM` model files.
//!
//! Layout (little-endian):
//! - magic `NNSM`, format version byte (1)
//! - `u64` length of a UTF-8 JSON header, then the header
//! - zero padding up to an 8-byte boundary, then the blob section
//!
//! The header lists layers, their parameters and the byte offset (relative
//! to the blob start) and shape of every `f32` array. Arrays start on 8-byte
//! boundaries. All floating-point data lives in the blob so it round-trips
//! bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerOp, LayerSpec, ModelGraph, ScaleParams, Window};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NNSM";
const VERSION: u8 = 1;
const FORMAT: &str = "NNSM";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    input_shape: Vec<usize>,
    class_count: usize,
    layers: Vec<HeaderLayer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLayer {
    kind: LayerKind,
    inputs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<Window>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<ScaleRefs>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobRef {
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScaleRefs {
    mean: BlobRef,
    std: BlobRef,
    gamma: BlobRef,
    beta: BlobRef,
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, shape: &[usize], data: &[f32]) -> BlobRef {
        while !self.bytes.len().is_multiple_of(8) {
            self.bytes.push(0);
        }
        let offset = self.bytes.len() as u64;
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        BlobRef {
            shape: shape.to_vec(),
            offset,
        }
    }

    fn tensor(&mut self, t: &Tensor) -> BlobRef {
        self.push(t.shape(), t.data())
    }

    fn vector(&mut self, v: &[f32]) -> BlobRef {
        self.push(&[v.len()], v)
    }
}

/// Serializes a validated model. Output is deterministic.
pub fn model_to_bytes(model: &ModelGraph) -> Result<Vec<u8>> {
    model.validate().map_err(Error::Invalid)?;
    let mut blob = BlobWriter { bytes: Vec::new() };
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let mut h = HeaderLayer {
            kind: layer.kind(),
            inputs: layer.inputs.clone(),
            in_channels: None,
            out_channels: None,
            in_features: None,
            out_features: None,
            window: None,
            weights: None,
            bias: None,
            scale: None,
        };
        match &layer.op {
            LayerOp::Conv2D {
                in_channels,
                out_channels,
                window,
            } => {
                h.in_channels = Some(*in_channels);
                h.out_channels = Some(*out_channels);
                h.window = Some(*window);
            }
            LayerOp::FullyConnected {
                in_features,
                out_features,
            } => {
                h.in_features = Some(*in_features);
                h.out_features = Some(*out_features);
            }
            LayerOp::AvgPool2D { window } | LayerOp::MaxPool2D { window } => {
                h.window = Some(*window);
            }
            LayerOp::Scale(p) => {
                h.scale = Some(ScaleRefs {
                    mean: blob.vector(&p.mean),
                    std: blob.vector(&p.std),
                    gamma: blob.vector(&p.gamma),
                    beta: blob.vector(&p.beta),
                });
            }
            _ => {}
        }
        h.weights = layer.weights.as_ref().map(|w| blob.tensor(w));
        h.bias = layer.bias.as_ref().map(|b| blob.tensor(b));
        layers.push(h);
    }
    let header = Header {
        input_shape: model.input_shape.clone(),
        class_count: model.class_count,
        layers,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(FORMAT, e.to_string()))?;

    let mut out = Vec::with_capacity(13 + json.len() + 8 + blob.bytes.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    while out.len() % 8 != 0 {
        out.push(0);
    }
    out.extend_from_slice(&blob.bytes);
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    if bytes.len() < 13 || &bytes[..4] != MAGIC {
        return Err(Error::format(FORMAT, "missing NNSM magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(FORMAT, format!("unsupported version {}", bytes[4])));
    }
    let header_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let header_end = 13usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::format(FORMAT, "header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[13..header_end])
        .map_err(|e| Error::format(FORMAT, format!("bad header: {e}")))?;
    let blob_start = header_end.div_ceil(8) * 8;
    let blob = bytes.get(blob_start..).unwrap_or(&[]);

    let mut layers = Vec::with_capacity(header.layers.len());
    for (index, h) in header.layers.into_iter().enumerate() {
        let missing = |what: &str| Error::Layer {
            layer: index,
            reason: format!("{} layer is missing `{what}`", h.kind),
        };
        let op = match h.kind {
            LayerKind::Input => LayerOp::Input,
            LayerKind::Conv2D => LayerOp::Conv2D {
                in_channels: h.in_channels.ok_or_else(|| missing("in_channels"))?,
                out_channels: h.out_channels.ok_or_else(|| missing("out_channels"))?,
                window: h.window.ok_or_else(|| missing("window"))?,
            },
            LayerKind::FullyConnected => LayerOp::FullyConnected {
                in_features: h.in_features.ok_or_else(|| missing("in_features"))?,
                out_features: h.out_features.ok_or_else(|| missing("out_features"))?,
            },
            LayerKind::AvgPool2D => LayerOp::AvgPool2D {
                window: h.window.ok_or_else(|| missing("window"))?,
            },
            LayerKind::MaxPool2D => LayerOp::MaxPool2D {
                window: h.window.ok_or_else(|| missing("window"))?,
            },
            LayerKind::ReLU => LayerOp::ReLU,
            LayerKind::Scale => {
                let s = h.scale.as_ref().ok_or_else(|| missing("scale"))?;
                LayerOp::Scale(ScaleParams {
                    mean: read_blob(blob, &s.mean, index)?.into_data(),
                    std: read_blob(blob, &s.std, index)?.into_data(),
                    gamma: read_blob(blob, &s.gamma, index)?.into_data(),
                    beta: read_blob(blob, &s.beta, index)?.into_data(),
                })
            }
            LayerKind::Add => LayerOp::Add,
            LayerKind::Maximum => LayerOp::Maximum,
            LayerKind::Flatten => LayerOp::Flatten,
            LayerKind::Output => LayerOp::Output,
        };
        let weights = h
            .weights
            .as_ref()
            .map(|r| read_blob(blob, r, index))
            .transpose()?;
        let bias = h.bias.as_ref().map(|r| read_blob(blob, r, index)).transpose()?;
        layers.push(LayerSpec {
            op,
            inputs: h.inputs,
            weights,
            bias,
        });
    }
    let model = ModelGraph {
        input_shape: header.input_shape,
        class_count: header.class_count,
        layers,
    };
    model.validate().map_err(Error::Invalid)?;
    Ok(model)
}

fn read_blob(blob: &[u8], r: &BlobRef, layer: usize) -> Result<Tensor> {
    let bad = |reason: String| Error::Layer { layer, reason };
    if !r.offset.is_multiple_of(8) {
        return Err(bad(format!("blob offset {} is not 8-byte aligned", r.offset)));
    }
    let n: usize = r.shape.iter().product();
    let start = r.offset as usize;
    let end = n
        .checked_mul(4)
        .and_then(|b| b.checked_add(start))
        .filter(|&e| e <= blob.len())
        .ok_or_else(|| bad(format!("array of shape {:?} overruns the blob", r.shape)))?;
    let data = blob[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(r.shape.clone(), data).map_err(|e| bad(e.to_string()))
}

pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = model_to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
