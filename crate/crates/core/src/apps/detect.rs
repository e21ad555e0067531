//! Slice-vector adversarial input detection and the `NNSD` detector file.
//!
//! `NNSD` layout (little-endian): magic `NNSD`, version byte (1), 32-byte
//! model fingerprint, `f32` theta, `u64` training sample count, then tree
//! nodes in pre-order: `u64` feature (`u64::MAX` for a leaf), `f32`
//! threshold, `i32` label (-1 for a split).

use std::fs;
use std::path::Path;

use super::cart::{cart_fit, CartConfig, FeatureRow, Node, Tree};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{Fingerprint, ModelGraph};
use crate::parallel::Workers;
use crate::slicer::{ContributionTable, Slicer};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NNSD";
const VERSION: u8 = 1;
const FORMAT: &str = "NNSD";
const NODE_LEN: usize = 16;

/// Dense per-synapse contributions in canonical synapse order.
pub fn slice_vector(t: &ContributionTable, model: &ModelGraph) -> Result<Vec<i64>> {
    if t.model != model.fingerprint()? {
        return Err(Error::Fingerprint("table was computed for a different model".into()));
    }
    let layout = model.layout()?;
    let mut v = vec![0i64; layout.synapse_count];
    for (id, c) in &t.synapses {
        v[model.synapse_index(&layout, *id)] = *c;
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub tree: Tree,
    pub theta: f32,
    pub sample_count: u64,
    pub model: Fingerprint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTraining {
    pub detector: Detector,
    /// Fraction of training samples on which the tree reproduces the
    /// model's prediction.
    pub agreement: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Normal,
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Detection {
    pub verdict: Verdict,
    pub predicted: usize,
    pub tree_label: usize,
}

/// Slice vector of `x` for its own predicted label.
pub fn predicted_row(slicer: &Slicer, x: &Tensor, theta: f32) -> Result<(usize, FeatureRow)> {
    let (label, dense) = slicer.slice_predicted(x, theta)?;
    Ok((label, FeatureRow::from_dense(&dense.synapses)))
}

/// Fits the detector on normal samples, labelled by the model's own
/// predictions.
pub fn train_detector(slicer: &Slicer, data: &Dataset, theta: f32, cfg: &CartConfig, workers: &Workers) -> Result<DetectorTraining> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rows = workers.try_map(&data.samples, |s| predicted_row(slicer, &s.input, theta))?;
    let (labels, rows): (Vec<usize>, Vec<FeatureRow>) = rows.into_iter().unzip();
    let tree = cart_fit(&rows, &labels, cfg)?;
    let agree = rows.iter().zip(&labels).filter(|(r, l)| tree.predict(r) == **l).count();
    Ok(DetectorTraining {
        agreement: agree as f64 / rows.len() as f64,
        detector: Detector {
            tree,
            theta,
            sample_count: data.len() as u64,
            model: *slicer.fingerprint(),
        },
    })
}

fn check(det: &Detector, slicer: &Slicer) -> Result<()> {
    if &det.model != slicer.fingerprint() {
        return Err(Error::Fingerprint("detector was trained for a different model".into()));
    }
    if det.tree.max_feature().is_some_and(|f| f >= slicer.layout().synapse_count) {
        return Err(Error::Fingerprint("detector references synapses beyond the model".into()));
    }
    Ok(())
}

/// Adversarial iff the tree's label for the slice vector differs from the
/// model's prediction. Slicing uses the detector's theta.
pub fn detect(det: &Detector, slicer: &Slicer, x: &Tensor) -> Result<Detection> {
    check(det, slicer)?;
    let (predicted, row) = predicted_row(slicer, x, det.theta)?;
    Ok(verdict(&det.tree, predicted, &row))
}

pub fn verdict(tree: &Tree, predicted: usize, row: &FeatureRow) -> Detection {
    let tree_label = tree.predict(row);
    Detection {
        verdict: if tree_label == predicted {
            Verdict::Normal
        } else {
            Verdict::Adversarial
        },
        predicted,
        tree_label,
    }
}

pub fn detect_batch<I>(det: &Detector, slicer: &Slicer, xs: &[I], workers: &Workers) -> Result<Vec<Detection>>
where
    I: AsRef<Tensor> + Sync,
{
    check(det, slicer)?;
    workers.try_map(xs, |x| {
        let (predicted, row) = predicted_row(slicer, x.as_ref(), det.theta)?;
        Ok(verdict(&det.tree, predicted, &row))
    })
}

pub fn detector_to_bytes(d: &Detector) -> Vec<u8> {
    let mut out = Vec::with_capacity(49 + NODE_LEN * d.tree.nodes.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&d.model);
    out.extend_from_slice(&d.theta.to_le_bytes());
    out.extend_from_slice(&d.sample_count.to_le_bytes());
    for node in &d.tree.nodes {
        let (feature, threshold, label) = match node {
            Node::Leaf { label } => (u64::MAX, 0.0f32, *label as i32),
            Node::Split { feature, threshold, .. } => (*feature as u64, *threshold, -1),
        };
        out.extend_from_slice(&feature.to_le_bytes());
        out.extend_from_slice(&threshold.to_le_bytes());
        out.extend_from_slice(&label.to_le_bytes());
    }
    out
}

pub fn detector_from_bytes(bytes: &[u8]) -> Result<Detector> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(Error::format(FORMAT, "missing NNSD magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(FORMAT, format!("unsupported version {}", bytes[4])));
    }
    if bytes.len() < 49 || !(bytes.len() - 49).is_multiple_of(NODE_LEN) {
        return Err(Error::format(FORMAT, "truncated file"));
    }
    let raw: Vec<(u64, f32, i32)> = bytes[49..]
        .chunks_exact(NODE_LEN)
        .map(|c| {
            (
                u64::from_le_bytes(c[..8].try_into().unwrap()),
                f32::from_le_bytes(c[8..12].try_into().unwrap()),
                i32::from_le_bytes(c[12..16].try_into().unwrap()),
            )
        })
        .collect();
    if raw.is_empty() {
        return Err(Error::format(FORMAT, "tree has no nodes"));
    }
    // Rebuild child links from the pre-order sequence.
    fn subtree(raw: &[(u64, f32, i32)], at: usize, nodes: &mut Vec<Node>, depth: usize) -> Result<usize> {
        let &(feature, threshold, label) = raw
            .get(at)
            .ok_or_else(|| Error::format(FORMAT, "tree ends inside a split"))?;
        if depth > 4096 {
            return Err(Error::format(FORMAT, "tree too deep"));
        }
        if feature == u64::MAX {
            if label < 0 {
                return Err(Error::format(FORMAT, format!("leaf {at} has label {label}")));
            }
            nodes[at] = Node::Leaf { label: label as usize };
            return Ok(at + 1);
        }
        if label != -1 || !threshold.is_finite() {
            return Err(Error::format(FORMAT, format!("split {at} is malformed")));
        }
        let right = subtree(raw, at + 1, nodes, depth + 1)?;
        let end = subtree(raw, right, nodes, depth + 1)?;
        nodes[at] = Node::Split {
            feature: feature as usize,
            threshold,
            left: at + 1,
            right,
        };
        Ok(end)
    }
    let mut nodes = vec![Node::Leaf { label: 0 }; raw.len()];
    if subtree(&raw, 0, &mut nodes, 0)? != raw.len() {
        return Err(Error::format(FORMAT, "trailing nodes after the tree"));
    }
    Ok(Detector {
        tree: Tree { nodes },
        model: bytes[5..37].try_into().unwrap(),
        theta: f32::from_le_bytes(bytes[37..41].try_into().unwrap()),
        sample_count: u64::from_le_bytes(bytes[41..49].try_into().unwrap()),
    })
}

pub fn save_detector(d: &Detector, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, detector_to_bytes(d)).map_err(|e| Error::io(path, e))
}

pub fn load_detector(path: impl AsRef<Path>) -> Result<Detector> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    detector_from_bytes(&bytes)
}
