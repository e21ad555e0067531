//! Dataset-wide mean activation of every neuron, and the `NNSP` file.
//!
//! `NNSP` layout (little-endian): magic `NNSP`, version byte (1), 32-byte
//! model fingerprint, 32-byte dataset hash, `u64` sample count, then one
//! `f32` mean per neuron in canonical neuron order.

use std::fs;
use std::path::Path;

use crate::dataset::{combine_hashes, sample_set_hash, Dataset};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::model::{Fingerprint, ModelGraph};
use crate::parallel::Workers;

const MAGIC: &[u8; 4] = b"NNSP";
const VERSION: u8 = 1;
const FORMAT: &str = "NNSP";
const HEADER_LEN: usize = 5 + 32 + 32 + 8;
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationProfile {
    /// Mean activation per neuron, canonical order.
    pub means: Vec<f32>,
    pub sample_count: u64,
    pub model: Fingerprint,
    /// Order-independent hash of the profiled samples.
    pub dataset: Fingerprint,
}

impl ActivationProfile {
    pub fn neuron_count(&self) -> usize {
        self.means.len()
    }

    /// Fails unless this profile was computed for `model`.
    pub fn check_model(&self, model: &ModelGraph) -> Result<()> {
        self.check_fingerprint(&model.fingerprint()?, model.layout()?.neuron_count)
    }

    pub fn check_fingerprint(&self, model: &Fingerprint, neuron_count: usize) -> Result<()> {
        if &self.model != model {
            return Err(Error::Fingerprint("profile was computed for a different model".into()));
        }
        if self.means.len() != neuron_count {
            return Err(Error::Fingerprint(format!(
                "profile covers {} neurons, model has {neuron_count}",
                self.means.len()
            )));
        }
        Ok(())
    }
}

pub fn profile(model: &ModelGraph, data: &Dataset, workers: &Workers) -> Result<ActivationProfile> {
    let engine = Engine::new(model)?;
    profile_with(&engine, &model.fingerprint()?, data, workers)
}

/// Means are accumulated in 64-bit over fixed-size chunks that are summed
/// in order, so the result does not depend on the worker count.
pub fn profile_with(engine: &Engine, model: &Fingerprint, data: &Dataset, workers: &Workers) -> Result<ActivationProfile> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.check_shape(engine.executor().input_shape())?;
    let n = engine.layout().neuron_count;
    let chunks: Vec<_> = data.samples.chunks(CHUNK).collect();
    let partial = workers.try_map(&chunks, |chunk| {
        let mut sums = vec![0.0f64; n];
        for s in chunk.iter() {
            let trace = engine.trace(&s.input)?;
            for (acc, m) in sums.iter_mut().zip(&trace.means) {
                *acc += m;
            }
        }
        Ok(sums)
    })?;
    let mut sums = vec![0.0f64; n];
    for part in partial {
        for (acc, v) in sums.iter_mut().zip(part) {
            *acc += v;
        }
    }
    let count = data.len() as f64;
    Ok(ActivationProfile {
        means: sums.iter().map(|s| (s / count) as f32).collect(),
        sample_count: data.len() as u64,
        model: *model,
        dataset: sample_set_hash(&data.samples),
    })
}

/// Sample-count weighted mean of two profiles of the same model.
pub fn profile_merge(a: &ActivationProfile, b: &ActivationProfile) -> Result<ActivationProfile> {
    a.check_fingerprint(&b.model, b.means.len())?;
    if a.sample_count == 0 || b.sample_count == 0 {
        return Err(Error::Config("cannot merge a profile with no samples".into()));
    }
    let (na, nb) = (a.sample_count as f64, b.sample_count as f64);
    let total = na + nb;
    Ok(ActivationProfile {
        means: a
            .means
            .iter()
            .zip(&b.means)
            .map(|(&x, &y)| ((x as f64 * na + y as f64 * nb) / total) as f32)
            .collect(),
        sample_count: a.sample_count + b.sample_count,
        model: a.model,
        dataset: combine_hashes(&a.dataset, &b.dataset),
    })
}

pub fn profile_to_bytes(p: &ActivationProfile) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * p.means.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&p.model);
    out.extend_from_slice(&p.dataset);
    out.extend_from_slice(&p.sample_count.to_le_bytes());
    for m in &p.means {
        out.extend_from_slice(&m.to_le_bytes());
    }
    out
}

pub fn profile_from_bytes(bytes: &[u8]) -> Result<ActivationProfile> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(Error::format(FORMAT, "missing NNSP magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(FORMAT, format!("unsupported version {}", bytes[4])));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(FORMAT, "truncated header"));
    }
    if !(bytes.len() - HEADER_LEN).is_multiple_of(4) {
        return Err(Error::format(FORMAT, "truncated mean table"));
    }
    let sample_count = u64::from_le_bytes(bytes[69..77].try_into().unwrap());
    if sample_count == 0 {
        return Err(Error::format(FORMAT, "sample count is zero"));
    }
    let means: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = means.iter().position(|m| !m.is_finite()) {
        return Err(Error::format(FORMAT, format!("neuron {i} has a non-finite mean")));
    }
    Ok(ActivationProfile {
        means,
        sample_count,
        model: bytes[5..37].try_into().unwrap(),
        dataset: bytes[37..69].try_into().unwrap(),
    })
}

pub fn save_profile(p: &ActivationProfile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, profile_to_bytes(p)).map_err(|e| Error::io(path, e))
}

pub fn load_profile(path: impl AsRef<Path>) -> Result<ActivationProfile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    profile_from_bytes(&bytes)
}
