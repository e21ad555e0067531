//! Labelled sample sets and the `NNST` tensor container.
//!
//! `NNST` layout (little-endian): magic `NNST`, version byte (1), `u32`
//! tensor count, then per tensor a `u32` rank, `rank` `u32` dimensions, an
//! `i32` label (-1 for none) and the `f32` payload.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Fingerprint;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NNST";
const VERSION: u8 = 1;
const FORMAT: &str = "NNST";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_count: usize) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= class_count) {
            return Err(Error::Config(format!(
                "label {} out of range for {class_count} classes",
                s.label
            )));
        }
        Ok(Self {
            samples,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples `range` of this set, in order.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            samples: self.samples[range].to_vec(),
            class_count: self.class_count,
        }
    }

    /// Samples whose label is in `classes`, in order.
    pub fn restrict(&self, classes: &[usize]) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .filter(|s| classes.contains(&s.label))
                .cloned()
                .collect(),
            class_count: self.class_count,
        }
    }

    pub fn check_shape(&self, shape: &[usize]) -> Result<()> {
        match self.samples.iter().find(|s| s.input.shape() != shape) {
            Some(s) => Err(Error::Shape {
                expected: shape.to_vec(),
                actual: s.input.shape().to_vec(),
            }),
            None => Ok(()),
        }
    }

    /// Order-sensitive SHA-256 over every sample's label and payload.
    pub fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(sample_digest(s));
        }
        h.finalize().into()
    }
}

/// Order-independent hash of a sample multiset: per-sample digests are
/// summed lane-wise, so the hash of a union is the combination of the parts.
pub fn sample_set_hash(samples: &[Sample]) -> Fingerprint {
    samples
        .iter()
        .map(sample_digest)
        .fold([0u8; 32], |acc, d| combine_hashes(&acc, &d))
}

pub fn combine_hashes(a: &Fingerprint, b: &Fingerprint) -> Fingerprint {
    let mut out = [0u8; 32];
    for lane in 0..4 {
        let r = lane * 8..lane * 8 + 8;
        let x = u64::from_le_bytes(a[r.clone()].try_into().unwrap());
        let y = u64::from_le_bytes(b[r.clone()].try_into().unwrap());
        out[r].copy_from_slice(&x.wrapping_add(y).to_le_bytes());
    }
    out
}

/// SHA-256 of a tensor's shape and payload.
pub fn input_digest(t: &Tensor) -> Fingerprint {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

pub fn sample_digest(sample: &Sample) -> Fingerprint {
    let mut h = Sha256::new();
    h.update((sample.label as u64).to_le_bytes());
    for d in sample.input.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in sample.input.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Writes tensors with optional labels.
pub fn tensors_to_bytes(items: &[(&Tensor, Option<usize>)]) -> Vec<u8> {
    let payload: usize = items.iter().map(|(t, _)| 8 + 4 * t.shape().len() + 4 * t.len()).sum();
    let mut out = Vec::with_capacity(9 + payload);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (t, label) in items {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        let label = label.map_or(-1, |l| l as i32);
        out.extend_from_slice(&label.to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(FORMAT, "truncated payload"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads every tensor and its label (`None` for -1).
pub fn tensors_from_bytes(bytes: &[u8]) -> Result<Vec<(Tensor, Option<usize>)>> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(Error::format(FORMAT, "missing NNST magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(FORMAT, format!("unsupported version {}", bytes[4])));
    }
    let mut cur = Cursor { bytes, pos: 5 };
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for index in 0..count {
        let rank = cur.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(FORMAT, format!("tensor {index} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let label = match cur.i32()? {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(Error::format(FORMAT, format!("tensor {index} has label {l}"))),
        };
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::format(FORMAT, "tensor too large"))?)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(FORMAT, format!("tensor {index} has non-finite values")));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::format(FORMAT, e.to_string()))?;
        out.push((t, label));
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(FORMAT, "trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn dataset_to_bytes(d: &Dataset) -> Vec<u8> {
    let items: Vec<_> = d.samples.iter().map(|s| (&s.input, Some(s.label))).collect();
    tensors_to_bytes(&items)
}

pub fn dataset_from_bytes(bytes: &[u8], class_count: usize) -> Result<Dataset> {
    let samples = tensors_from_bytes(bytes)?
        .into_iter()
        .enumerate()
        .map(|(i, (input, label))| match label {
            Some(label) if label < class_count => Ok(Sample { input, label }),
            Some(label) => Err(Error::format(
                FORMAT,
                format!("sample {i} label {label} out of range for {class_count} classes"),
            )),
            None => Err(Error::format(FORMAT, format!("sample {i} has no label"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        class_count,
    })
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_bytes(d)).map_err(|e| Error::io(path, e))
}

/// Loads a labelled dataset; labels must be below `class_count`.
pub fn load_dataset(path: impl AsRef<Path>, class_count: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    dataset_from_bytes(&bytes, class_count)
}
