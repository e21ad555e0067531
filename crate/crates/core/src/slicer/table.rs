//! Sparse contribution tables and the `NNSL` slice file.
//!
//! `NNSL` layout (little-endian): magic `NNSL`, version byte (1), 32-byte
//! model fingerprint, `u32` output count and that many `u32` logit units,
//! 32-byte sample-set hash, `f32` theta, `u64` sample count, then records
//! until end of file. A record is a tag byte (0 = neuron with `u32` layer
//! and unit, 1 = synapse with `u32` layer, out unit, in unit, kernel row and
//! kernel column) followed by an `i64` contribution.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::dataset::combine_hashes;
use crate::error::{Error, Result};
use crate::model::{Fingerprint, NeuronId, SynapseId};

const MAGIC: &[u8; 4] = b"NNSL";
const VERSION: u8 = 1;
const FORMAT: &str = "NNSL";

/// Cumulative integer contributions; absent entries are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionTable {
    pub model: Fingerprint,
    /// Criterion output units of the logit layer, ascending.
    pub outputs: Vec<usize>,
    pub theta: f32,
    pub sample_count: u64,
    /// Order-independent hash of the sliced inputs.
    pub samples: Fingerprint,
    pub neurons: BTreeMap<NeuronId, i64>,
    pub synapses: BTreeMap<SynapseId, i64>,
}

/// Neurons and synapses with nonzero contribution.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Slice {
    pub neurons: BTreeMap<NeuronId, i64>,
    pub synapses: BTreeMap<SynapseId, i64>,
}

impl Slice {
    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty() && self.synapses.is_empty()
    }
}

impl ContributionTable {
    pub fn empty(model: Fingerprint, outputs: Vec<usize>, theta: f32) -> Self {
        Self {
            model,
            outputs,
            theta,
            sample_count: 0,
            samples: [0; 32],
            neurons: BTreeMap::new(),
            synapses: BTreeMap::new(),
        }
    }

    pub fn neuron(&self, id: NeuronId) -> i64 {
        self.neurons.get(&id).copied().unwrap_or(0)
    }

    pub fn synapse(&self, id: SynapseId) -> i64 {
        self.synapses.get(&id).copied().unwrap_or(0)
    }

    /// Same model, outputs and theta.
    pub fn compatible(&self, other: &ContributionTable) -> bool {
        self.model == other.model && self.outputs == other.outputs && self.theta.to_bits() == other.theta.to_bits()
    }

    /// Every contribution negated.
    pub fn negated(&self) -> Self {
        let mut t = self.clone();
        t.neurons.values_mut().for_each(|v| *v = -*v);
        t.synapses.values_mut().for_each(|v| *v = -*v);
        t
    }

    fn absorb(&mut self, other: &ContributionTable) {
        for (k, v) in &other.neurons {
            *self.neurons.entry(*k).or_insert(0) += v;
        }
        for (k, v) in &other.synapses {
            *self.synapses.entry(*k).or_insert(0) += v;
        }
        self.neurons.retain(|_, v| *v != 0);
        self.synapses.retain(|_, v| *v != 0);
        self.sample_count += other.sample_count;
        self.samples = combine_hashes(&self.samples, &other.samples);
    }
}

/// Element-wise sum of tables sharing one criterion.
pub fn aggregate(tables: &[ContributionTable]) -> Result<ContributionTable> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Config("nothing to aggregate".into()))?;
    let mut acc = ContributionTable::empty(first.model, first.outputs.clone(), first.theta);
    for t in tables {
        if !t.compatible(first) {
            return Err(Error::Fingerprint(
                "tables differ in model, outputs or theta".into(),
            ));
        }
        acc.absorb(t);
    }
    Ok(acc)
}

pub fn extract_slice(t: &ContributionTable) -> Slice {
    Slice {
        neurons: t.neurons.clone(),
        synapses: t.synapses.clone(),
    }
}

pub fn table_to_bytes(t: &ContributionTable) -> Vec<u8> {
    let mut out = Vec::with_capacity(90 + 4 * t.outputs.len() + 13 * t.neurons.len() + 29 * t.synapses.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&t.model);
    out.extend_from_slice(&(t.outputs.len() as u32).to_le_bytes());
    for u in &t.outputs {
        out.extend_from_slice(&(*u as u32).to_le_bytes());
    }
    out.extend_from_slice(&t.samples);
    out.extend_from_slice(&t.theta.to_le_bytes());
    out.extend_from_slice(&t.sample_count.to_le_bytes());
    for (id, v) in &t.neurons {
        out.push(0);
        for f in [id.layer, id.unit] {
            out.extend_from_slice(&(f as u32).to_le_bytes());
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (id, v) in &t.synapses {
        out.push(1);
        for f in [id.layer, id.out_unit, id.in_unit, id.k_row, id.k_col] {
            out.extend_from_slice(&(f as u32).to_le_bytes());
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(FORMAT, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn table_from_bytes(bytes: &[u8]) -> Result<ContributionTable> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(Error::format(FORMAT, "missing NNSL magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(FORMAT, format!("unsupported version {}", bytes[4])));
    }
    let mut r = Reader { bytes, pos: 5 };
    let model: Fingerprint = r.take(32)?.try_into().unwrap();
    let count = r.u32()?;
    let outputs = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let samples: Fingerprint = r.take(32)?.try_into().unwrap();
    let theta = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
    let sample_count = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let mut t = ContributionTable {
        model,
        outputs,
        theta,
        sample_count,
        samples,
        neurons: BTreeMap::new(),
        synapses: BTreeMap::new(),
    };
    while !r.done() {
        let tag = r.take(1)?[0];
        let duplicate = match tag {
            0 => {
                let id = NeuronId {
                    layer: r.u32()?,
                    unit: r.u32()?,
                };
                let v = record_value(&mut r)?;
                t.neurons.insert(id, v).is_some()
            }
            1 => {
                let id = SynapseId {
                    layer: r.u32()?,
                    out_unit: r.u32()?,
                    in_unit: r.u32()?,
                    k_row: r.u32()?,
                    k_col: r.u32()?,
                };
                let v = record_value(&mut r)?;
                t.synapses.insert(id, v).is_some()
            }
            other => return Err(Error::format(FORMAT, format!("unknown record tag {other}"))),
        };
        if duplicate {
            return Err(Error::format(FORMAT, "duplicate record"));
        }
    }
    Ok(t)
}

fn record_value(r: &mut Reader) -> Result<i64> {
    let v = i64::from_le_bytes(r.take(8)?.try_into().unwrap());
    if v == 0 {
        return Err(Error::format(FORMAT, "zero contributions are not stored"));
    }
    Ok(v)
}

pub fn save_slice(t: &ContributionTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, table_to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn load_slice(path: impl AsRef<Path>) -> Result<ContributionTable> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    table_from_bytes(&bytes)
}
