//! Straightforward reference implementation of the backward analysis,
//! used to cross-check [`super::Slicer`]. Hash maps, nested loops, and a
//! quadratic exclusion search; nothing is shared with the fast path.

use std::collections::HashMap;

use super::table::ContributionTable;
use crate::dataset::input_digest;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::model::{LayerOp, ModelGraph, NeuronId, SynapseId};
use crate::profile::ActivationProfile;
use crate::tensor::Tensor;

type SynKey = (usize, usize, usize, usize, usize);

struct Candidate {
    pred: (usize, usize),
    syn: Option<SynKey>,
    mass: f64,
    local: f64,
}

pub fn oracle_backward(m: &ModelGraph, p: &ActivationProfile, x: &Tensor, outputs: &[NeuronId], theta: f32) -> Result<ContributionTable> {
    let fingerprint = m.fingerprint()?;
    if p.model != fingerprint {
        return Err(Error::Fingerprint("profile was computed for a different model".into()));
    }
    if !(theta >= 0.0) {
        return Err(Error::Config("negative theta".into()));
    }
    let trace = Engine::new(m)?.trace(x)?;
    if p.means.len() != trace.means.len() {
        return Err(Error::Fingerprint("profile size differs from model".into()));
    }
    let offsets = &trace.neuron_offsets;
    let mean = |l: usize, u: usize| trace.means[offsets[l] + u];
    let delta = |l: usize, u: usize| trace.means[offsets[l] + u] - p.means[offsets[l] + u] as f64;
    let last = m.layers.len() - 1;

    let mut contrib: HashMap<(usize, usize), i64> = HashMap::new();
    let mut synapses: HashMap<SynKey, i64> = HashMap::new();
    let mut units_out = Vec::new();
    if outputs.is_empty() {
        return Err(Error::Config("no outputs".into()));
    }
    for o in outputs {
        if o.layer != last || o.unit >= m.class_count {
            return Err(Error::Config("output outside the logit layer".into()));
        }
        contrib.insert((last, o.unit), 1);
        if !units_out.contains(&o.unit) {
            units_out.push(o.unit);
        }
    }
    units_out.sort();

    let theta = theta as f64;
    let mut l = last;
    while l > 0 {
        let spec = &m.layers[l];
        let units = offsets[l + 1] - offsets[l];
        for u in 0..units {
            let c = *contrib.get(&(l, u)).unwrap_or(&0);
            if c == 0 {
                continue;
            }
            let dy = delta(l, u);
            let y = mean(l, u);
            let k = c as f64 * dy;
            let mut cands: Vec<Candidate> = Vec::new();
            let mut single = false;
            match &spec.op {
                LayerOp::Input => {}
                LayerOp::Output => {
                    *contrib.entry((spec.inputs[0], u)).or_insert(0) += c;
                }
                LayerOp::Flatten => {
                    let src = spec.inputs[0];
                    let per_channel = trace.counts[src];
                    *contrib.entry((src, u / per_channel)).or_insert(0) += c;
                }
                LayerOp::FullyConnected { .. } => {
                    let w = spec.weights.as_ref().unwrap();
                    let n_in = w.shape()[1];
                    let src = spec.inputs[0];
                    for i in 0..n_in {
                        let wv = w.data()[u * n_in + i] as f64;
                        let mass = wv * delta(src, i);
                        cands.push(Candidate {
                            pred: (src, i),
                            syn: Some((l, u, i, 0, 0)),
                            mass,
                            local: k * mass,
                        });
                    }
                }
                LayerOp::Conv2D { .. } => {
                    let w = spec.weights.as_ref().unwrap();
                    let (n_in, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
                    let src = spec.inputs[0];
                    for i in 0..n_in {
                        for r in 0..kh {
                            for q in 0..kw {
                                let wv = w.data()[((u * n_in + i) * kh + r) * kw + q] as f64;
                                let mass = wv * delta(src, i);
                                cands.push(Candidate {
                                    pred: (src, i),
                                    syn: Some((l, u, i, r, q)),
                                    mass,
                                    local: k * mass,
                                });
                            }
                        }
                    }
                }
                LayerOp::Add => {
                    for &src in &spec.inputs {
                        let mass = 1.0 * delta(src, u);
                        cands.push(Candidate {
                            pred: (src, u),
                            syn: None,
                            mass,
                            local: k * mass,
                        });
                    }
                }
                LayerOp::Maximum => {
                    single = true;
                    let mut best = 0;
                    for (slot, &src) in spec.inputs.iter().enumerate() {
                        if mean(src, u) > mean(spec.inputs[best], u) {
                            best = slot;
                        }
                    }
                    for (slot, &src) in spec.inputs.iter().enumerate() {
                        let d = delta(src, u);
                        cands.push(Candidate {
                            pred: (src, u),
                            syn: None,
                            mass: d,
                            local: if slot == best { k * d } else { 0.0 },
                        });
                    }
                }
                LayerOp::ReLU => {
                    single = true;
                    let src = spec.inputs[0];
                    let d = delta(src, u);
                    cands.push(Candidate {
                        pred: (src, u),
                        syn: None,
                        mass: d,
                        local: if mean(src, u) > 0.0 { k * d } else { 0.0 },
                    });
                }
                LayerOp::MaxPool2D { .. } | LayerOp::Scale(_) => {
                    single = true;
                    let src = spec.inputs[0];
                    let d = delta(src, u);
                    cands.push(Candidate {
                        pred: (src, u),
                        syn: None,
                        mass: d,
                        local: k * d,
                    });
                }
                LayerOp::AvgPool2D { .. } => {
                    let src = spec.inputs[0];
                    let d = delta(src, u);
                    cands.push(Candidate {
                        pred: (src, u),
                        syn: None,
                        mass: d,
                        local: k * d,
                    });
                }
            }
            if cands.is_empty() {
                continue;
            }

            let mut excluded = vec![false; cands.len()];
            if !single {
                let denom = if matches!(spec.op, LayerOp::AvgPool2D { .. }) {
                    (cands.len() as f64 * y).abs()
                } else {
                    y.abs()
                };
                let denom = if denom > 1e-12 { denom } else { 1e-12 };
                let mut visited = vec![false; cands.len()];
                let mut running = 0.0f64;
                for _ in 0..cands.len() {
                    let mut pick = usize::MAX;
                    for i in 0..cands.len() {
                        if visited[i] {
                            continue;
                        }
                        if pick == usize::MAX || cands[i].local.abs() < cands[pick].local.abs() {
                            pick = i;
                        }
                    }
                    visited[pick] = true;
                    running += cands[pick].mass;
                    if running.abs() / denom > theta {
                        break;
                    }
                    excluded[pick] = true;
                }
            }
            for (i, cand) in cands.iter().enumerate() {
                if excluded[i] || cand.local == 0.0 {
                    continue;
                }
                let s: i64 = if cand.local > 0.0 { 1 } else { -1 };
                *contrib.entry(cand.pred).or_insert(0) += s;
                if let Some(key) = cand.syn {
                    *synapses.entry(key).or_insert(0) += s;
                }
            }
        }
        l -= 1;
    }

    let mut table = ContributionTable::empty(fingerprint, units_out, theta as f32);
    table.sample_count = 1;
    table.samples = input_digest(x);
    for ((layer, unit), v) in contrib {
        if v != 0 {
            table.neurons.insert(NeuronId { layer, unit }, v);
        }
    }
    for ((layer, out_unit, in_unit, k_row, k_col), v) in synapses {
        if v != 0 {
            table.synapses.insert(
                SynapseId {
                    layer,
                    out_unit,
                    in_unit,
                    k_row,
                    k_col,
                },
                v,
            );
        }
    }
    Ok(table)
}
