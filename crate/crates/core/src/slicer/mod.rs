//! Forward differential analysis and backward contribution propagation.
//!
//! A sample's relative activations are its traced channel means minus the
//! profile. Starting from +1 at each criterion output, layers are visited in
//! reverse order; every neuron with nonzero cumulative contribution hands a
//! signed unit update to each predecessor (and synapse) that survives the
//! theta filter. Flatten and Output pass the integer contribution through
//! unchanged.

mod oracle;
mod rules;
mod table;

pub use oracle::oracle_backward;
pub use rules::{local_contributions, theta_filter, OpRule, Term, EPSILON};
pub use table::{
    aggregate, extract_slice, load_slice, save_slice, table_from_bytes, table_to_bytes, ContributionTable, Slice,
};

use std::collections::BTreeMap;

use crate::dataset::{combine_hashes, input_digest};
use crate::engine::{ActivationTrace, Engine, LayerAux};
use crate::error::{Error, Result};
use crate::model::{Fingerprint, LayerOp, Layout, ModelGraph, NeuronId};
use crate::parallel::Workers;
use crate::profile::ActivationProfile;
use crate::tensor::Tensor;
use rules::sign;

const CHUNK: usize = 16;

/// Traced activations of one sample next to their deviation from the profile.
#[derive(Debug, Clone, PartialEq)]
pub struct RelActTrace {
    pub y: Vec<f64>,
    pub delta: Vec<f64>,
    pub aux: Vec<LayerAux>,
    pub predicted: usize,
}

pub fn relative_activations(trace: &ActivationTrace, p: &ActivationProfile) -> Result<RelActTrace> {
    if trace.neuron_count() != p.neuron_count() {
        return Err(Error::Fingerprint(format!(
            "trace has {} neurons, profile {}",
            trace.neuron_count(),
            p.neuron_count()
        )));
    }
    Ok(RelActTrace {
        delta: trace.means.iter().zip(&p.means).map(|(&y, &m)| y - m as f64).collect(),
        y: trace.means.clone(),
        aux: trace.aux.clone(),
        predicted: trace.predicted,
    })
}

/// Dense contributions of one slicing run, indexed canonically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseContributions {
    pub neurons: Vec<i64>,
    pub synapses: Vec<i64>,
}

impl DenseContributions {
    fn zeros(layout: &Layout) -> Self {
        Self {
            neurons: vec![0; layout.neuron_count],
            synapses: vec![0; layout.synapse_count],
        }
    }

    fn add(&mut self, other: &DenseContributions) {
        for (a, b) in self.neurons.iter_mut().zip(&other.neurons) {
            *a += b;
        }
        for (a, b) in self.synapses.iter_mut().zip(&other.synapses) {
            *a += b;
        }
    }
}

/// A model paired with its profile, ready to slice many samples.
#[derive(Debug, Clone)]
pub struct Slicer {
    model: ModelGraph,
    layout: Layout,
    engine: Engine,
    profile: ActivationProfile,
    fingerprint: Fingerprint,
}

fn check_theta(theta: f32) -> Result<()> {
    if theta >= 0.0 && theta.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("theta must be finite and non-negative, got {theta}")))
    }
}

impl Slicer {
    pub fn new(model: &ModelGraph, profile: &ActivationProfile) -> Result<Self> {
        let fingerprint = model.fingerprint()?;
        let layout = model.layout()?;
        profile.check_fingerprint(&fingerprint, layout.neuron_count)?;
        Ok(Self {
            model: model.clone(),
            engine: Engine::new(model)?,
            layout,
            profile: profile.clone(),
            fingerprint,
        })
    }

    pub fn model(&self) -> &ModelGraph {
        &self.model
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    /// Logit units named by `outputs`, sorted and deduplicated.
    pub fn output_units(&self, outputs: &[NeuronId]) -> Result<Vec<usize>> {
        let logit = self.model.logit_layer();
        if outputs.is_empty() {
            return Err(Error::Config("slicing criterion has no outputs".into()));
        }
        let mut units = Vec::with_capacity(outputs.len());
        for id in outputs {
            if id.layer != logit || id.unit >= self.model.class_count {
                return Err(Error::Config(format!(
                    "output neuron ({}, {}) is not in the logit layer {logit}",
                    id.layer, id.unit
                )));
            }
            units.push(id.unit);
        }
        units.sort_unstable();
        units.dedup();
        Ok(units)
    }

    pub fn relative(&self, x: &Tensor) -> Result<RelActTrace> {
        relative_activations(&self.engine.trace(x)?, &self.profile)
    }

    /// Backward propagation for one sample's relative activations.
    pub fn propagate(&self, rel: &RelActTrace, units: &[usize], theta: f32) -> Result<DenseContributions> {
        check_theta(theta)?;
        let theta = theta as f64;
        let layout = &self.layout;
        let mut out = DenseContributions::zeros(layout);
        let logit = self.model.logit_layer();
        for &u in units {
            out.neurons[layout.neuron_offsets[logit] + u] = 1;
        }
        let mut terms: Vec<rules::Term> = Vec::new();
        let mut preds: Vec<usize> = Vec::new();
        let mut syns: Vec<Option<usize>> = Vec::new();
        for l in (1..self.model.layers.len()).rev() {
            let spec = &self.model.layers[l];
            let off = layout.neuron_offsets[l];
            let soff = layout.synapse_offsets[l];
            for unit in 0..layout.units(l) {
                let center = out.neurons[off + unit];
                if center == 0 {
                    continue;
                }
                let dy = rel.delta[off + unit];
                let y = rel.y[off + unit];
                terms.clear();
                preds.clear();
                syns.clear();
                let mut push = |pred: usize, syn: Option<usize>, w: f64| {
                    terms.push(rules::Term {
                        w,
                        x: rel.y[pred],
                        dx: rel.delta[pred],
                    });
                    preds.push(pred);
                    syns.push(syn);
                };
                let src = spec.inputs.first().copied().unwrap_or(0);
                let poff = layout.neuron_offsets[src];
                let rule = match &spec.op {
                    LayerOp::Input => continue,
                    LayerOp::Output => {
                        out.neurons[poff + unit] += center;
                        continue;
                    }
                    LayerOp::Flatten => {
                        out.neurons[poff + unit / layout.spatial(src)] += center;
                        continue;
                    }
                    LayerOp::FullyConnected { in_features, .. } => {
                        let w = spec.weights.as_ref().expect("validated").data();
                        for i in 0..*in_features {
                            let s = unit * in_features + i;
                            push(poff + i, Some(soff + s), w[s] as f64);
                        }
                        OpRule::WeightedSum
                    }
                    LayerOp::Conv2D {
                        in_channels, window, ..
                    } => {
                        let w = spec.weights.as_ref().expect("validated").data();
                        let per_in = window.kernel[0] * window.kernel[1];
                        for ic in 0..*in_channels {
                            for k in 0..per_in {
                                let s = (unit * in_channels + ic) * per_in + k;
                                push(poff + ic, Some(soff + s), w[s] as f64);
                            }
                        }
                        OpRule::WeightedSum
                    }
                    LayerOp::Add => {
                        for &p in &spec.inputs {
                            push(layout.neuron_offsets[p] + unit, None, 1.0);
                        }
                        OpRule::WeightedSum
                    }
                    LayerOp::Maximum => {
                        for &p in &spec.inputs {
                            push(layout.neuron_offsets[p] + unit, None, 1.0);
                        }
                        let winner = match &rel.aux[l] {
                            LayerAux::Winner(w) => w[unit] as usize,
                            _ => return Err(Error::Layer { layer: l, reason: "missing maximum routing".into() }),
                        };
                        OpRule::Maximum { winner }
                    }
                    LayerOp::ReLU => {
                        push(poff + unit, None, 1.0);
                        let gate = match &rel.aux[l] {
                            LayerAux::Gate(g) => g[unit],
                            _ => return Err(Error::Layer { layer: l, reason: "missing rectifier gate".into() }),
                        };
                        OpRule::Rectify { gate }
                    }
                    LayerOp::AvgPool2D { .. } => {
                        push(poff + unit, None, 1.0);
                        OpRule::Average
                    }
                    LayerOp::MaxPool2D { .. } => {
                        push(poff + unit, None, 1.0);
                        OpRule::Maximum { winner: 0 }
                    }
                    LayerOp::Scale(_) => {
                        push(poff + unit, None, 1.0);
                        OpRule::Scale
                    }
                };
                let local = local_contributions(rule, center, dy, &terms)?;
                let mass: Vec<f64> = match rule {
                    OpRule::Average => terms.iter().map(|t| t.dx).collect(),
                    _ => terms.iter().map(|t| t.w * t.dx).collect(),
                };
                for i in theta_filter(rule, &local, &mass, y, theta)? {
                    let s = sign(local[i]);
                    out.neurons[preds[i]] += s;
                    if let Some(syn) = syns[i] {
                        out.synapses[syn] += s;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn slice_dense(&self, x: &Tensor, units: &[usize], theta: f32) -> Result<DenseContributions> {
        self.propagate(&self.relative(x)?, units, theta)
    }

    /// Slices one sample w.r.t. its own predicted label; returns the label.
    pub fn slice_predicted(&self, x: &Tensor, theta: f32) -> Result<(usize, DenseContributions)> {
        let rel = self.relative(x)?;
        let dense = self.propagate(&rel, &[rel.predicted], theta)?;
        Ok((rel.predicted, dense))
    }

    pub fn table(&self, dense: &DenseContributions, units: &[usize], theta: f32, samples: Fingerprint, count: u64) -> ContributionTable {
        let neurons: BTreeMap<_, _> = dense
            .neurons
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0)
            .map(|(i, v)| (self.layout.neuron_id(i), *v))
            .collect();
        let synapses: BTreeMap<_, _> = dense
            .synapses
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0)
            .map(|(i, v)| (self.model.synapse_id(&self.layout, i), *v))
            .collect();
        ContributionTable {
            model: self.fingerprint,
            outputs: units.to_vec(),
            theta,
            sample_count: count,
            samples,
            neurons,
            synapses,
        }
    }

    pub fn slice(&self, x: &Tensor, outputs: &[NeuronId], theta: f32) -> Result<ContributionTable> {
        let units = self.output_units(outputs)?;
        let dense = self.slice_dense(x, &units, theta)?;
        Ok(self.table(&dense, &units, theta, input_digest(x), 1))
    }

    /// One table per input, in input order.
    pub fn slice_batch<I>(&self, xs: &[I], outputs: &[NeuronId], theta: f32, workers: &Workers) -> Result<Vec<ContributionTable>>
    where
        I: AsRef<Tensor> + Sync,
    {
        let units = self.output_units(outputs)?;
        check_theta(theta)?;
        workers.try_map(xs, |x| {
            let x = x.as_ref();
            let dense = self.slice_dense(x, &units, theta)?;
            Ok(self.table(&dense, &units, theta, input_digest(x), 1))
        })
    }

    /// Dense sum over all inputs, computed in fixed-size shards.
    pub fn aggregate_dense<I>(&self, xs: &[I], outputs: &[NeuronId], theta: f32, workers: &Workers) -> Result<DenseContributions>
    where
        I: AsRef<Tensor> + Sync,
    {
        let units = self.output_units(outputs)?;
        check_theta(theta)?;
        let shards: Vec<&[I]> = xs.chunks(CHUNK).collect();
        let parts = workers.try_map(&shards, |shard| {
            let mut acc = DenseContributions::zeros(&self.layout);
            for x in shard.iter() {
                acc.add(&self.slice_dense(x.as_ref(), &units, theta)?);
            }
            Ok(acc)
        })?;
        let mut total = DenseContributions::zeros(&self.layout);
        for p in &parts {
            total.add(p);
        }
        Ok(total)
    }

    /// Aggregate table over all inputs.
    pub fn slice_aggregate<I>(&self, xs: &[I], outputs: &[NeuronId], theta: f32, workers: &Workers) -> Result<ContributionTable>
    where
        I: AsRef<Tensor> + Sync,
    {
        if xs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let units = self.output_units(outputs)?;
        let dense = self.aggregate_dense(xs, outputs, theta, workers)?;
        let hash = xs
            .iter()
            .fold([0u8; 32], |acc, x| combine_hashes(&acc, &input_digest(x.as_ref())));
        Ok(self.table(&dense, &units, theta, hash, xs.len() as u64))
    }
}

/// Slices one sample from scratch.
pub fn backward_slice(model: &ModelGraph, p: &ActivationProfile, x: &Tensor, outputs: &[NeuronId], theta: f32) -> Result<ContributionTable> {
    Slicer::new(model, p)?.slice(x, outputs, theta)
}

/// Logit-layer neuron ids for the given classes.
pub fn output_neurons(model: &ModelGraph, classes: &[usize]) -> Vec<NeuronId> {
    let layer = model.logit_layer();
    classes.iter().map(|&unit| NeuronId { layer, unit }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, SynapseId};
    use crate::testkit::slice_case;

    fn chain(w_mid: f32) -> ModelGraph {
        let fc = |w: f32, b: f32| LayerSpec {
            op: LayerOp::FullyConnected {
                in_features: 1,
                out_features: 1,
            },
            inputs: vec![0],
            weights: Some(Tensor::new(vec![1, 1], vec![w]).unwrap()),
            bias: Some(Tensor::new(vec![1], vec![b]).unwrap()),
        };
        let mut layers = vec![LayerSpec::new(LayerOp::Input, vec![]), fc(1.0, 0.0)];
        layers.push(LayerSpec::new(LayerOp::ReLU, vec![1]));
        let mut second = fc(w_mid, 0.0);
        second.inputs = vec![2];
        layers.push(second);
        layers.push(LayerSpec::new(LayerOp::Output, vec![3]));
        ModelGraph {
            input_shape: vec![1],
            class_count: 1,
            layers,
        }
    }

    fn chain_profile(m: &ModelGraph, mean_input: f32) -> ActivationProfile {
        let data = crate::dataset::Dataset::new(
            vec![crate::dataset::Sample {
                input: Tensor::new(vec![1], vec![mean_input]).unwrap(),
                label: 0,
            }],
            1,
        )
        .unwrap();
        crate::profile::profile(m, &data, &Workers::single()).unwrap()
    }

    #[test]
    fn chain_is_fully_sliced() {
        let m = chain(1.0);
        let p = chain_profile(&m, 1.0);
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let t = backward_slice(&m, &p, &x, &output_neurons(&m, &[0]), 0.0).unwrap();
        assert_eq!(t.neurons.len(), 5);
        assert_eq!(t.synapses.len(), 2);
        assert!(t.neurons.values().chain(t.synapses.values()).all(|v| v.abs() == 1));
        // Every delta and weight is positive here.
        assert!(t.synapses.values().all(|&v| v == 1));
    }

    #[test]
    fn negative_delta_flips_signs() {
        let m = chain(1.0);
        let p = chain_profile(&m, 3.0);
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let t = backward_slice(&m, &p, &x, &output_neurons(&m, &[0]), 0.0).unwrap();
        // delta y and delta x are both negative, so the product is positive.
        assert_eq!(t.synapses.len(), 2);
        assert!(t.synapses.values().all(|&v| v == 1));
    }

    #[test]
    fn zero_weight_cuts_the_chain() {
        let m = chain(0.0);
        let p = chain_profile(&m, 1.0);
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let t = backward_slice(&m, &p, &x, &output_neurons(&m, &[0]), 0.0).unwrap();
        assert!(t.synapses.is_empty());
        assert!(t.neurons.keys().all(|n| n.layer >= 3));
        assert_eq!(t, oracle_backward(&m, &p, &x, &output_neurons(&m, &[0]), 0.0).unwrap());
    }

    #[test]
    fn relative_activation_arithmetic() {
        let m = chain(1.0);
        let p = chain_profile(&m, 3.0);
        let engine = Engine::new(&m).unwrap();
        let trace = engine.trace(&Tensor::new(vec![1], vec![5.0]).unwrap()).unwrap();
        let rel = relative_activations(&trace, &p).unwrap();
        assert_eq!(rel.delta[1], 2.0);
        let same = engine.trace(&Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap();
        assert!(relative_activations(&same, &p).unwrap().delta.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn outputs_must_be_logits() {
        let m = chain(1.0);
        let p = chain_profile(&m, 1.0);
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let bad = [NeuronId { layer: 2, unit: 0 }];
        assert!(backward_slice(&m, &p, &x, &bad, 0.0).is_err());
        assert!(backward_slice(&m, &p, &x, &[], 0.0).is_err());
        assert!(backward_slice(&m, &p, &x, &output_neurons(&m, &[1]), 0.0).is_err());
    }

    #[test]
    fn matches_oracle_on_random_cases() {
        let mut nonempty = 0;
        for seed in 0..60 {
            let theta = [0.0, 0.1, 0.3][seed as usize % 3];
            let c = slice_case(seed, theta);
            let fast = backward_slice(&c.model, &c.profile, &c.sample, &c.outputs, c.theta).unwrap();
            let slow = oracle_backward(&c.model, &c.profile, &c.sample, &c.outputs, c.theta).unwrap();
            assert_eq!(fast, slow, "seed {seed}");
            nonempty += usize::from(!fast.synapses.is_empty());
        }
        assert!(nonempty >= 40, "only {nonempty} cases reached a synapse");
    }

    #[test]
    fn negated_aggregate_cancels() {
        let c = slice_case(3, 0.0);
        let t = backward_slice(&c.model, &c.profile, &c.sample, &c.outputs, 0.0).unwrap();
        let sum = aggregate(&[t.clone(), t.negated()]).unwrap();
        assert!(extract_slice(&sum).is_empty());
        assert_eq!(aggregate(std::slice::from_ref(&t)).unwrap().synapses, t.synapses);
    }

    #[test]
    fn aggregate_rejects_mixed_theta() {
        let c = slice_case(4, 0.0);
        let a = backward_slice(&c.model, &c.profile, &c.sample, &c.outputs, 0.0).unwrap();
        let b = backward_slice(&c.model, &c.profile, &c.sample, &c.outputs, 0.1).unwrap();
        assert!(aggregate(&[a, b]).is_err());
    }

    #[test]
    fn nnsl_round_trip() {
        let c = slice_case(5, 0.1);
        let t = backward_slice(&c.model, &c.profile, &c.sample, &c.outputs, c.theta).unwrap();
        let bytes = table_to_bytes(&t);
        assert_eq!(table_from_bytes(&bytes).unwrap(), t);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(table_from_bytes(&bad).is_err());
        assert!(table_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn single_synapse_table_bytes() {
        let mut t = ContributionTable::empty([7; 32], vec![1], 0.25);
        t.synapses.insert(
            SynapseId {
                layer: 2,
                out_unit: 1,
                in_unit: 0,
                k_row: 0,
                k_col: 0,
            },
            -3,
        );
        let bytes = table_to_bytes(&t);
        assert_eq!(bytes.len(), 5 + 32 + 4 + 4 + 32 + 4 + 8 + 1 + 20 + 8);
        assert_eq!(&bytes[bytes.len() - 8..], &(-3i64).to_le_bytes());
    }
}
