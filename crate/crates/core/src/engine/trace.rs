use super::exec::{argmax, Activations, Executor, Real};
use crate::model::{LayerOp, Layout};

/// Routing captured during a recorded forward pass, per layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerAux {
    None,
    /// ReLU: per channel, whether the mean pre-activation is positive.
    Gate(Vec<bool>),
    /// Max-pool: chosen input plane position per output element
    /// (lowest spatial index on ties).
    Argmax(Vec<u32>),
    /// Maximum: per channel, the input slot with the largest channel mean
    /// (lowest slot on ties).
    Winner(Vec<u32>),
}

/// Per-neuron activation summary of one inference pass.
///
/// A neuron that fires at several spatial positions is summarized by the
/// mean of its activations; `means` follows canonical neuron order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub means: Vec<f64>,
    /// Activations per neuron, per layer (spatial positions of the layer).
    pub counts: Vec<usize>,
    pub neuron_offsets: Vec<usize>,
    pub aux: Vec<LayerAux>,
    pub logits: Vec<f32>,
    pub predicted: usize,
}

impl ActivationTrace {
    pub fn layer_means(&self, layer: usize) -> &[f64] {
        &self.means[self.neuron_offsets[layer]..self.neuron_offsets[layer + 1]]
    }

    pub fn neuron_count(&self) -> usize {
        self.means.len()
    }
}

pub(crate) fn channel_means<T: Real>(values: &[T], channels: usize) -> Vec<f64> {
    let plane = values.len() / channels;
    (0..channels)
        .map(|c| {
            let mut acc = 0.0f64;
            for v in &values[c * plane..(c + 1) * plane] {
                acc += v.as_f64();
            }
            acc / plane as f64
        })
        .collect()
}

pub(crate) fn build_trace<T: Real>(exec: &Executor<T>, layout: &Layout, acts: &Activations<T>) -> ActivationTrace {
    let mut means = Vec::with_capacity(layout.neuron_count);
    let mut counts = Vec::with_capacity(exec.layers.len());
    let mut aux = Vec::with_capacity(exec.layers.len());
    let per_layer: Vec<Vec<f64>> = acts
        .outputs
        .iter()
        .zip(&exec.dims)
        .map(|(out, d)| channel_means(out, d.c))
        .collect();
    for (index, layer) in exec.layers.iter().enumerate() {
        means.extend_from_slice(&per_layer[index]);
        counts.push(exec.dims[index].plane());
        aux.push(match &layer.op {
            LayerOp::ReLU => LayerAux::Gate(per_layer[layer.inputs[0]].iter().map(|&m| m > 0.0).collect()),
            LayerOp::MaxPool2D { .. } => LayerAux::Argmax(acts.routes[index].clone().unwrap_or_default()),
            LayerOp::Maximum => {
                let channels = exec.dims[index].c;
                LayerAux::Winner(
                    (0..channels)
                        .map(|c| {
                            let col: Vec<f64> = layer.inputs.iter().map(|&src| per_layer[src][c]).collect();
                            argmax(&col) as u32
                        })
                        .collect(),
                )
            }
            _ => LayerAux::None,
        });
    }
    let logits: Vec<f32> = acts.logits().iter().map(|v| v.as_f32()).collect();
    ActivationTrace {
        means,
        counts,
        neuron_offsets: layout.neuron_offsets.clone(),
        aux,
        predicted: argmax(acts.logits()),
        logits,
    }
}
