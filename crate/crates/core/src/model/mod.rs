//! Computation-graph IR for convolutional networks.
//!
//! A [`ModelGraph`] is a list of layers in topological order. Every layer
//! produces one tensor, either `[channels, height, width]` or a flat
//! `[units]`. A *neuron* is one output channel (or one unit of a flat
//! tensor); a *synapse* is one learned weight element. Biases belong to no
//! synapse and are never sliced, pruned, or hidden.

mod builder;
mod format;

pub use builder::{lenet, ModelBuilder};
pub use format::{load_model, model_from_bytes, model_to_bytes, save_model};

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// SHA-256 digest identifying a model, profile, dataset or sample set.
pub type Fingerprint = [u8; 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Input,
    Conv2D,
    FullyConnected,
    AvgPool2D,
    MaxPool2D,
    ReLU,
    Scale,
    Add,
    Maximum,
    Flatten,
    Output,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Spatial window shared by convolutions and pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub kernel: [usize; 2],
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: [kernel, kernel],
            stride,
            padding,
        }
    }

    /// Output extent along one axis, or `None` if the window does not fit.
    pub fn output_len(&self, input: usize, axis: usize) -> Option<usize> {
        let k = self.kernel[axis];
        let padded = input + 2 * self.padding;
        if self.stride == 0 || k == 0 || padded < k {
            return None;
        }
        Some((padded - k) / self.stride + 1)
    }
}

/// Inference-form normalization `y = gamma * (x - mean) / std + beta`, per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl ScaleParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Input,
    Conv2D {
        in_channels: usize,
        out_channels: usize,
        window: Window,
    },
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
    AvgPool2D {
        window: Window,
    },
    MaxPool2D {
        window: Window,
    },
    ReLU,
    Scale(ScaleParams),
    /// Element-wise sum of two or more same-shaped inputs.
    Add,
    /// Element-wise maximum of two or more same-shaped inputs.
    Maximum,
    Flatten,
    /// Exposes the logits of the preceding fully connected layer.
    Output,
}

impl LayerOp {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerOp::Input => LayerKind::Input,
            LayerOp::Conv2D { .. } => LayerKind::Conv2D,
            LayerOp::FullyConnected { .. } => LayerKind::FullyConnected,
            LayerOp::AvgPool2D { .. } => LayerKind::AvgPool2D,
            LayerOp::MaxPool2D { .. } => LayerKind::MaxPool2D,
            LayerOp::ReLU => LayerKind::ReLU,
            LayerOp::Scale(_) => LayerKind::Scale,
            LayerOp::Add => LayerKind::Add,
            LayerOp::Maximum => LayerKind::Maximum,
            LayerOp::Flatten => LayerKind::Flatten,
            LayerOp::Output => LayerKind::Output,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub op: LayerOp,
    /// Indices of the layers feeding this one; all smaller than this layer's index.
    pub inputs: Vec<usize>,
    /// `[out, in, kh, kw]` for convolutions, `[out, in]` for fully connected layers.
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl LayerSpec {
    pub fn new(op: LayerOp, inputs: Vec<usize>) -> Self {
        Self {
            op,
            inputs,
            weights: None,
            bias: None,
        }
    }

    pub fn kind(&self) -> LayerKind {
        self.op.kind()
    }

    pub fn has_weights(&self) -> bool {
        matches!(
            self.kind(),
            LayerKind::Conv2D | LayerKind::FullyConnected
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub unit: usize,
}

/// One weight element. Derived ordering is the canonical synapse order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SynapseId {
    pub layer: usize,
    pub out_unit: usize,
    pub in_unit: usize,
    pub k_row: usize,
    pub k_col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub layer: Option<usize>,
    pub message: String,
}

impl Violation {
    fn at(layer: usize, message: impl Into<String>) -> Self {
        Self {
            layer: Some(layer),
            message: message.into(),
        }
    }

    fn global(message: impl Into<String>) -> Self {
        Self {
            layer: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layer {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub layers: Vec<LayerSpec>,
}

/// Shapes and canonical offsets derived from a valid graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub shapes: Vec<Vec<usize>>,
    /// Offset of each layer's first neuron in canonical neuron order.
    pub neuron_offsets: Vec<usize>,
    /// Offset of each layer's first synapse in canonical synapse order.
    pub synapse_offsets: Vec<usize>,
    pub neuron_count: usize,
    pub synapse_count: usize,
}

impl Layout {
    pub fn units(&self, layer: usize) -> usize {
        self.shapes[layer][0]
    }

    /// Spatial positions per channel (1 for flat tensors).
    pub fn spatial(&self, layer: usize) -> usize {
        self.shapes[layer][1..].iter().product()
    }

    pub fn layer_synapses(&self, layer: usize) -> usize {
        self.synapse_offsets[layer + 1] - self.synapse_offsets[layer]
    }

    pub fn neuron_index(&self, id: NeuronId) -> usize {
        self.neuron_offsets[id.layer] + id.unit
    }

    pub fn neuron_id(&self, index: usize) -> NeuronId {
        let layer = self.neuron_offsets.partition_point(|&o| o <= index) - 1;
        NeuronId {
            layer,
            unit: index - self.neuron_offsets[layer],
        }
    }
}

pub fn channels_of(shape: &[usize]) -> usize {
    shape[0]
}

impl ModelGraph {
    /// Checks every structural invariant and runs shape inference.
    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        self.infer_shapes().map(|_| ())
    }

    pub fn layout(&self) -> crate::Result<Layout> {
        let shapes = self.infer_shapes().map_err(crate::Error::Invalid)?;
        let mut neuron_offsets = Vec::with_capacity(shapes.len() + 1);
        let mut synapse_offsets = Vec::with_capacity(shapes.len() + 1);
        let (mut n, mut s) = (0, 0);
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            neuron_offsets.push(n);
            synapse_offsets.push(s);
            n += shape[0];
            s += layer.weights.as_ref().map_or(0, |w| w.len());
        }
        neuron_offsets.push(n);
        synapse_offsets.push(s);
        Ok(Layout {
            shapes,
            neuron_offsets,
            synapse_offsets,
            neuron_count: n,
            synapse_count: s,
        })
    }

    /// Infers every layer's output shape, collecting all violations found.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>, Vec<Violation>> {
        let mut violations = Vec::new();
        if self.layers.is_empty() {
            return Err(vec![Violation::global("model has no layers")]);
        }
        if !matches!(self.input_shape.len(), 1 | 3) || self.input_shape.contains(&0) {
            violations.push(Violation::global(format!(
                "input shape {:?} must be [units] or [channels, height, width] with positive dims",
                self.input_shape
            )));
            return Err(violations);
        }
        if self.class_count == 0 {
            violations.push(Violation::global("class_count must be positive"));
        }
        let inputs = self
            .layers
            .iter()
            .filter(|l| l.kind() == LayerKind::Input)
            .count();
        let outputs = self
            .layers
            .iter()
            .filter(|l| l.kind() == LayerKind::Output)
            .count();
        if inputs != 1 || self.layers[0].kind() != LayerKind::Input {
            violations.push(Violation::global(
                "exactly one Input layer is required and it must be layer 0",
            ));
        }
        if outputs != 1 || self.layers.last().map(|l| l.kind()) != Some(LayerKind::Output) {
            violations.push(Violation::global(
                "exactly one Output layer is required and it must be the last layer",
            ));
        }

        // None marks a layer whose shape could not be inferred; dependents
        // are skipped so one fault is not reported repeatedly.
        let mut shapes: Vec<Option<Vec<usize>>> = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let shape = self.infer_layer(index, layer, &shapes, &mut violations);
            shapes.push(shape);
        }
        if violations.is_empty() {
            Ok(shapes.into_iter().map(|s| s.expect("checked")).collect())
        } else {
            Err(violations)
        }
    }

    fn infer_layer(
        &self,
        index: usize,
        layer: &LayerSpec,
        shapes: &[Option<Vec<usize>>],
        violations: &mut Vec<Violation>,
    ) -> Option<Vec<usize>> {
        let kind = layer.kind();
        let arity_ok = match kind {
            LayerKind::Input => layer.inputs.is_empty(),
            LayerKind::Add | LayerKind::Maximum => layer.inputs.len() >= 2,
            _ => layer.inputs.len() == 1,
        };
        if !arity_ok {
            violations.push(Violation::at(
                index,
                format!("{kind} layer has {} inputs", layer.inputs.len()),
            ));
            return None;
        }
        for &p in &layer.inputs {
            if p >= index {
                violations.push(Violation::at(
                    index,
                    format!("input {p} is not an earlier layer (cycle or forward reference)"),
                ));
                return None;
            }
        }
        let mut input_shapes = Vec::with_capacity(layer.inputs.len());
        for &p in &layer.inputs {
            input_shapes.push(shapes[p].clone()?);
        }
        if !layer.has_weights() && (layer.weights.is_some() || layer.bias.is_some()) {
            violations.push(Violation::at(index, format!("{kind} layer carries weights")));
        }
        for (name, t) in [("weights", &layer.weights), ("bias", &layer.bias)] {
            if let Some(t) = t {
                if !t.is_finite() {
                    violations.push(Violation::at(index, format!("{name} contain non-finite values")));
                }
            }
        }

        let fail = |violations: &mut Vec<Violation>, msg: String| {
            violations.push(Violation::at(index, msg));
            None
        };

        match &layer.op {
            LayerOp::Input => Some(self.input_shape.clone()),
            LayerOp::Conv2D {
                in_channels,
                out_channels,
                window,
            } => {
                let x = &input_shapes[0];
                if x.len() != 3 || x[0] != *in_channels {
                    return fail(
                        violations,
                        format!("Conv2D expects [{in_channels}, h, w] input, got {x:?}"),
                    );
                }
                let expected = vec![*out_channels, *in_channels, window.kernel[0], window.kernel[1]];
                check_params(index, layer, &expected, *out_channels, violations)?;
                let (Some(oh), Some(ow)) = (window.output_len(x[1], 0), window.output_len(x[2], 1))
                else {
                    return fail(violations, format!("Conv2D window {window:?} does not fit input {x:?}"));
                };
                Some(vec![*out_channels, oh, ow])
            }
            LayerOp::FullyConnected {
                in_features,
                out_features,
            } => {
                let x = &input_shapes[0];
                if x.len() != 1 || x[0] != *in_features {
                    return fail(
                        violations,
                        format!("FullyConnected expects a [{in_features}] input, got {x:?}"),
                    );
                }
                check_params(index, layer, &[*out_features, *in_features], *out_features, violations)?;
                Some(vec![*out_features])
            }
            LayerOp::AvgPool2D { window } | LayerOp::MaxPool2D { window } => {
                let x = &input_shapes[0];
                if x.len() != 3 {
                    return fail(violations, format!("{kind} expects a [c, h, w] input, got {x:?}"));
                }
                if 2 * window.padding > window.kernel[0].min(window.kernel[1]) {
                    return fail(violations, format!("{kind} padding must be at most half the kernel"));
                }
                let (Some(oh), Some(ow)) = (window.output_len(x[1], 0), window.output_len(x[2], 1))
                else {
                    return fail(violations, format!("{kind} window {window:?} does not fit input {x:?}"));
                };
                Some(vec![x[0], oh, ow])
            }
            LayerOp::ReLU | LayerOp::Flatten | LayerOp::Output => {
                let x = &input_shapes[0];
                match kind {
                    LayerKind::Flatten => Some(vec![x.iter().product()]),
                    LayerKind::Output => {
                        let pred = &self.layers[layer.inputs[0]];
                        if pred.kind() != LayerKind::FullyConnected {
                            return fail(violations, "Output must follow a FullyConnected layer".into());
                        }
                        if x != &vec![self.class_count] {
                            return fail(
                                violations,
                                format!("Output expects {} logits, got {x:?}", self.class_count),
                            );
                        }
                        Some(x.clone())
                    }
                    _ => Some(x.clone()),
                }
            }
            LayerOp::Scale(p) => {
                let x = &input_shapes[0];
                let c = x[0];
                if [p.mean.len(), p.std.len(), p.gamma.len(), p.beta.len()]
                    .iter()
                    .any(|&n| n != c)
                {
                    return fail(violations, format!("Scale parameters must have {c} channels"));
                }
                if p.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                    return fail(violations, "Scale std must be positive (sigma > 0)".into());
                }
                if p.mean.iter().chain(&p.gamma).chain(&p.beta).any(|v| !v.is_finite()) {
                    return fail(violations, "Scale parameters must be finite".into());
                }
                Some(x.clone())
            }
            LayerOp::Add | LayerOp::Maximum => {
                let first = &input_shapes[0];
                if input_shapes.iter().any(|s| s != first) {
                    return fail(violations, format!("{kind} inputs have different shapes: {input_shapes:?}"));
                }
                Some(first.clone())
            }
        }
    }

    /// SHA-256 of the serialized model file.
    pub fn fingerprint(&self) -> crate::Result<Fingerprint> {
        let bytes = model_to_bytes(self)?;
        Ok(Sha256::digest(&bytes).into())
    }

    pub fn logit_layer(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn synapse_index(&self, layout: &Layout, id: SynapseId) -> usize {
        let layer = &self.layers[id.layer];
        let local = match &layer.op {
            LayerOp::Conv2D {
                in_channels, window, ..
            } => {
                ((id.out_unit * in_channels + id.in_unit) * window.kernel[0] + id.k_row)
                    * window.kernel[1]
                    + id.k_col
            }
            LayerOp::FullyConnected { in_features, .. } => id.out_unit * in_features + id.in_unit,
            _ => panic!("layer {} has no synapses", id.layer),
        };
        layout.synapse_offsets[id.layer] + local
    }

    pub fn synapse_id(&self, layout: &Layout, index: usize) -> SynapseId {
        let layer = layout.synapse_offsets.partition_point(|&o| o <= index) - 1;
        // Skip weightless layers sharing the same offset.
        let layer = (0..=layer)
            .rev()
            .find(|&l| layout.layer_synapses(l) > 0 && layout.synapse_offsets[l] <= index)
            .expect("synapse index in range");
        let local = index - layout.synapse_offsets[layer];
        match &self.layers[layer].op {
            LayerOp::Conv2D {
                in_channels, window, ..
            } => {
                let [kh, kw] = window.kernel;
                let k_col = local % kw;
                let k_row = (local / kw) % kh;
                let in_unit = (local / (kw * kh)) % in_channels;
                let out_unit = local / (kw * kh * in_channels);
                SynapseId {
                    layer,
                    out_unit,
                    in_unit,
                    k_row,
                    k_col,
                }
            }
            LayerOp::FullyConnected { in_features, .. } => SynapseId {
                layer,
                out_unit: local / in_features,
                in_unit: local % in_features,
                k_row: 0,
                k_col: 0,
            },
            _ => unreachable!("weightless layers own no synapse indices"),
        }
    }

    /// All neurons, layer-major then unit-major.
    pub fn enumerate_neurons(&self) -> crate::Result<Vec<NeuronId>> {
        let layout = self.layout()?;
        Ok((0..self.layers.len())
            .flat_map(|layer| (0..layout.units(layer)).map(move |unit| NeuronId { layer, unit }))
            .collect())
    }

    /// All synapses in canonical order; biases excluded.
    pub fn enumerate_synapses(&self) -> crate::Result<Vec<SynapseId>> {
        let layout = self.layout()?;
        Ok((0..layout.synapse_count)
            .map(|i| self.synapse_id(&layout, i))
            .collect())
    }
}

fn check_params(
    index: usize,
    layer: &LayerSpec,
    weight_shape: &[usize],
    out: usize,
    violations: &mut Vec<Violation>,
) -> Option<()> {
    match &layer.weights {
        Some(w) if w.shape() == weight_shape => {}
        Some(w) => {
            violations.push(Violation::at(
                index,
                format!("weight shape {:?} does not match expected {weight_shape:?}", w.shape()),
            ));
            return None;
        }
        None => {
            violations.push(Violation::at(index, "missing weights"));
            return None;
        }
    }
    if let Some(b) = &layer.bias {
        if b.shape() != [out] {
            violations.push(Violation::at(
                index,
                format!("bias shape {:?} does not match [{out}]", b.shape()),
            ));
            return None;
        }
    }
    Some(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fc_model(inputs: usize, outputs: usize) -> ModelGraph {
        ModelBuilder::new(&[inputs], outputs, 0).fc(outputs).build().unwrap()
    }

    #[test]
    fn conv_layer_counts() {
        let m = ModelBuilder::new(&[16, 5, 5], 4, 0)
            .conv2d(32, 3, 1, 1)
            .relu()
            .flatten()
            .fc(4)
            .build()
            .unwrap();
        let layout = m.layout().unwrap();
        assert_eq!(layout.units(1), 32);
        assert_eq!(layout.layer_synapses(1), 4608);
        // ReLU: one neuron per channel, no synapses.
        assert_eq!(layout.units(2), 32);
        assert_eq!(layout.layer_synapses(2), 0);
    }

    #[test]
    fn fc_layer_counts() {
        let m = fc_model(20, 10);
        let layout = m.layout().unwrap();
        assert_eq!(layout.units(1), 10);
        assert_eq!(layout.layer_synapses(1), 200);
        assert_eq!(layout.synapse_count, 200);
        assert_eq!(layout.neuron_count, 20 + 10 + 10);
    }

    #[test]
    fn enumeration_order_and_roundtrip() {
        let m = ModelBuilder::new(&[2, 4, 4], 3, 1)
            .conv2d(3, 3, 1, 0)
            .relu()
            .flatten()
            .fc(3)
            .build()
            .unwrap();
        let layout = m.layout().unwrap();
        let syn = m.enumerate_synapses().unwrap();
        assert_eq!(syn.len(), layout.synapse_count);
        for (i, id) in syn.iter().enumerate() {
            assert_eq!(m.synapse_index(&layout, *id), i);
        }
        let key = |s: &SynapseId| (s.layer, s.out_unit, s.in_unit, s.k_row, s.k_col);
        assert!(syn.windows(2).all(|w| key(&w[0]) < key(&w[1])));
        let neurons = m.enumerate_neurons().unwrap();
        assert_eq!(neurons.len(), layout.neuron_count);
        for (i, n) in neurons.iter().enumerate() {
            assert_eq!(layout.neuron_index(*n), i);
            assert_eq!(layout.neuron_id(i), *n);
        }
    }

    #[test]
    fn counts_ignore_weight_values() {
        let a = lenet(10, 0);
        let mut b = lenet(10, 9);
        for l in &mut b.layers {
            if let Some(w) = &mut l.weights {
                w.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let (la, lb) = (a.layout().unwrap(), b.layout().unwrap());
        assert_eq!(la.synapse_count, 44_190);
        assert_eq!(la.synapse_count, lb.synapse_count);
        assert_eq!(la.neuron_count, lb.neuron_count);
    }

    #[test]
    fn lenet_validates() {
        assert!(lenet(10, 3).validate().is_ok());
    }

    #[test]
    fn forward_reference_is_a_cycle_violation() {
        let mut m = ModelBuilder::new(&[4], 4, 0).relu().fc(4).build().unwrap();
        m.layers[1] = LayerSpec::new(LayerOp::Add, vec![0, 2]);
        let v = m.validate().unwrap_err();
        assert!(v.iter().any(|v| v.layer == Some(1) && v.message.contains("cycle")));
    }

    #[test]
    fn fc_fed_wrong_width_is_a_shape_violation() {
        let mut m = ModelBuilder::new(&[120], 10, 0).fc(84).fc(10).build().unwrap();
        m.layers[2] = m.layers[1].clone();
        m.layers[2].inputs = vec![0];
        m.layers[2].op = LayerOp::FullyConnected {
            in_features: 84,
            out_features: 10,
        };
        m.layers[2].weights = Some(Tensor::zeros(vec![10, 84]));
        m.layers[2].bias = Some(Tensor::zeros(vec![10]));
        let v = m.validate().unwrap_err();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].layer, Some(2));
    }

    #[test]
    fn zero_sigma_is_rejected() {
        let mut p = ScaleParams::identity(2);
        p.std[1] = 0.0;
        let m = ModelBuilder::new(&[2, 3, 3], 2, 0)
            .scale(p)
            .flatten()
            .fc(2)
            .build();
        match m {
            Err(crate::Error::Invalid(v)) => assert_eq!(v[0].layer, Some(1)),
            other => panic!("expected a violation, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_weights_are_rejected() {
        let mut m = fc_model(3, 2);
        m.layers[1].weights.as_mut().unwrap().data_mut()[4] = f32::NAN;
        let v = m.validate().unwrap_err();
        assert_eq!(v[0].layer, Some(1));
    }
}
