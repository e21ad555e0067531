use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerOp, LayerSpec, ModelGraph, ScaleParams, Window};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Incremental construction of a [`ModelGraph`] with seeded He-uniform
/// weight initialization and zero biases.
///
/// Single-input layers read from the most recently added layer unless
/// [`ModelBuilder::from`] redirects the next one.
pub struct ModelBuilder {
    input_shape: Vec<usize>,
    class_count: usize,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    next_input: Option<usize>,
    rng: ChaCha8Rng,
}

impl ModelBuilder {
    pub fn new(input_shape: &[usize], class_count: usize, seed: u64) -> Self {
        Self {
            input_shape: input_shape.to_vec(),
            class_count,
            layers: vec![LayerSpec::new(LayerOp::Input, vec![])],
            shapes: vec![input_shape.to_vec()],
            next_input: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Index of the most recently added layer.
    pub fn last(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn shape(&self, layer: usize) -> &[usize] {
        &self.shapes[layer]
    }

    /// Makes `layer` the input of the next single-input layer.
    pub fn from(mut self, layer: usize) -> Self {
        self.next_input = Some(layer);
        self
    }

    fn source(&mut self) -> usize {
        self.next_input.take().unwrap_or(self.layers.len() - 1)
    }

    fn push(mut self, layer: LayerSpec, shape: Vec<usize>) -> Self {
        self.layers.push(layer);
        self.shapes.push(shape);
        self
    }

    fn uniform(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    pub fn conv2d(mut self, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let src = self.source();
        let x = self.shapes[src].clone();
        let window = Window::square(kernel, stride, padding);
        let in_channels = x[0];
        let oh = window.output_len(*x.get(1).unwrap_or(&0), 0).unwrap_or(0);
        let ow = window.output_len(*x.get(2).unwrap_or(&0), 1).unwrap_or(0);
        let weights = self.uniform(
            vec![out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
        );
        let layer = LayerSpec {
            op: LayerOp::Conv2D {
                in_channels,
                out_channels,
                window,
            },
            inputs: vec![src],
            weights: Some(weights),
            bias: Some(Tensor::zeros(vec![out_channels])),
        };
        self.push(layer, vec![out_channels, oh, ow])
    }

    pub fn fc(mut self, out_features: usize) -> Self {
        let src = self.source();
        let in_features = self.shapes[src].iter().product();
        let weights = self.uniform(vec![out_features, in_features], in_features);
        let layer = LayerSpec {
            op: LayerOp::FullyConnected {
                in_features,
                out_features,
            },
            inputs: vec![src],
            weights: Some(weights),
            bias: Some(Tensor::zeros(vec![out_features])),
        };
        self.push(layer, vec![out_features])
    }

    fn pool(mut self, op: fn(Window) -> LayerOp, kernel: usize, stride: usize) -> Self {
        let src = self.source();
        let x = self.shapes[src].clone();
        let window = Window::square(kernel, stride, 0);
        let oh = window.output_len(*x.get(1).unwrap_or(&0), 0).unwrap_or(0);
        let ow = window.output_len(*x.get(2).unwrap_or(&0), 1).unwrap_or(0);
        self.push(LayerSpec::new(op(window), vec![src]), vec![x[0], oh, ow])
    }

    pub fn max_pool(self, kernel: usize, stride: usize) -> Self {
        self.pool(|window| LayerOp::MaxPool2D { window }, kernel, stride)
    }

    pub fn avg_pool(self, kernel: usize, stride: usize) -> Self {
        self.pool(|window| LayerOp::AvgPool2D { window }, kernel, stride)
    }

    fn unary(mut self, op: LayerOp) -> Self {
        let src = self.source();
        let shape = self.shapes[src].clone();
        self.push(LayerSpec::new(op, vec![src]), shape)
    }

    pub fn relu(self) -> Self {
        self.unary(LayerOp::ReLU)
    }

    pub fn scale(self, params: ScaleParams) -> Self {
        self.unary(LayerOp::Scale(params))
    }

    pub fn flatten(mut self) -> Self {
        let src = self.source();
        let n = self.shapes[src].iter().product();
        self.push(LayerSpec::new(LayerOp::Flatten, vec![src]), vec![n])
    }

    pub fn add(self, inputs: &[usize]) -> Self {
        let shape = self.shapes[inputs[0]].clone();
        self.push(LayerSpec::new(LayerOp::Add, inputs.to_vec()), shape)
    }

    pub fn maximum(self, inputs: &[usize]) -> Self {
        let shape = self.shapes[inputs[0]].clone();
        self.push(LayerSpec::new(LayerOp::Maximum, inputs.to_vec()), shape)
    }

    /// Appends the Output layer and validates the graph.
    pub fn build(self) -> Result<ModelGraph> {
        let b = self.unary(LayerOp::Output);
        let model = ModelGraph {
            input_shape: b.input_shape,
            class_count: b.class_count,
            layers: b.layers,
        };
        model.validate().map_err(Error::Invalid)?;
        Ok(model)
    }
}

/// LeNet-style classifier for `[1, 28, 28]` inputs (44,190 synapses).
pub fn lenet(class_count: usize, seed: u64) -> ModelGraph {
    ModelBuilder::new(&[1, 28, 28], class_count, seed)
        .conv2d(6, 5, 1, 0)
        .relu()
        .max_pool(2, 2)
        .conv2d(16, 5, 1, 0)
        .relu()
        .max_pool(2, 2)
        .flatten()
        .fc(120)
        .relu()
        .fc(84)
        .relu()
        .fc(class_count)
        .build()
        .expect("LeNet definition is valid")
}
