//! Forward execution with activation tracing, exact gradients, and a plain
//! SGD trainer.
//!
//! Reductions inside one operation run in ascending synapse order, so a
//! single-threaded pass is bit-reproducible. Parallelism is only ever
//! across samples.

mod exec;
mod trace;
mod train;

pub use exec::{argmax, softmax_cross_entropy, Activations, Dims, Executor, Gradients, Real};
pub use trace::{ActivationTrace, LayerAux};
pub use train::{sgd_train, sgd_train_masked, TrainConfig, TrainMask, TrainOutcome};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{Layout, ModelGraph};
use crate::parallel::Workers;
use crate::tensor::Tensor;

/// A model compiled once for repeated `f32` inference.
#[derive(Debug, Clone)]
pub struct Engine {
    exec: Executor<f32>,
    layout: Layout,
}

impl Engine {
    pub fn new(model: &ModelGraph) -> Result<Self> {
        Ok(Self {
            exec: Executor::new(model)?,
            layout: model.layout()?,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn executor(&self) -> &Executor<f32> {
        &self.exec
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.exec.input_shape() {
            return Err(Error::Shape {
                expected: self.exec.input_shape().to_vec(),
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f32>> {
        self.check_input(x)?;
        let acts = self.exec.forward(x.data())?;
        Ok(acts.logits().to_vec())
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn trace(&self, x: &Tensor) -> Result<ActivationTrace> {
        self.check_input(x)?;
        let acts = self.exec.forward(x.data())?;
        Ok(trace::build_trace(&self.exec, &self.layout, &acts))
    }

    /// Gradient of the cross-entropy loss w.r.t. one input.
    pub fn input_gradient(&self, x: &Tensor, label: usize) -> Result<Vec<f32>> {
        self.check_input(x)?;
        let acts = self.exec.forward(x.data())?;
        let (_, grad) = softmax_cross_entropy(acts.logits(), label);
        let mut scratch = Gradients::zeros_like(&self.exec);
        Ok(self.exec.backward(&acts, &grad, &mut scratch))
    }
}

/// Runs one forward pass; the trace is recorded only when asked for.
pub fn forward(model: &ModelGraph, x: &Tensor, record: bool) -> Result<(Tensor, Option<ActivationTrace>)> {
    let engine = Engine::new(model)?;
    if record {
        let trace = engine.trace(x)?;
        let logits = Tensor::from_vec(trace.logits.clone());
        Ok((logits, Some(trace)))
    } else {
        Ok((Tensor::from_vec(engine.logits(x)?), None))
    }
}

/// Mean cross-entropy over a batch with its gradients.
#[derive(Debug, Clone)]
pub struct LossAndGradients<T> {
    pub loss: T,
    pub weights: Vec<Vec<T>>,
    pub bias: Vec<Vec<T>>,
    /// d(mean loss) / d(input) for every sample in the batch.
    pub inputs: Vec<Vec<T>>,
}

pub fn batch_gradients<T: Real>(exec: &Executor<T>, inputs: &[&[T]], labels: &[usize]) -> Result<LossAndGradients<T>> {
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::Config(format!(
            "batch has {} inputs and {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= exec.class_count()) {
        return Err(Error::Config(format!("label {l} out of range")));
    }
    let mut grads = Gradients::zeros_like(exec);
    let mut loss = T::zero();
    let mut input_grads = Vec::with_capacity(inputs.len());
    for (x, &label) in inputs.iter().zip(labels) {
        let acts = exec.forward(x)?;
        let (l, g) = softmax_cross_entropy(acts.logits(), label);
        loss += l;
        input_grads.push(exec.backward(&acts, &g, &mut grads));
    }
    let k = T::one() / T::of_f64(inputs.len() as f64);
    grads.scale(k);
    for g in input_grads.iter_mut() {
        for v in g.iter_mut() {
            *v = *v * k;
        }
    }
    Ok(LossAndGradients {
        loss: loss * k,
        weights: grads.weights,
        bias: grads.bias,
        inputs: input_grads,
    })
}

/// Mean cross-entropy of `batch` under `labels` and its exact gradients.
pub fn loss_and_gradients(model: &ModelGraph, batch: &[Tensor], labels: &[usize]) -> Result<LossAndGradients<f32>> {
    let exec = Executor::<f32>::new(model)?;
    for x in batch {
        if x.shape() != model.input_shape.as_slice() {
            return Err(Error::Shape {
                expected: model.input_shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
    }
    let inputs: Vec<&[f32]> = batch.iter().map(|t| t.data()).collect();
    batch_gradients(&exec, &inputs, labels)
}

pub fn predict(model: &ModelGraph, batch: &[Tensor], workers: &Workers) -> Result<Vec<usize>> {
    let engine = Engine::new(model)?;
    workers.try_map(batch, |x| engine.predict(x))
}

/// Accuracy over `data`, or over the samples labelled with one of `classes`.
pub fn evaluate(model: &ModelGraph, data: &Dataset, classes: Option<&[usize]>, workers: &Workers) -> Result<f64> {
    let engine = Engine::new(model)?;
    evaluate_with(&engine, data, classes, workers)
}

pub fn evaluate_with(engine: &Engine, data: &Dataset, classes: Option<&[usize]>, workers: &Workers) -> Result<f64> {
    let samples: Vec<_> = data
        .samples
        .iter()
        .filter(|s| classes.is_none_or(|c| c.contains(&s.label)))
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = workers.try_map(&samples, |s| engine.predict(&s.input).map(|p| p == s.label))?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / samples.len() as f64)
}
