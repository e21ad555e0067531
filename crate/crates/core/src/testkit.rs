//! Seeded generators of small models, datasets and slicing cases.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, Sample};
use crate::engine::{softmax_cross_entropy, Executor, Gradients};
use crate::model::{LayerKind, ModelBuilder, ModelGraph, NeuronId, ScaleParams};
use crate::parallel::Workers;
use crate::profile::{profile, ActivationProfile};
use crate::tensor::Tensor;
use crate::Result;

pub const MAX_UNITS: usize = 8;
/// Layers between Input and Output, including the final classifier.
pub const MAX_HIDDEN: usize = 5;

fn random_scale(rng: &mut ChaCha8Rng, channels: usize) -> ScaleParams {
    ScaleParams {
        mean: (0..channels).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        std: (0..channels).map(|_| rng.gen_range(0.5..2.0)).collect(),
        gamma: (0..channels).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        beta: (0..channels).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    }
}

/// Random valid graph: at most [`MAX_HIDDEN`] layers and [`MAX_UNITS`]
/// units per layer, drawing from every operator kind. Biases are random
/// and about one weight in ten is exactly zero.
pub fn random_model(rng: &mut ChaCha8Rng) -> ModelGraph {
    loop {
        if let Some(m) = try_random_model(rng) {
            return m;
        }
    }
}

fn try_random_model(rng: &mut ChaCha8Rng) -> Option<ModelGraph> {
    let classes = rng.gen_range(2..=4);
    let spatial = rng.gen_bool(0.75);
    let input = if spatial {
        let side = rng.gen_range(3..=4);
        vec![rng.gen_range(1..=2), side, side]
    } else {
        vec![rng.gen_range(2..=MAX_UNITS)]
    };
    let mut b = ModelBuilder::new(&input, classes, rng.gen());
    let steps = rng.gen_range(1..MAX_HIDDEN);
    for _ in 0..steps {
        let cur = b.last();
        let shape = b.shape(cur).to_vec();
        let twins: Vec<usize> = (0..cur).filter(|&j| b.shape(j) == shape.as_slice()).collect();
        let mut options: Vec<LayerKind> = vec![LayerKind::ReLU, LayerKind::Scale];
        if shape.len() == 3 {
            options.push(LayerKind::Conv2D);
            if shape[1] >= 2 && shape[2] >= 2 {
                options.push(LayerKind::MaxPool2D);
                options.push(LayerKind::AvgPool2D);
            }
            if shape.iter().product::<usize>() <= MAX_UNITS {
                options.push(LayerKind::Flatten);
            }
        } else {
            options.push(LayerKind::FullyConnected);
        }
        if !twins.is_empty() {
            options.push(LayerKind::Add);
            options.push(LayerKind::Maximum);
        }
        b = match *options.choose(rng).unwrap() {
            LayerKind::ReLU => b.relu(),
            LayerKind::Scale => {
                let p = random_scale(rng, shape[0]);
                b.scale(p)
            }
            LayerKind::Conv2D => {
                let k = rng.gen_range(1..=3.min(shape[1]));
                let pad = if k > 1 { rng.gen_range(0..=1) } else { 0 };
                b.conv2d(rng.gen_range(1..=4), k, 1, pad)
            }
            LayerKind::MaxPool2D => b.max_pool(2, 1),
            LayerKind::AvgPool2D => b.avg_pool(2, 1),
            LayerKind::Flatten => b.flatten(),
            LayerKind::FullyConnected => b.fc(rng.gen_range(1..=MAX_UNITS)),
            LayerKind::Add => b.add(&[cur, *twins.choose(rng).unwrap()]),
            LayerKind::Maximum => b.maximum(&[*twins.choose(rng).unwrap(), cur]),
            _ => unreachable!(),
        };
    }
    let shape = b.shape(b.last()).to_vec();
    if shape.len() == 3 {
        if shape.iter().product::<usize>() > MAX_UNITS {
            return None;
        }
        b = b.flatten();
    }
    let mut m = b.fc(classes).build().ok()?;
    let layout = m.layout().ok()?;
    if m.layers.len() - 2 > MAX_HIDDEN || (0..m.layers.len()).any(|l| layout.units(l) > MAX_UNITS) {
        return None;
    }
    for layer in m.layers.iter_mut() {
        if let Some(w) = layer.weights.as_mut() {
            for v in w.data_mut() {
                if rng.gen_bool(0.1) {
                    *v = 0.0;
                }
            }
        }
        if let Some(bias) = layer.bias.as_mut() {
            for v in bias.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    Some(m)
}

pub fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

pub fn random_dataset(rng: &mut ChaCha8Rng, model: &ModelGraph, n: usize) -> Dataset {
    let samples = (0..n)
        .map(|_| Sample {
            input: random_input(rng, &model.input_shape),
            label: rng.gen_range(0..model.class_count),
        })
        .collect();
    Dataset::new(samples, model.class_count).expect("labels in range")
}

/// A complete slicing problem.
#[derive(Debug, Clone)]
pub struct SliceCase {
    pub model: ModelGraph,
    pub profile: ActivationProfile,
    pub sample: Tensor,
    pub outputs: Vec<NeuronId>,
    pub theta: f32,
}

pub fn slice_case(seed: u64, theta: f32) -> SliceCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_model(&mut rng);
    let data = random_dataset(&mut rng, &model, 6);
    let profile = profile(&model, &data, &Workers::single()).expect("random model profiles");
    let sample = random_input(&mut rng, &model.input_shape);
    let logit = model.logit_layer();
    let mut units: Vec<usize> = (0..model.class_count).filter(|_| rng.gen_bool(0.5)).collect();
    if units.is_empty() {
        units.push(rng.gen_range(0..model.class_count));
    }
    SliceCase {
        outputs: units.iter().map(|&unit| NeuronId { layer: logit, unit }).collect(),
        model,
        profile,
        sample,
        theta,
    }
}

/// Every operator kind that can appear in a model.
pub const ALL_KINDS: [LayerKind; 11] = [
    LayerKind::Input,
    LayerKind::Conv2D,
    LayerKind::FullyConnected,
    LayerKind::AvgPool2D,
    LayerKind::MaxPool2D,
    LayerKind::ReLU,
    LayerKind::Scale,
    LayerKind::Add,
    LayerKind::Maximum,
    LayerKind::Flatten,
    LayerKind::Output,
];

/// Small model exercising `kind`, with a random input and label.
pub fn gradient_case(kind: LayerKind, seed: u64) -> (ModelGraph, Tensor, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 3;
    let spatial = ModelBuilder::new(&[2, 4, 4], classes, rng.gen());
    let flat = ModelBuilder::new(&[5], classes, rng.gen());
    let b = match kind {
        LayerKind::Conv2D | LayerKind::Flatten => spatial.conv2d(3, 3, 1, 1).flatten(),
        LayerKind::AvgPool2D => spatial.conv2d(3, 3, 1, 1).avg_pool(2, 2).flatten(),
        LayerKind::MaxPool2D => spatial.conv2d(3, 3, 1, 1).max_pool(2, 1).flatten(),
        LayerKind::ReLU => flat.fc(6).relu(),
        LayerKind::Scale => {
            let p = random_scale(&mut rng, 3);
            spatial.conv2d(3, 1, 1, 0).scale(p).flatten()
        }
        LayerKind::Add | LayerKind::Maximum => {
            let b = flat.fc(4);
            let a = b.last();
            let b = b.from(0).fc(4);
            let c = b.last();
            if kind == LayerKind::Add {
                b.add(&[a, c])
            } else {
                b.maximum(&[a, c])
            }
        }
        LayerKind::Input | LayerKind::FullyConnected | LayerKind::Output => flat.fc(4),
    };
    let mut model = b.fc(classes).build().expect("gradient model is valid");
    for layer in model.layers.iter_mut() {
        if let Some(bias) = layer.bias.as_mut() {
            for v in bias.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let x = random_input(&mut rng, &model.input_shape);
    let label = rng.gen_range(0..classes);
    (model, x, label)
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU or max routing change.
    pub skipped: usize,
    pub max_error: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn pattern(exec: &Executor<f64>, input: &[f64]) -> Result<(f64, Vec<bool>, Vec<Option<Vec<u32>>>)> {
    let acts = exec.forward(input)?;
    let (loss, _) = softmax_cross_entropy(acts.logits(), 0);
    let mut gates = Vec::new();
    for (l, out) in acts.outputs.iter().enumerate() {
        if exec.kind(l) == LayerKind::ReLU {
            gates.extend(out.iter().map(|&v| v > 0.0));
        }
    }
    Ok((loss, gates, acts.routes))
}

fn param(exec: &mut Executor<f64>, layer: usize, bias: bool, i: usize) -> &mut f64 {
    if bias {
        &mut exec.bias_mut(layer)[i]
    } else {
        &mut exec.weights_mut(layer)[i]
    }
}

/// Checks every weight, bias and input gradient of one sample in 64-bit
/// arithmetic against central differences with the given step.
pub fn check_gradients(model: &ModelGraph, x: &Tensor, label: usize, step: f64) -> Result<GradientCheck> {
    let mut exec = Executor::<f64>::new(model)?;
    let mut input: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let acts = exec.forward(&input)?;
    let (_, g) = softmax_cross_entropy(acts.logits(), label);
    let mut grads = Gradients::zeros_like(&exec);
    let input_grad = exec.backward(&acts, &g, &mut grads);
    let base = pattern(&exec, &input)?;

    let loss = |exec: &Executor<f64>, input: &[f64]| -> Result<(f64, bool)> {
        let acts = exec.forward(input)?;
        let (l, _) = softmax_cross_entropy(acts.logits(), label);
        let p = pattern(exec, input)?;
        Ok((l, p.1 == base.1 && p.2 == base.2))
    };
    let mut out = GradientCheck {
        checked: 0,
        skipped: 0,
        max_error: 0.0,
    };
    let mut record = |analytic: f64, plus: (f64, bool), minus: (f64, bool)| {
        if plus.1 && minus.1 {
            let numeric = (plus.0 - minus.0) / (2.0 * step);
            out.checked += 1;
            out.max_error = out.max_error.max(gradient_error(analytic, numeric));
        } else {
            out.skipped += 1;
        }
    };

    for i in 0..input.len() {
        let v = input[i];
        input[i] = v + step;
        let plus = loss(&exec, &input)?;
        input[i] = v - step;
        let minus = loss(&exec, &input)?;
        input[i] = v;
        record(input_grad[i], plus, minus);
    }
    for layer in 0..exec.layer_count() {
        for bias in [false, true] {
            let n = if bias { exec.bias(layer).len() } else { exec.weights(layer).len() };
            for i in 0..n {
                let v = *param(&mut exec, layer, bias, i);
                *param(&mut exec, layer, bias, i) = v + step;
                let plus = loss(&exec, &input)?;
                *param(&mut exec, layer, bias, i) = v - step;
                let minus = loss(&exec, &input)?;
                *param(&mut exec, layer, bias, i) = v;
                let analytic = if bias { grads.bias[layer][i] } else { grads.weights[layer][i] };
                record(analytic, plus, minus);
            }
        }
    }
    Ok(out)
}

/// Three well-separated classes in `[0, 1]^4` and a small classifier
/// trained on them.
pub fn toy_problem(seed: u64, n: usize) -> (ModelGraph, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = [[0.2, 0.2, 0.8, 0.5], [0.8, 0.2, 0.2, 0.5], [0.5, 0.8, 0.5, 0.2]];
    let samples = (0..n)
        .map(|i| {
            let label = i % 3;
            let x = centers[label].iter().map(|&c: &f32| (c + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0)).collect();
            Sample {
                input: Tensor::new(vec![4], x).expect("four features"),
                label,
            }
        })
        .collect();
    let data = Dataset::new(samples, 3).expect("labels in range");
    let model = ModelBuilder::new(&[4], 3, rng.gen()).fc(8).relu().fc(3).build().expect("valid");
    let cfg = crate::engine::TrainConfig {
        learning_rate: 0.2,
        batch_size: 8,
        epochs: 30,
        seed,
    };
    let model = crate::engine::sgd_train(&model, &data, &cfg).expect("toy training converges");
    (model, data)
}
