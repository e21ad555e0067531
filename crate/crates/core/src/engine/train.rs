use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::exec::{softmax_cross_entropy, Executor};
use super::batch_gradients;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelGraph;

/// Plain minibatch SGD on mean softmax cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            epochs: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero rate is accepted: it leaves every weight untouched.
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which parameters an SGD step may change (`true` = trainable).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMask {
    pub weights: Vec<Vec<bool>>,
    pub bias: Vec<Vec<bool>>,
}

impl TrainMask {
    fn filled(model: &ModelGraph, value: bool) -> Self {
        Self {
            weights: model
                .layers
                .iter()
                .map(|l| vec![value; l.weights.as_ref().map_or(0, |w| w.len())])
                .collect(),
            bias: model
                .layers
                .iter()
                .map(|l| vec![value; l.bias.as_ref().map_or(0, |b| b.len())])
                .collect(),
        }
    }

    pub fn all(model: &ModelGraph) -> Self {
        Self::filled(model, true)
    }

    pub fn none(model: &ModelGraph) -> Self {
        Self::filled(model, false)
    }

    fn matches(&self, model: &ModelGraph) -> bool {
        let shape = Self::all(model);
        self.weights.len() == shape.weights.len()
            && self.weights.iter().zip(&shape.weights).all(|(a, b)| a.len() == b.len())
            && self.bias.iter().zip(&shape.bias).all(|(a, b)| a.len() == b.len())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelGraph,
    /// Mean loss over the whole training set after each epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn sgd_train(model: &ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<ModelGraph> {
    sgd_train_masked(model, data, cfg, &TrainMask::all(model)).map(|o| o.model)
}

/// SGD that only updates parameters enabled in `mask`. Deterministic for a
/// given seed; works on a private copy of `model`.
pub fn sgd_train_masked(model: &ModelGraph, data: &Dataset, cfg: &TrainConfig, mask: &TrainMask) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.check_shape(&model.input_shape)?;
    if !mask.matches(model) {
        return Err(Error::Config("training mask does not match the model".into()));
    }
    let mut exec = Executor::<f32>::new(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let lr = cfg.learning_rate;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<&[f32]> = chunk.iter().map(|&i| data.samples[i].input.data()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.samples[i].label).collect();
            let g = batch_gradients(&exec, &inputs, &labels).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { epoch, loss: f64::NAN },
                e => e,
            })?;
            if !g.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: g.loss as f64,
                });
            }
            for layer in 0..exec.layer_count() {
                let w = exec.weights_mut(layer);
                for ((w, &gv), &on) in w.iter_mut().zip(&g.weights[layer]).zip(&mask.weights[layer]) {
                    if on {
                        *w -= lr * gv;
                    }
                }
                let b = exec.bias_mut(layer);
                for ((b, &gv), &on) in b.iter_mut().zip(&g.bias[layer]).zip(&mask.bias[layer]) {
                    if on {
                        *b -= lr * gv;
                    }
                }
            }
        }
        let loss = mean_loss(&exec, data).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { epoch, loss: f64::NAN },
            e => e,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        epoch_losses.push(loss);
    }
    Ok(TrainOutcome {
        model: exec.to_model(model),
        epoch_losses,
    })
}

fn mean_loss(exec: &Executor<f32>, data: &Dataset) -> Result<f64> {
    let mut total = 0.0f64;
    for s in &data.samples {
        let acts = exec.forward(s.input.data())?;
        total += softmax_cross_entropy(acts.logits(), s.label).0 as f64;
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;
    use crate::engine::evaluate;
    use crate::model::ModelBuilder;
    use crate::parallel::Workers;
    use crate::tensor::Tensor;
    use rand::Rng;

    /// Two Gaussian blobs at (±1, ±1).
    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| {
                let label = i % 2;
                let c = if label == 0 { -1.0 } else { 1.0 };
                let x = (0..2).map(|_| c + rng.gen_range(-0.4..0.4)).collect();
                Sample {
                    input: Tensor::new(vec![2], x).unwrap(),
                    label,
                }
            })
            .collect();
        Dataset::new(samples, 2).unwrap()
    }

    fn weights(m: &ModelGraph) -> Vec<u32> {
        m.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn zero_rate_leaves_weights_unchanged() {
        let m = ModelBuilder::new(&[2], 2, 1).fc(4).relu().fc(2).build().unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let out = sgd_train(&m, &blobs(40, 0), &cfg).unwrap();
        assert_eq!(weights(&out), weights(&m));
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let m = ModelBuilder::new(&[2], 2, 2).fc(8).relu().fc(2).build().unwrap();
        let data = blobs(200, 1);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            batch_size: 8,
            epochs: 20,
            seed: 3,
        };
        let out = sgd_train(&m, &data, &cfg).unwrap();
        let acc = evaluate(&out, &blobs(200, 2), None, &Workers::single()).unwrap();
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn full_batch_loss_is_non_increasing() {
        let m = ModelBuilder::new(&[2], 2, 4).fc(2).build().unwrap();
        let data = blobs(64, 5);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 64,
            epochs: 15,
            seed: 0,
        };
        let out = sgd_train_masked(&m, &data, &cfg, &TrainMask::all(&m)).unwrap();
        assert_eq!(out.epoch_losses.len(), 15);
        assert!(out.epoch_losses.windows(2).all(|w| w[1] <= w[0]), "{:?}", out.epoch_losses);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let m = ModelBuilder::new(&[2], 2, 1).fc(4).relu().fc(2).build().unwrap();
        let data = blobs(50, 0);
        let cfg = TrainConfig::default();
        let a = sgd_train(&m, &data, &cfg).unwrap();
        let b = sgd_train(&m, &data, &cfg).unwrap();
        assert_eq!(weights(&a), weights(&b));
        let c = sgd_train(&m, &data, &TrainConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(weights(&a), weights(&c));
    }

    #[test]
    fn mask_freezes_parameters() {
        let m = ModelBuilder::new(&[2], 2, 1).fc(3).fc(2).build().unwrap();
        let mut mask = TrainMask::none(&m);
        mask.weights[2][1] = true;
        let out = sgd_train_masked(&m, &blobs(40, 0), &TrainConfig::default(), &mask).unwrap().model;
        let before = m.layers[2].weights.as_ref().unwrap().data();
        let after = out.layers[2].weights.as_ref().unwrap().data();
        for i in 0..before.len() {
            assert_eq!(before[i] == after[i], i != 1);
        }
        assert_eq!(m.layers[1].weights, out.layers[1].weights);
        assert_eq!(m.layers[2].bias, out.layers[2].bias);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let m = ModelBuilder::new(&[2], 2, 1).fc(2).build().unwrap();
        let data = blobs(4, 0);
        for cfg in [
            TrainConfig { learning_rate: -0.1, ..Default::default() },
            TrainConfig { learning_rate: f32::NAN, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(matches!(sgd_train(&m, &data, &cfg), Err(Error::Config(_))));
        }
        assert!(matches!(
            sgd_train(&m, &Dataset::new(vec![], 2).unwrap(), &TrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn huge_rate_reports_divergence() {
        let m = ModelBuilder::new(&[2], 2, 1).fc(8).relu().fc(2).build().unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e30,
            ..Default::default()
        };
        assert!(matches!(sgd_train(&m, &blobs(40, 0), &cfg), Err(Error::Diverged { .. })));
    }
}
