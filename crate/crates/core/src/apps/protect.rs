use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prune::{contribution_magnitudes, SelectionMode};
use crate::dataset::Dataset;
use crate::engine::{evaluate, sgd_train_masked, TrainConfig, TrainMask};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::parallel::Workers;
use crate::slicer::ContributionTable;

#[derive(Debug, Clone, PartialEq)]
pub struct ProtectionSet {
    /// Canonical indices of hidden synapses, ascending.
    pub synapses: Vec<usize>,
    pub fraction: f64,
    pub mode: SelectionMode,
}

/// Hides the top `floor(fraction * |S|)` synapses: largest |CONTRIB| or
/// |w| first (ties in canonical order), or a seeded random choice.
pub fn select_protected(model: &ModelGraph, table: Option<&ContributionTable>, fraction: f64, mode: SelectionMode) -> Result<ProtectionSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let layout = model.layout()?;
    let total = layout.synapse_count;
    let count = (fraction * total as f64).floor() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    match mode {
        SelectionMode::Contrib => {
            let c = contribution_magnitudes(model, table, None)?;
            order.sort_by(|&a, &b| c[b].cmp(&c[a]));
        }
        SelectionMode::Weight => {
            let w: Vec<f32> = model
                .layers
                .iter()
                .filter_map(|l| l.weights.as_ref())
                .flat_map(|t| t.data().iter().map(|v| v.abs()))
                .collect();
            order.sort_by(|&a, &b| w[b].total_cmp(&w[a]));
        }
        SelectionMode::Random { seed } => order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    let mut synapses = order[..count].to_vec();
    synapses.sort_unstable();
    Ok(ProtectionSet {
        synapses,
        fraction,
        mode,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub train: TrainConfig,
    /// Hidden weights restart uniformly in `[-init_bound, init_bound]`.
    pub init_bound: f32,
    pub init_seed: u64,
    /// Also retrain the weights the attacker can see.
    pub update_exposed: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            init_bound: 0.05,
            init_seed: 0,
            update_exposed: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub model: ModelGraph,
    pub target_accuracy: f64,
    pub all_accuracy: f64,
}

/// Attacker view of the model: hidden weights replaced by seeded noise.
pub fn attacker_start(model: &ModelGraph, hidden: &ProtectionSet, bound: f32, seed: u64) -> Result<ModelGraph> {
    let layout = model.layout()?;
    let mut out = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &s in &hidden.synapses {
        if s >= layout.synapse_count {
            return Err(Error::Config(format!("synapse {s} is not part of the model")));
        }
        let id = model.synapse_id(&layout, s);
        let local = s - layout.synapse_offsets[id.layer];
        let w = out.layers[id.layer].weights.as_mut().expect("weighted layer");
        w.data_mut()[local] = if bound > 0.0 { rng.gen_range(-bound..=bound) } else { 0.0 };
    }
    Ok(out)
}

/// Retrains the hidden weights on `attacker_data` and reports target-class
/// and all-class accuracy on `eval`.
pub fn simulate_extraction(
    model: &ModelGraph,
    hidden: &ProtectionSet,
    attacker_data: &Dataset,
    eval: &Dataset,
    targets: &[usize],
    cfg: &ExtractionConfig,
    workers: &Workers,
) -> Result<Extraction> {
    let start = attacker_start(model, hidden, cfg.init_bound, cfg.init_seed)?;
    let layout = model.layout()?;
    let mask = if cfg.update_exposed {
        TrainMask::all(model)
    } else {
        let mut m = TrainMask::none(model);
        for &s in &hidden.synapses {
            let id = model.synapse_id(&layout, s);
            m.weights[id.layer][s - layout.synapse_offsets[id.layer]] = true;
        }
        m
    };
    let recovered = if hidden.synapses.is_empty() && !cfg.update_exposed {
        start
    } else {
        sgd_train_masked(&start, attacker_data, &cfg.train, &mask)?.model
    };
    Ok(Extraction {
        target_accuracy: evaluate(&recovered, eval, Some(targets), workers)?,
        all_accuracy: evaluate(&recovered, eval, None, workers)?,
        model: recovered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::profile;
    use crate::slicer::{output_neurons, Slicer};
    use crate::testkit::toy_problem;

    fn setup() -> (ModelGraph, Dataset, ContributionTable) {
        let (m, d) = toy_problem(21, 90);
        let p = profile(&m, &d, &Workers::single()).unwrap();
        let s = Slicer::new(&m, &p).unwrap();
        let sub = d.restrict(&[1]);
        let xs: Vec<_> = sub.samples.iter().map(|s| &s.input).collect();
        let t = s.slice_aggregate(&xs, &output_neurons(&m, &[1]), 0.0, &Workers::single()).unwrap();
        (m, d, t)
    }

    #[test]
    fn full_fraction_hides_everything() {
        let (m, _, t) = setup();
        let n = m.layout().unwrap().synapse_count;
        for mode in [SelectionMode::Contrib, SelectionMode::Weight, SelectionMode::Random { seed: 2 }] {
            let set = select_protected(&m, Some(&t), 1.0, mode).unwrap();
            assert_eq!(set.synapses, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn half_fraction_takes_the_top_contributors() {
        let (m, _, t) = setup();
        let n = m.layout().unwrap().synapse_count;
        let set = select_protected(&m, Some(&t), 0.5, SelectionMode::Contrib).unwrap();
        assert_eq!(set.synapses.len(), n / 2);
        let mags = contribution_magnitudes(&m, Some(&t), None).unwrap();
        // Full-sort oracle: stable descending sort over canonical order.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&s| std::cmp::Reverse(mags[s]));
        let mut expected = order[..n / 2].to_vec();
        expected.sort_unstable();
        assert_eq!(set.synapses, expected);
        let min_hidden = set.synapses.iter().map(|&s| mags[s]).min().unwrap();
        assert!((0..n).filter(|s| set.synapses.binary_search(s).is_err()).all(|s| mags[s] <= min_hidden));
    }

    #[test]
    fn random_selection_differs() {
        let (m, _, t) = setup();
        let c = select_protected(&m, Some(&t), 0.5, SelectionMode::Contrib).unwrap();
        let r = select_protected(&m, Some(&t), 0.5, SelectionMode::Random { seed: 3 }).unwrap();
        assert_eq!(c.synapses.len(), r.synapses.len());
        assert_ne!(c.synapses, r.synapses);
        assert_eq!(r, select_protected(&m, None, 0.5, SelectionMode::Random { seed: 3 }).unwrap());
    }

    #[test]
    fn invalid_fraction_is_rejected() {
        let (m, _, t) = setup();
        for f in [0.0, -0.5, 1.5, f64::NAN] {
            assert!(select_protected(&m, Some(&t), f, SelectionMode::Contrib).is_err());
        }
        assert!(select_protected(&m, None, 0.5, SelectionMode::Contrib).is_err());
    }

    #[test]
    fn nothing_hidden_means_nothing_to_recover() {
        let (m, d, _) = setup();
        let empty = ProtectionSet {
            synapses: vec![],
            fraction: 0.0,
            mode: SelectionMode::Contrib,
        };
        let w = Workers::single();
        let ex = simulate_extraction(&m, &empty, &d, &d, &[1], &ExtractionConfig::default(), &w).unwrap();
        assert_eq!(ex.target_accuracy, evaluate(&m, &d, Some(&[1]), &w).unwrap());
        assert_eq!(ex.all_accuracy, evaluate(&m, &d, None, &w).unwrap());
        assert_eq!(ex.model, m);
    }

    #[test]
    fn attacker_start_resets_only_hidden_weights() {
        let (m, _, t) = setup();
        let set = select_protected(&m, Some(&t), 0.3, SelectionMode::Contrib).unwrap();
        let start = attacker_start(&m, &set, 0.05, 9).unwrap();
        let layout = m.layout().unwrap();
        for s in 0..layout.synapse_count {
            let id = m.synapse_id(&layout, s);
            let local = s - layout.synapse_offsets[id.layer];
            let a = m.layers[id.layer].weights.as_ref().unwrap().data()[local];
            let b = start.layers[id.layer].weights.as_ref().unwrap().data()[local];
            if set.synapses.binary_search(&s).is_ok() {
                assert!(b.abs() <= 0.05);
            } else {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(start, attacker_start(&m, &set, 0.05, 9).unwrap());
    }

    #[test]
    fn retraining_touches_only_hidden_weights() {
        let (m, d, t) = setup();
        let set = select_protected(&m, Some(&t), 0.5, SelectionMode::Contrib).unwrap();
        let cfg = ExtractionConfig {
            train: TrainConfig { epochs: 1, ..Default::default() },
            ..Default::default()
        };
        let ex = simulate_extraction(&m, &set, &d, &d, &[1], &cfg, &Workers::single()).unwrap();
        let start = attacker_start(&m, &set, cfg.init_bound, cfg.init_seed).unwrap();
        let layout = m.layout().unwrap();
        let mut moved = 0;
        for s in 0..layout.synapse_count {
            let id = m.synapse_id(&layout, s);
            let local = s - layout.synapse_offsets[id.layer];
            let a = start.layers[id.layer].weights.as_ref().unwrap().data()[local];
            let b = ex.model.layers[id.layer].weights.as_ref().unwrap().data()[local];
            if set.synapses.binary_search(&s).is_err() {
                assert_eq!(a.to_bits(), b.to_bits());
            } else if a != b {
                moved += 1;
            }
        }
        assert!(moved > 0);
        for (a, b) in m.layers.iter().zip(&ex.model.layers) {
            assert_eq!(a.bias, b.bias);
        }
    }

    #[test]
    fn fully_hidden_model_with_tiny_budget_is_near_chance() {
        let (m, d, _) = setup();
        let set = select_protected(&m, None, 1.0, SelectionMode::Random { seed: 0 }).unwrap();
        let cfg = ExtractionConfig {
            train: TrainConfig { epochs: 1, learning_rate: 0.01, ..Default::default() },
            ..Default::default()
        };
        let ex = simulate_extraction(&m, &set, &d.slice(0..3), &d, &[1], &cfg, &Workers::single()).unwrap();
        assert!(ex.all_accuracy < 0.6, "{}", ex.all_accuracy);
    }
}
