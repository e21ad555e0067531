use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::engine::{sgd_train_masked, TrainConfig, TrainMask};
use crate::error::{Error, Result};
use crate::model::{ModelGraph, NeuronId};
use crate::slicer::ContributionTable;

/// How synapses are ranked for pruning or protection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Magnitude of cumulative contribution.
    Contrib,
    /// Magnitude of the weight.
    Weight,
    /// Seeded random order.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub targets: Vec<usize>,
    pub ratio: f64,
    pub theta: f32,
    pub mode: SelectionMode,
}

impl PruneConfig {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("target classes must not be empty".into()));
        }
        if let Some(t) = self.targets.iter().find(|&&t| t >= class_count) {
            return Err(Error::Config(format!("target class {t} out of range")));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("prune ratio must be in [0, 1], got {}", self.ratio)));
        }
        if !(self.theta >= 0.0) {
            return Err(Error::Config("theta must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Pruned {
    pub model: ModelGraph,
    /// Trainable flags: pruned weights and biases of pruned neurons are frozen.
    pub mask: TrainMask,
    /// Canonical indices of pruned synapses, ascending.
    pub synapses: Vec<usize>,
    pub neurons: Vec<NeuronId>,
}

/// Dense |CONTRIB| per synapse, checked against the model and criterion.
pub(crate) fn contribution_magnitudes(model: &ModelGraph, table: Option<&ContributionTable>, targets: Option<&[usize]>) -> Result<Vec<u64>> {
    let table = table.ok_or_else(|| Error::Config("contribution mode needs a contribution table".into()))?;
    if table.model != model.fingerprint()? {
        return Err(Error::Fingerprint("table was computed for a different model".into()));
    }
    if let Some(targets) = targets {
        let mut t = targets.to_vec();
        t.sort_unstable();
        t.dedup();
        if t != table.outputs {
            return Err(Error::Fingerprint(format!(
                "table outputs {:?} differ from targets {t:?}",
                table.outputs
            )));
        }
    }
    let layout = model.layout()?;
    let mut out = vec![0u64; layout.synapse_count];
    for (id, v) in &table.synapses {
        out[model.synapse_index(&layout, *id)] = v.unsigned_abs();
    }
    Ok(out)
}

/// Per layer, zeroes the first `floor(ratio * |S_l|)` synapses in
/// ascending rank order. Neurons that lose every synapse are pruned and
/// their bias zeroed.
pub fn prune(model: &ModelGraph, table: Option<&ContributionTable>, cfg: &PruneConfig) -> Result<Pruned> {
    cfg.validate(model.class_count)?;
    let layout = model.layout()?;
    let contrib = match cfg.mode {
        SelectionMode::Contrib => Some(contribution_magnitudes(model, table, Some(&cfg.targets))?),
        _ => None,
    };
    let mut rng = match cfg.mode {
        SelectionMode::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let mut out = model.clone();
    let mut mask = TrainMask::all(model);
    let mut synapses = Vec::new();
    let mut neurons = Vec::new();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        let Some(w) = layer.weights.as_mut() else { continue };
        let n = w.len();
        let base = layout.synapse_offsets[l];
        let mut order: Vec<usize> = (0..n).collect();
        match cfg.mode {
            SelectionMode::Contrib => {
                let c = contrib.as_ref().unwrap();
                order.sort_by_key(|&i| c[base + i]);
            }
            SelectionMode::Weight => {
                let d = w.data();
                order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
            }
            SelectionMode::Random { .. } => order.shuffle(rng.as_mut().unwrap()),
        }
        let count = (cfg.ratio * n as f64).floor() as usize;
        let mut cut = vec![false; n];
        for &i in &order[..count] {
            cut[i] = true;
            w.data_mut()[i] = 0.0;
            mask.weights[l][i] = false;
            synapses.push(base + i);
        }
        let units = layout.units(l);
        let per_unit = n / units;
        for u in 0..units {
            if per_unit > 0 && cut[u * per_unit..(u + 1) * per_unit].iter().all(|&c| c) {
                neurons.push(NeuronId { layer: l, unit: u });
                if let Some(b) = layer.bias.as_mut() {
                    b.data_mut()[u] = 0.0;
                    mask.bias[l][u] = false;
                }
            }
        }
    }
    synapses.sort_unstable();
    Ok(Pruned {
        model: out,
        mask,
        synapses,
        neurons,
    })
}

/// Masked retraining on the target-class samples of `data`; pruned
/// weights stay zero.
pub fn fine_tune(pruned: &Pruned, data: &Dataset, targets: &[usize], cfg: &TrainConfig) -> Result<ModelGraph> {
    let subset = data.restrict(targets);
    if subset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(sgd_train_masked(&pruned.model, &subset, cfg, &pruned.mask)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::evaluate;
    use crate::model::{LayerKind, ModelGraph};
    use crate::parallel::Workers;
    use crate::profile::profile;
    use crate::slicer::{output_neurons, Slicer};
    use crate::testkit::toy_problem;

    fn setup() -> (ModelGraph, Dataset, ContributionTable) {
        let (m, d) = toy_problem(11, 90);
        let p = profile(&m, &d, &Workers::single()).unwrap();
        let s = Slicer::new(&m, &p).unwrap();
        let sub = d.restrict(&[0, 2]);
        let xs: Vec<_> = sub.samples.iter().map(|s| &s.input).collect();
        let t = s.slice_aggregate(&xs, &output_neurons(&m, &[0, 2]), 0.1, &Workers::single()).unwrap();
        (m, d, t)
    }

    fn cfg(ratio: f64, mode: SelectionMode) -> PruneConfig {
        PruneConfig {
            targets: vec![2, 0],
            ratio,
            theta: 0.1,
            mode,
        }
    }

    const MODES: [SelectionMode; 3] = [SelectionMode::Contrib, SelectionMode::Weight, SelectionMode::Random { seed: 4 }];

    fn bits(m: &ModelGraph) -> Vec<u32> {
        m.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn zero_ratio_is_identity() {
        let (m, _, t) = setup();
        for mode in MODES {
            let p = prune(&m, Some(&t), &cfg(0.0, mode)).unwrap();
            assert_eq!(bits(&p.model), bits(&m));
            assert!(p.synapses.is_empty() && p.neurons.is_empty());
        }
    }

    #[test]
    fn full_ratio_zeroes_everything() {
        let (m, d, t) = setup();
        for mode in MODES {
            let p = prune(&m, Some(&t), &cfg(1.0, mode)).unwrap();
            assert_eq!(p.synapses.len(), m.layout().unwrap().synapse_count);
            assert!(p.model.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter())).all(|t| t.data().iter().all(|&v| v == 0.0)));
            // Every logit is zero, so class 0 is always predicted.
            let share = d.samples.iter().filter(|s| s.label == 0).count() as f64 / d.len() as f64;
            assert_eq!(evaluate(&p.model, &d, None, &Workers::single()).unwrap(), share);
        }
    }

    #[test]
    fn pruned_sets_are_nested() {
        let (m, _, t) = setup();
        for mode in MODES {
            let mut prev: Vec<usize> = Vec::new();
            for r in [0.1, 0.25, 0.5, 0.7, 0.9] {
                let p = prune(&m, Some(&t), &cfg(r, mode)).unwrap();
                assert!(prev.iter().all(|s| p.synapses.binary_search(s).is_ok()), "{mode:?} at {r}");
                prev = p.synapses;
            }
        }
    }

    #[test]
    fn per_layer_counts_and_order() {
        let (m, _, t) = setup();
        let layout = m.layout().unwrap();
        let mags = contribution_magnitudes(&m, Some(&t), None).unwrap();
        let p = prune(&m, Some(&t), &cfg(0.5, SelectionMode::Contrib)).unwrap();
        for l in (0..m.layers.len()).filter(|&l| m.layers[l].kind() == LayerKind::FullyConnected) {
            let range = layout.synapse_offsets[l]..layout.synapse_offsets[l + 1];
            let cut: Vec<usize> = p.synapses.iter().copied().filter(|s| range.contains(s)).collect();
            assert_eq!(cut.len(), range.len() / 2);
            let worst_cut = cut.iter().map(|&s| mags[s]).max().unwrap_or(0);
            let best_kept = range.clone().filter(|s| !cut.contains(s)).map(|s| mags[s]).min().unwrap();
            assert!(worst_cut <= best_kept);
        }
    }

    #[test]
    fn weight_mode_cuts_small_weights() {
        let (m, _, _) = setup();
        let p = prune(&m, None, &cfg(0.5, SelectionMode::Weight)).unwrap();
        for (a, b) in m.layers.iter().zip(&p.model.layers) {
            let (Some(a), Some(b)) = (&a.weights, &b.weights) else { continue };
            let cut = a.data().iter().zip(b.data()).filter(|(_, &y)| y == 0.0).map(|(x, _)| x.abs()).fold(0.0, f32::max);
            let kept = a.data().iter().zip(b.data()).filter(|(_, &y)| y != 0.0).map(|(x, _)| x.abs()).fold(f32::MAX, f32::min);
            assert!(cut <= kept);
        }
    }

    #[test]
    fn contrib_mode_needs_matching_table() {
        let (m, _, t) = setup();
        assert!(prune(&m, None, &cfg(0.5, SelectionMode::Contrib)).is_err());
        let mut c = cfg(0.5, SelectionMode::Contrib);
        c.targets = vec![1];
        assert!(matches!(prune(&m, Some(&t), &c), Err(Error::Fingerprint(_))));
        for bad in [
            PruneConfig { targets: vec![], ..cfg(0.5, SelectionMode::Weight) },
            PruneConfig { targets: vec![3], ..cfg(0.5, SelectionMode::Weight) },
            cfg(1.5, SelectionMode::Weight),
            cfg(-0.1, SelectionMode::Weight),
        ] {
            assert!(matches!(prune(&m, None, &bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn dead_neurons_lose_their_bias() {
        let (m, _, t) = setup();
        let p = prune(&m, Some(&t), &cfg(0.9, SelectionMode::Random { seed: 1 })).unwrap();
        let p = if p.neurons.is_empty() { prune(&m, Some(&t), &cfg(1.0, SelectionMode::Contrib)).unwrap() } else { p };
        assert!(!p.neurons.is_empty());
        for n in &p.neurons {
            assert_eq!(p.model.layers[n.layer].bias.as_ref().unwrap().data()[n.unit], 0.0);
            assert!(!p.mask.bias[n.layer][n.unit]);
        }
    }

    #[test]
    fn fine_tuning_keeps_pruned_weights_at_zero() {
        let (m, d, t) = setup();
        let p = prune(&m, Some(&t), &cfg(0.7, SelectionMode::Contrib)).unwrap();
        let tuned = fine_tune(&p, &d, &[0, 2], &TrainConfig { learning_rate: 0.1, epochs: 2, ..Default::default() }).unwrap();
        let layout = m.layout().unwrap();
        for &s in &p.synapses {
            let id = m.synapse_id(&layout, s);
            let local = s - layout.synapse_offsets[id.layer];
            assert_eq!(tuned.layers[id.layer].weights.as_ref().unwrap().data()[local], 0.0);
        }
        assert_ne!(bits(&tuned), bits(&p.model));
        let frozen = fine_tune(&p, &d, &[0, 2], &TrainConfig { learning_rate: 0.0, ..Default::default() }).unwrap();
        assert_eq!(bits(&frozen), bits(&p.model));
    }
}
