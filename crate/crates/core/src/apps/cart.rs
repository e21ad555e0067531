//! CART classification trees (Gini impurity) over sparse integer features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse integer feature vector stored as one bit plane per distinct
/// nonzero value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureRow {
    len: usize,
    planes: Vec<(i64, Vec<u64>)>,
}

impl FeatureRow {
    pub fn from_dense(values: &[i64]) -> Self {
        let words = values.len().div_ceil(64);
        let mut planes: Vec<(i64, Vec<u64>)> = Vec::new();
        for (i, &v) in values.iter().enumerate() {
            if v == 0 {
                continue;
            }
            let slot = match planes.iter().position(|(pv, _)| *pv == v) {
                Some(s) => s,
                None => {
                    planes.push((v, vec![0; words]));
                    planes.len() - 1
                }
            };
            planes[slot].1[i / 64] |= 1 << (i % 64);
        }
        planes.sort_by_key(|(v, _)| *v);
        Self {
            len: values.len(),
            planes,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, feature: usize) -> i64 {
        self.planes
            .iter()
            .find(|(_, bits)| bits[feature / 64] >> (feature % 64) & 1 == 1)
            .map_or(0, |(v, _)| *v)
    }

    pub fn nonzero_count(&self) -> usize {
        self.planes
            .iter()
            .map(|(_, bits)| bits.iter().map(|w| w.count_ones() as usize).sum::<usize>())
            .sum()
    }

    pub fn to_dense(&self) -> Vec<i64> {
        let mut out = vec![0; self.len];
        self.for_each_nonzero(|f, v| out[f] = v);
        out
    }

    fn for_each_nonzero(&self, mut f: impl FnMut(usize, i64)) {
        for (v, bits) in &self.planes {
            for (w, &word) in bits.iter().enumerate() {
                let mut word = word;
                while word != 0 {
                    let b = word.trailing_zeros() as usize;
                    f(w * 64 + b, *v);
                    word &= word - 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CartConfig {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for CartConfig {
    fn default() -> Self {
        Self {
            max_depth: 25,
            min_leaf: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf {
        label: usize,
    },
    /// Samples with `value <= threshold` go left.
    Split {
        feature: usize,
        threshold: f32,
        left: usize,
        right: usize,
    },
}

/// Nodes in pre-order; the root is node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_with(&self, value: impl Fn(usize) -> i64) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { label } => return *label,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if (value(*feature) as f64) <= *threshold as f64 {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn predict(&self, row: &FeatureRow) -> usize {
        self.predict_with(|f| row.get(f))
    }

    pub fn predict_dense(&self, values: &[i64]) -> usize {
        self.predict_with(|f| values.get(f).copied().unwrap_or(0))
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Index of the leaf reached by `row`.
    pub fn leaf_of(&self, row: &FeatureRow) -> usize {
        let mut i = 0;
        while let Node::Split {
            feature,
            threshold,
            left,
            right,
        } = &self.nodes[i]
        {
            i = if (row.get(*feature) as f64) <= *threshold as f64 {
                *left
            } else {
                *right
            };
        }
        i
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }
}

fn gini(counts: &[u32], n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

fn majority(counts: &[u32]) -> usize {
    // Lowest label wins ties.
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

struct Split {
    feature: usize,
    threshold: f32,
    impurity: f64,
}

struct Fitter<'a> {
    rows: &'a [FeatureRow],
    labels: &'a [usize],
    classes: usize,
    features: usize,
    cfg: CartConfig,
    nodes: Vec<Node>,
}

impl Fitter<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<u32> {
        let mut c = vec![0u32; self.classes];
        for &i in idx {
            c[self.labels[i]] += 1;
        }
        c
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let counts = self.counts(&idx);
        let here = self.nodes.len();
        self.nodes.push(Node::Leaf {
            label: majority(&counts),
        });
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.cfg.max_depth || idx.len() < 2 * self.cfg.min_leaf.max(1) {
            return here;
        }
        let Some(split) = self.best_split(&idx, &counts) else {
            return here;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx
            .into_iter()
            .partition(|&i| (self.rows[i].get(split.feature) as f64) <= split.threshold as f64);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[here] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        here
    }

    fn best_split(&self, idx: &[usize], counts: &[u32]) -> Option<Split> {
        let mut values: Vec<i64> = Vec::new();
        for &i in idx {
            for (v, _) in &self.rows[i].planes {
                if let Err(p) = values.binary_search(v) {
                    values.insert(p, *v);
                }
            }
        }
        if values.is_empty() {
            return None;
        }
        // Class histogram per (feature, nonzero value).
        let k = self.classes;
        let slots = values.len();
        let mut hist = vec![0u32; self.features * slots * k];
        let mut touched = vec![false; self.features];
        for &i in idx {
            let label = self.labels[i];
            let row = &self.rows[i];
            for (v, bits) in &row.planes {
                let s = values.binary_search(v).unwrap();
                for (w, &word) in bits.iter().enumerate() {
                    let mut word = word;
                    while word != 0 {
                        let f = w * 64 + word.trailing_zeros() as usize;
                        hist[(f * slots + s) * k + label] += 1;
                        touched[f] = true;
                        word &= word - 1;
                    }
                }
            }
        }
        let n = idx.len() as u32;
        let min_leaf = self.cfg.min_leaf.max(1) as u32;
        let zero_slot = values.partition_point(|&v| v < 0);
        let mut best: Option<Split> = None;
        let mut ordered: Vec<(i64, Vec<u32>)> = Vec::with_capacity(slots + 1);
        for f in (0..self.features).filter(|&f| touched[f]) {
            ordered.clear();
            let mut zero = counts.to_vec();
            for s in 0..slots {
                let h = &hist[(f * slots + s) * k..(f * slots + s + 1) * k];
                for c in 0..k {
                    zero[c] -= h[c];
                }
            }
            for s in 0..slots {
                if s == zero_slot {
                    ordered.push((0, zero.clone()));
                }
                ordered.push((values[s], hist[(f * slots + s) * k..(f * slots + s + 1) * k].to_vec()));
            }
            if zero_slot == slots {
                ordered.push((0, zero));
            }
            ordered.retain(|(_, c)| c.iter().any(|&x| x > 0));
            let mut left = vec![0u32; k];
            let mut nl = 0u32;
            for j in 0..ordered.len().saturating_sub(1) {
                for c in 0..k {
                    left[c] += ordered[j].1[c];
                }
                nl += ordered[j].1.iter().sum::<u32>();
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let right: Vec<u32> = counts.iter().zip(&left).map(|(a, b)| a - b).collect();
                let impurity = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
                if best.as_ref().is_none_or(|b| impurity < b.impurity - 1e-12) {
                    let threshold = ((ordered[j].0 as f64 + ordered[j + 1].0 as f64) / 2.0) as f32;
                    best = Some(Split {
                        feature: f,
                        threshold,
                        impurity,
                    });
                }
            }
        }
        best
    }
}

/// Fits a tree with greedy Gini splits. Ties go to the lowest feature and
/// then the lowest threshold. Impure nodes split while depth and leaf size allow.
pub fn cart_fit(rows: &[FeatureRow], labels: &[usize], cfg: &CartConfig) -> Result<Tree> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if rows.len() != labels.len() {
        return Err(Error::Config(format!("{} rows but {} labels", rows.len(), labels.len())));
    }
    let features = rows[0].len();
    if rows.iter().any(|r| r.len() != features) {
        return Err(Error::Config("feature rows differ in length".into()));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let mut fitter = Fitter {
        rows,
        labels,
        classes,
        features,
        cfg: *cfg,
        nodes: Vec::new(),
    };
    fitter.grow((0..rows.len()).collect(), 0);
    Ok(Tree { nodes: fitter.nodes })
}

pub fn cart_predict(tree: &Tree, row: &FeatureRow) -> usize {
    tree.predict(row)
}
