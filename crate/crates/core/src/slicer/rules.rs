use crate::error::{Error, Result};

/// Operator rule applied at one central neuron.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpRule {
    WeightedSum,
    Average,
    /// Only the predecessor that produced the maximum contributes.
    Maximum { winner: usize },
    /// The single predecessor contributes only if the gate is open.
    Rectify { gate: bool },
    Scale,
}

impl OpRule {
    /// True for rules with at most one nonzero local contribution.
    pub fn is_single(&self) -> bool {
        matches!(self, OpRule::Maximum { .. } | OpRule::Rectify { .. } | OpRule::Scale)
    }
}

/// One predecessor term of an operation: weight, activation and its delta.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub w: f64,
    pub x: f64,
    pub dx: f64,
}

pub const EPSILON: f64 = 1e-12;

pub(crate) fn sign(v: f64) -> i64 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Local contribution of every predecessor term of a neuron whose
/// cumulative contribution is `center` and relative activation `dy`.
pub fn local_contributions(rule: OpRule, center: i64, dy: f64, terms: &[Term]) -> Result<Vec<f64>> {
    if center == 0 {
        return Err(Error::Config("central contribution must be nonzero".into()));
    }
    let k = center as f64 * dy;
    Ok(terms
        .iter()
        .enumerate()
        .map(|(i, t)| match rule {
            OpRule::WeightedSum => k * (t.w * t.dx),
            OpRule::Average | OpRule::Scale => k * t.dx,
            OpRule::Maximum { winner } if i == winner => k * t.dx,
            OpRule::Rectify { gate: true } => k * t.dx,
            OpRule::Maximum { .. } | OpRule::Rectify { .. } => 0.0,
        })
        .collect())
}

/// Indices (ascending) of the local contributions kept under threshold
/// `theta`.
///
/// Contributions are visited in ascending magnitude (ties by index) and
/// the longest prefix whose summed mass stays within `theta` of `y` is
/// dropped. `mass` holds `w * dx` for weighted sums and `dx` for averages.
/// Exact zeros are never kept.
pub fn theta_filter(rule: OpRule, local: &[f64], mass: &[f64], y: f64, theta: f64) -> Result<Vec<usize>> {
    if !(theta >= 0.0) {
        return Err(Error::Config(format!("theta must be non-negative, got {theta}")));
    }
    let mut keep = vec![true; local.len()];
    if !rule.is_single() {
        let denom = match rule {
            OpRule::Average => (local.len() as f64 * y).abs(),
            _ => y.abs(),
        }
        .max(EPSILON);
        let mut order: Vec<usize> = (0..local.len()).collect();
        order.sort_by(|&a, &b| local[a].abs().total_cmp(&local[b].abs()));
        let mut excluded = 0.0f64;
        for i in order {
            excluded += mass[i];
            if excluded.abs() / denom > theta {
                break;
            }
            keep[i] = false;
        }
    }
    Ok((0..local.len()).filter(|&i| keep[i] && local[i] != 0.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn terms(ws: &[f64], dxs: &[f64]) -> Vec<Term> {
        ws.iter().zip(dxs).map(|(&w, &dx)| Term { w, x: 0.0, dx }).collect()
    }

    #[test]
    fn weighted_sum_hand_example() {
        let t = terms(&[1.0, -1.0, 0.0], &[0.2, 0.3, 9.0]);
        let got = local_contributions(OpRule::WeightedSum, 2, 0.5, &t).unwrap();
        assert_eq!(got.len(), 3);
        assert!((got[0] - 0.2).abs() < 1e-12);
        assert!((got[1] + 0.3).abs() < 1e-12);
        assert_eq!(got[2], 0.0);
    }

    #[test]
    fn maximum_keeps_only_winner() {
        let x = [1.0, 5.0, 3.0];
        let winner = x.iter().position(|&v| v == 5.0).unwrap();
        let t: Vec<Term> = x.iter().map(|&x| Term { w: 1.0, x, dx: 0.7 }).collect();
        let got = local_contributions(OpRule::Maximum { winner }, 1, 1.0, &t).unwrap();
        assert_eq!(got.iter().filter(|v| **v != 0.0).count(), 1);
        assert!(got[1] != 0.0);
    }

    #[test]
    fn closed_gate_blocks() {
        let t = terms(&[1.0], &[4.0]);
        let got = local_contributions(OpRule::Rectify { gate: false }, 3, 2.0, &t).unwrap();
        assert_eq!(got, vec![0.0]);
    }

    #[test]
    fn zero_center_rejected() {
        assert!(local_contributions(OpRule::Scale, 0, 1.0, &terms(&[1.0], &[1.0])).is_err());
    }

    #[test]
    fn theta_example_keeps_three() {
        let mass = [0.5, 0.3, 0.15, 0.05];
        let kept = theta_filter(OpRule::WeightedSum, &mass, &mass, 1.0, 0.1).unwrap();
        assert_eq!(kept, vec![0, 1, 2]);
    }

    #[test]
    fn theta_zero_drops_only_zeros() {
        let mass = [0.0, 0.3, -1e-9, 0.0, 2.0];
        let kept = theta_filter(OpRule::WeightedSum, &mass, &mass, 1.0, 0.0).unwrap();
        assert_eq!(kept, vec![1, 2, 4]);
    }

    #[test]
    fn theta_one_may_drop_everything() {
        let mass = [0.25, 0.25, 0.5];
        let kept = theta_filter(OpRule::WeightedSum, &mass, &mass, 1.0, 1.0).unwrap();
        assert!(kept.is_empty());
    }

    #[test]
    fn stops_at_first_violation() {
        // 0.05 fits, 0.05 + 0.2 does not; the later cancelling term is kept.
        let mass = [0.05, 0.2, -0.21];
        let kept = theta_filter(OpRule::WeightedSum, &mass, &mass, 1.0, 0.1).unwrap();
        assert_eq!(kept, vec![1, 2]);
    }

    #[test]
    fn single_rules_ignore_theta() {
        let kept = theta_filter(OpRule::Scale, &[0.01], &[0.01], 100.0, 0.5).unwrap();
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn negative_theta_rejected() {
        assert!(theta_filter(OpRule::WeightedSum, &[1.0], &[1.0], 1.0, -0.1).is_err());
    }
}
