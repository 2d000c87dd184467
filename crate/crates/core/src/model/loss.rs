use serde::{Deserialize, Serialize};

use super::config::OUTPUT_DIM;
use crate::scalar::Scalar;

/// Matching confidence plus corner displacements `(Δx1, Δy1, Δx2, Δy2)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchOutput<S> {
    pub confidence: S,
    pub displacements: [S; 4],
}

impl<S: Scalar> MatchOutput<S> {
    pub fn new(confidence: S, displacements: [S; 4]) -> Self {
        Self { confidence, displacements }
    }

    pub fn from_slice(v: &[S]) -> Self {
        assert_eq!(v.len(), OUTPUT_DIM, "match output has five components");
        Self { confidence: v[0], displacements: [v[1], v[2], v[3], v[4]] }
    }

    pub fn to_array(&self) -> [S; OUTPUT_DIM] {
        let d = self.displacements;
        [self.confidence, d[0], d[1], d[2], d[3]]
    }

    /// Mean absolute difference of the four displacement components.
    pub fn displacement_error(&self, other: &Self) -> S {
        self.displacements.iter().zip(&other.displacements).map(|(&a, &b)| (a - b).abs()).sum::<S>() / S::of(4.0)
    }

    pub fn cast<T: Scalar>(&self) -> MatchOutput<T> {
        MatchOutput {
            confidence: T::of(self.confidence.as_f64()),
            displacements: self.displacements.map(|v| T::of(v.as_f64())),
        }
    }
}

/// Regression loss over `N` prediction/target pairs:
///
/// `J = (1/N)·Σ (c − ĉ)² + (1/N)·Σ_{present} ‖t − t̂‖²`
///
/// where a pair contributes displacement error only when `presence` is set
/// (the label occurs in both the neighbor and the query). For one query
/// image `N = K·L`.
pub fn loss<S: Scalar>(predictions: &[MatchOutput<S>], targets: &[MatchOutput<S>], presence: &[bool]) -> S {
    assert_eq!(predictions.len(), targets.len());
    assert_eq!(predictions.len(), presence.len());
    let n = predictions.len();
    predictions
        .iter()
        .zip(targets)
        .zip(presence)
        .map(|((p, t), &valid)| loss_gradient(p, t, valid, n).0)
        .sum()
}

/// Contribution of one pair to [`loss`] and its gradient with respect to
/// the prediction, for a loss normalized by `n` pairs.
///
/// Displacement gradient components of an absent pair are exactly zero.
pub fn loss_gradient<S: Scalar>(
    prediction: &MatchOutput<S>,
    target: &MatchOutput<S>,
    displacement_valid: bool,
    n: usize,
) -> (S, [S; OUTPUT_DIM]) {
    let inv_n = S::one() / S::of(n as f64);
    let two = S::of(2.0);
    let dc = prediction.confidence - target.confidence;
    let mut sum = dc * dc;
    let mut grad = [S::zero(); OUTPUT_DIM];
    grad[0] = two * dc * inv_n;
    if displacement_valid {
        for i in 0..4 {
            let d = prediction.displacements[i] - target.displacements[i];
            sum += d * d;
            grad[i + 1] = two * d * inv_n;
        }
    }
    (sum * inv_n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn out(c: f64, t: [f64; 4]) -> MatchOutput<f64> {
        MatchOutput::new(c, t)
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let t = vec![out(1.0, [0.1, 0.2, -0.1, 0.0]), out(0.0, [0.0; 4])];
        assert_eq!(loss(&t, &t, &[true, false]), 0.0);
    }

    #[test]
    fn hand_evaluated_example() {
        // K=1, L=2: confidence errors 0.5 and 0, one included pair with
        // displacement error (0.1, 0, 0, 0).
        let targets = vec![out(1.0, [0.0; 4]), out(0.0, [0.0; 4])];
        let preds = vec![out(0.5, [0.1, 0.0, 0.0, 0.0]), out(0.0, [0.7, 0.7, 0.7, 0.7])];
        let j = loss(&preds, &targets, &[true, false]);
        assert!((j - 0.13).abs() < 1e-15, "{j}");
    }

    #[test]
    fn masked_pair_ignores_displacements() {
        let target = out(1.0, [0.0; 4]);
        let a = out(0.3, [0.0; 4]);
        let b = out(0.3, [5.0, -3.0, 1e6, 2.0]);
        let ja = loss(&[a], &[target], &[false]);
        let jb = loss(&[b], &[target], &[false]);
        assert_eq!(ja.to_bits(), jb.to_bits());
        let (_, g) = loss_gradient(&b, &target, false, 1);
        assert_eq!(&g[1..], &[0.0; 4]);
    }
}
