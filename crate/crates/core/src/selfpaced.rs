//! Linear self-paced weighting of contrastive pairs.

use crate::diffcore::{l2_normalize, norm, Tensor2};
use crate::error::{Error, Result};

/// Smallest pace accepted from [`gamma_from_knn`]; identical points would
/// otherwise yield a zero pace.
pub const GAMMA_FLOOR: f64 = 1e-6;

/// How the pace evolves between epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PacePolicy {
    /// `γ ← (1 + α)·γ` after every epoch.
    Multiplicative { alpha: f64 },
    /// `γ` recomputed from the `k`-th nearest-neighbour radius every epoch.
    Knn { k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfPacedState {
    pub gamma: f64,
    pub alpha: f64,
    /// Pair weights of the most recent batch; the diagonal is unused.
    pub weights: Tensor2,
    pub epoch: usize,
}

impl SelfPacedState {
    pub fn new(gamma: f64, alpha: f64) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::NonPositiveGamma(gamma));
        }
        if !(alpha >= 0.0) {
            return Err(Error::BadConfig(format!("alpha must be >= 0, got {alpha}")));
        }
        Ok(Self {
            gamma,
            alpha,
            weights: Tensor2::zeros(0, 0),
            epoch: 0,
        })
    }
}

/// `R_γ(w) = −γ·w`.
pub fn regularizer(w: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::NonPositiveGamma(gamma));
    }
    Ok(-gamma * w)
}

/// Minimiser of `w·l + R_γ(w)` over `[0, 1]`: `max(1 − l/γ, 0)`.
pub fn optimal_weight(pair_loss: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::NonPositiveGamma(gamma));
    }
    if !(pair_loss >= 0.0) {
        return Err(Error::NegativePairLoss(pair_loss));
    }
    Ok((1.0 - pair_loss / gamma).max(0.0))
}

/// 1 when both source labels agree, else 0.
pub fn source_weights(label_i: Option<usize>, label_j: Option<usize>) -> Result<f64> {
    match (label_i, label_j) {
        (Some(a), Some(b)) => Ok(if a == b { 1.0 } else { 0.0 }),
        (None, _) | (_, None) => Err(Error::UnknownLabel("source pair without identity".into())),
    }
}

/// Pairwise [`source_weights`] over a labelled batch, zero on the diagonal.
pub fn source_weight_matrix(labels: &[Option<usize>]) -> Result<Tensor2> {
    let n = labels.len();
    let mut w = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                w[(i, j)] = source_weights(labels[i], labels[j])?;
            }
        }
    }
    Ok(w)
}

/// Largest distance from any sample to its `k`-th nearest neighbour, using
/// Euclidean distance between ℓ2-normalised rows. A zero radius is floored at
/// [`GAMMA_FLOOR`] with a warning.
pub fn gamma_from_knn<V: AsRef<[f64]>>(reps: &[V], k: usize) -> Result<f64> {
    let normalized = reps
        .iter()
        .map(|r| l2_normalize(r.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let radius = kth_neighbour_radius(&normalized, k)?;
    if radius <= 0.0 {
        log::warn!("all samples coincide; flooring the self-paced pace at {GAMMA_FLOOR}");
        return Ok(GAMMA_FLOOR);
    }
    Ok(radius)
}

/// `max_i dist(i, kNN_k(i))` under plain Euclidean distance.
pub fn kth_neighbour_radius<V: AsRef<[f64]>>(points: &[V], k: usize) -> Result<f64> {
    let n = points.len();
    if k == 0 || n <= k {
        return Err(Error::TooFewSamples { needed: k, got: n });
    }
    let mut radius = 0.0f64;
    for i in 0..n {
        let mut d: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let diff: Vec<f64> = points[i]
                    .as_ref()
                    .iter()
                    .zip(points[j].as_ref())
                    .map(|(a, b)| a - b)
                    .collect();
                norm(&diff)
            })
            .collect();
        d.sort_by(f64::total_cmp);
        radius = radius.max(d[k - 1]);
    }
    Ok(radius)
}

/// `γ ← (1 + α)·γ`.
pub fn gamma_step(state: &mut SelfPacedState) -> f64 {
    state.gamma *= 1.0 + state.alpha;
    state.epoch += 1;
    state.gamma
}
