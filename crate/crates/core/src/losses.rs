//! Training objectives: identity cross-entropy, the two camera losses, the
//! pairwise contrastive term and its self-paced weighted sum, and the
//! weighted total.
//!
//! Each objective exists as a plain value function and as a tape
//! [`Primitive`] with an analytic backward rule. The primitives call the same
//! value kernels, so the two paths cannot drift apart.

use crate::diffcore::{ksum, log_softmax, log_sum_exp, Primitive, Tensor2};
use crate::error::{Error, Result};
use crate::model::{CameraClassifier, IdentityClassifier};

/// Weights of the three loss terms in the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            delta1: 1.0,
            delta2: 0.2,
            delta3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("delta3", self.delta3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::BadConfig(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The three loss values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub cam: f64,
    pub contr: f64,
}

/// `δ1·ce + δ2·cam + δ3·contr`.
pub fn total_loss(parts: LossParts, weights: LossWeights) -> Result<f64> {
    for (term, v) in [("ce", parts.ce), ("cam", parts.cam), ("contr", parts.contr)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term: term.into() });
        }
    }
    Ok(weights.delta1 * parts.ce + weights.delta2 * parts.cam + weights.delta3 * parts.contr)
}

/// Tracklet representations of a mixed batch. Source rows carry an identity
/// (0-based class index), target rows a camera (0-based).
#[derive(Debug, Clone)]
pub struct BatchView {
    pub reps: Tensor2,
    pub identities: Vec<Option<usize>>,
    pub cameras: Vec<Option<usize>>,
}

impl BatchView {
    pub fn source_rows(&self) -> Vec<(usize, usize)> {
        self.identities
            .iter()
            .enumerate()
            .filter_map(|(i, y)| y.map(|y| (i, y)))
            .collect()
    }

    pub fn target_rows(&self) -> Vec<(usize, usize)> {
        self.cameras
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|c| (i, c)))
            .collect()
    }

    fn select(&self, rows: &[(usize, usize)]) -> Tensor2 {
        Tensor2::from_fn(rows.len(), self.reps.cols(), |i, j| {
            self.reps[(rows[i].0, j)]
        })
    }
}

fn check_labels(labels: &[usize], classes: usize, rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape("labels", rows, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::UnknownLabel(format!("class {bad} of {classes}")));
    }
    Ok(())
}

/// Mean negative log-softmax probability of the labelled class per row.
pub fn softmax_ce(logits: &Tensor2, labels: &[usize]) -> Result<f64> {
    check_labels(labels, logits.cols(), logits.rows())?;
    if logits.rows() == 0 {
        return Err(Error::EmptyInput("softmax_ce"));
    }
    let mut terms = Vec::with_capacity(labels.len());
    for (row, &y) in logits.row_iter().zip(labels) {
        terms.push(-log_softmax(row)?[y]);
    }
    Ok(ksum(terms) / labels.len() as f64)
}

/// Camera confusion objective on raw scores `c_{j,i}`:
/// `(1/N²)·[Σ_i log softmax(c_i)_{y_i}]·[Σ_i log softmax(1 − c_i)_{y_i}]`.
pub fn confusion(scores: &Tensor2, labels: &[usize]) -> Result<f64> {
    let (a, b) = confusion_brackets(scores, labels)?;
    let n = labels.len() as f64;
    Ok(a * b / (n * n))
}

/// The two bracketed sums of [`confusion`].
pub fn confusion_brackets(scores: &Tensor2, labels: &[usize]) -> Result<(f64, f64)> {
    check_labels(labels, scores.cols(), scores.rows())?;
    if scores.rows() == 0 {
        return Err(Error::EmptyInput("confusion"));
    }
    let mut a = Vec::with_capacity(labels.len());
    let mut b = Vec::with_capacity(labels.len());
    for (row, &y) in scores.row_iter().zip(labels) {
        a.push(log_softmax(row)?[y]);
        let flipped: Vec<f64> = row.iter().map(|c| 1.0 - c).collect();
        b.push(log_softmax(&flipped)?[y]);
    }
    Ok((ksum(a), ksum(b)))
}

pub fn identity_ce(batch: &BatchView, cls: &IdentityClassifier) -> Result<f64> {
    let rows = batch.source_rows();
    if rows.is_empty() {
        return Err(Error::NoSourceRows);
    }
    let logits = cls.logits(&batch.select(&rows))?;
    let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
    softmax_ce(&logits, &labels)
}

pub fn camera_ce(batch: &BatchView, cam: &CameraClassifier) -> Result<f64> {
    let rows = batch.target_rows();
    if rows.is_empty() {
        return Err(Error::NoTargetRows);
    }
    let scores = cam.scores(&batch.select(&rows))?;
    let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
    softmax_ce(&scores, &labels)
}

pub fn camera_confusion(batch: &BatchView, cam: &CameraClassifier) -> Result<f64> {
    let rows = batch.target_rows();
    if rows.is_empty() {
        return Err(Error::NoTargetRows);
    }
    let scores = cam.scores(&batch.select(&rows))?;
    let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
    confusion(&scores, &labels)
}

/// Cross-entropy head for the tape.
#[derive(Debug, Clone)]
pub struct SoftmaxCe {
    pub labels: Vec<usize>,
}

impl Primitive for SoftmaxCe {
    fn name(&self) -> &'static str {
        "softmax_ce"
    }

    fn forward(&self, inputs: &[&Tensor2]) -> Result<Tensor2> {
        Ok(Tensor2::scalar(softmax_ce(inputs[0], &self.labels)?))
    }

    fn backward(&self, inputs: &[&Tensor2], _: &Tensor2, g: &Tensor2) -> Vec<Option<Tensor2>> {
        let logits = inputs[0];
        let scale = g.item() / self.labels.len() as f64;
        let mut out = Tensor2::zeros(logits.rows(), logits.cols());
        for (i, &y) in self.labels.iter().enumerate() {
            let lp = log_softmax(logits.row(i)).expect("validated in forward");
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                let onehot = if j == y { 1.0 } else { 0.0 };
                *v = scale * (lp[j].exp() - onehot);
            }
        }
        vec![Some(out)]
    }
}

/// Camera confusion head for the tape.
#[derive(Debug, Clone)]
pub struct Confusion {
    pub labels: Vec<usize>,
}

impl Primitive for Confusion {
    fn name(&self) -> &'static str {
        "camera_confusion"
    }

    fn forward(&self, inputs: &[&Tensor2]) -> Result<Tensor2> {
        Ok(Tensor2::scalar(confusion(inputs[0], &self.labels)?))
    }

    fn backward(&self, inputs: &[&Tensor2], _: &Tensor2, g: &Tensor2) -> Vec<Option<Tensor2>> {
        let scores = inputs[0];
        let (a, b) = confusion_brackets(scores, &self.labels).expect("validated in forward");
        let n = self.labels.len() as f64;
        let scale = g.item() / (n * n);
        let mut out = Tensor2::zeros(scores.rows(), scores.cols());
        for (i, &y) in self.labels.iter().enumerate() {
            let row = scores.row(i);
            let p = log_softmax(row).expect("validated in forward");
            let flipped: Vec<f64> = row.iter().map(|c| 1.0 - c).collect();
            let q = log_softmax(&flipped).expect("validated in forward");
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                let onehot = if j == y { 1.0 } else { 0.0 };
                // d(a)/dc = onehot − p, d(b)/dc = q − onehot
                *v = scale * (b * (onehot - p[j].exp()) + a * (q[j].exp() - onehot));
            }
        }
        vec![Some(out)]
    }
}

/// Row-major `rows × cols` mask with `false` on the diagonal.
pub fn off_diagonal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k / n != k % n).collect()
}

/// Pair losses `l_ij = −log(exp(s_ij/τ) / Σ_{j' valid} exp(s_ij'/τ))` for a
/// similarity matrix. Masked-out entries are `+∞`.
pub fn pair_losses(sim: &Tensor2, mask: &[bool], temperature: f64) -> Result<Tensor2> {
    let (rows, cols) = sim.shape();
    if mask.len() != rows * cols {
        return Err(Error::shape("pair_losses mask", rows * cols, mask.len()));
    }
    let mut out = Tensor2::from_fn(rows, cols, |_, _| f64::INFINITY);
    for i in 0..rows {
        let valid: Vec<usize> = (0..cols).filter(|&j| mask[i * cols + j]).collect();
        let scaled: Vec<f64> = valid.iter().map(|&j| sim[(i, j)] / temperature).collect();
        let lse = log_sum_exp(&scaled);
        for (&j, s) in valid.iter().zip(&scaled) {
            out[(i, j)] = lse - s;
        }
    }
    Ok(out)
}

/// Pair loss between rows `i` and `j` of a set of unit-norm representations,
/// contrasted against every other row of the set.
pub fn pair_loss(i: usize, j: usize, reps: &Tensor2) -> Result<f64> {
    let n = reps.rows();
    for idx in [i, j] {
        if idx >= n {
            return Err(Error::IndexOutOfRange { index: idx, len: n });
        }
    }
    if i == j {
        return Err(Error::SelfPair(i));
    }
    let sim = reps.matmul(&reps.transpose())?;
    Ok(pair_losses(&sim, &off_diagonal_mask(n), 1.0)?[(i, j)])
}

/// Weighted contrastive objective over a query × key similarity matrix:
/// `(1/N) Σ_i Σ_{j valid} (w_ij·l_ij − γ·w_ij)`, with `N` the number of
/// queries. Without `gamma` the regulariser is dropped; `row_gammas`, when
/// set, gives each query row its own pace (0 drops the row's regulariser).
#[derive(Debug, Clone)]
pub struct WeightedContrastive {
    pub weights: Tensor2,
    pub mask: Vec<bool>,
    pub gamma: Option<f64>,
    pub row_gammas: Option<Vec<f64>>,
    pub temperature: f64,
}

impl WeightedContrastive {
    pub fn new(weights: Tensor2, mask: Vec<bool>, gamma: Option<f64>) -> Result<Self> {
        if let Some(&w) = weights.data().iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::WeightOutOfRange(w));
        }
        if let Some(g) = gamma {
            if !(g > 0.0) {
                return Err(Error::NonPositiveGamma(g));
            }
        }
        if mask.len() != weights.data().len() {
            return Err(Error::shape(
                "contrastive mask",
                weights.data().len(),
                mask.len(),
            ));
        }
        Ok(Self {
            weights,
            mask,
            gamma,
            row_gammas: None,
            temperature: 1.0,
        })
    }

    pub fn with_row_gammas(mut self, gammas: Vec<f64>) -> Result<Self> {
        if gammas.len() != self.weights.rows() {
            return Err(Error::shape(
                "contrastive row gammas",
                self.weights.rows(),
                gammas.len(),
            ));
        }
        if let Some(&g) = gammas.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
            return Err(Error::NonPositiveGamma(g));
        }
        self.row_gammas = Some(gammas);
        Ok(self)
    }

    fn gamma_of(&self, row: usize) -> Option<f64> {
        match &self.row_gammas {
            Some(g) => Some(g[row]).filter(|&g| g > 0.0),
            None => self.gamma,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::BadConfig(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn value(&self, sim: &Tensor2) -> Result<f64> {
        if sim.shape() != self.weights.shape() {
            return Err(Error::shape(
                "contrastive",
                format!("{:?}", self.weights.shape()),
                format!("{:?}", sim.shape()),
            ));
        }
        let losses = pair_losses(sim, &self.mask, self.temperature)?;
        let cols = sim.cols();
        let mut terms = Vec::new();
        for (k, (&w, &l)) in self.weights.data().iter().zip(losses.data()).enumerate() {
            if !self.mask[k] || w == 0.0 {
                continue;
            }
            terms.push(w * l);
            if let Some(gamma) = self.gamma_of(k / cols) {
                terms.push(-gamma * w);
            }
        }
        Ok(ksum(terms) / sim.rows() as f64)
    }
}

impl Primitive for WeightedContrastive {
    fn name(&self) -> &'static str {
        "weighted_contrastive"
    }

    fn forward(&self, inputs: &[&Tensor2]) -> Result<Tensor2> {
        Ok(Tensor2::scalar(self.value(inputs[0])?))
    }

    fn backward(&self, inputs: &[&Tensor2], _: &Tensor2, g: &Tensor2) -> Vec<Option<Tensor2>> {
        let sim = inputs[0];
        let (rows, cols) = sim.shape();
        let losses = pair_losses(sim, &self.mask, self.temperature).expect("validated in forward");
        let scale = g.item() / (rows as f64 * self.temperature);
        let mut out = Tensor2::zeros(rows, cols);
        for i in 0..rows {
            let valid: Vec<usize> = (0..cols).filter(|&j| self.mask[i * cols + j]).collect();
            let total_w = ksum(valid.iter().map(|&j| self.weights[(i, j)]));
            for &j in &valid {
                let p = (-losses[(i, j)]).exp();
                out[(i, j)] = scale * (total_w * p - self.weights[(i, j)]);
            }
        }
        vec![Some(out)]
    }
}

/// Self-paced contrastive loss over a set of unit-norm representations,
/// every row contrasted with every other row. With all weights 1 and no
/// `gamma` this is the plain contrastive loss.
pub fn contrastive(reps: &Tensor2, weights: &Tensor2, gamma: Option<f64>) -> Result<f64> {
    let n = reps.rows();
    if weights.shape() != (n, n) {
        return Err(Error::shape(
            "contrastive weights",
            format!("{n}x{n}"),
            format!("{:?}", weights.shape()),
        ));
    }
    let sim = reps.matmul(&reps.transpose())?;
    WeightedContrastive::new(weights.clone(), off_diagonal_mask(n), gamma)?.value(&sim)
}
