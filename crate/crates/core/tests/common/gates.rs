//! Gradient gates: every loss head checked against central differences on
//! small random instances.

use cawcl_core::diffcore::{grad_check, NodeId, ParamId, Tape, Tensor2};
use cawcl_core::losses::{off_diagonal_mask, Confusion, SoftmaxCe, WeightedContrastive};
use cawcl_core::model::{GradReverse, Model, ModelDims};
use cawcl_core::Result;
use rand::Rng;

use super::{rng, uniform_tensor};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

/// Runs `build` on a fresh tape whose leaves are `params`; returns the loss
/// and each leaf's gradient, multiplied by `sign[p]`.
fn eval_graph(
    params: &[Tensor2],
    sign: &[f64],
    build: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Result<(f64, Vec<Tensor2>)> {
    let mut tape = Tape::new();
    let nodes: Vec<NodeId> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(ParamId(i), p.clone()))
        .collect();
    let loss = build(&mut tape, &nodes)?;
    let grads = tape.backward(loss)?;
    let out = nodes
        .iter()
        .zip(params)
        .zip(sign)
        .map(|((&n, p), &s)| {
            grads
                .of(n)
                .map_or_else(|| Tensor2::zeros(p.rows(), p.cols()), |g| g.scale(s))
        })
        .collect();
    Ok((tape.value(loss).item(), out))
}

fn check(
    params: Vec<Tensor2>,
    sign: Vec<f64>,
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Result<f64> {
    grad_check(&params, EPS, |p| eval_graph(p, &sign, &build))
}

struct Instance {
    reps: Tensor2,
    w: Tensor2,
    b: Tensor2,
    labels: Vec<usize>,
}

fn instance(seed: u64, classes: usize) -> Instance {
    let mut r = rng(seed);
    let n = r.random_range(2..=8);
    let f = r.random_range(2..=16);
    Instance {
        reps: uniform_tensor(&mut r, n, f, 1.0),
        w: uniform_tensor(&mut r, f, classes, 1.0),
        b: uniform_tensor(&mut r, 1, classes, 0.5),
        labels: (0..n).map(|_| r.random_range(0..classes)).collect(),
    }
}

fn head(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let z = tape.matmul(x, w)?;
    tape.add_bias(z, b)
}

pub fn identity_ce(seed: u64) -> Result<f64> {
    let Instance { reps, w, b, labels } = instance(seed, 4);
    check(vec![reps, w, b], vec![1.0; 3], move |t, n| {
        let z = head(t, n[0], n[1], n[2])?;
        t.apply(
            SoftmaxCe {
                labels: labels.clone(),
            },
            &[z],
        )
    })
}

/// Camera head behind gradient reversal. The reversed representation
/// gradient is flipped back before comparing with the forward differences.
fn camera_branch(seed: u64, confusion: bool) -> Result<f64> {
    let Instance { reps, w, b, labels } = instance(seed ^ 0xca5e, 2);
    let scale = 1.0;
    check(
        vec![reps, w, b],
        vec![-1.0 / scale, 1.0, 1.0],
        move |t, n| {
            let r = t.apply(GradReverse { scale }, &[n[0]])?;
            let z = head(t, r, n[1], n[2])?;
            if confusion {
                t.apply(
                    Confusion {
                        labels: labels.clone(),
                    },
                    &[z],
                )
            } else {
                t.apply(
                    SoftmaxCe {
                        labels: labels.clone(),
                    },
                    &[z],
                )
            }
        },
    )
}

pub fn camera_ce(seed: u64) -> Result<f64> {
    camera_branch(seed, false)
}

pub fn camera_confusion(seed: u64) -> Result<f64> {
    camera_branch(seed, true)
}

/// Batch-internal contrastive loss over normalised rows, every row against
/// every other row, with unit weights and no regulariser.
pub fn contrastive_plain(seed: u64) -> Result<f64> {
    let mut r = rng(seed ^ 0xc0);
    let n = r.random_range(2..=8);
    let f = r.random_range(2..=16);
    let reps = uniform_tensor(&mut r, n, f, 1.0);
    let mut w = Tensor2::from_fn(n, n, |_, _| 1.0);
    for i in 0..n {
        w[(i, i)] = 0.0;
    }
    check(vec![reps], vec![1.0], move |t, p| {
        let q = t.normalize_rows(p[0])?;
        let qt = t.transpose(q)?;
        let sim = t.matmul(q, qt)?;
        t.apply(
            WeightedContrastive::new(w.clone(), off_diagonal_mask(n), None)?,
            &[sim],
        )
    })
}

/// Self-paced weighted contrastive loss of queries against fixed unit keys,
/// with random weights in [0, 1], a random mask, per-row paces and a
/// temperature.
pub fn contrastive_weighted(seed: u64) -> Result<f64> {
    let mut r = rng(seed ^ 0xc1);
    let n = r.random_range(1..=8);
    let k = r.random_range(2..=8);
    let f = r.random_range(2..=16);
    let reps = uniform_tensor(&mut r, n, f, 1.0);
    let keys = Tensor2::from_fn(k, f, |_, _| r.random_range(-1.0..1.0));
    let keys = Tensor2::from_rows(
        &keys
            .row_iter()
            .map(|row| cawcl_core::diffcore::l2_normalize(row))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let weights = Tensor2::from_fn(n, k, |_, _| r.random_range(0.0..1.0));
    let mut mask: Vec<bool> = (0..n * k).map(|_| r.random_bool(0.8)).collect();
    for i in 0..n {
        mask[i * k] = true;
    }
    let gammas: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
    let temperature = r.random_range(0.5..1.5);
    let loss = WeightedContrastive::new(weights, mask, Some(0.3))?
        .with_row_gammas(gammas)?
        .with_temperature(temperature)?;
    check(vec![reps], vec![1.0], move |t, p| {
        let q = t.normalize_rows(p[0])?;
        let kc = t.constant(keys.transpose());
        let sim = t.matmul(q, kc)?;
        t.apply(loss.clone(), &[sim])
    })
}

pub fn small_model(seed: u64) -> Model {
    let dims = ModelDims {
        d_in: 5,
        d_hidden: 6,
        d_out: 4,
        n_identities: 3,
        n_cameras: 2,
    };
    Model::init(dims, &mut rng(seed)).expect("valid dims")
}

fn with_params(model: &Model, params: &[Tensor2]) -> Model {
    let mut m = model.clone();
    for (dst, src) in m.params_mut().into_iter().zip(params) {
        *dst = src.clone();
    }
    m
}

/// Whole model: encoder, mean pooling, identity head on the first half of
/// the samples and the reversed camera head (confusion) on the rest.
pub fn full_model(seed: u64) -> Result<f64> {
    let model = small_model(seed);
    let mut r = rng(seed ^ 0xf0);
    let fps = 2;
    let frames = uniform_tensor(&mut r, 4 * fps, 5, 1.0);
    let ids: Vec<usize> = (0..2).map(|_| r.random_range(0..3)).collect();
    let cams: Vec<usize> = (0..2).map(|_| r.random_range(0..2)).collect();
    let params: Vec<Tensor2> = model.params().into_iter().cloned().collect();
    grad_check(&params, EPS, |p| {
        let m = with_params(&model, p);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let x = tape.constant(frames.clone());
        let reps = bound.represent(&mut tape, x, fps)?;
        let src = tape.select_rows(reps, vec![0, 1])?;
        let tgt = tape.select_rows(reps, vec![2, 3])?;
        let logits = bound.identity_logits(&mut tape, src)?;
        let ce = tape.apply(
            SoftmaxCe {
                labels: ids.clone(),
            },
            &[logits],
        )?;
        let scores = bound.camera_scores_no_grl(&mut tape, tgt)?;
        let cam = tape.apply(
            Confusion {
                labels: cams.clone(),
            },
            &[scores],
        )?;
        let loss = tape.weighted_sum(&[(ce, 1.0), (cam, 0.2)])?;
        let grads = tape.backward(loss)?;
        let mut out: Vec<Tensor2> = p
            .iter()
            .map(|t| Tensor2::zeros(t.rows(), t.cols()))
            .collect();
        for rec in grads.records() {
            out[rec.param.0] = rec.grad;
        }
        Ok((tape.value(loss).item(), out))
    })
}

pub type Gate = (&'static str, fn(u64) -> Result<f64>);

pub const GATES: &[Gate] = &[
    ("identity_ce", identity_ce),
    ("camera_ce_grl", camera_ce),
    ("camera_confusion_grl", camera_confusion),
    ("contrastive_plain", contrastive_plain),
    ("contrastive_weighted", contrastive_weighted),
    ("full_model", full_model),
];

/// Largest relative error of every gate over `seeds`.
pub fn worst_errors(seeds: std::ops::Range<u64>) -> Result<Vec<(&'static str, f64)>> {
    GATES
        .iter()
        .map(|&(name, gate)| {
            let mut worst = 0.0f64;
            for s in seeds.clone() {
                worst = worst.max(gate(s)?);
            }
            Ok((name, worst))
        })
        .collect()
}
