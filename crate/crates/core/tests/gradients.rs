mod common;

use cawcl_core::diffcore::{grad_check, ParamId, Tape, Tensor2};
use cawcl_core::losses::{Confusion, SoftmaxCe};
use cawcl_core::trainer::{adam_step, AdamParams, AdamState};
use common::gates::{self, small_model, EPS, TOLERANCE};

#[test]
fn quadratic_is_checked_almost_exactly() {
    let err = grad_check(&[Tensor2::scalar(3.0)], EPS, |p| {
        let x = p[0].item();
        Ok((x * x, vec![Tensor2::scalar(2.0 * x)]))
    })
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn every_loss_passes_the_gate_over_twenty_seeds() {
    for (name, worst) in gates::worst_errors(0..20).unwrap() {
        assert!(worst < TOLERANCE, "{name}: {worst:e}");
    }
}

#[test]
fn a_wrong_backward_rule_is_caught() {
    let err = grad_check(&[Tensor2::scalar(3.0)], EPS, |p| {
        let x = p[0].item();
        Ok((x * x, vec![Tensor2::scalar(2.1 * x)]))
    })
    .unwrap();
    assert!(err > 1e-3);
}

#[test]
fn non_finite_probe_is_reported() {
    let err = grad_check(&[Tensor2::scalar(0.0)], EPS, |p| {
        let x = p[0].item();
        Ok((
            if x > 0.0 { f64::NAN } else { x },
            vec![Tensor2::scalar(1.0)],
        ))
    });
    assert!(matches!(err, Err(cawcl_core::Error::NonFiniteLoss { .. })));
}

/// Gradients of every parameter for the same camera loss built with and
/// without the reversal layer.
fn dual_graph(seed: u64, scale: f64, confusion: bool) -> (Vec<Tensor2>, Vec<Tensor2>, usize) {
    let mut model = small_model(seed);
    model.camera.grl_scale = scale;
    let mut r = common::rng(seed);
    let frames = common::uniform_tensor(&mut r, 8, 5, 1.0);
    let labels = vec![0, 1, 1, 0];
    let run = |grl: bool| {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.constant(frames.clone());
        let reps = bound.represent(&mut tape, x, 2).unwrap();
        let scores = if grl {
            bound.camera_scores(&mut tape, reps).unwrap()
        } else {
            bound.camera_scores_no_grl(&mut tape, reps).unwrap()
        };
        let loss = if confusion {
            tape.apply(
                Confusion {
                    labels: labels.clone(),
                },
                &[scores],
            )
            .unwrap()
        } else {
            tape.apply(
                SoftmaxCe {
                    labels: labels.clone(),
                },
                &[scores],
            )
            .unwrap()
        };
        let mut out: Vec<Tensor2> = model
            .params()
            .iter()
            .map(|p| Tensor2::zeros(p.rows(), p.cols()))
            .collect();
        for rec in tape.backward(loss).unwrap().records() {
            out[rec.param.0] = rec.grad;
        }
        out
    };
    (run(true), run(false), 2 * model.encoder.layers.len())
}

#[test]
fn reversal_negates_every_encoder_gradient_and_spares_the_camera_head() {
    for seed in 0..5 {
        for (scale, confusion) in [(1.0, true), (1.0, false), (0.5, true)] {
            let (with, without, n_enc) = dual_graph(seed, scale, confusion);
            for (p, (a, b)) in with.iter().zip(&without).enumerate() {
                let expect = if p < n_enc { -scale } else { 1.0 };
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - expect * y).abs() <= 1e-12, "param {p}: {x} vs {y}");
                }
            }
        }
    }
}

#[test]
fn camera_only_step_leaves_identity_head_untouched() {
    let mut model = small_model(3);
    let before = model.clone();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(common::uniform_tensor(&mut common::rng(1), 8, 5, 1.0));
    let reps = bound.represent(&mut tape, x, 2).unwrap();
    let scores = bound.camera_scores(&mut tape, reps).unwrap();
    let loss = tape
        .apply(
            Confusion {
                labels: vec![0, 1, 0, 1],
            },
            &[scores],
        )
        .unwrap();
    let records = tape.backward(loss).unwrap().records();
    let ids = model.identity_param_ids();
    assert!(records.iter().all(|r| !ids.contains(&r.param)));
    let n = model.params().len();
    let mut state = AdamState::new(n, AdamParams::default());
    adam_step(&mut model.params_mut(), &records, &mut state, 0.1, 0.01).unwrap();
    assert_eq!(model.identity, before.identity);
    assert_ne!(model.camera, before.camera);
}

#[test]
fn identity_only_step_leaves_camera_head_untouched() {
    let mut model = small_model(4);
    let before = model.clone();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(common::uniform_tensor(&mut common::rng(2), 8, 5, 1.0));
    let reps = bound.represent(&mut tape, x, 2).unwrap();
    let logits = bound.identity_logits(&mut tape, reps).unwrap();
    let loss = tape
        .apply(
            SoftmaxCe {
                labels: vec![0, 1, 2, 1],
            },
            &[logits],
        )
        .unwrap();
    let records = tape.backward(loss).unwrap().records();
    let ids = model.camera_param_ids();
    assert!(records.iter().all(|r| !ids.contains(&r.param)));
    let n = model.params().len();
    let mut state = AdamState::new(n, AdamParams::default());
    adam_step(&mut model.params_mut(), &records, &mut state, 0.1, 0.01).unwrap();
    assert_eq!(model.camera, before.camera);
    assert_ne!(model.identity, before.identity);
}

#[test]
fn detached_branch_contributes_no_gradient() {
    let keys = Tensor2::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let query = Tensor2::from_rows(&[[0.3, 0.4]]).unwrap();
    let grad_of_query = |with_detached: bool| {
        let mut tape = Tape::new();
        let k = tape.constant(keys.clone());
        let q = tape.param(ParamId(0), query.clone());
        let s = tape.matmul(q, k).unwrap();
        let mut loss = tape.apply(SoftmaxCe { labels: vec![0] }, &[s]).unwrap();
        if with_detached {
            let d = tape.detach(q).unwrap();
            let s2 = tape.matmul(d, k).unwrap();
            let b = tape.apply(SoftmaxCe { labels: vec![1] }, &[s2]).unwrap();
            loss = tape.weighted_sum(&[(loss, 1.0), (b, 1.0)]).unwrap();
        }
        let grads = tape.backward(loss).unwrap();
        let records = grads.records();
        assert_eq!(records.len(), 1);
        records[0].grad.clone()
    };
    assert_eq!(grad_of_query(true), grad_of_query(false));
}
