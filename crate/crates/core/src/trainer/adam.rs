use crate::diffcore::{GradRecord, Tensor2};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor2,
    v: Tensor2,
    t: i32,
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    hyper: AdamParams,
    moments: Vec<Option<Moments>>,
}

impl AdamState {
    pub fn new(n_params: usize, hyper: AdamParams) -> Self {
        Self {
            hyper,
            moments: vec![None; n_params],
        }
    }
}

/// One Adam update with bias correction and decoupled weight decay.
/// Parameters without a gradient record are left untouched.
pub fn adam_step(
    params: &mut [&mut Tensor2],
    grads: &[GradRecord],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let AdamParams { beta1, beta2, eps } = state.hyper;
    for rec in grads {
        let idx = rec.param.0;
        let p = params.get_mut(idx).ok_or(Error::IndexOutOfRange {
            index: idx,
            len: state.moments.len(),
        })?;
        if p.shape() != rec.grad.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{:?}", p.shape()),
                format!("{:?}", rec.grad.shape()),
            ));
        }
        if !rec.grad.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let mo = state.moments[idx].get_or_insert_with(|| Moments {
            m: Tensor2::zeros(p.rows(), p.cols()),
            v: Tensor2::zeros(p.rows(), p.cols()),
            t: 0,
        });
        mo.t += 1;
        let c1 = 1.0 - beta1.powi(mo.t);
        let c2 = 1.0 - beta2.powi(mo.t);
        let g = rec.grad.data();
        let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *w);
        }
    }
    Ok(())
}
