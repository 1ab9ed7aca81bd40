use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Compares analytic gradients against central finite differences.
///
/// `loss_fn` receives the parameter set and returns the loss together with
/// one gradient per parameter. Returns the largest relative error
/// `|analytic − fd| / max(|analytic|, |fd|, 1e-8)` over every entry.
pub fn grad_check<F>(params: &[Tensor2], eps: f64, mut loss_fn: F) -> Result<f64>
where
    F: FnMut(&[Tensor2]) -> Result<(f64, Vec<Tensor2>)>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::BadConfig(format!(
            "grad_check eps {eps} outside (0, 1e-2]"
        )));
    }
    let (base, analytic) = loss_fn(params)?;
    if !base.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "grad_check base".into(),
        });
    }
    if analytic.len() != params.len() {
        return Err(Error::shape("grad_check", params.len(), analytic.len()));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for (p, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[p].shape() {
            return Err(Error::shape(
                "grad_check",
                format!("{:?}", params[p].shape()),
                format!("{:?}", grad.shape()),
            ));
        }
        for k in 0..params[p].data().len() {
            let orig = params[p].data()[k];
            probe[p].data_mut()[k] = orig + eps;
            let plus = loss_fn(&probe)?.0;
            probe[p].data_mut()[k] = orig - eps;
            let minus = loss_fn(&probe)?.0;
            probe[p].data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: "grad_check probe".into(),
                });
            }
            let fd = (plus - minus) / (2.0 * eps);
            let a = grad.data()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
