//! Dense linear algebra, softmax, SGD and the finite-difference oracle.

mod mat;
mod rng;

pub use mat::{dot, norm, Mat};
pub use rng::Rng;

use crate::error::{LabError, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(LabError::shape("softmax of an empty vector"));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(LabError::numeric(format!("softmax input {x}")));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place softmax for hot loops; the caller guarantees finite input.
#[inline]
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// `ln Σ exp(v_i)`, max-shifted. A single element returns itself exactly.
#[inline]
pub fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Central-difference gradient of `f` at `x`, one entry at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &Mat, h: f64) -> Result<Mat>
where
    F: FnMut(&Mat) -> f64,
{
    if !(h > 0.0) {
        return Err(LabError::numeric(format!("finite-difference step {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.data().len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(LabError::numeric(format!(
                "objective not finite around entry {i}: f(+h)={plus}, f(-h)={minus}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `param − lr · grad`.
pub fn sgd_step(param: &Mat, grad: &Mat, lr: f64) -> Result<Mat> {
    if param.shape() != grad.shape() {
        return Err(LabError::shape(format!(
            "sgd_step: parameter {:?} vs gradient {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    if !(lr >= 0.0) {
        return Err(LabError::numeric(format!("negative learning rate {lr}")));
    }
    let mut out = param.clone();
    sgd_update(out.data_mut(), grad.data(), lr);
    out.ensure_finite("sgd_step")?;
    Ok(out)
}

/// In-place SGD on flat buffers.
#[inline]
pub fn sgd_update(param: &mut [f64], grad: &[f64], lr: f64) {
    debug_assert_eq!(param.len(), grad.len());
    for (p, g) in param.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

/// Norm-wise relative error `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`; zero when both
/// vanish. This is the gradient-check metric used throughout the lab.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
