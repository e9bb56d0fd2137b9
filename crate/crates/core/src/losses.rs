//! Segmentation objectives and their exact logit gradients.
//!
//! All losses take a `pixels × classes` logit matrix whose columns follow
//! the head layout: column 0 background, `1..n_old` old classes, the rest
//! the classes of the current step. Reduction is the mean over every pixel
//! of the batch, and returned gradients are `dL/dlogits` of that mean.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{log_sum_exp, Mat};

/// `ln(1e-300)`: floor applied to log-probabilities.
const LOG_FLOOR: f64 = -690.775_527_898_213_7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Mat,
}

/// Weighting of the incremental objective `L_unce + λ·L_unkd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_kd: f64,
    /// Background plus every class of earlier steps.
    pub n_old: usize,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kd >= 0.0) {
            return Err(LabError::config(
                "train.lambda_kd",
                format!("must be >= 0, got {}", self.lambda_kd),
            ));
        }
        if self.n_old == 0 {
            return Err(LabError::config(
                "train",
                "n_old counts the background and must be >= 1",
            ));
        }
        Ok(())
    }
}

fn softmax_row(z: &[f64], lse: f64, out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - lse).exp();
    }
}

fn check_labels(logits: &Mat, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(LabError::shape(format!(
            "{} labels for {} pixels",
            labels.len(),
            logits.rows()
        )));
    }
    if logits.rows() == 0 {
        return Err(LabError::data("loss over zero pixels"));
    }
    if let Some(l) = labels.iter().find(|l| **l >= logits.cols()) {
        return Err(LabError::data(format!("label {l} outside {} classes", logits.cols())));
    }
    Ok(())
}

/// Plain cross entropy, `mean(−log softmax(z)[y])`.
pub fn ce(logits: &Mat, labels: &[usize]) -> Result<LossOutput> {
    check_labels(logits, labels)?;
    let n = logits.rows();
    let mut grad = Mat::zeros(n, logits.cols());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.row(i);
        let lse = log_sum_exp(z.iter().copied());
        let log_q = z[y] - lse;
        total += -log_q.max(LOG_FLOOR);
        let g = grad.row_mut(i);
        softmax_row(z, lse, g);
        g[y] -= 1.0;
    }
    finish(total, grad, n)
}

/// Unbiased cross entropy: background absorbs the probability of every old
/// class, `q̃(0) = Σ_{c < n_old} q(c)`. Labels must be background or a class
/// of the current step (`>= n_old`).
pub fn unbiased_ce(logits: &Mat, labels: &[usize], n_old: usize) -> Result<LossOutput> {
    check_labels(logits, labels)?;
    if n_old == 0 || n_old > logits.cols() {
        return Err(LabError::shape(format!("n_old={n_old} with {} classes", logits.cols())));
    }
    if let Some(l) = labels.iter().find(|l| **l != 0 && **l < n_old) {
        return Err(LabError::data(format!(
            "label {l} belongs to an old class; step labels must be background-shifted"
        )));
    }
    let n = logits.rows();
    let mut grad = Mat::zeros(n, logits.cols());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.row(i);
        let lse = log_sum_exp(z.iter().copied());
        let g = grad.row_mut(i);
        softmax_row(z, lse, g);
        if y == 0 {
            let lse_old = log_sum_exp(z[..n_old].iter().copied());
            let log_q = lse_old - lse;
            total += -log_q.max(LOG_FLOOR);
            for c in 0..n_old {
                g[c] -= (z[c] - lse_old).exp();
            }
        } else {
            let log_q = z[y] - lse;
            total += -log_q.max(LOG_FLOOR);
            g[y] -= 1.0;
        }
    }
    finish(total, grad, n)
}

/// Unbiased distillation towards old-model probabilities over the `n_old`
/// old classes. The current model's new classes fold into background:
/// `q̂(0) = q(0) + Σ_{c >= n_old} q(c)`, `q̂(c) = q(c)` otherwise.
pub fn unbiased_kd(logits: &Mat, old_probs: &Mat) -> Result<LossOutput> {
    let n = logits.rows();
    let classes = logits.cols();
    let n_old = old_probs.cols();
    if old_probs.rows() != n || n_old == 0 || n_old > classes {
        return Err(LabError::shape(format!(
            "old probabilities {:?} do not fit current logits {:?}",
            old_probs.shape(),
            logits.shape()
        )));
    }
    if n == 0 {
        return Err(LabError::data("loss over zero pixels"));
    }
    for i in 0..n {
        let row = old_probs.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|p| *p < 0.0) {
            return Err(LabError::data(format!("old probabilities of pixel {i} sum to {sum}")));
        }
    }
    let mut grad = Mat::zeros(n, classes);
    let mut total = 0.0;
    for i in 0..n {
        let z = logits.row(i);
        let t = old_probs.row(i);
        let mass: f64 = t.iter().sum();
        let lse = log_sum_exp(z.iter().copied());
        let folded = std::iter::once(z[0]).chain(z[n_old..].iter().copied());
        let lse_bg = log_sum_exp(folded);

        let mut loss = -t[0] * (lse_bg - lse).max(LOG_FLOOR);
        for c in 1..n_old {
            loss -= t[c] * (z[c] - lse).max(LOG_FLOOR);
        }
        total += loss;

        let g = grad.row_mut(i);
        softmax_row(z, lse, g);
        for v in g.iter_mut() {
            *v *= mass;
        }
        g[0] -= t[0] * (z[0] - lse_bg).exp();
        for c in n_old..classes {
            g[c] -= t[0] * (z[c] - lse_bg).exp();
        }
        for c in 1..n_old {
            g[c] -= t[c];
        }
    }
    finish(total, grad, n)
}

/// `L_unce + λ·L_unkd`; distillation is skipped when `λ = 0`.
pub fn incremental_objective(logits: &Mat, labels: &[usize], old_probs: &Mat, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let mut out = unbiased_ce(logits, labels, cfg.n_old)?;
    if cfg.lambda_kd > 0.0 {
        let kd = unbiased_kd(logits, old_probs)?;
        out.loss += cfg.lambda_kd * kd.loss;
        for (g, k) in out.grad.data_mut().iter_mut().zip(kd.grad.data()) {
            *g += cfg.lambda_kd * k;
        }
    }
    Ok(out)
}

/// Row-wise softmax of a logit matrix.
pub fn probabilities(logits: &Mat) -> Mat {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        crate::numerics::softmax_in_place(p.row_mut(i));
    }
    p
}

fn finish(total: f64, mut grad: Mat, n: usize) -> Result<LossOutput> {
    let inv = 1.0 / n as f64;
    for g in grad.data_mut() {
        *g *= inv;
    }
    let loss = total * inv;
    if !loss.is_finite() {
        return Err(LabError::numeric(format!("loss evaluated to {loss}")));
    }
    grad.ensure_finite("loss gradient")?;
    Ok(LossOutput { loss, grad })
}
