//! New-classifier generation and pre-tuning.
//!
//! Each new class `c` owns an importance matrix `M_c` (`d × n_old`) and a
//! projection `P_c` (`n_old × 1`); its classifier is `w_c = (M_c ⊙ W_old) P_c`
//! where `W_old` holds every old classifier including background. The
//! background gets its own pair so that `ŵ_0 = (M_0 ⊙ w_0) P_0`.
//!
//! Before pre-tuning, `M_c` and `P_c` are initialised from how the old model
//! scores pixels of the new class: per pixel `H_u = W_old ⊙ p_u` is
//! thresholded at zero and weighted by the old softmax scores, then averaged
//! over the class's pixels. Pre-tuning then learns `M`, `P` (and optional
//! new-class biases) on the step's data with everything else frozen.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::losses::unbiased_ce;
use crate::model::checkpoint::{decode_f64s, encode, split_header};
use crate::model::{Head, SegModel};
use crate::numerics::{softmax, softmax_in_place, Mat, Rng};
use crate::synthdata::StepData;

/// Learned transformation of one new class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTransform {
    pub importance: Mat,
    pub projection: Mat,
    pub bias: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformSet {
    pub classes: Vec<ClassTransform>,
    pub bg_importance: Mat,
    pub bg_projection: f64,
}

/// Which of the two matrices pre-tuning may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Components {
    Both,
    /// `P` fixed to `1/n_old`: new classifiers average the weighted old ones.
    ImportanceOnly,
    /// `M` fixed to ones: new classifiers are linear combinations of old ones.
    ProjectionOnly,
}

impl Components {
    pub fn learns_importance(self) -> bool {
        !matches!(self, Components::ProjectionOnly)
    }

    pub fn learns_projection(self) -> bool {
        !matches!(self, Components::ImportanceOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Align new columns in every pre-tuning step and once more at the end.
    pub weight_align: bool,
}

impl Default for PretuneConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1.0,
            batch_size: 8,
            weight_align: true,
        }
    }
}

impl PretuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(LabError::config("pretune.epochs", "must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(LabError::config("pretune.lr", format!("must be >= 0, got {}", self.lr)));
        }
        if self.batch_size < 1 {
            return Err(LabError::config("pretune.batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

impl TransformSet {
    pub fn dim(&self) -> usize {
        self.bg_importance.rows()
    }

    pub fn n_new(&self) -> usize {
        self.classes.len()
    }

    /// Number of old columns the transforms read, or `None` with no classes.
    pub fn n_old(&self) -> Option<usize> {
        self.classes.first().map(|c| c.importance.cols())
    }

    pub fn has_biases(&self) -> bool {
        self.classes.iter().any(|c| c.bias.is_some())
    }

    /// Checks every matrix against an old head of `d × n_old`.
    pub fn validate_for(&self, old_head: &Head) -> Result<()> {
        let (d, n_old) = (old_head.dim(), old_head.num_classes());
        if self.bg_importance.shape() != (d, 1) {
            return Err(LabError::shape(format!(
                "background importance is {:?}, expected ({d}, 1)",
                self.bg_importance.shape()
            )));
        }
        let biased = old_head.biases.is_some();
        for (i, c) in self.classes.iter().enumerate() {
            if c.importance.shape() != (d, n_old) || c.projection.shape() != (n_old, 1) {
                return Err(LabError::shape(format!(
                    "transform of new class {i}: M {:?}, P {:?}; old head is {d}x{n_old}",
                    c.importance.shape(),
                    c.projection.shape()
                )));
            }
            if c.bias.is_some() != biased {
                return Err(LabError::shape(format!(
                    "new class {i} bias presence does not match the head's bias mode"
                )));
            }
        }
        let finite = self.params_flat().iter().all(|v| v.is_finite());
        if !finite {
            return Err(LabError::numeric("transform holds non-finite values"));
        }
        Ok(())
    }

    /// Per class: `M` row-major, `P`, bias; then `M_0`, `P_0`.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for c in &self.classes {
            out.extend_from_slice(c.importance.data());
            out.extend_from_slice(c.projection.data());
            out.extend(c.bias);
        }
        out.extend_from_slice(self.bg_importance.data());
        out.push(self.bg_projection);
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(LabError::shape(format!(
                "{} values for a transform of {} scalars",
                values.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &values[at..at + n];
            at += n;
            s
        };
        for c in &mut self.classes {
            let n = c.importance.data().len();
            c.importance.data_mut().copy_from_slice(take(n));
            let n = c.projection.data().len();
            c.projection.data_mut().copy_from_slice(take(n));
            if let Some(b) = c.bias.as_mut() {
                *b = take(1)[0];
            }
        }
        let n = self.bg_importance.data().len();
        self.bg_importance.data_mut().copy_from_slice(take(n));
        self.bg_projection = take(1)[0];
        Ok(())
    }

    /// Allocated transform scalars, counted directly.
    pub fn param_count(&self) -> usize {
        let per_class: usize = self
            .classes
            .iter()
            .map(|c| c.importance.data().len() + c.projection.data().len() + usize::from(c.bias.is_some()))
            .sum();
        per_class + self.bg_importance.data().len() + 1
    }

    fn zeros_like(&self) -> Self {
        Self {
            classes: self
                .classes
                .iter()
                .map(|c| ClassTransform {
                    importance: Mat::zeros(c.importance.rows(), c.importance.cols()),
                    projection: Mat::zeros(c.projection.rows(), 1),
                    bias: c.bias.map(|_| 0.0),
                })
                .collect(),
            bg_importance: Mat::zeros(self.bg_importance.rows(), 1),
            bg_projection: 0.0,
        }
    }

    /// SGD on the learnable parts; fixed matrices are left untouched.
    fn apply_grad(&mut self, grad: &TransformSet, lr: f64, components: Components) {
        for (c, g) in self.classes.iter_mut().zip(&grad.classes) {
            if components.learns_importance() {
                crate::numerics::sgd_update(c.importance.data_mut(), g.importance.data(), lr);
            }
            if components.learns_projection() {
                crate::numerics::sgd_update(c.projection.data_mut(), g.projection.data(), lr);
            }
            if let (Some(b), Some(gb)) = (c.bias.as_mut(), g.bias) {
                *b -= lr * gb;
            }
        }
        crate::numerics::sgd_update(self.bg_importance.data_mut(), grad.bg_importance.data(), lr);
        self.bg_projection -= lr * grad.bg_projection;
    }
}

/// `H_u = W_old ⊙ p_u'` and `s_u = softmax(colsum(H_u))`.
pub fn similarity_scores(pixel: &[f64], w_old: &Mat) -> Result<(Mat, Vec<f64>)> {
    if pixel.len() != w_old.rows() {
        return Err(LabError::shape(format!(
            "pixel embedding of length {} against old classifiers with {} channels",
            pixel.len(),
            w_old.rows()
        )));
    }
    let h = w_old.hadamard(&Mat::col_vector(pixel)?)?;
    let s = softmax(&h.col_sums())?;
    Ok((h, s))
}

/// 1 where `H > 0`, else 0 (zero maps to 0).
pub fn binary_mask(h: &Mat) -> Mat {
    Mat::from_fn(h.rows(), h.cols(), |r, c| if h.get(r, c) > 0.0 { 1.0 } else { 0.0 })
}

/// Streaming accumulator of `Σ_u H_u^mask ⊙ s_u'` per new class.
///
/// `W_old ⊙ p_u > 0` is tested entry by entry and the old softmax is taken
/// of `W_oldᵀ p_u`, which equals the column sums of `H_u`.
#[derive(Debug, Clone)]
pub struct SimilarityAccumulator {
    w_old: Mat,
    first_new: usize,
    sums: Vec<Mat>,
    counts: Vec<usize>,
}

impl SimilarityAccumulator {
    /// Accumulates for labels `first_new .. first_new + n_new`.
    pub fn new(w_old: Mat, first_new: usize, n_new: usize) -> Self {
        let (d, n_old) = w_old.shape();
        Self {
            w_old,
            first_new,
            sums: vec![Mat::zeros(d, n_old); n_new],
            counts: vec![0; n_new],
        }
    }

    pub fn add(&mut self, features: &Mat, labels: &[usize]) -> Result<()> {
        let (d, n_old) = self.w_old.shape();
        if features.cols() != d || features.rows() != labels.len() {
            return Err(LabError::shape(format!(
                "features {:?} with {} labels against {d} channels",
                features.shape(),
                labels.len()
            )));
        }
        let mut scores = vec![0.0; n_old];
        for (u, &label) in labels.iter().enumerate() {
            let Some(slot) = label.checked_sub(self.first_new).filter(|s| *s < self.sums.len()) else {
                continue;
            };
            let p = features.row(u);
            scores.iter_mut().for_each(|s| *s = 0.0);
            for (j, pj) in p.iter().enumerate() {
                for (s, w) in scores.iter_mut().zip(self.w_old.row(j)) {
                    *s += w * pj;
                }
            }
            softmax_in_place(&mut scores);
            let acc = &mut self.sums[slot];
            for (j, pj) in p.iter().enumerate() {
                let w_row = self.w_old.row(j);
                let acc_row = acc.row_mut(j);
                for k in 0..n_old {
                    if w_row[k] * pj > 0.0 {
                        acc_row[k] += scores[k];
                    }
                }
            }
            self.counts[slot] += 1;
        }
        Ok(())
    }

    /// Averaged importance matrices; fails for a class without pixels.
    pub fn finish(self) -> Result<Vec<Mat>> {
        self.sums
            .into_iter()
            .zip(self.counts)
            .enumerate()
            .map(|(i, (sum, n))| {
                if n == 0 {
                    Err(LabError::data(format!(
                        "new class {} has no pixels in the training split",
                        self.first_new + i
                    )))
                } else {
                    Ok(sum.scale(1.0 / n as f64))
                }
            })
            .collect()
    }
}

/// Importance initialisation from the embeddings (rows) of one class.
pub fn init_importance(pixels: &Mat, w_old: &Mat) -> Result<Mat> {
    if pixels.rows() == 0 {
        return Err(LabError::data("no pixels of the new class to initialise from"));
    }
    let mut acc = SimilarityAccumulator::new(w_old.clone(), 1, 1);
    acc.add(pixels, &vec![1; pixels.rows()])?;
    Ok(acc.finish()?.remove(0))
}

/// `P = softmax(colsum(M))ᵀ`.
pub fn init_projection(importance: &Mat) -> Result<Mat> {
    Mat::col_vector(&softmax(&importance.col_sums())?)
}

/// `M_0 = 1`, `P_0 = 1`: the generated background starts equal to `w_0`.
pub fn init_background_transform(dim: usize) -> (Mat, f64) {
    (Mat::ones(dim, 1), 1.0)
}

/// `w_c = (M_c ⊙ W_old) P_c`.
pub fn generate_new_weight(importance: &Mat, projection: &Mat, w_old: &Mat) -> Result<Vec<f64>> {
    if importance.shape() != w_old.shape() || projection.shape() != (w_old.cols(), 1) {
        return Err(LabError::shape(format!(
            "generate: M {:?}, P {:?}, W_old {:?}",
            importance.shape(),
            projection.shape(),
            w_old.shape()
        )));
    }
    Ok(importance.hadamard(w_old)?.matmul(projection)?.into_data())
}

/// `ŵ_0 = (M_0 ⊙ w_0) P_0`.
pub fn generate_bg_weight(bg_importance: &Mat, bg_projection: f64, w0: &[f64]) -> Result<Vec<f64>> {
    if bg_importance.shape() != (w0.len(), 1) {
        return Err(LabError::shape(format!(
            "background importance {:?} for a classifier of length {}",
            bg_importance.shape(),
            w0.len()
        )));
    }
    let out: Vec<f64> = bg_importance
        .data()
        .iter()
        .zip(w0)
        .map(|(m, w)| m * w * bg_projection)
        .collect();
    Mat::col_vector(&out)?;
    Ok(out)
}

/// New-class columns generated from `old_head`, in class-id order.
pub fn generate_new_columns(old_head: &Head, transform: &TransformSet) -> Result<Mat> {
    let mut cols = Mat::zeros(old_head.dim(), transform.n_new());
    for (j, c) in transform.classes.iter().enumerate() {
        let w = generate_new_weight(&c.importance, &c.projection, &old_head.weights)?;
        cols.set_column(j, &w)?;
    }
    Ok(cols)
}

/// Pre-tuning head: `[ŵ_0, w_1 … w_{n_old−1}, w_{n_old} … w_{n_old+|C_t|−1}]`.
///
/// In bias mode the background and old biases are copied and new-class
/// biases come from the transform.
pub fn assemble_pretune_head(old_head: &Head, transform: &TransformSet) -> Result<Head> {
    transform.validate_for(old_head)?;
    let mut old = old_head.weights.clone();
    let w0 = old_head.weights.column(0);
    let bg = generate_bg_weight(&transform.bg_importance, transform.bg_projection, &w0)?;
    old.set_column(0, &bg)?;
    let frozen = Head::new(old, old_head.biases.clone())?;
    let new_cols = generate_new_columns(old_head, transform)?;
    let new_biases: Option<Vec<f64>> = old_head
        .biases
        .as_ref()
        .map(|_| transform.classes.iter().map(|c| c.bias.unwrap_or(0.0)).collect());
    frozen.grow(&new_cols, new_biases.as_deref())
}

/// `L_unce` of the pre-tuning head on `features` and its gradient with
/// respect to every transform scalar.
///
/// With `align`, new columns are weight-aligned inside the forward pass and
/// the gradient flows through the rescaling.
pub fn pretune_loss_grad(
    features: &Mat,
    labels: &[usize],
    old_head: &Head,
    transform: &TransformSet,
    align: bool,
) -> Result<(f64, TransformSet)> {
    let mut head = assemble_pretune_head(old_head, transform)?;
    let n_old = old_head.num_classes();
    let d = old_head.dim();
    let raw = generate_new_columns(old_head, transform)?;
    let scale = if align {
        let aligned = weight_align(&old_head.weights, &raw)?;
        for j in 0..raw.cols() {
            head.weights.set_column(n_old + j, &aligned.column(j))?;
        }
        Some(mean_column_norm(&old_head.weights) / mean_column_norm(&raw))
    } else {
        None
    };
    let logits = head.logits(features)?;
    let out = unbiased_ce(&logits, labels, n_old)?;
    let mut grad_w = features.matmul_tn(&out.grad)?;
    if let Some(r) = scale {
        // ŵ = r·u with r = a / mean‖u‖, so dL/du_c = r·G_c − (r / (N·m))·(Σ_k G_k·u_k)·u_c/‖u_c‖.
        let n_new = raw.cols();
        let m = mean_column_norm(&raw);
        let s: f64 = (0..n_new)
            .map(|j| (0..d).map(|a| grad_w.get(a, n_old + j) * raw.get(a, j)).sum::<f64>())
            .sum();
        for j in 0..n_new {
            let norm = raw.column_norm(j);
            let shrink = if norm > 0.0 {
                r * s / (n_new as f64 * m * norm)
            } else {
                0.0
            };
            for a in 0..d {
                let g = grad_w.get(a, n_old + j);
                grad_w.set(a, n_old + j, r * g - shrink * raw.get(a, j));
            }
        }
    }
    let w_old = &old_head.weights;

    let mut grad = transform.zeros_like();
    for a in 0..d {
        let g0 = grad_w.get(a, 0);
        let w0 = w_old.get(a, 0);
        grad.bg_importance.set(a, 0, g0 * w0 * transform.bg_projection);
        grad.bg_projection += g0 * transform.bg_importance.get(a, 0) * w0;
    }
    let bias_grads = transform.has_biases().then(|| out.grad.col_sums());
    for (j, (c, gc)) in transform.classes.iter().zip(grad.classes.iter_mut()).enumerate() {
        let col = n_old + j;
        for a in 0..d {
            let g = grad_w.get(a, col);
            for k in 0..n_old {
                let w = w_old.get(a, k);
                gc.importance.set(a, k, g * w * c.projection.get(k, 0));
                let p = gc.projection.get(k, 0);
                gc.projection.set(k, 0, p + g * c.importance.get(a, k) * w);
            }
        }
        if let (Some(gb), Some(all)) = (gc.bias.as_mut(), bias_grads.as_ref()) {
            *gb = all[col];
        }
    }
    Ok((out.loss, grad))
}

/// Similarity-based initial transforms for every class of the step.
pub fn similarity_init(step: &StepData, old: &SegModel) -> Result<TransformSet> {
    let n_new = step.classes.len();
    let mut acc = SimilarityAccumulator::new(old.head.weights.clone(), step.n_old, n_new);
    for s in &step.train {
        let feats = old.image_features(&s.image)?;
        acc.add(&feats, &s.labels)?;
    }
    let importances = acc.finish()?;
    let (bg_importance, bg_projection) = init_background_transform(old.head.dim());
    let bias = old.head.biases.as_ref().map(|b| new_class_bias(b[0], n_new));
    let classes = importances
        .into_iter()
        .map(|m| {
            Ok(ClassTransform {
                projection: init_projection(&m)?,
                importance: m,
                bias,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransformSet {
        classes,
        bg_importance,
        bg_projection,
    })
}

/// Bias given to a new class in bias mode: `b_0 − ln(|C_t| + 1)`.
pub fn new_class_bias(bg_bias: f64, n_new: usize) -> f64 {
    bg_bias - ((n_new + 1) as f64).ln()
}

/// Gaussian `N(0, 1)` matrices, with `P` pushed through a softmax.
pub fn random_init(old_head: &Head, n_new: usize, rng: &mut Rng) -> Result<TransformSet> {
    let (d, n_old) = (old_head.dim(), old_head.num_classes());
    let bias = old_head.biases.as_ref().map(|b| new_class_bias(b[0], n_new));
    let classes = (0..n_new)
        .map(|_| {
            let importance = Mat::from_fn(d, n_old, |_, _| rng.normal());
            let raw: Vec<f64> = (0..n_old).map(|_| rng.normal()).collect();
            Ok(ClassTransform {
                importance,
                projection: Mat::col_vector(&softmax(&raw)?)?,
                bias,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (bg_importance, bg_projection) = init_background_transform(d);
    Ok(TransformSet {
        classes,
        bg_importance,
        bg_projection,
    })
}

/// Replaces whichever matrix the component variant keeps fixed.
pub fn fix_components(transform: &mut TransformSet, components: Components) {
    for c in &mut transform.classes {
        let (d, n_old) = c.importance.shape();
        if !components.learns_projection() {
            c.projection = Mat::filled(n_old, 1, 1.0 / n_old as f64);
        }
        if !components.learns_importance() {
            c.importance = Mat::ones(d, n_old);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pretuned {
    pub transform: TransformSet,
    /// Mean batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD on the transforms with the old model frozen.
///
/// The backbone is frozen, so features of every training image are computed
/// once. Batch order comes from `rng`.
pub fn pretune(
    step: &StepData,
    old: &SegModel,
    transform: TransformSet,
    cfg: &PretuneConfig,
    components: Components,
    rng: &mut Rng,
) -> Result<Pretuned> {
    cfg.validate()?;
    transform.validate_for(&old.head)?;
    let features: Vec<Mat> = step
        .train
        .iter()
        .map(|s| old.image_features(&s.image))
        .collect::<Result<_>>()?;
    let mut transform = transform;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..step.train.len()).collect();
    let mut batch_index = 0usize;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let feats = stack_rows(chunk.iter().map(|&i| &features[i]))?;
            let labels: Vec<usize> = chunk
                .iter()
                .flat_map(|&i| step.train[i].labels.iter().copied())
                .collect();
            let (loss, grad) =
                pretune_loss_grad(&feats, &labels, &old.head, &transform, cfg.weight_align).map_err(|e| match e {
                    LabError::Numeric(m) => LabError::numeric(format!("pre-tuning batch {batch_index}: {m}")),
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(LabError::numeric(format!(
                    "pre-tuning batch {batch_index}: loss {loss}"
                )));
            }
            transform.apply_grad(&grad, cfg.lr, components);
            losses.push(loss);
            batch_index += 1;
        }
        epoch_losses.push(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    if transform.params_flat().iter().any(|v| !v.is_finite()) {
        return Err(LabError::numeric("pre-tuning diverged"));
    }
    Ok(Pretuned {
        transform,
        epoch_losses,
    })
}

pub(crate) fn stack_rows<'a>(mats: impl Iterator<Item = &'a Mat>) -> Result<Mat> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for m in mats {
        if *cols.get_or_insert(m.cols()) != m.cols() {
            return Err(LabError::shape("stacking matrices of different widths"));
        }
        data.extend_from_slice(m.data());
        rows += m.rows();
    }
    Mat::new(rows, cols.unwrap_or(0), data)
}

/// Rescales new columns so their mean L2 norm equals that of the old ones.
pub fn weight_align(old_columns: &Mat, new_columns: &Mat) -> Result<Mat> {
    if old_columns.cols() == 0 || new_columns.cols() == 0 {
        return Err(LabError::shape("weight aligning needs old and new columns"));
    }
    if old_columns.rows() != new_columns.rows() {
        return Err(LabError::shape("old and new columns differ in length"));
    }
    let new_mean = mean_column_norm(new_columns);
    if new_mean == 0.0 {
        return Err(LabError::numeric("mean norm of new classifiers is zero"));
    }
    Ok(new_columns.scale(mean_column_norm(old_columns) / new_mean))
}

fn mean_column_norm(m: &Mat) -> f64 {
    (0..m.cols()).map(|c| m.column_norm(c)).sum::<f64>() / m.cols() as f64
}

/// Extra scalars pre-tuning allocates:
/// `n_new·n_old·(d+1) + d + n_new + 1`, i.e. every `M_c`, `P_c`, `M_0`,
/// one bias per new class and `P_0`.
pub fn extra_param_count(n_new: usize, n_old: usize, d: usize) -> usize {
    n_new * n_old * (d + 1) + d + n_new + 1
}

/// Builds a transform with all parameters allocated (biases included) and
/// the given shape, for counting and serialisation.
pub fn allocate_transform(n_new: usize, n_old: usize, d: usize, with_biases: bool) -> TransformSet {
    TransformSet {
        classes: (0..n_new)
            .map(|_| ClassTransform {
                importance: Mat::zeros(d, n_old),
                projection: Mat::zeros(n_old, 1),
                bias: with_biases.then_some(0.0),
            })
            .collect(),
        bg_importance: Mat::zeros(d, 1),
        bg_projection: 0.0,
    }
}

const TRANSFORM_FORMAT: &str = "nest-lab-transform";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformHeader {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub n_old: usize,
    pub n_new: usize,
    pub biases: bool,
    pub param_count: usize,
}

/// Same layout as model checkpoints: JSON header line, then
/// [`TransformSet::params_flat`] as little-endian `f64`.
pub fn save_transform(transform: &TransformSet, path: &Path) -> Result<()> {
    let header = TransformHeader {
        format: TRANSFORM_FORMAT.into(),
        version: 1,
        dim: transform.dim(),
        n_old: transform.n_old().unwrap_or(0),
        n_new: transform.n_new(),
        biases: transform.has_biases(),
        param_count: transform.param_count(),
    };
    fs::write(path, encode(&header, &transform.params_flat())?)?;
    Ok(())
}

pub fn load_transform(path: &Path) -> Result<TransformSet> {
    let bytes = fs::read(path)?;
    let (head, payload) = split_header(&bytes)?;
    let header: TransformHeader =
        serde_json::from_slice(head).map_err(|e| LabError::data(format!("transform header: {e}")))?;
    if header.format != TRANSFORM_FORMAT || header.version != 1 {
        return Err(LabError::data(format!("not a v1 {TRANSFORM_FORMAT} file")));
    }
    let values = decode_f64s(payload, header.param_count)?;
    let mut t = allocate_transform(header.n_new, header.n_old, header.dim, header.biases);
    t.set_params_flat(&values)?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, Rng, FD_STEP};
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Mat {
        Mat::from_rows(rows).unwrap()
    }

    const S0: f64 = 0.880_797_077_977_882_4;
    const S1: f64 = 0.119_202_922_022_117_6;

    #[test]
    fn similarity_score_examples() {
        let (_, s) = similarity_scores(&[0.3, -2.0], &m(&[&[1.0], &[4.0]])).unwrap();
        assert_eq!(s, vec![1.0]);
        let (_, s) = similarity_scores(&[0.0, 0.0, 0.0], &Mat::ones(3, 4)).unwrap();
        assert!(s.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let (h, s) = similarity_scores(&[2.0, 0.0], &Mat::identity(2)).unwrap();
        assert_eq!(h.col_sums(), vec![2.0, 0.0]);
        assert!((s[0] - S0).abs() < 1e-15 && (s[1] - S1).abs() < 1e-15);
        assert!(similarity_scores(&[1.0], &Mat::identity(2)).is_err());
    }

    #[test]
    fn mask_examples() {
        assert_eq!(
            binary_mask(&m(&[&[1.0, -1.0], &[0.0, 2.0]])),
            m(&[&[1.0, 0.0], &[0.0, 1.0]])
        );
        assert_eq!(binary_mask(&Mat::filled(3, 2, -0.5)), Mat::zeros(3, 2));
    }

    #[test]
    fn importance_from_one_pixel() {
        // H = [[3, -1], [-1, 1]]: diagonal mask, column sums [2, 0].
        let w = m(&[&[3.0, -1.0], &[-1.0, 1.0]]);
        let p = Mat::from_rows(&[[1.0, 1.0]]).unwrap();
        let (h, s) = similarity_scores(p.row(0), &w).unwrap();
        assert_eq!(binary_mask(&h), m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert!((s[0] - S0).abs() < 1e-15 && (s[1] - S1).abs() < 1e-15);
        let got = init_importance(&p, &w).unwrap();
        assert_eq!(got, m(&[&[s[0], 0.0], &[0.0, s[1]]]));

        // Zero products are masked out.
        let w = m(&[&[1.0, 0.0], &[0.0, -1.0]]);
        let p = Mat::from_rows(&[[2.0, -3.0]]).unwrap();
        let s = softmax(&[2.0, 3.0]).unwrap();
        assert_eq!(init_importance(&p, &w).unwrap(), m(&[&[s[0], 0.0], &[0.0, s[1]]]));
    }

    #[test]
    fn identical_pixels_average_to_one() {
        let mut rng = Rng::new(3);
        let w = Mat::from_fn(4, 3, |_, _| rng.normal());
        let p: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let one = init_importance(&Mat::row_vector(&p).unwrap(), &w).unwrap();
        let two = init_importance(&Mat::from_rows(&[p.clone(), p]).unwrap(), &w).unwrap();
        for (a, b) in one.data().iter().zip(two.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_class_is_a_data_error() {
        let acc = SimilarityAccumulator::new(Mat::ones(2, 2), 3, 2);
        let err = acc.finish().unwrap_err();
        assert!(matches!(&err, LabError::Data(m) if m.contains("new class 3")));
        assert!(init_importance(&Mat::zeros(0, 2), &Mat::ones(2, 2)).is_err());
    }

    #[test]
    fn projection_examples() {
        let p = init_projection(&m(&[&[S0, 0.0], &[0.0, S1]])).unwrap();
        let expected = softmax(&[S0, S1]).unwrap();
        let e0 = S0.exp() / (S0.exp() + S1.exp());
        assert!((p.get(0, 0) - e0).abs() < 1e-15);
        assert!((p.get(0, 0) - 0.681_699_742).abs() < 1e-9);
        assert!((p.get(1, 0) - (1.0 - e0)).abs() < 1e-15);
        assert_eq!(p.data(), expected.as_slice());
        assert_eq!(init_projection(&Mat::zeros(3, 2)).unwrap().data(), &[0.5, 0.5]);
        let eq = init_projection(&m(&[&[0.25, 0.5], &[0.25, 0.0]])).unwrap();
        assert_eq!(eq.data(), &[0.5, 0.5]);
    }

    #[test]
    fn generation_examples() {
        let w_old = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let e1 = Mat::col_vector(&[0.0, 1.0]).unwrap();
        assert_eq!(
            generate_new_weight(&Mat::ones(2, 2), &e1, &w_old).unwrap(),
            vec![2.0, 4.0]
        );
        assert_eq!(
            generate_new_weight(&Mat::zeros(2, 2), &e1, &w_old).unwrap(),
            vec![0.0, 0.0]
        );
        let mm = m(&[&[0.5, 1.0], &[1.0, 0.5]]);
        let p = Mat::col_vector(&[0.2, 0.8]).unwrap();
        let w = generate_new_weight(&mm, &p, &w_old).unwrap();
        assert!((w[0] - 1.7).abs() < 1e-15 && (w[1] - 2.2).abs() < 1e-15);
        assert!(generate_new_weight(&Mat::ones(2, 3), &e1, &w_old).is_err());

        assert_eq!(
            generate_bg_weight(&Mat::ones(2, 1), 1.0, &[1.5, -2.0]).unwrap(),
            vec![1.5, -2.0]
        );
        assert_eq!(
            generate_bg_weight(&Mat::ones(2, 1), 0.0, &[1.5, -2.0]).unwrap(),
            vec![0.0, -0.0]
        );
        let m0 = Mat::col_vector(&[2.0, 1.0]).unwrap();
        assert_eq!(generate_bg_weight(&m0, 0.5, &[1.0, 4.0]).unwrap(), vec![1.0, 2.0]);
        assert!(generate_bg_weight(&m0, 0.5, &[1.0]).is_err());
    }

    fn random_head(rng: &mut Rng, d: usize, n_old: usize, bias: bool) -> Head {
        Head::new(
            Mat::from_fn(d, n_old, |_, _| rng.normal()),
            bias.then(|| (0..n_old).map(|_| rng.normal()).collect()),
        )
        .unwrap()
    }

    #[test]
    fn background_init_is_identity() {
        let mut rng = Rng::new(1);
        for _ in 0..10 {
            let w0: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let (m0, p0) = init_background_transform(5);
            assert_eq!(generate_bg_weight(&m0, p0, &w0).unwrap(), w0);
        }
    }

    #[test]
    fn assembled_head_layout() {
        let mut rng = Rng::new(2);
        let old = random_head(&mut rng, 4, 3, false);
        let mut t = random_init(&old, 2, &mut rng).unwrap();
        let head = assemble_pretune_head(&old, &t).unwrap();
        assert_eq!(head.num_classes(), 5);
        for c in 0..3 {
            assert_eq!(head.weights.column(c), old.weights.column(c));
        }
        let gen = generate_new_columns(&old, &t).unwrap();
        let grown = old.grow(&gen, None).unwrap();
        assert_eq!(head, grown);
        for j in 0..2 {
            let w = generate_new_weight(&t.classes[j].importance, &t.classes[j].projection, &old.weights).unwrap();
            assert_eq!(head.weights.column(3 + j), w);
        }

        t.classes.clear();
        t.bg_projection = 2.0;
        let bg_only = assemble_pretune_head(&old, &t).unwrap();
        assert_eq!(bg_only.num_classes(), 3);
        let doubled: Vec<f64> = old.weights.column(0).iter().map(|v| v * 2.0).collect();
        assert_eq!(bg_only.weights.column(0), doubled);
        assert_eq!(
            bg_only.weights.columns(1..3).unwrap(),
            old.weights.columns(1..3).unwrap()
        );
    }

    #[test]
    fn transform_gradient_matches_finite_differences() {
        let mut rng = Rng::new(31);
        for (bias, align) in [(false, false), (true, false), (false, true), (true, true)] {
            let (d, n_old, n_new, pixels) = (4, 3, 2, 16);
            let old = random_head(&mut rng, d, n_old, bias);
            let mut t = random_init(&old, n_new, &mut rng).unwrap();
            t.bg_importance = Mat::from_fn(d, 1, |_, _| 1.0 + 0.3 * rng.normal());
            t.bg_projection = 0.8;
            let feats = Mat::from_fn(pixels, d, |_, _| rng.normal());
            let labels: Vec<usize> = (0..pixels)
                .map(|_| match rng.below(3) {
                    0 => 0,
                    k => n_old + k - 1,
                })
                .collect();
            let (_, grad) = pretune_loss_grad(&feats, &labels, &old, &t, align).unwrap();
            let flat = Mat::col_vector(&t.params_flat()).unwrap();
            let fd = finite_diff_grad(
                |p| {
                    let mut probe = t.clone();
                    probe.set_params_flat(p.data()).unwrap();
                    pretune_loss_grad(&feats, &labels, &old, &probe, align).unwrap().0
                },
                &flat,
                FD_STEP,
            )
            .unwrap();
            let err = relative_error(&grad.params_flat(), fd.data());
            assert!(err < 1e-4, "bias {bias} align {align}: relative error {err}");
        }
    }

    #[test]
    fn weight_align_examples() {
        let old = m(&[&[2.0, 0.0], &[0.0, 2.0]]);
        let new = Mat::col_vector(&[4.0, 0.0]).unwrap();
        assert_eq!(weight_align(&old, &new).unwrap().data(), &[2.0, 0.0]);
        let already = Mat::col_vector(&[0.0, 2.0]).unwrap();
        assert_eq!(weight_align(&old, &already).unwrap(), already);
        assert!(matches!(
            weight_align(&old, &Mat::zeros(2, 1)),
            Err(LabError::Numeric(_))
        ));
    }

    #[test]
    fn cost_formula_examples() {
        assert_eq!(extra_param_count(1, 20, 256), 5398);
        assert_eq!(extra_param_count(1, 1, 1), 5);
        assert_eq!(extra_param_count(2, 16, 256), 8483);
        for (n_new, n_old, d) in [(1, 20, 256), (3, 4, 7), (2, 1, 9)] {
            assert_eq!(
                allocate_transform(n_new, n_old, d, true).param_count(),
                extra_param_count(n_new, n_old, d)
            );
        }
    }

    #[test]
    fn transform_file_round_trip() {
        let mut rng = Rng::new(4);
        let old = random_head(&mut rng, 3, 2, true);
        let t = random_init(&old, 2, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        save_transform(&t, &path).unwrap();
        assert_eq!(load_transform(&path).unwrap(), t);
    }

    proptest! {
        #[test]
        fn decomposition_is_exact(seed in 0u64..10_000) {
            let mut rng = Rng::new(seed);
            let d = 1 + rng.below(16);
            let n_old = 1 + rng.below(8);
            let w = Mat::from_fn(d, n_old, |_, _| rng.normal());
            let p: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let (_, s) = similarity_scores(&p, &w).unwrap();
            let direct = softmax(w.transpose().matmul(&Mat::col_vector(&p).unwrap()).unwrap().data()).unwrap();
            for (a, b) in s.iter().zip(&direct) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn masked_h_is_nonnegative(vals in prop::collection::vec(-3.0f64..3.0, 12)) {
            let h = Mat::new(3, 4, vals).unwrap();
            prop_assert!(binary_mask(&h).hadamard(&h).unwrap().data().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn generation_is_bilinear(seed in 0u64..10_000, alpha in -3.0f64..3.0) {
            let mut rng = Rng::new(seed);
            let w = Mat::from_fn(3, 4, |_, _| rng.normal());
            let m1 = Mat::from_fn(3, 4, |_, _| rng.normal());
            let m2 = Mat::from_fn(3, 4, |_, _| rng.normal());
            let p = Mat::from_fn(4, 1, |_, _| rng.normal());
            let base = generate_new_weight(&m1, &p, &w).unwrap();
            let scaled = generate_new_weight(&m1, &p.scale(alpha), &w).unwrap();
            let sum = generate_new_weight(&m1.add(&m2).unwrap(), &p, &w).unwrap();
            let other = generate_new_weight(&m2, &p, &w).unwrap();
            for i in 0..3 {
                prop_assert!((scaled[i] - alpha * base[i]).abs() <= 1e-12);
                prop_assert!((sum[i] - (base[i] + other[i])).abs() <= 1e-12);
            }
        }

        #[test]
        fn init_ranges(seed in 0u64..10_000) {
            let mut rng = Rng::new(seed);
            let w = Mat::from_fn(5, 3, |_, _| rng.normal());
            let pixels = Mat::from_fn(1 + rng.below(20), 5, |_, _| rng.normal());
            let mm = init_importance(&pixels, &w).unwrap();
            prop_assert!(mm.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let p = init_projection(&mm).unwrap();
            prop_assert!(p.data().iter().all(|v| *v > 0.0));
            prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn weight_align_equalises_mean_norms(seed in 0u64..10_000) {
            let mut rng = Rng::new(seed);
            let old = Mat::from_fn(6, 1 + rng.below(5), |_, _| rng.normal());
            let new = Mat::from_fn(6, 1 + rng.below(3), |_, _| 3.0 * rng.normal());
            let aligned = weight_align(&old, &new).unwrap();
            let mean = |m: &Mat| (0..m.cols()).map(|c| m.column_norm(c)).sum::<f64>() / m.cols() as f64;
            prop_assert!((mean(&aligned) - mean(&old)).abs() <= 1e-12);
        }

        #[test]
        fn allocated_count_matches_formula(n_new in 1usize..5, n_old in 1usize..30, d in 1usize..300) {
            prop_assert_eq!(allocate_transform(n_new, n_old, d, true).param_count(), extra_param_count(n_new, n_old, d));
        }
    }
}
