//! Per-pixel segmentation model: an MLP backbone and a linear head whose
//! column `c` is the classifier of class `c` (column 0 is background).
//!
//! Pixel batches are matrices with one pixel per row, so "features of an
//! image" is an `(H·W) × d` matrix.

pub mod checkpoint;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{sgd_update, Mat, Rng};
use crate::synthdata::LabeledImage;

pub use checkpoint::{load_model, save_model, ModelHeader};

/// `y = act(W x + b)`, weight stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub relu: bool,
}

impl Linear {
    pub fn new(weight: Mat, bias: Vec<f64>, relu: bool) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(LabError::shape(format!(
                "bias of length {} for a {}x{} layer",
                bias.len(),
                weight.rows(),
                weight.cols()
            )));
        }
        Ok(Self { weight, bias, relu })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn pre_activation(&self, x: &Mat) -> Result<Mat> {
        let mut z = x.matmul_nt(&self.weight)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(z)
    }

    fn activate(&self, z: &Mat) -> Mat {
        if !self.relu {
            return z.clone();
        }
        let mut out = z.clone();
        for v in out.data_mut() {
            if *v <= 0.0 {
                *v = 0.0;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    input_dim: usize,
    layers: Vec<Linear>,
}

impl Backbone {
    pub fn new(input_dim: usize, layers: Vec<Linear>) -> Result<Self> {
        let mut dim = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_dim() != dim {
                return Err(LabError::shape(format!(
                    "layer {i} expects {} inputs but receives {dim}",
                    layer.in_dim()
                )));
            }
            dim = layer.out_dim();
        }
        Ok(Self { input_dim, layers })
    }

    /// No layers: features are the raw pixels.
    pub fn identity(dim: usize) -> Self {
        Self {
            input_dim: dim,
            layers: Vec::new(),
        }
    }

    /// ReLU layers of the given widths, He-normal weights, zero biases.
    pub fn random(input_dim: usize, widths: &[usize], rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for &out in widths {
            let std = (2.0 / fan_in as f64).sqrt();
            let weight = Mat::from_fn(out, fan_in, |_, _| std * rng.normal());
            layers.push(Linear {
                weight,
                bias: vec![0.0; out],
                relu: true,
            });
            fan_in = out;
        }
        Self { input_dim, layers }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, Linear::out_dim)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(LabError::shape(format!(
                "pixels have {} channels, backbone expects {}",
                x.cols(),
                self.input_dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.activate(&layer.pre_activation(&h)?);
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: &Mat) -> Result<BackboneTrace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let z = layer.pre_activation(&h)?;
            let next = layer.activate(&z);
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        Ok(BackboneTrace {
            inputs,
            pre_activations: pre,
            output: h,
        })
    }

    /// Gradients of every layer given `dL/d(output)`.
    pub fn backward(&self, trace: &BackboneTrace, grad_out: &Mat) -> Result<Vec<LinearGrad>> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.relu {
                // Subgradient 0 at the kink.
                for (gv, z) in g.data_mut().iter_mut().zip(trace.pre_activations[i].data()) {
                    if *z <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let weight = g.matmul_tn(&trace.inputs[i])?;
            let bias = g.col_sums();
            if i > 0 {
                g = g.matmul(&layer.weight)?;
            }
            grads.push(LinearGrad { weight, bias });
        }
        grads.reverse();
        Ok(grads)
    }
}

#[derive(Debug, Clone)]
pub struct BackboneTrace {
    inputs: Vec<Mat>,
    pre_activations: Vec<Mat>,
    pub output: Mat,
}

impl BackboneTrace {
    pub fn pre_activations(&self) -> &[Mat] {
        &self.pre_activations
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

/// Linear classifier `logits = Wᵀ p (+ b)`, `W` is `d × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weights: Mat,
    pub biases: Option<Vec<f64>>,
}

impl Head {
    pub fn new(weights: Mat, biases: Option<Vec<f64>>) -> Result<Self> {
        if weights.cols() == 0 {
            return Err(LabError::shape("a head needs at least the background column"));
        }
        if let Some(b) = &biases {
            if b.len() != weights.cols() {
                return Err(LabError::shape(format!(
                    "{} biases for {} classifier columns",
                    b.len(),
                    weights.cols()
                )));
            }
        }
        Ok(Self { weights, biases })
    }

    pub fn random(dim: usize, classes: usize, with_bias: bool, rng: &mut Rng) -> Self {
        Self {
            weights: Mat::from_fn(dim, classes, |_, _| 0.01 * rng.normal()),
            biases: with_bias.then(|| vec![0.0; classes]),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, features: &Mat) -> Result<Mat> {
        if features.cols() != self.dim() {
            return Err(LabError::shape(format!(
                "features of width {} for a head over {} channels",
                features.cols(),
                self.dim()
            )));
        }
        let mut z = features.matmul(&self.weights)?;
        if let Some(b) = &self.biases {
            for r in 0..z.rows() {
                for (v, bias) in z.row_mut(r).iter_mut().zip(b) {
                    *v += bias;
                }
            }
        }
        Ok(z)
    }

    /// Appends classifier columns after the existing ones.
    ///
    /// A biased head takes `new_biases` when given, otherwise the background
    /// bias; a bias-free head rejects biases.
    pub fn grow(&self, new_columns: &Mat, new_biases: Option<&[f64]>) -> Result<Head> {
        if new_columns.rows() != self.dim() {
            return Err(LabError::shape(format!(
                "new columns have {} rows, head has {} channels",
                new_columns.rows(),
                self.dim()
            )));
        }
        let added = new_columns.cols();
        let biases = match (&self.biases, new_biases) {
            (None, None) => None,
            (None, Some(_)) => return Err(LabError::shape("biases given to a bias-free head")),
            (Some(old), given) => {
                let mut b = old.clone();
                match given {
                    Some(nb) if nb.len() != added => {
                        return Err(LabError::shape(format!("{} biases for {added} new columns", nb.len())))
                    }
                    Some(nb) => b.extend_from_slice(nb),
                    None => b.extend(std::iter::repeat_n(old[0], added)),
                }
                Some(b)
            }
        };
        Ok(Head {
            weights: self.weights.hconcat(new_columns)?,
            biases,
        })
    }
}

/// Which parameter groups an optimiser may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub backbone: bool,
    pub head: bool,
    /// Leading head columns (and their biases) that stay fixed.
    pub frozen_columns: usize,
}

impl Default for Trainable {
    fn default() -> Self {
        Self {
            backbone: true,
            head: true,
            frozen_columns: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub backbone: Backbone,
    pub head: Head,
    pub trainable: Trainable,
}

#[derive(Debug, Clone)]
pub struct ModelTrace {
    backbone: BackboneTrace,
    pub logits: Mat,
}

impl ModelTrace {
    pub fn features(&self) -> &Mat {
        &self.backbone.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub layers: Vec<LinearGrad>,
    pub head_weights: Mat,
    pub head_biases: Option<Vec<f64>>,
}

impl ModelGrad {
    /// Same order as [`SegModel::params_flat`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out.extend_from_slice(self.head_weights.data());
        if let Some(b) = &self.head_biases {
            out.extend_from_slice(b);
        }
        out
    }
}

/// Flattens one image into an `(H·W) × channels` pixel matrix.
pub fn pixel_matrix(image: &LabeledImage) -> Mat {
    Mat::from_fn(image.pixel_count(), image.dim, |r, c| image.features[r * image.dim + c])
}

/// Stacks the pixels of several images, in order.
pub fn stack_pixels<'a>(images: impl IntoIterator<Item = &'a LabeledImage>) -> Result<Mat> {
    let mut data = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for image in images {
        if *dim.get_or_insert(image.dim) != image.dim {
            return Err(LabError::shape("images of different channel counts"));
        }
        data.extend_from_slice(&image.features);
        rows += image.pixel_count();
    }
    Mat::new(rows, dim.unwrap_or(0), data)
}

impl SegModel {
    pub fn new(backbone: Backbone, head: Head) -> Result<Self> {
        if backbone.output_dim() != head.dim() {
            return Err(LabError::shape(format!(
                "backbone emits {} channels, head expects {}",
                backbone.output_dim(),
                head.dim()
            )));
        }
        Ok(Self {
            backbone,
            head,
            trainable: Trainable::default(),
        })
    }

    pub fn features(&self, pixels: &Mat) -> Result<Mat> {
        self.backbone.forward(pixels)
    }

    pub fn image_features(&self, image: &LabeledImage) -> Result<Mat> {
        self.features(&pixel_matrix(image))
    }

    pub fn logits(&self, pixels: &Mat) -> Result<Mat> {
        self.head.logits(&self.features(pixels)?)
    }

    pub fn forward_trace(&self, pixels: &Mat) -> Result<ModelTrace> {
        let backbone = self.backbone.forward_trace(pixels)?;
        let logits = self.head.logits(&backbone.output)?;
        Ok(ModelTrace { backbone, logits })
    }

    /// Backpropagates `dL/dlogits` to every parameter.
    pub fn backward(&self, trace: &ModelTrace, grad_logits: &Mat) -> Result<ModelGrad> {
        if grad_logits.shape() != trace.logits.shape() {
            return Err(LabError::shape("logit gradient does not match the forward pass"));
        }
        let feats = trace.features();
        let head_weights = feats.matmul_tn(grad_logits)?;
        let head_biases = self.head.biases.as_ref().map(|_| grad_logits.col_sums());
        let layers = if self.backbone.layers.is_empty() {
            Vec::new()
        } else {
            let grad_feats = grad_logits.matmul_nt(&self.head.weights)?;
            self.backbone.backward(&trace.backbone, &grad_feats)?
        };
        Ok(ModelGrad {
            layers,
            head_weights,
            head_biases,
        })
    }

    /// One SGD step honouring the trainability flags.
    pub fn apply_grad(&mut self, grad: &ModelGrad, lr: f64) -> Result<()> {
        if self.trainable.backbone {
            for (layer, g) in self.backbone.layers.iter_mut().zip(&grad.layers) {
                sgd_update(layer.weight.data_mut(), g.weight.data(), lr);
                sgd_update(&mut layer.bias, &g.bias, lr);
            }
        }
        if self.trainable.head {
            let frozen = self.trainable.frozen_columns.min(self.head.num_classes());
            let cols = self.head.num_classes();
            let w = self.head.weights.data_mut();
            for (i, (p, g)) in w.iter_mut().zip(grad.head_weights.data()).enumerate() {
                if i % cols >= frozen {
                    *p -= lr * g;
                }
            }
            if let (Some(b), Some(gb)) = (self.head.biases.as_mut(), grad.head_biases.as_ref()) {
                sgd_update(&mut b[frozen..], &gb[frozen..], lr);
            }
        }
        self.check_finite()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params_flat().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(LabError::numeric("model parameters diverged"))
        }
    }

    /// Parameters in checkpoint order: per layer weight (row-major) then
    /// bias, then head weights (row-major `d × C`), then head biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.backbone.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out.extend_from_slice(self.head.weights.data());
        if let Some(b) = &self.head.biases {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(LabError::shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut rest = values;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head
        };
        for l in &mut self.backbone.layers {
            let n = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(take(n));
            let nb = l.bias.len();
            l.bias.copy_from_slice(take(nb));
        }
        let n = self.head.weights.data().len();
        self.head.weights.data_mut().copy_from_slice(take(n));
        if let Some(b) = &mut self.head.biases {
            let nb = b.len();
            b.copy_from_slice(take(nb));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let backbone: usize = self
            .backbone
            .layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum();
        backbone + self.head.weights.data().len() + self.head.biases.as_ref().map_or(0, Vec::len)
    }

    /// Hash of the exact parameter bits, used for frozen-state checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for v in self.params_flat() {
            v.to_bits().hash(&mut h);
        }
        self.head.num_classes().hash(&mut h);
        h.finish()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot::new(self.clone())
    }
}

/// Immutable copy of a model taken at the start of a step (the old model).
#[derive(Debug, Clone)]
pub struct Snapshot {
    model: Arc<SegModel>,
    fingerprint: u64,
}

impl Snapshot {
    pub fn new(model: SegModel) -> Self {
        let fingerprint = model.fingerprint();
        Self {
            model: Arc::new(model),
            fingerprint,
        }
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Fails if the parameter bits no longer match the capture.
    pub fn verify_unchanged(&self) -> Result<()> {
        if self.model.fingerprint() == self.fingerprint {
            Ok(())
        } else {
            Err(LabError::Contract("old-model snapshot was modified".into()))
        }
    }
}
