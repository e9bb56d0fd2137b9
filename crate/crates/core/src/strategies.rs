//! How the classifiers of a step's new classes get their first values.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::losses::unbiased_ce;
use crate::model::{Head, SegModel};
use crate::nest::{
    self, fix_components, generate_bg_weight, generate_new_columns, new_class_bias, random_init, similarity_init,
    weight_align, Components, PretuneConfig, TransformSet,
};
use crate::numerics::{sgd_update, Mat, Rng};
use crate::synthdata::StepData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixInit {
    Similarity,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum InitStrategy {
    Random,
    BackgroundCopy,
    TwoStageDirect,
    Nest {
        matrix_init: MatrixInit,
        components: Components,
    },
}

impl InitStrategy {
    pub const NEST: InitStrategy = InitStrategy::Nest {
        matrix_init: MatrixInit::Similarity,
        components: Components::Both,
    };
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitStrategy::Random => f.write_str("random"),
            InitStrategy::BackgroundCopy => f.write_str("background"),
            InitStrategy::TwoStageDirect => f.write_str("two_stage"),
            InitStrategy::Nest {
                matrix_init,
                components,
            } => {
                let m = match matrix_init {
                    MatrixInit::Similarity => "similarity",
                    MatrixInit::Random => "random",
                };
                let c = match components {
                    Components::Both => "both",
                    Components::ImportanceOnly => "importance_only",
                    Components::ProjectionOnly => "projection_only",
                };
                write!(f, "nest:{m}:{c}")
            }
        }
    }
}

impl FromStr for InitStrategy {
    type Err = LabError;

    /// `random`, `background`, `two_stage`, or `nest[:<matrix_init>[:<components>]]`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            LabError::config(
                "strategy",
                format!(
                    "unknown strategy {s:?}; expected random, background, two_stage or \
                     nest:<similarity|random>:<both|importance_only|projection_only>"
                ),
            )
        };
        let mut parts = s.split(':');
        let head = parts.next().unwrap_or_default();
        let strategy = match head {
            "random" => InitStrategy::Random,
            "background" => InitStrategy::BackgroundCopy,
            "two_stage" => InitStrategy::TwoStageDirect,
            "nest" => {
                let matrix_init = match parts.next() {
                    None | Some("similarity") => MatrixInit::Similarity,
                    Some("random") => MatrixInit::Random,
                    Some(_) => return Err(bad()),
                };
                let components = match parts.next() {
                    None | Some("both") => Components::Both,
                    Some("importance_only") => Components::ImportanceOnly,
                    Some("projection_only") => Components::ProjectionOnly,
                    Some(_) => return Err(bad()),
                };
                InitStrategy::Nest {
                    matrix_init,
                    components,
                }
            }
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(strategy)
    }
}

impl TryFrom<String> for InitStrategy {
    type Error = LabError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<InitStrategy> for String {
    fn from(s: InitStrategy) -> String {
        s.to_string()
    }
}

/// Columns (and biases) for the new classes of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInit {
    pub columns: Mat,
    pub biases: Option<Vec<f64>>,
    /// Mean loss per pre-tuning (or two-stage) epoch; empty for one-shot inits.
    pub pretune_losses: Vec<f64>,
    pub transform: Option<TransformSet>,
    /// NeST's learned background classifier `ŵ_0`.
    pub pretuned_bg: Option<Vec<f64>>,
}

/// Random streams used by initialisation. Two-stage and NeST draw their
/// batch order from the same `order` stream.
#[derive(Debug, Clone)]
pub struct InitStreams {
    pub init: Rng,
    pub order: Rng,
}

pub const RANDOM_INIT_STD: f64 = 0.01;

pub fn initialize_head(
    strategy: InitStrategy,
    old: &SegModel,
    step: &StepData,
    cfg: &PretuneConfig,
    streams: &mut InitStreams,
) -> Result<HeadInit> {
    if step.train.is_empty() {
        return Err(LabError::data(format!("step {} has no training images", step.step)));
    }
    if step.n_old != old.head.num_classes() {
        return Err(LabError::shape(format!(
            "old head has {} columns, step {} expects {}",
            old.head.num_classes(),
            step.step,
            step.n_old
        )));
    }
    let n_new = step.classes.len();
    let d = old.head.dim();
    let copy_biases = || {
        old.head
            .biases
            .as_ref()
            .map(|b| vec![new_class_bias(b[0], n_new); n_new])
    };
    let one_shot = |columns, biases| HeadInit {
        columns,
        biases,
        pretune_losses: Vec::new(),
        transform: None,
        pretuned_bg: None,
    };
    match strategy {
        InitStrategy::Random => {
            let rng = &mut streams.init;
            let columns = Mat::from_fn(d, n_new, |_, _| RANDOM_INIT_STD * rng.normal());
            Ok(one_shot(columns, copy_biases()))
        }
        InitStrategy::BackgroundCopy => Ok(one_shot(background_columns(&old.head, n_new)?, copy_biases())),
        InitStrategy::TwoStageDirect => {
            let start = one_shot(background_columns(&old.head, n_new)?, copy_biases());
            two_stage(old, step, cfg, start, &mut streams.order)
        }
        InitStrategy::Nest {
            matrix_init,
            components,
        } => {
            let mut transform = match matrix_init {
                MatrixInit::Similarity => similarity_init(step, old)?,
                MatrixInit::Random => random_init(&old.head, n_new, &mut streams.init)?,
            };
            fix_components(&mut transform, components);
            let tuned = nest::pretune(step, old, transform, cfg, components, &mut streams.order)?;
            let transform = tuned.transform;
            let mut columns = generate_new_columns(&old.head, &transform)?;
            if cfg.weight_align {
                columns = weight_align(&old.head.weights, &columns)?;
            }
            let biases = old
                .head
                .biases
                .as_ref()
                .map(|_| transform.classes.iter().map(|c| c.bias.unwrap_or(0.0)).collect());
            let bg = generate_bg_weight(
                &transform.bg_importance,
                transform.bg_projection,
                &old.head.weights.column(0),
            )?;
            Ok(HeadInit {
                columns,
                biases,
                pretune_losses: tuned.epoch_losses,
                transform: Some(transform),
                pretuned_bg: Some(bg),
            })
        }
    }
}

fn background_columns(head: &Head, n_new: usize) -> Result<Mat> {
    let w0 = head.weights.column(0);
    Ok(Mat::from_fn(head.dim(), n_new, |r, _| w0[r]))
}

/// Background-copy start, then SGD on `L_unce` over the new columns (and
/// their biases) with backbone and old columns frozen.
fn two_stage(
    old: &SegModel,
    step: &StepData,
    cfg: &PretuneConfig,
    start: HeadInit,
    order_rng: &mut Rng,
) -> Result<HeadInit> {
    cfg.validate()?;
    let n_old = old.head.num_classes();
    let features: Vec<Mat> = step
        .train
        .iter()
        .map(|s| old.image_features(&s.image))
        .collect::<Result<_>>()?;
    let mut head = old.head.grow(&start.columns, start.biases.as_deref())?;
    let cols = head.num_classes();
    let mut order: Vec<usize> = (0..step.train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut batch_index = 0usize;
    for _ in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let feats = nest::stack_rows(chunk.iter().map(|&i| &features[i]))?;
            let labels: Vec<usize> = chunk
                .iter()
                .flat_map(|&i| step.train[i].labels.iter().copied())
                .collect();
            let out = unbiased_ce(&head.logits(&feats)?, &labels, n_old)?;
            if !out.loss.is_finite() {
                return Err(LabError::numeric(format!(
                    "two-stage batch {batch_index}: loss {}",
                    out.loss
                )));
            }
            let grad_w = feats.matmul_tn(&out.grad)?;
            for (i, (p, g)) in head.weights.data_mut().iter_mut().zip(grad_w.data()).enumerate() {
                if i % cols >= n_old {
                    *p -= cfg.lr * g;
                }
            }
            if let Some(b) = head.biases.as_mut() {
                sgd_update(&mut b[n_old..], &out.grad.col_sums()[n_old..], cfg.lr);
            }
            losses.push(out.loss);
            batch_index += 1;
        }
        epoch_losses.push(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    head.weights.ensure_finite("two-stage classifiers")?;
    Ok(HeadInit {
        columns: head.weights.columns(n_old..cols)?,
        biases: head.biases.map(|b| b[n_old..].to_vec()),
        pretune_losses: epoch_losses,
        transform: None,
        pretuned_bg: None,
    })
}
