//! Base training, incremental steps and whole experiments.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::losses::{ce, incremental_objective, probabilities, LossConfig};
use crate::metrics::{cosine_similarities, iou_per_class, miou_range, ConfusionMatrix, MeanStd};
use crate::model::{pixel_matrix, stack_pixels, Backbone, Head, SegModel, Snapshot};
use crate::nest::stack_rows;
use crate::numerics::{Mat, Rng};
use crate::strategies::{initialize_head, InitStrategy, InitStreams};
use crate::synthdata::{build_world, step_view, StepData, StepImage, TaskSequence, World};

const STREAM_MODEL: u64 = 1;
const STREAM_TRAIN_ORDER: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_PRETUNE_ORDER: u64 = 4;

/// Loss and feature-similarity statistics of one epoch. Epoch 0 is the
/// model before any update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: MeanStd,
    pub featsim: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub miou_base: Option<f64>,
    pub miou_new: Option<f64>,
    pub miou_all: Option<f64>,
    /// IoU per model id `0..=n_seen`.
    pub ious: Vec<Option<f64>>,
    pub curve: Vec<EpochStats>,
    pub pretune_losses: Vec<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub strategy: InitStrategy,
    pub seed: u64,
    pub class_order: Vec<usize>,
    pub steps: Vec<StepReport>,
}

impl RunResult {
    pub fn final_step(&self) -> &StepReport {
        self.steps.last().expect("a run has at least one step")
    }

    /// Final IoU per model id.
    pub fn final_ious(&self) -> &[Option<f64>] {
        &self.final_step().ious
    }
}

/// A world, its task sequence and the config that produced them.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub world: Arc<World>,
    pub sequence: TaskSequence,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let world = Arc::new(build_world(&cfg.world)?);
        Self::with_world(cfg, world)
    }

    /// Reuses an already generated world; its spec must match the config.
    pub fn with_world(cfg: ExperimentConfig, world: Arc<World>) -> Result<Self> {
        cfg.validate()?;
        if world.spec != cfg.world {
            return Err(LabError::config(
                "world",
                "supplied world was built from a different spec",
            ));
        }
        let sequence = cfg.sequence()?;
        Ok(Self { cfg, world, sequence })
    }

    pub fn step_data(&self, t: usize) -> Result<StepData> {
        step_view(&self.sequence, &self.world, t)
    }

    fn seed(&self) -> u64 {
        self.cfg.train.seed
    }

    pub fn initial_model(&self) -> Result<SegModel> {
        let tc = &self.cfg.train;
        let mut rng = Rng::derive(self.seed(), &[STREAM_MODEL]);
        let backbone = Backbone::random(self.cfg.world.feature_dim, &tc.backbone_widths, &mut rng);
        let classes = self.sequence.n_seen(0) + 1;
        let head = Head::random(backbone.output_dim(), classes, tc.head_bias, &mut rng);
        SegModel::new(backbone, head)
    }

    /// Plain cross entropy on `{0} ∪ C_1`.
    pub fn train_base_step(&self) -> Result<(SegModel, StepReport)> {
        let started = Instant::now();
        let step = self.step_data(0)?;
        let mut model = self.initial_model()?;
        let start = model.snapshot();
        let tc = &self.cfg.train;
        let order = Rng::derive(self.seed(), &[STREAM_TRAIN_ORDER, 0]);
        let curve = fit(
            &mut model,
            &step,
            &start,
            Objective::Ce,
            FitSchedule {
                epochs: tc.base_epochs,
                lr: tc.base_lr,
                batch_size: tc.batch_size,
                poly_power: tc.poly_power,
            },
            order,
        )
        .map_err(|e| in_step(e, 0))?;
        let report = self.report(&model, &step, curve, Vec::new(), started)?;
        Ok((model, report))
    }

    /// Incremental step `t ≥ 1` from the model of step `t − 1`.
    pub fn run_step(&self, prev: &SegModel, t: usize) -> Result<(SegModel, StepReport)> {
        if t == 0 {
            return Err(LabError::config(
                "sequence",
                "run_step needs t >= 1; use train_base_step",
            ));
        }
        let started = Instant::now();
        let step = self.step_data(t)?;
        let snapshot = prev.snapshot();
        let old = snapshot.model();
        let mut streams = InitStreams {
            init: Rng::derive(self.seed(), &[STREAM_INIT, t as u64]),
            order: Rng::derive(self.seed(), &[STREAM_PRETUNE_ORDER, t as u64]),
        };
        let init = initialize_head(self.cfg.strategy(), old, &step, &self.cfg.pretune, &mut streams)
            .map_err(|e| in_step(e, t))?;

        let mut head = old.head.clone();
        if self.cfg.train.use_pretuned_bg {
            if let Some(bg) = &init.pretuned_bg {
                head.weights.set_column(0, bg)?;
            }
        }
        let head = head.grow(&init.columns, init.biases.as_deref())?;
        let mut model = SegModel::new(old.backbone.clone(), head)?;
        if self.cfg.train.fix_old_classifiers {
            model.trainable.frozen_columns = step.n_old;
        }

        let tc = &self.cfg.train;
        let objective = Objective::Incremental(LossConfig {
            lambda_kd: tc.lambda_kd,
            n_old: step.n_old,
        });
        let order = Rng::derive(self.seed(), &[STREAM_TRAIN_ORDER, t as u64]);
        let curve = fit(
            &mut model,
            &step,
            &snapshot,
            objective,
            FitSchedule {
                epochs: tc.epochs,
                lr: tc.lr,
                batch_size: tc.batch_size,
                poly_power: tc.poly_power,
            },
            order,
        )
        .map_err(|e| in_step(e, t))?;
        snapshot.verify_unchanged()?;
        model.trainable.frozen_columns = 0;
        let report = self.report(&model, &step, curve, init.pretune_losses, started)?;
        Ok((model, report))
    }

    pub fn run(&self) -> Result<RunResult> {
        self.run_from_base(self.train_base_step()?)
    }

    /// Continues from a base step trained by [`Experiment::train_base_step`].
    /// The base step does not depend on the strategy, so runs that differ
    /// only in strategy can share it.
    pub fn run_from_base(&self, base: (SegModel, StepReport)) -> Result<RunResult> {
        let (mut model, first) = base;
        let mut steps = vec![first];
        for t in 1..self.sequence.num_steps() {
            let (next, report) = self.run_step(&model, t)?;
            model = next;
            steps.push(report);
        }
        Ok(RunResult {
            run_id: self.cfg.report.run_id.clone(),
            strategy: self.cfg.strategy(),
            seed: self.seed(),
            class_order: self.sequence.class_order.clone(),
            steps,
        })
    }

    fn report(
        &self,
        model: &SegModel,
        step: &StepData,
        curve: Vec<EpochStats>,
        pretune_losses: Vec<f64>,
        started: Instant,
    ) -> Result<StepReport> {
        let ious = iou_per_class(&evaluate(model, &step.test, step.n_seen + 1)?);
        let base = self.sequence.base;
        let miou_new = if step.n_seen > base {
            miou_range(&ious, base + 1..=step.n_seen)?
        } else {
            None
        };
        Ok(StepReport {
            step: step.step,
            miou_base: miou_range(&ious, 0..=base)?,
            miou_new,
            miou_all: miou_range(&ious, 0..=step.n_seen)?,
            ious,
            curve,
            pretune_losses,
            wall_seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// Builds the world and runs every step.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    Experiment::new(cfg.clone())?.run()
}

fn in_step(err: LabError, t: usize) -> LabError {
    match err {
        LabError::Numeric(m) => LabError::numeric(format!("step {t}: {m}")),
        other => other,
    }
}

#[derive(Debug, Clone, Copy)]
enum Objective {
    Ce,
    Incremental(LossConfig),
}

#[derive(Debug, Clone, Copy)]
struct FitSchedule {
    epochs: usize,
    lr: f64,
    batch_size: usize,
    poly_power: f64,
}

/// Per-image inputs kept for the whole step: pixels, the reference
/// model's features and, for incremental steps, its probabilities.
struct Cached {
    pixels: Vec<Mat>,
    ref_features: Vec<Mat>,
    old_probs: Vec<Mat>,
}

fn cache(step: &StepData, reference: &SegModel, objective: Objective) -> Result<Cached> {
    let pixels: Vec<Mat> = step.train.iter().map(|s| pixel_matrix(&s.image)).collect();
    let ref_features = pixels
        .iter()
        .map(|p| reference.features(p))
        .collect::<Result<Vec<_>>>()?;
    let old_probs = match objective {
        Objective::Ce => Vec::new(),
        Objective::Incremental(_) => ref_features
            .iter()
            .map(|f| Ok(probabilities(&reference.head.logits(f)?)))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(Cached {
        pixels,
        ref_features,
        old_probs,
    })
}

fn batch_loss_grad(
    model: &SegModel,
    cached: &Cached,
    step: &StepData,
    batch: &[usize],
    objective: Objective,
) -> Result<(f64, Option<crate::model::ModelGrad>, bool)> {
    let pixels = stack_rows(batch.iter().map(|&i| &cached.pixels[i]))?;
    let labels: Vec<usize> = batch
        .iter()
        .flat_map(|&i| step.train[i].labels.iter().copied())
        .collect();
    let trace = model.forward_trace(&pixels)?;
    let out = match objective {
        Objective::Ce => ce(&trace.logits, &labels)?,
        Objective::Incremental(cfg) => {
            let old = stack_rows(batch.iter().map(|&i| &cached.old_probs[i]))?;
            incremental_objective(&trace.logits, &labels, &old, &cfg)?
        }
    };
    let finite = out.loss.is_finite();
    let grad = if finite {
        Some(model.backward(&trace, &out.grad)?)
    } else {
        None
    };
    Ok((out.loss, grad, finite))
}

fn featsim(model: &SegModel, cached: &Cached) -> Result<MeanStd> {
    let mut all = Vec::new();
    for (p, r) in cached.pixels.iter().zip(&cached.ref_features) {
        all.extend(cosine_similarities(&model.features(p)?, r)?);
    }
    Ok(MeanStd::of(&all))
}

/// Mini-batch SGD over the step's train split. Similarity is measured
/// against `reference` (the old model, or the initial one at step 0).
fn fit(
    model: &mut SegModel,
    step: &StepData,
    reference: &Snapshot,
    objective: Objective,
    schedule: FitSchedule,
    mut order_rng: Rng,
) -> Result<Vec<EpochStats>> {
    let cached = cache(step, reference.model(), objective)?;
    let n = step.train.len();
    let natural: Vec<usize> = (0..n).collect();

    let initial: Vec<f64> = natural
        .chunks(schedule.batch_size)
        .map(|b| batch_loss_grad(model, &cached, step, b, objective).map(|r| r.0))
        .collect::<Result<_>>()?;
    let mut curve = vec![EpochStats {
        epoch: 0,
        loss: MeanStd::of(&initial),
        featsim: featsim(model, &cached)?,
    }];

    let batches_per_epoch = n.div_ceil(schedule.batch_size);
    let total = (schedule.epochs * batches_per_epoch) as f64;
    let mut order = natural;
    let mut iter = 0usize;
    for epoch in 1..=schedule.epochs {
        order_rng.shuffle(&mut order);
        let mut losses = Vec::with_capacity(batches_per_epoch);
        for batch in order.chunks(schedule.batch_size) {
            let (loss, grad, finite) = batch_loss_grad(model, &cached, step, batch, objective)?;
            if !finite {
                return Err(LabError::numeric(format!("epoch {epoch}, batch {iter}: loss {loss}")));
            }
            let lr = if schedule.poly_power > 0.0 {
                schedule.lr * (1.0 - iter as f64 / total).powf(schedule.poly_power)
            } else {
                schedule.lr
            };
            model
                .apply_grad(grad.as_ref().expect("finite loss has a gradient"), lr)
                .map_err(|e| LabError::numeric(format!("epoch {epoch}, batch {iter}: {e}")))?;
            losses.push(loss);
            iter += 1;
        }
        curve.push(EpochStats {
            epoch,
            loss: MeanStd::of(&losses),
            featsim: featsim(model, &cached)?,
        });
    }
    Ok(curve)
}

/// Confusion matrix of argmax predictions over `images`.
pub fn evaluate(model: &SegModel, images: &[StepImage], classes: usize) -> Result<ConfusionMatrix> {
    if model.head.num_classes() != classes {
        return Err(LabError::shape(format!(
            "model predicts {} classes, evaluation expects {classes}",
            model.head.num_classes()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for s in images {
        let pred = predict(model, &pixel_matrix(&s.image))?;
        cm.record_all(&s.labels, &pred)?;
    }
    Ok(cm)
}

/// Argmax class per pixel row; ties go to the lowest id.
pub fn predict(model: &SegModel, pixels: &Mat) -> Result<Vec<usize>> {
    let logits = model.logits(pixels)?;
    Ok((0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Fraction of correctly classified pixels.
pub fn pixel_accuracy(model: &SegModel, images: &[StepImage]) -> Result<f64> {
    let mut right = 0usize;
    let mut total = 0usize;
    for s in images {
        let pred = predict(model, &pixel_matrix(&s.image))?;
        right += pred.iter().zip(&s.labels).filter(|(p, l)| p == l).count();
        total += pred.len();
    }
    Ok(if total == 0 { 0.0 } else { right as f64 / total as f64 })
}

/// Per-epoch feature similarity and loss of `live` against `old`.
pub fn track_stability(live: &SegModel, old: &Snapshot, step: &StepData, lambda_kd: f64) -> Result<(MeanStd, MeanStd)> {
    let objective = if step.step == 0 {
        Objective::Ce
    } else {
        Objective::Incremental(LossConfig {
            lambda_kd,
            n_old: step.n_old,
        })
    };
    let cached = cache(step, old.model(), objective)?;
    let sim = featsim(live, &cached)?;
    let losses: Vec<f64> = (0..step.train.len())
        .map(|i| batch_loss_grad(live, &cached, step, &[i], objective).map(|r| r.0))
        .collect::<Result<_>>()?;
    Ok((sim, MeanStd::of(&losses)))
}

/// All train pixels of a step stacked, for callers that need raw batches.
pub fn step_pixels(step: &StepData) -> Result<Mat> {
    stack_pixels(step.train.iter().map(|s| s.image.as_ref()))
}
