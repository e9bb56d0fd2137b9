//! Self-checks behind `nest-lab verify`: decomposition, matrix-init oracle,
//! gradient checks, frozen parameters, Weight Aligning and parameter cost.
//!
//! The functions under test are injected through [`Implementations`] so a
//! deliberately broken variant can be shown to fail.

use std::fmt;
use std::time::Instant;

use crate::error::Result;
use crate::losses::{unbiased_ce, unbiased_kd, LossOutput};
use crate::model::{Backbone, Head, SegModel};
use crate::nest::{
    allocate_transform, assemble_pretune_head, extra_param_count, init_importance, init_projection, pretune,
    pretune_loss_grad, random_init, similarity_init, similarity_scores, weight_align, Components, PretuneConfig,
    TransformSet,
};
use crate::numerics::{finite_diff_grad, norm, relative_error, softmax, Mat, Rng, FD_STEP};
use crate::synthdata::{build_world, step_view, PrototypeRule, Setting, TaskSequence, WorldSpec};

pub type ScoresFn = fn(&[f64], &Mat) -> Result<(Mat, Vec<f64>)>;
pub type ImportanceFn = fn(&Mat, &Mat) -> Result<Mat>;
pub type ProjectionFn = fn(&Mat) -> Result<Mat>;
pub type UnceFn = fn(&Mat, &[usize], usize) -> Result<LossOutput>;
pub type KdFn = fn(&Mat, &Mat) -> Result<LossOutput>;
pub type TransformGradFn = fn(&Mat, &[usize], &Head, &TransformSet, bool) -> Result<(f64, TransformSet)>;
pub type AlignFn = fn(&Mat, &Mat) -> Result<Mat>;
pub type CostFn = fn(usize, usize, usize) -> usize;

#[derive(Clone, Copy)]
pub struct Implementations {
    pub similarity_scores: ScoresFn,
    pub init_importance: ImportanceFn,
    pub init_projection: ProjectionFn,
    pub unbiased_ce: UnceFn,
    pub unbiased_kd: KdFn,
    pub transform_grad: TransformGradFn,
    pub weight_align: AlignFn,
    pub extra_param_count: CostFn,
}

impl Default for Implementations {
    fn default() -> Self {
        Self {
            similarity_scores,
            init_importance,
            init_projection,
            unbiased_ce,
            unbiased_kd,
            transform_grad: pretune_loss_grad,
            weight_align,
            extra_param_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{}] {}: {} ({:.2} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

pub const DECOMPOSITION_TOL: f64 = 1e-12;
pub const ORACLE_TOL: f64 = 1e-10;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const ALIGN_TOL: f64 = 1e-12;

type Check = fn(&Implementations, &mut Rng) -> (bool, String);

const CHECKS: [(&str, Check); 6] = [
    ("decomposition exactness", check_decomposition),
    ("matrix-init oracle", check_matrix_init),
    ("gradient correctness", check_gradients),
    ("frozen parameters during pre-tuning", check_frozen),
    ("weight aligning", check_weight_align),
    ("extra-parameter cost", check_cost),
];

/// Runs every check, calling `on_done` as each one finishes.
pub fn run_checks(impls: &Implementations, mut on_done: impl FnMut(&CheckOutcome)) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let started = Instant::now();
            let mut rng = Rng::derive(0x7e51f, &[i as u64]);
            let (passed, detail) = check(impls, &mut rng);
            let outcome = CheckOutcome {
                id: i + 1,
                name,
                passed,
                detail,
                seconds: started.elapsed().as_secs_f64(),
            };
            on_done(&outcome);
            outcome
        })
        .collect()
}

fn randn(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| scale * rng.normal())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn check_decomposition(impls: &Implementations, rng: &mut Rng) -> (bool, String) {
    let cases = 1000;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let d = rng.range_inclusive(1, 16);
        let n_old = rng.range_inclusive(1, 8);
        let w = randn(rng, d, n_old, 1.0);
        let p: Vec<f64> = (0..d).map(|_| 2.0 * rng.normal()).collect();
        let direct = match w
            .transpose()
            .matmul(&Mat::col_vector(&p).unwrap())
            .and_then(|z| softmax(z.data()))
        {
            Ok(s) => s,
            Err(e) => return (false, e.to_string()),
        };
        match (impls.similarity_scores)(&p, &w) {
            Ok((_, s)) => worst = worst.max(max_abs_diff(&s, &direct)),
            Err(e) => return (false, e.to_string()),
        }
    }
    (
        worst <= DECOMPOSITION_TOL,
        format!("{cases} cases, max |s − softmax(Wᵀp)| = {worst:.1e}"),
    )
}

/// Per-pixel reference: build `H_u`, its mask and score, average over pixels.
fn brute_force_importance(pixels: &Mat, w: &Mat) -> Mat {
    let (d, n_old) = w.shape();
    let mut m = Mat::zeros(d, n_old);
    for u in 0..pixels.rows() {
        let mut h = Mat::zeros(d, n_old);
        for j in 0..d {
            for k in 0..n_old {
                h.set(j, k, w.get(j, k) * pixels.get(u, j));
            }
        }
        let sums: Vec<f64> = (0..n_old).map(|k| (0..d).map(|j| h.get(j, k)).sum()).collect();
        let top = sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = sums.iter().map(|v| (v - top).exp()).collect();
        let z: f64 = exp.iter().sum();
        for j in 0..d {
            for k in 0..n_old {
                if h.get(j, k) > 0.0 {
                    m.set(j, k, m.get(j, k) + exp[k] / z);
                }
            }
        }
    }
    m.scale(1.0 / pixels.rows() as f64)
}

fn brute_force_projection(m: &Mat) -> Vec<f64> {
    let sums = m.col_sums();
    let top = sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = sums.iter().map(|v| (v - top).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.iter().map(|e| e / z).collect()
}

fn small_world(seed: u64, rng: &mut Rng) -> WorldSpec {
    WorldSpec {
        num_classes: 4,
        feature_dim: rng.range_inclusive(3, 8),
        prototype_rule: PrototypeRule::Mixture {
            beta: 0.3,
            start_class: 3,
            parents: 2,
        },
        noise_sigma: 0.35,
        height: 6,
        width: 6,
        blobs_min: 1,
        blobs_max: 3,
        images_per_class: 2,
        test_images_per_class: 1,
        seed,
    }
}

fn random_old_model(input_dim: usize, n_old: usize, rng: &mut Rng) -> SegModel {
    let width = rng.range_inclusive(2, 6);
    let backbone = Backbone::random(input_dim, &[width], rng);
    let head = Head::new(randn(rng, width, n_old, 1.0), None).expect("non-empty head");
    SegModel::new(backbone, head).expect("matching widths")
}

fn check_matrix_init(impls: &Implementations, rng: &mut Rng) -> (bool, String) {
    let worlds = 50;
    let mut worst = 0.0f64;
    for i in 0..worlds {
        let outcome = (|| -> Result<f64> {
            let spec = small_world(i, rng);
            let world = build_world(&spec)?;
            let seq = TaskSequence::identity(4, 2, 1, Setting::Overlapped)?;
            let step = step_view(&seq, &world, 1)?;
            let old = random_old_model(spec.feature_dim, step.n_old, rng);
            let w = &old.head.weights;
            let mut rows = Vec::new();
            for s in &step.train {
                let f = old.image_features(&s.image)?;
                for (u, &l) in s.labels.iter().enumerate() {
                    if l == step.n_old {
                        rows.push(f.row(u).to_vec());
                    }
                }
            }
            let pixels = Mat::from_rows(&rows)?;
            let m_ref = brute_force_importance(&pixels, w);
            let p_ref = brute_force_projection(&m_ref);
            let m = (impls.init_importance)(&pixels, w)?;
            let p = (impls.init_projection)(&m)?;
            let streamed = similarity_init(&step, &old)?;
            let c = &streamed.classes[0];
            Ok(max_abs_diff(m.data(), m_ref.data())
                .max(max_abs_diff(p.data(), &p_ref))
                .max(max_abs_diff(c.importance.data(), m_ref.data()))
                .max(max_abs_diff(c.projection.data(), &p_ref)))
        })();
        match outcome {
            Ok(e) => worst = worst.max(e),
            Err(e) => return (false, format!("world {i}: {e}")),
        }
    }
    (
        worst <= ORACLE_TOL,
        format!("{worlds} worlds, max deviation from per-pixel reference = {worst:.1e}"),
    )
}

/// Random small incremental instance whose ReLU pre-activations stay clear
/// of the kink, so central differences are valid.
struct GradInstance {
    model: SegModel,
    pixels: Mat,
    labels: Vec<usize>,
    old_probs: Mat,
    n_old: usize,
}

fn grad_instance(rng: &mut Rng) -> GradInstance {
    loop {
        let input = rng.range_inclusive(2, 8);
        let width = rng.range_inclusive(2, 8);
        let n_old = rng.range_inclusive(1, 5);
        let n_new = rng.range_inclusive(1, 3);
        let backbone = Backbone::random(input, &[width], rng);
        let classes = n_old + n_new;
        let biases = (rng.below(2) == 1).then(|| (0..classes).map(|_| rng.normal()).collect());
        let head = Head::new(randn(rng, width, classes, 1.0), biases).expect("non-empty head");
        let model = SegModel::new(backbone, head).expect("matching widths");
        let pixels = randn(rng, 16, input, 1.0);
        let trace = model.backbone.forward_trace(&pixels).expect("input width matches");
        let clear = trace
            .pre_activations()
            .iter()
            .all(|z| z.data().iter().all(|v| v.abs() > 1e-3));
        if !clear {
            continue;
        }
        let labels = (0..16)
            .map(|_| match rng.below(n_new + 1) {
                0 => 0,
                k => n_old + k - 1,
            })
            .collect();
        let mut old_probs = randn(rng, 16, n_old, 1.5);
        for r in 0..16 {
            let p = softmax(old_probs.row(r)).expect("finite logits");
            old_probs.row_mut(r).copy_from_slice(&p);
        }
        return GradInstance {
            model,
            pixels,
            labels,
            old_probs,
            n_old,
        };
    }
}

fn model_grad_error(inst: &GradInstance, loss: &dyn Fn(&Mat) -> Result<LossOutput>) -> Result<f64> {
    let trace = inst.model.forward_trace(&inst.pixels)?;
    let out = loss(&trace.logits)?;
    let analytic = inst.model.backward(&trace, &out.grad)?.flatten();
    let flat = Mat::col_vector(&inst.model.params_flat())?;
    let numeric = finite_diff_grad(
        |p| {
            let mut m = inst.model.clone();
            m.set_params_flat(p.data()).expect("same parameter count");
            m.logits(&inst.pixels)
                .and_then(|z| loss(&z))
                .map(|o| o.loss)
                .unwrap_or(f64::NAN)
        },
        &flat,
        FD_STEP,
    )?;
    Ok(relative_error(&analytic, numeric.data()))
}

fn transform_grad_error(impls: &Implementations, rng: &mut Rng) -> Result<f64> {
    let d = rng.range_inclusive(2, 8);
    let n_old = rng.range_inclusive(1, 5);
    let n_new = rng.range_inclusive(1, 3);
    let with_bias = rng.below(2) == 1;
    let biases = with_bias.then(|| (0..n_old).map(|_| rng.normal()).collect());
    let old = Head::new(randn(rng, d, n_old, 1.0), biases)?;
    let mut t = random_init(&old, n_new, rng)?;
    t.bg_importance = Mat::from_fn(d, 1, |_, _| 1.0 + 0.3 * rng.normal());
    t.bg_projection = 1.0 + 0.2 * rng.normal();
    let align = rng.below(2) == 1;
    let feats = randn(rng, 16, d, 1.0);
    let labels: Vec<usize> = (0..16)
        .map(|_| match rng.below(n_new + 1) {
            0 => 0,
            k => n_old + k - 1,
        })
        .collect();
    let (_, grad) = (impls.transform_grad)(&feats, &labels, &old, &t, align)?;
    let flat = Mat::col_vector(&t.params_flat())?;
    let numeric = finite_diff_grad(
        |p| {
            let mut probe = t.clone();
            probe.set_params_flat(p.data()).expect("same parameter count");
            (impls.transform_grad)(&feats, &labels, &old, &probe, align)
                .map(|r| r.0)
                .unwrap_or(f64::NAN)
        },
        &flat,
        FD_STEP,
    )?;
    Ok(relative_error(&grad.params_flat(), numeric.data()))
}

fn check_gradients(impls: &Implementations, rng: &mut Rng) -> (bool, String) {
    let instances = 100;
    let mut worst = [0.0f64; 3];
    for i in 0..instances {
        let inst = grad_instance(rng);
        let errors = (|| -> Result<[f64; 3]> {
            let unce = model_grad_error(&inst, &|z| (impls.unbiased_ce)(z, &inst.labels, inst.n_old))?;
            let kd = model_grad_error(&inst, &|z| (impls.unbiased_kd)(z, &inst.old_probs))?;
            Ok([unce, kd, transform_grad_error(impls, rng)?])
        })();
        match errors {
            Ok(e) => {
                for k in 0..3 {
                    // NaN compares false, so keep it visible.
                    worst[k] = if e[k].is_nan() { f64::NAN } else { worst[k].max(e[k]) };
                }
            }
            Err(e) => return (false, format!("instance {i}: {e}")),
        }
    }
    let passed = worst.iter().all(|e| *e < GRADIENT_TOL);
    (
        passed,
        format!(
            "{instances} instances, max relative error: L_unce {:.1e}, L_unkd {:.1e}, transform {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn check_frozen(_impls: &Implementations, rng: &mut Rng) -> (bool, String) {
    let outcome = (|| -> Result<(bool, usize)> {
        let spec = small_world(1, rng);
        let world = build_world(&spec)?;
        let seq = TaskSequence::identity(4, 2, 1, Setting::Overlapped)?;
        let step = step_view(&seq, &world, 1)?;
        let old = random_old_model(spec.feature_dim, step.n_old, rng);
        let before: Vec<u64> = old.params_flat().iter().map(|v| v.to_bits()).collect();
        let cfg = PretuneConfig {
            epochs: 3,
            ..PretuneConfig::default()
        };
        let init = similarity_init(&step, &old)?;
        let tuned = pretune(&step, &old, init.clone(), &cfg, Components::Both, rng)?;
        let after: Vec<u64> = old.params_flat().iter().map(|v| v.to_bits()).collect();
        let head = assemble_pretune_head(&old.head, &tuned.transform)?;
        let mut same = before == after;
        for k in 1..step.n_old {
            let a = head.weights.column(k);
            let b = old.head.weights.column(k);
            same &= a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
        }
        let moved = tuned.transform.params_flat() != init.params_flat();
        Ok((same && moved, before.len()))
    })();
    match outcome {
        Ok((ok, n)) => (
            ok,
            format!("{n} backbone and head scalars and every old column compared bit for bit"),
        ),
        Err(e) => (false, e.to_string()),
    }
}

fn check_weight_align(impls: &Implementations, rng: &mut Rng) -> (bool, String) {
    let cases = 200;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let d = rng.range_inclusive(1, 16);
        let (n_old, old_scale) = (rng.range_inclusive(1, 8), rng.uniform(0.1, 10.0));
        let old = randn(rng, d, n_old, old_scale);
        let (n_new, new_scale) = (rng.range_inclusive(1, 4), rng.uniform(0.1, 10.0));
        let new = randn(rng, d, n_new, new_scale);
        let mean = |m: &Mat| (0..m.cols()).map(|c| norm(&m.column(c))).sum::<f64>() / m.cols() as f64;
        match (impls.weight_align)(&old, &new) {
            Ok(aligned) => worst = worst.max((mean(&aligned) - mean(&old)).abs()),
            Err(e) => return (false, e.to_string()),
        }
    }
    (
        worst <= ALIGN_TOL,
        format!("{cases} cases, max |Mean(Norm_new) − Mean(Norm_old)| = {worst:.1e}"),
    )
}

fn check_cost(impls: &Implementations, rng: &mut Rng) -> (bool, String) {
    let headline = (impls.extra_param_count)(1, 20, 256);
    let mut mismatches = 0;
    for _ in 0..20 {
        let (n_new, n_old, d) = (
            rng.range_inclusive(1, 10),
            rng.range_inclusive(1, 30),
            rng.range_inclusive(1, 64),
        );
        let t = allocate_transform(n_new, n_old, d, true);
        let expected = (impls.extra_param_count)(n_new, n_old, d);
        if t.param_count() != expected || t.params_flat().len() != expected {
            mismatches += 1;
        }
    }
    (
        headline == 5398 && mismatches == 0,
        format!("extra_param_count(1, 20, 256) = {headline}; {mismatches} of 20 allocations disagree"),
    )
}
