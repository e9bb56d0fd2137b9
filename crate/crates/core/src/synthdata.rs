//! Synthetic per-pixel segmentation worlds and incremental step views.
//!
//! A world holds one unit-norm prototype per class (index 0 is background)
//! and two image pools. Every pixel feature is drawn from `N(μ_label, σ²I)`;
//! the image layout (rectangular blobs over background) only decides which
//! pixels carry which label. Step views relabel pixels outside the current
//! task to background, which is what produces background shift.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{norm, Rng};

const STREAM_PROTOTYPES: u64 = 0x5052_4f54;
const STREAM_TRAIN: u64 = 0x5452_4149;
const STREAM_TEST: u64 = 0x5445_5354;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PrototypeRule {
    /// Every prototype is an independent random unit vector.
    Independent,
    /// Classes `start_class..=K` mix `parents` earlier prototypes with random
    /// convex weights, then add a unit-norm noise direction with weight `beta`.
    Mixture {
        beta: f64,
        start_class: usize,
        parents: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub prototype_rule: PrototypeRule,
    pub noise_sigma: f64,
    pub height: usize,
    pub width: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    pub images_per_class: usize,
    pub test_images_per_class: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    /// The S6-1 benchmark world.
    fn default() -> Self {
        Self {
            num_classes: 10,
            feature_dim: 16,
            prototype_rule: PrototypeRule::Mixture {
                beta: 0.3,
                start_class: 7,
                parents: 2,
            },
            noise_sigma: 0.35,
            height: 16,
            width: 16,
            blobs_min: 1,
            blobs_max: 3,
            images_per_class: 24,
            test_images_per_class: 6,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(LabError::config(format!("world.{field}"), msg));
        if self.num_classes < 2 {
            return err(
                "num_classes",
                format!("need at least 2 classes, got {}", self.num_classes),
            );
        }
        if self.feature_dim < 2 {
            return err(
                "feature_dim",
                format!("need at least 2 dimensions, got {}", self.feature_dim),
            );
        }
        if self.height < 4 {
            return err(
                "height",
                format!("images must be at least 4 pixels high, got {}", self.height),
            );
        }
        if self.width < 4 {
            return err(
                "width",
                format!("images must be at least 4 pixels wide, got {}", self.width),
            );
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return err("noise_sigma", format!("must be positive, got {}", self.noise_sigma));
        }
        if self.blobs_min < 1 || self.blobs_min > self.blobs_max {
            return err(
                "blobs_min",
                format!(
                    "need 1 <= blobs_min <= blobs_max, got [{}, {}]",
                    self.blobs_min, self.blobs_max
                ),
            );
        }
        if self.images_per_class == 0 {
            return err("images_per_class", "must be positive".into());
        }
        if let PrototypeRule::Mixture {
            beta,
            start_class,
            parents,
        } = &self.prototype_rule
        {
            if !(0.0..=1.0).contains(beta) {
                return err("prototype_rule.beta", format!("must lie in [0, 1], got {beta}"));
            }
            if *start_class < 2 || *start_class > self.num_classes {
                return err(
                    "prototype_rule.start_class",
                    format!("must lie in 2..={}, got {start_class}", self.num_classes),
                );
            }
            if *parents < 1 {
                return err("prototype_rule.parents", "must be at least 1".into());
            }
        }
        Ok(())
    }
}

/// One image: pixel-major features (`height·width·dim`) and full labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl LabeledImage {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn classes_present(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        let n = self.pixel_count();
        if self.features.len() != n * self.dim || self.labels.len() != n {
            return Err(LabError::data(format!(
                "image buffers do not match {}x{}x{}",
                self.height, self.width, self.dim
            )));
        }
        if let Some(l) = self.labels.iter().find(|l| **l > num_classes) {
            return Err(LabError::data(format!("label {l} exceeds K={num_classes}")));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(LabError::data("non-finite feature value"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    /// `prototypes[0]` is background, `prototypes[c]` is class `c`.
    pub prototypes: Vec<Vec<f64>>,
    /// For mixture classes: the `(parent, weight)` pairs that produced them.
    pub mixtures: Vec<Vec<(usize, f64)>>,
    pub train: Vec<Arc<LabeledImage>>,
    pub test: Vec<Arc<LabeledImage>>,
}

fn random_unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `normalize((1 − β) Σ w_k μ_k + β ξ)` for unit noise `ξ`.
pub fn mix_prototype(parents: &[(&[f64], f64)], noise: &[f64], beta: f64) -> Result<Vec<f64>> {
    let dim = noise.len();
    let mut v = vec![0.0; dim];
    for (proto, w) in parents {
        if proto.len() != dim {
            return Err(LabError::shape("mixture parent dimension mismatch"));
        }
        for (o, p) in v.iter_mut().zip(proto.iter()) {
            *o += (1.0 - beta) * w * p;
        }
    }
    for (o, e) in v.iter_mut().zip(noise) {
        *o += beta * e;
    }
    let n = norm(&v);
    if n < 1e-12 {
        return Err(LabError::numeric("mixture prototype collapsed to zero"));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

fn build_prototypes(spec: &WorldSpec) -> Result<(Vec<Vec<f64>>, Vec<Vec<(usize, f64)>>)> {
    let mut rng = Rng::derive(spec.seed, &[STREAM_PROTOTYPES]);
    let k = spec.num_classes;
    let mut protos = Vec::with_capacity(k + 1);
    let mut mixtures = vec![Vec::new(); k + 1];
    protos.push(random_unit(&mut rng, spec.feature_dim));
    for c in 1..=k {
        let noise = random_unit(&mut rng, spec.feature_dim);
        let proto = match &spec.prototype_rule {
            PrototypeRule::Mixture {
                beta,
                start_class,
                parents,
            } if c >= *start_class => {
                let mut pool: Vec<usize> = (1..c).collect();
                rng.shuffle(&mut pool);
                pool.truncate((*parents).min(c - 1));
                pool.sort_unstable();
                let raw: Vec<f64> = pool.iter().map(|_| 0.1 + rng.next_f64()).collect();
                let total: f64 = raw.iter().sum();
                let weights: Vec<(usize, f64)> = pool.iter().zip(&raw).map(|(p, w)| (*p, w / total)).collect();
                let parents: Vec<(&[f64], f64)> = weights.iter().map(|(p, w)| (protos[*p].as_slice(), *w)).collect();
                let mixed = mix_prototype(&parents, &noise, *beta)?;
                mixtures[c] = weights;
                mixed
            }
            _ => noise,
        };
        protos.push(proto);
    }
    Ok((protos, mixtures))
}

fn render_image(spec: &WorldSpec, protos: &[Vec<f64>], anchor: usize, rng: &mut Rng) -> LabeledImage {
    let (h, w, d) = (spec.height, spec.width, spec.feature_dim);
    let mut labels = vec![0usize; h * w];
    let blobs = rng.range_inclusive(spec.blobs_min, spec.blobs_max);
    for b in 0..blobs {
        // Anchor blob is drawn last so it is never fully overwritten.
        let class = if b + 1 == blobs {
            anchor
        } else {
            rng.range_inclusive(1, spec.num_classes)
        };
        let bh = rng.range_inclusive(2, (h / 2).max(2));
        let bw = rng.range_inclusive(2, (w / 2).max(2));
        let top = rng.range_inclusive(0, h - bh);
        let left = rng.range_inclusive(0, w - bw);
        for r in top..top + bh {
            for c in left..left + bw {
                labels[r * w + c] = class;
            }
        }
    }
    let mut features = Vec::with_capacity(h * w * d);
    for label in &labels {
        let mu = &protos[*label];
        features.extend(mu.iter().map(|m| m + spec.noise_sigma * rng.normal()));
    }
    LabeledImage {
        height: h,
        width: w,
        dim: d,
        features,
        labels,
    }
}

fn render_pool(spec: &WorldSpec, protos: &[Vec<f64>], per_class: usize, stream: u64) -> Vec<Arc<LabeledImage>> {
    let mut rng = Rng::derive(spec.seed, &[stream]);
    let mut pool = Vec::with_capacity(per_class * spec.num_classes);
    for anchor in 1..=spec.num_classes {
        for _ in 0..per_class {
            pool.push(Arc::new(render_image(spec, protos, anchor, &mut rng)));
        }
    }
    pool
}

/// Builds the prototypes and both image pools; deterministic in `spec.seed`.
pub fn build_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let (prototypes, mixtures) = build_prototypes(spec)?;
    let train = render_pool(spec, &prototypes, spec.images_per_class, STREAM_TRAIN);
    let test = render_pool(spec, &prototypes, spec.test_images_per_class, STREAM_TEST);
    Ok(World {
        spec: spec.clone(),
        prototypes,
        mixtures,
        train,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Overlapped,
    Disjoint,
}

/// An `X-Y` task sequence over a fixed class order.
///
/// Classes are renumbered by learning order: the `i`-th class of
/// `class_order` gets model id `i + 1`. All step views speak model ids, so
/// the classes of step `t` occupy a contiguous block right after the old ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub class_order: Vec<usize>,
    pub base: usize,
    pub increment: usize,
    pub setting: Setting,
}

impl TaskSequence {
    pub fn new(class_order: Vec<usize>, base: usize, increment: usize, setting: Setting) -> Result<Self> {
        let k = class_order.len();
        let mut sorted = class_order.clone();
        sorted.sort_unstable();
        if sorted != (1..=k).collect::<Vec<_>>() {
            return Err(LabError::config(
                "sequence.class_order",
                format!("not a permutation of 1..={k}"),
            ));
        }
        if base == 0 || base > k {
            return Err(LabError::config(
                "sequence.base",
                format!("must lie in 1..={k}, got {base}"),
            ));
        }
        let rest = k - base;
        if rest > 0 && (increment == 0 || rest % increment != 0) {
            return Err(LabError::config(
                "sequence.increment",
                format!("{base} + k·{increment} never reaches {k}"),
            ));
        }
        Ok(Self {
            class_order,
            base,
            increment,
            setting,
        })
    }

    pub fn identity(k: usize, base: usize, increment: usize, setting: Setting) -> Result<Self> {
        Self::new((1..=k).collect(), base, increment, setting)
    }

    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    pub fn num_steps(&self) -> usize {
        let rest = self.num_classes() - self.base;
        if rest == 0 {
            1
        } else {
            1 + rest / self.increment
        }
    }

    /// Model ids learned at step `t`.
    pub fn step_classes(&self, t: usize) -> std::ops::Range<usize> {
        if t == 0 {
            1..self.base + 1
        } else {
            let start = self.base + (t - 1) * self.increment + 1;
            start..start + self.increment
        }
    }

    /// `n_old` at step `t`: background plus every class of earlier steps.
    pub fn n_old(&self, t: usize) -> usize {
        self.step_classes(t).start
    }

    /// Number of foreground classes seen once step `t` is done.
    pub fn n_seen(&self, t: usize) -> usize {
        self.step_classes(t).end - 1
    }

    /// Maps world class ids (0 = background) to model ids.
    pub fn model_id_table(&self) -> Vec<usize> {
        let mut table = vec![0; self.num_classes() + 1];
        for (i, c) in self.class_order.iter().enumerate() {
            table[*c] = i + 1;
        }
        table
    }
}

/// An image as seen at one step, labels in model ids.
#[derive(Debug, Clone, PartialEq)]
pub struct StepImage {
    pub image: Arc<LabeledImage>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepData {
    pub step: usize,
    pub classes: std::ops::Range<usize>,
    pub n_old: usize,
    pub n_seen: usize,
    pub train: Vec<StepImage>,
    pub test: Vec<StepImage>,
}

impl StepData {
    pub fn train_pixel_count(&self) -> usize {
        self.train.iter().map(|s| s.labels.len()).sum()
    }
}

/// Relabels the world for step `t` of `seq`.
///
/// Train images must contain at least one pixel of the step's classes. The
/// disjoint protocol additionally drops any image holding a future class.
/// Test images keep every full label of a class seen so far and map the rest
/// to background.
pub fn step_view(seq: &TaskSequence, world: &World, t: usize) -> Result<StepData> {
    if seq.num_classes() != world.spec.num_classes {
        return Err(LabError::config(
            "sequence.class_order",
            format!(
                "sequence covers {} classes, world has {}",
                seq.num_classes(),
                world.spec.num_classes
            ),
        ));
    }
    if t >= seq.num_steps() {
        return Err(LabError::config(
            "sequence",
            format!("step {t} outside 0..{}", seq.num_steps()),
        ));
    }
    let table = seq.model_id_table();
    let current = seq.step_classes(t);
    let n_seen = seq.n_seen(t);

    let mut train = Vec::new();
    for image in &world.train {
        let ids: Vec<usize> = image.labels.iter().map(|l| table[*l]).collect();
        if !ids.iter().any(|l| current.contains(l)) {
            continue;
        }
        if seq.setting == Setting::Disjoint && ids.iter().any(|l| *l > n_seen) {
            continue;
        }
        let labels = ids
            .into_iter()
            .map(|l| if current.contains(&l) { l } else { 0 })
            .collect();
        train.push(StepImage {
            image: Arc::clone(image),
            labels,
        });
    }
    if train.is_empty() {
        return Err(LabError::data(format!(
            "step {t} ({:?}) has no training images for classes {current:?}",
            seq.setting
        )));
    }

    let test = world
        .test
        .iter()
        .map(|image| StepImage {
            image: Arc::clone(image),
            labels: image
                .labels
                .iter()
                .map(|l| {
                    let id = table[*l];
                    if id <= n_seen {
                        id
                    } else {
                        0
                    }
                })
                .collect(),
        })
        .collect();

    Ok(StepData {
        step: t,
        n_old: current.start,
        classes: current,
        n_seen,
        train,
        test,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format: String,
    version: u32,
    spec: WorldSpec,
    prototypes: Vec<Vec<f64>>,
    mixtures: Vec<Vec<(usize, f64)>>,
    train_images: usize,
    test_images: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    split: String,
    #[serde(flatten)]
    image: LabeledImage,
}

const DATASET_FORMAT: &str = "nest-lab-dataset";

/// Writes the world as JSON lines: one header, then one record per image.
pub fn save_world(world: &World, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: 1,
        spec: world.spec.clone(),
        prototypes: world.prototypes.clone(),
        mixtures: world.mixtures.clone(),
        train_images: world.train.len(),
        test_images: world.test.len(),
    };
    let to_io = |e: serde_json::Error| LabError::Io(e.to_string());
    serde_json::to_writer(&mut out, &header).map_err(to_io)?;
    out.write_all(b"\n")?;
    for (split, pool) in [("train", &world.train), ("test", &world.test)] {
        for image in pool {
            let record = ImageRecord {
                split: split.into(),
                image: (**image).clone(),
            };
            serde_json::to_writer(&mut out, &record).map_err(to_io)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_world(path: &Path) -> Result<World> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let bad = |line: usize, e: serde_json::Error| LabError::data(format!("{}:{line}: {e}", path.display()));
    let first = lines.next().ok_or_else(|| LabError::data("empty dataset file"))??;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| bad(1, e))?;
    if header.format != DATASET_FORMAT || header.version != 1 {
        return Err(LabError::data(format!(
            "unsupported dataset format {} v{}",
            header.format, header.version
        )));
    }
    header.spec.validate()?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(&line).map_err(|e| bad(i + 2, e))?;
        record.image.validate(header.spec.num_classes)?;
        match record.split.as_str() {
            "train" => train.push(Arc::new(record.image)),
            "test" => test.push(Arc::new(record.image)),
            other => return Err(LabError::data(format!("line {}: unknown split {other:?}", i + 2))),
        }
    }
    if train.len() != header.train_images || test.len() != header.test_images {
        return Err(LabError::data("image count does not match header"));
    }
    Ok(World {
        spec: header.spec,
        prototypes: header.prototypes,
        mixtures: header.mixtures,
        train,
        test,
    })
}
