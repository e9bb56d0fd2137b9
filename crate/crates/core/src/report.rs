//! CSV reports: per-step results, per-epoch curves and ablation tables.
//!
//! All files use `,` separators, `.` decimals, `\n` line endings and always
//! carry a header. Missing values (e.g. `miou_new` at step 0) are empty.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::metrics::MeanStd;
use crate::trainer::RunResult;

pub const RESULTS_FILE: &str = "results.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const CONFIG_ECHO_FILE: &str = "config.echo.json";

/// One row per (run, step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub strategy: String,
    pub seed: u64,
    pub step: usize,
    pub miou_base: Option<f64>,
    pub miou_new: Option<f64>,
    pub miou_all: Option<f64>,
    pub wall_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub run_id: String,
    pub step: usize,
    pub epoch: usize,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub featsim_mean: f64,
    pub featsim_std: f64,
}

/// Final-step statistics of one strategy across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    pub miou_base_mean: Option<f64>,
    pub miou_base_std: Option<f64>,
    pub miou_new_mean: Option<f64>,
    pub miou_new_std: Option<f64>,
    pub miou_all_mean: Option<f64>,
    pub miou_all_std: Option<f64>,
}

/// `wall_seconds` stays empty unless `timing` is set, so default reports
/// are reproducible byte for byte.
pub fn result_rows(run: &RunResult, timing: bool) -> Vec<ReportRow> {
    run.steps
        .iter()
        .map(|s| ReportRow {
            run_id: run.run_id.clone(),
            strategy: run.strategy.to_string(),
            seed: run.seed,
            step: s.step,
            miou_base: s.miou_base,
            miou_new: s.miou_new,
            miou_all: s.miou_all,
            wall_seconds: timing.then_some(s.wall_seconds),
        })
        .collect()
}

pub fn curve_rows(run: &RunResult) -> Vec<CurveRow> {
    run.steps
        .iter()
        .flat_map(|s| {
            s.curve.iter().map(|e| CurveRow {
                run_id: run.run_id.clone(),
                step: s.step,
                epoch: e.epoch,
                loss_mean: e.loss.mean,
                loss_std: e.loss.std,
                featsim_mean: e.featsim.mean,
                featsim_std: e.featsim.std,
            })
        })
        .collect()
}

/// Groups runs by strategy (first-seen order) and aggregates the last step.
pub fn ablation_rows(rows: &[ReportRow]) -> Vec<AblationRow> {
    let mut last: BTreeMap<&str, &ReportRow> = BTreeMap::new();
    for r in rows {
        let slot = last.entry(r.run_id.as_str()).or_insert(r);
        if r.step > slot.step {
            *slot = r;
        }
    }
    let mut order: Vec<&str> = Vec::new();
    let mut finals: BTreeMap<&str, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        if !finals.contains_key(r.strategy.as_str()) {
            order.push(&r.strategy);
        }
        let group = finals.entry(&r.strategy).or_default();
        if std::ptr::eq(last[r.run_id.as_str()], r) {
            group.push(r);
        }
    }
    order
        .into_iter()
        .map(|strategy| {
            let group = &finals[strategy];
            let stat = |f: fn(&ReportRow) -> Option<f64>| {
                let values: Vec<f64> = group.iter().filter_map(|r| f(r)).collect();
                (!values.is_empty()).then(|| MeanStd::of(&values))
            };
            let base = stat(|r| r.miou_base);
            let new = stat(|r| r.miou_new);
            let all = stat(|r| r.miou_all);
            AblationRow {
                strategy: strategy.to_string(),
                miou_base_mean: base.map(|s| s.mean),
                miou_base_std: base.map(|s| s.std),
                miou_new_mean: new.map(|s| s.mean),
                miou_new_std: new.map(|s| s.std),
                miou_all_mean: all.map(|s| s.mean),
                miou_all_std: all.map(|s| s.std),
            }
        })
        .collect()
}

/// Header-first CSV text of `rows`; the header is written even when empty.
pub fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| LabError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| LabError::data(e.to_string()))
}

pub fn from_csv<T: DeserializeOwned>(text: &str, header: &[&str], origin: &str) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let found = r.headers().map_err(|e| LabError::data(format!("{origin}: {e}")))?;
    if found.iter().ne(header.iter().copied()) {
        return Err(LabError::data(format!(
            "{origin}: header is `{}`, expected `{}`",
            found.iter().collect::<Vec<_>>().join(","),
            header.join(",")
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| LabError::data(format!("{origin}: {e}"))))
        .collect()
}

fn csv_err(e: csv::Error) -> LabError {
    LabError::Io(e.to_string())
}

pub const RESULTS_HEADER: &[&str] = &[
    "run_id",
    "strategy",
    "seed",
    "step",
    "miou_base",
    "miou_new",
    "miou_all",
    "wall_seconds",
];
pub const CURVES_HEADER: &[&str] = &[
    "run_id",
    "step",
    "epoch",
    "loss_mean",
    "loss_std",
    "featsim_mean",
    "featsim_std",
];
pub const ABLATION_HEADER: &[&str] = &[
    "strategy",
    "miou_base_mean",
    "miou_base_std",
    "miou_new_mean",
    "miou_new_std",
    "miou_all_mean",
    "miou_all_std",
];

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents).map_err(|e| LabError::Io(format!("{}: {e}", dir.join(name).display())))
}
