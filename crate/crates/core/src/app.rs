//! The CLI verbs as library functions: every command reads a config,
//! writes its files and reports failures as [`LabError`]s that map onto
//! exit codes through [`exit_code`].

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::config::{AblationConfig, ExperimentConfig};
use crate::error::{LabError, Result};
use crate::report::{
    ablation_rows, curve_rows, from_csv, result_rows, to_csv, write_file, CurveRow, ReportRow, ABLATION_FILE,
    ABLATION_HEADER, CONFIG_ECHO_FILE, CURVES_FILE, CURVES_HEADER, RESULTS_FILE, RESULTS_HEADER,
};
use crate::synthdata::{build_world, save_world, World};
use crate::trainer::{Experiment, RunResult};
use crate::verify::{run_checks, CheckOutcome, Implementations};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const THREADS_ENV: &str = "NEST_LAB_THREADS";

pub fn exit_code(err: &LabError) -> i32 {
    match err {
        LabError::Config { .. } => EXIT_CONFIG,
        LabError::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

/// Builds the world of a config and stores it at `out`.
pub fn cmd_gen_data(config: &Path, out: &Path) -> Result<World> {
    let cfg = ExperimentConfig::load(config)?;
    let world = build_world(&cfg.world)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_world(&world, out)?;
    Ok(world)
}

/// One experiment; writes results, curves and the resolved config to `out`.
pub fn cmd_run(config: &Path, out: &Path) -> Result<RunResult> {
    let cfg = ExperimentConfig::load(config)?;
    let run = Experiment::new(cfg.clone())?.run()?;
    write_runs(&cfg, std::slice::from_ref(&run), out)?;
    Ok(run)
}

/// Strategy × seed sweep; also writes the aggregated `ablation.csv`.
pub fn cmd_ablate(config: &Path, out: &Path) -> Result<Vec<RunResult>> {
    let cfg = ExperimentConfig::load(config)?;
    let runs = run_ablation(&cfg, threads_from_env()?)?;
    write_runs(&cfg, &runs, out)?;
    let rows: Vec<ReportRow> = runs.iter().flat_map(|r| result_rows(r, cfg.report.timing)).collect();
    write_file(out, ABLATION_FILE, &to_csv(&ablation_rows(&rows), ABLATION_HEADER)?)?;
    Ok(runs)
}

fn write_runs(cfg: &ExperimentConfig, runs: &[RunResult], out: &Path) -> Result<()> {
    let results: Vec<ReportRow> = runs.iter().flat_map(|r| result_rows(r, cfg.report.timing)).collect();
    let curves: Vec<CurveRow> = runs.iter().flat_map(curve_rows).collect();
    write_file(out, RESULTS_FILE, &to_csv(&results, RESULTS_HEADER)?)?;
    write_file(out, CURVES_FILE, &to_csv(&curves, CURVES_HEADER)?)?;
    write_file(out, CONFIG_ECHO_FILE, &cfg.to_json())
}

/// `NEST_LAB_THREADS`, if set, caps sweep parallelism.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(LabError::config(
                THREADS_ENV,
                format!("expected a positive integer, got `{v}`"),
            )),
        },
    }
}

/// Runs the sweep of `cfg.ablation`, or the single configured strategy when
/// the section is absent. Strategies of one seed share the world and the
/// base step; results come back ordered by strategy, then seed.
pub fn run_ablation(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let plan = cfg.ablation.clone().unwrap_or(AblationConfig {
        strategies: vec![cfg.strategy()],
        seeds: 1,
    });
    let single = plan.strategies.len() == 1 && plan.seeds == 1;
    let per_seed = |s: usize| -> Result<Vec<RunResult>> {
        let seed_cfg = cfg.with_seed_offset(cfg.strategy(), s as u64);
        let world = Arc::new(build_world(&seed_cfg.world)?);
        let base = Experiment::with_world(seed_cfg.clone(), world.clone())?.train_base_step()?;
        plan.strategies
            .iter()
            .map(|&strategy| {
                let mut run_cfg = cfg.with_seed_offset(strategy, s as u64);
                if !single {
                    run_cfg.report.run_id = format!("{}-{strategy}-seed{s}", cfg.report.run_id);
                }
                Experiment::with_world(run_cfg, world.clone())?.run_from_base(base.clone())
            })
            .collect()
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| LabError::Io(e.to_string()))?;
    let by_seed: Vec<Vec<RunResult>> =
        pool.install(|| (0..plan.seeds).into_par_iter().map(per_seed).collect::<Result<_>>())?;
    let mut runs = Vec::with_capacity(plan.seeds * plan.strategies.len());
    for k in 0..plan.strategies.len() {
        runs.extend(by_seed.iter().map(|seed_runs| seed_runs[k].clone()));
    }
    Ok(runs)
}

/// Merges `results.csv` (and `curves.csv` when present) of several output
/// directories and writes the combined files plus `ablation.csv`.
pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<Vec<ReportRow>> {
    if inputs.is_empty() {
        return Err(LabError::config("report", "give at least one run directory"));
    }
    let mut results: Vec<ReportRow> = Vec::new();
    let mut curves: Vec<CurveRow> = Vec::new();
    let mut seen = BTreeSet::new();
    for dir in inputs {
        let path = dir.join(RESULTS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
        for row in from_csv::<ReportRow>(&text, RESULTS_HEADER, &path.display().to_string())? {
            if !seen.insert((row.run_id.clone(), row.step)) {
                return Err(LabError::data(format!(
                    "{}: run `{}` step {} appears in more than one input",
                    path.display(),
                    row.run_id,
                    row.step
                )));
            }
            results.push(row);
        }
        let curve_path = dir.join(CURVES_FILE);
        if curve_path.exists() {
            let text = std::fs::read_to_string(&curve_path)?;
            curves.extend(from_csv::<CurveRow>(
                &text,
                CURVES_HEADER,
                &curve_path.display().to_string(),
            )?);
        }
    }
    write_file(out, RESULTS_FILE, &to_csv(&results, RESULTS_HEADER)?)?;
    write_file(out, CURVES_FILE, &to_csv(&curves, CURVES_HEADER)?)?;
    write_file(out, ABLATION_FILE, &to_csv(&ablation_rows(&results), ABLATION_HEADER)?)?;
    Ok(results)
}

/// Runs the self-checks, printing one line per check; true iff all pass.
pub fn cmd_verify(impls: &Implementations, out: &mut impl Write) -> Result<(bool, Vec<CheckOutcome>)> {
    let mut io_err = None;
    let outcomes = run_checks(impls, |c| {
        if let Err(e) = writeln!(out, "{c}") {
            io_err.get_or_insert(e);
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let failed: Vec<&str> = outcomes.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        writeln!(out, "all {} checks passed", outcomes.len())?;
    } else {
        writeln!(out, "failed: {}", failed.join(", "))?;
    }
    Ok((failed.is_empty(), outcomes))
}
