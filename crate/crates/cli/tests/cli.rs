use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_nest-lab");

/// Four classes, two base classes, two single-class steps; runs in well
/// under a second.
const SMALL: &str = r#"{
  "world": {
    "num_classes": 4,
    "feature_dim": 8,
    "height": 8,
    "width": 8,
    "images_per_class": 6,
    "test_images_per_class": 2,
    "prototype_rule": { "kind": "mixture", "beta": 0.3, "start_class": 3, "parents": 2 }
  },
  "sequence": { "base": 2, "increment": 1 },
  "train": { "base_epochs": 4, "epochs": 2 },
  "pretune": { "epochs": 2 }
}"#;

fn nest_lab(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("NEST_LAB_THREADS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_results_curves_and_echo() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.json", SMALL);
    let o = nest_lab(&["run", "c.json", "--out", "a"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let results = read(tmp.path(), "a/results.csv");
    let lines: Vec<&str> = results.lines().collect();
    assert_eq!(
        lines[0],
        "run_id,strategy,seed,step,miou_base,miou_new,miou_all,wall_seconds"
    );
    assert_eq!(lines.len(), 1 + 3);
    assert!(lines[1].starts_with("run,nest:similarity:both,0,0,"));
    assert!(lines[1].contains(",,"), "step 0 has no new classes: {}", lines[1]);
    let curves = read(tmp.path(), "a/curves.csv");
    assert!(curves.starts_with("run_id,step,epoch,loss_mean,loss_std,featsim_mean,featsim_std\n"));
    // base: epochs 0..=4, then 0..=2 for each incremental step
    assert_eq!(curves.lines().count(), 1 + 5 + 3 + 3);
    assert!(!results.contains('\r') && !curves.contains('\r'));
    let echo = read(tmp.path(), "a/config.echo.json");
    assert!(echo.contains("\"images_per_class\": 6") && echo.contains("\"lambda_kd\": 10.0"));
}

#[test]
fn repeated_runs_and_echoed_configs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.json", SMALL);
    for out in ["a", "b"] {
        assert!(nest_lab(&["run", "c.json", "-o", out], tmp.path()).status.success());
    }
    assert!(nest_lab(&["run", "a/config.echo.json", "-o", "echo"], tmp.path())
        .status
        .success());
    for file in ["results.csv", "curves.csv", "config.echo.json"] {
        let a = read(tmp.path(), &format!("a/{file}"));
        assert_eq!(a, read(tmp.path(), &format!("b/{file}")), "{file}");
        assert_eq!(a, read(tmp.path(), &format!("echo/{file}")), "{file}");
    }
}

#[test]
fn single_step_config_gives_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "c.json",
        &SMALL.replace(r#""base": 2, "increment": 1"#, r#""base": 4, "increment": 1"#),
    );
    let o = nest_lab(&["run", "c.json"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(tmp.path(), "out/results.csv").lines().count(), 2);
}

#[test]
fn config_errors_exit_2_with_a_line() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "typo.json", "{\n  \"train\": {\n    \"epoch\": 3\n  }\n}\n");
    let o = nest_lab(&["run", "typo.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("typo.json:3:"), "{}", stderr(&o));

    write(
        tmp.path(),
        "range.json",
        "{\n  \"pretune\": {\n    \"epochs\": 0\n  }\n}\n",
    );
    let o = nest_lab(&["run", "range.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("range.json:3: pretune.epochs"), "{}", stderr(&o));

    let o = nest_lab(&["run", "missing.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "c.json",
        &SMALL.replace(r#""base_epochs": 4"#, r#""base_epochs": 4, "base_lr": 1e200"#),
    );
    let o = nest_lab(&["run", "c.json"], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("numeric error"));
}

#[test]
fn ablate_runs_the_cross_product_and_aggregates() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SMALL.replacen(
        '{',
        r#"{ "ablation": { "strategies": ["background", "nest"], "seeds": 2 },"#,
        1,
    );
    write(tmp.path(), "c.json", &cfg);
    let o = nest_lab(&["ablate", "c.json", "-o", "sweep"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let results = read(tmp.path(), "sweep/results.csv");
    assert_eq!(results.lines().count(), 1 + 4 * 3);
    assert!(results.contains("\nrun-background-seed1,background,1,2,"));
    let table = read(tmp.path(), "sweep/ablation.csv");
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(
        rows[0],
        "strategy,miou_base_mean,miou_base_std,miou_new_mean,miou_new_std,miou_all_mean,miou_all_std"
    );
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("background,") && rows[2].starts_with("nest:similarity:both,"));

    // A capped thread pool changes nothing.
    let capped = Command::new(BIN)
        .args(["ablate", "c.json", "-o", "capped"])
        .current_dir(tmp.path())
        .env("NEST_LAB_THREADS", "1")
        .output()
        .unwrap();
    assert!(capped.status.success());
    assert_eq!(results, read(tmp.path(), "capped/results.csv"));

    let bad = Command::new(BIN)
        .args(["ablate", "c.json", "-o", "bad"])
        .current_dir(tmp.path())
        .env("NEST_LAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn ablate_without_a_sweep_matches_run() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.json", SMALL);
    assert!(nest_lab(&["run", "c.json", "-o", "run"], tmp.path()).status.success());
    assert!(nest_lab(&["ablate", "c.json", "-o", "ablate"], tmp.path())
        .status
        .success());
    assert_eq!(
        read(tmp.path(), "run/results.csv"),
        read(tmp.path(), "ablate/results.csv")
    );
    assert_eq!(
        read(tmp.path(), "run/curves.csv"),
        read(tmp.path(), "ablate/curves.csv")
    );
}

#[test]
fn report_merges_run_directories() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "a.json",
        &SMALL.replacen('{', r#"{ "report": { "run_id": "a" }, "strategy": "random","#, 1),
    );
    write(
        tmp.path(),
        "b.json",
        &SMALL.replacen('{', r#"{ "report": { "run_id": "b" },"#, 1),
    );
    assert!(nest_lab(&["run", "a.json", "-o", "ra"], tmp.path()).status.success());
    assert!(nest_lab(&["run", "b.json", "-o", "rb"], tmp.path()).status.success());
    let o = nest_lab(&["report", "ra", "rb", "-o", "merged"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let merged = read(tmp.path(), "merged/results.csv");
    assert_eq!(merged.lines().count(), 1 + 6);
    let a = read(tmp.path(), "ra/curves.csv");
    let b = read(tmp.path(), "rb/curves.csv");
    assert_eq!(
        read(tmp.path(), "merged/curves.csv").lines().count(),
        a.lines().count() + b.lines().count() - 1
    );
    assert_eq!(read(tmp.path(), "merged/ablation.csv").lines().count(), 3);

    let dup = nest_lab(&["report", "ra", "ra"], tmp.path());
    assert_eq!(dup.status.code(), Some(1));
}

#[test]
fn gen_data_writes_a_loadable_world() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.json", SMALL);
    let o = nest_lab(&["gen-data", "c.json", "-o", "data/world.jsonl"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let world = nest_lab::synthdata::load_world(&tmp.path().join("data/world.jsonl")).unwrap();
    assert_eq!(world.spec.num_classes, 4);
    assert_eq!(world.train.len(), 4 * 6);
    assert!(String::from_utf8_lossy(&o.stdout).contains("4 classes"));
}

#[test]
fn verify_passes_every_check() {
    let tmp = tempfile::tempdir().unwrap();
    let o = nest_lab(&["verify"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS [")).count(), 6);
    assert!(out.contains("all 6 checks passed"));
}
