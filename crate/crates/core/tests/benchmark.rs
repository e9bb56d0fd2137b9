//! End-to-end behaviour of the S6-1 benchmark and its variants.

use std::sync::Arc;

use nest_lab::app::run_ablation;
use nest_lab::config::{AblationConfig, ExperimentConfig};
use nest_lab::strategies::InitStrategy;
use nest_lab::synthdata::{build_world, Setting};
use nest_lab::trainer::{pixel_accuracy, Experiment, RunResult};

fn without_timing(mut r: RunResult) -> RunResult {
    r.steps.iter_mut().for_each(|s| s.wall_seconds = 0.0);
    r
}

#[test]
fn base_step_fits_the_training_split() {
    for seed in [0, 1] {
        let cfg = ExperimentConfig::default().with_seed_offset(InitStrategy::NEST, seed);
        let exp = Experiment::new(cfg).unwrap();
        let (model, _) = exp.train_base_step().unwrap();
        let acc = pixel_accuracy(&model, &exp.step_data(0).unwrap().train).unwrap();
        assert!(acc > 0.9, "seed {seed}: train accuracy {acc}");
    }
}

#[test]
fn nest_run_reports_every_step() {
    let exp = Experiment::new(ExperimentConfig::default()).unwrap();
    let run = exp.run().unwrap();
    assert_eq!(run.steps.len(), 5);
    for (t, s) in run.steps.iter().enumerate() {
        assert_eq!(s.step, t);
        assert_eq!(s.ious.len(), 6 + t + 1);
        assert_eq!(s.miou_new.is_some(), t > 0);
        assert_eq!(s.curve.len(), if t == 0 { 31 } else { 16 });
        assert!(s
            .curve
            .iter()
            .all(|e| e.loss.mean.is_finite() && (0.0..=1.0 + 1e-12).contains(&e.featsim.mean)));
    }
    assert_eq!(run.steps[1].pretune_losses.len(), 5);
    assert!(run.steps[0].pretune_losses.is_empty());
}

#[test]
fn sweeps_share_worlds_and_base_steps_exactly() {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = 3;
    cfg.ablation = Some(AblationConfig {
        strategies: vec![InitStrategy::BackgroundCopy, InitStrategy::NEST],
        seeds: 2,
    });
    let runs = run_ablation(&cfg, Some(1)).unwrap();
    assert_eq!(runs.len(), 4);
    let expected: Vec<(InitStrategy, u64)> = vec![
        (InitStrategy::BackgroundCopy, 0),
        (InitStrategy::BackgroundCopy, 1),
        (InitStrategy::NEST, 0),
        (InitStrategy::NEST, 1),
    ];
    for (run, (strategy, seed)) in runs.iter().zip(expected) {
        assert_eq!((run.strategy, run.seed), (strategy, seed));
        let mut alone_cfg = cfg.with_seed_offset(strategy, seed);
        alone_cfg.report.run_id = run.run_id.clone();
        let alone = Experiment::new(alone_cfg).unwrap().run().unwrap();
        assert_eq!(without_timing(run.clone()), without_timing(alone));
    }
}

#[test]
fn five_class_orders_complete_and_differ() {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = 3;
    let world = Arc::new(build_world(&cfg.world).unwrap());
    let mut finals = Vec::new();
    for order_seed in 0..5u64 {
        let mut c = cfg.clone();
        c.sequence.order_seed = Some(order_seed);
        let exp = Experiment::with_world(c, world.clone()).unwrap();
        let run = exp.run().unwrap();
        assert_eq!(run.steps.len(), 5);
        assert_eq!(run.class_order, exp.sequence.class_order);
        finals.push((run.class_order.clone(), run.final_step().miou_all.unwrap()));
    }
    for i in 0..5 {
        for j in i + 1..5 {
            assert_ne!(finals[i].0, finals[j].0);
        }
    }
    assert!(finals.iter().any(|f| (f.1 - finals[0].1).abs() > 1e-9));
}

#[test]
fn disjoint_setting_runs() {
    let mut cfg = ExperimentConfig::default();
    cfg.sequence.setting = Setting::Disjoint;
    cfg.train.epochs = 2;
    let run = Experiment::new(cfg).unwrap().run().unwrap();
    assert_eq!(run.steps.len(), 5);
    assert!(run.final_step().miou_all.unwrap() > 0.0);
}

#[test]
fn every_strategy_runs_with_biases_and_fixed_old_classifiers() {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = 2;
    cfg.train.head_bias = true;
    cfg.train.fix_old_classifiers = true;
    let world = Arc::new(build_world(&cfg.world).unwrap());
    let base = Experiment::with_world(cfg.clone(), world.clone())
        .unwrap()
        .train_base_step()
        .unwrap();
    for s in [
        "random",
        "background",
        "two_stage",
        "nest",
        "nest:random:both",
        "nest:similarity:importance_only",
        "nest:similarity:projection_only",
    ] {
        let mut c = cfg.clone();
        c.strategy.0 = s.parse().unwrap();
        let run = Experiment::with_world(c, world.clone())
            .unwrap()
            .run_from_base(base.clone())
            .unwrap();
        assert!(run.final_step().miou_all.unwrap().is_finite(), "{s}");
    }
}
