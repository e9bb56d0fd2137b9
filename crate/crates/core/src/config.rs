//! Experiment configuration: one JSON document, unknown keys rejected.
//!
//! ```json
//! {
//!   "world":    { "num_classes": 10, "seed": 0, ... },
//!   "sequence": { "base": 6, "increment": 1, "setting": "overlapped" },
//!   "strategy": "nest:similarity:both",
//!   "pretune":  { "epochs": 5, "lr": 1.0, "batch_size": 8, "weight_align": true },
//!   "train":    { "epochs": 15, "lr": 0.005, "lambda_kd": 10.0, ... },
//!   "report":   { "run_id": "s6-1" },
//!   "ablation": { "strategies": ["background", "nest"], "seeds": 5 }
//! }
//! ```
//!
//! Every section and field is optional; missing ones take the S6-1 defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::nest::PretuneConfig;
use crate::numerics::Rng;
use crate::strategies::InitStrategy;
use crate::synthdata::{Setting, TaskSequence, WorldSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub base: usize,
    pub increment: usize,
    pub setting: Setting,
    /// Explicit learning order of world classes `1..=K`.
    pub class_order: Option<Vec<usize>>,
    /// Draws a random order when `class_order` is absent.
    pub order_seed: Option<u64>,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            base: 6,
            increment: 1,
            setting: Setting::Overlapped,
            class_order: None,
            order_seed: None,
        }
    }
}

impl SequenceConfig {
    pub fn build(&self, num_classes: usize) -> Result<TaskSequence> {
        if self.class_order.is_some() && self.order_seed.is_some() {
            return Err(LabError::config(
                "sequence.order_seed",
                "give either class_order or order_seed, not both",
            ));
        }
        let order = match (&self.class_order, self.order_seed) {
            (Some(order), _) => order.clone(),
            (None, Some(seed)) => {
                let mut order: Vec<usize> = (1..=num_classes).collect();
                Rng::derive(seed, &[STREAM_CLASS_ORDER]).shuffle(&mut order);
                order
            }
            (None, None) => (1..=num_classes).collect(),
        };
        TaskSequence::new(order, self.base, self.increment, self.setting)
    }
}

pub const STREAM_CLASS_ORDER: u64 = 0x0c1a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_epochs: usize,
    pub base_lr: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda_kd: f64,
    pub fix_old_classifiers: bool,
    /// `lr·(1 − iter/total)^power`; 0 keeps the rate constant.
    pub poly_power: f64,
    pub seed: u64,
    pub backbone_widths: Vec<usize>,
    pub head_bias: bool,
    /// Deploy NeST's pre-tuned background classifier in the formal head.
    pub use_pretuned_bg: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_epochs: 30,
            base_lr: 0.5,
            epochs: 15,
            lr: 0.005,
            batch_size: 8,
            lambda_kd: 10.0,
            fix_old_classifiers: false,
            poly_power: 0.0,
            seed: 0,
            backbone_widths: vec![16],
            head_bias: false,
            use_pretuned_bg: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (path, v) in [
            ("train.base_lr", self.base_lr),
            ("train.lr", self.lr),
            ("train.lambda_kd", self.lambda_kd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LabError::config(path, format!("must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            return Err(LabError::config("train.poly_power", "must be >= 0"));
        }
        if self.epochs < 1 {
            return Err(LabError::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(LabError::config("train.batch_size", "must be >= 1"));
        }
        if self.backbone_widths.contains(&0) {
            return Err(LabError::config("train.backbone_widths", "layer widths must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub run_id: String,
    /// Fill `wall_seconds`; off keeps result files reproducible byte for byte.
    pub timing: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub strategies: Vec<InitStrategy>,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldSpec,
    pub sequence: SequenceConfig,
    pub strategy: StrategyField,
    pub pretune: PretuneConfig,
    pub train: TrainConfig,
    pub report: ReportConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationConfig>,
}

/// `InitStrategy` with NeST as the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StrategyField(pub InitStrategy);

impl Default for StrategyField {
    fn default() -> Self {
        Self(InitStrategy::NEST)
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.sequence.build(self.world.num_classes)?;
        self.pretune.validate()?;
        self.train.validate()?;
        if self.report.run_id.is_empty() || self.report.run_id.contains([',', '"', '\n', '\r']) {
            return Err(LabError::config(
                "report.run_id",
                "must be non-empty and free of commas, quotes and newlines",
            ));
        }
        if let Some(a) = &self.ablation {
            if a.strategies.is_empty() {
                return Err(LabError::config("ablation.strategies", "list at least one strategy"));
            }
            if a.seeds < 1 {
                return Err(LabError::config("ablation.seeds", "must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn strategy(&self) -> InitStrategy {
        self.strategy.0
    }

    pub fn sequence(&self) -> Result<TaskSequence> {
        self.sequence.build(self.world.num_classes)
    }

    /// Config for seed offset `s` of an ablation: world and training seeds
    /// both shift by `s`.
    pub fn with_seed_offset(&self, strategy: InitStrategy, s: u64) -> Self {
        let mut cfg = self.clone();
        cfg.strategy = StrategyField(strategy);
        cfg.world.seed = self.world.seed.wrapping_add(s);
        cfg.train.seed = self.train.seed.wrapping_add(s);
        cfg.ablation = None;
        cfg
    }

    /// Fully resolved config, pretty-printed; loads back to the same value.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn from_json(source: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(source)
            .map_err(|e| LabError::config(format!("{origin}:{}:{}", e.line(), e.column()), e.to_string()))?;
        cfg.validate().map_err(|e| anchor(e, source, origin))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let source = std::fs::read_to_string(path)
            .map_err(|e| LabError::config(path.display().to_string(), format!("cannot read: {e}")))?;
        Self::from_json(&source, &path.display().to_string())
    }
}

/// Prefixes a validation error's key path with the line that holds the key.
fn anchor(err: LabError, source: &str, origin: &str) -> LabError {
    match err {
        LabError::Config { path, message } => {
            let line = key_line(source, &path).unwrap_or(1);
            LabError::Config {
                path: format!("{origin}:{line}: {path}"),
                message,
            }
        }
        other => other,
    }
}

/// Line of the last key of a dotted path, searched in nesting order.
pub fn key_line(source: &str, path: &str) -> Option<usize> {
    let mut at = 0;
    let mut found = None;
    for key in path.split('.') {
        let needle = format!("\"{key}\"");
        match source[at..].find(&needle) {
            Some(pos) => {
                at += pos;
                found = Some(at);
                at += needle.len();
            }
            None => break,
        }
    }
    found.map(|pos| source[..pos].matches('\n').count() + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_the_benchmark() {
        let cfg = ExperimentConfig::from_json("{}", "t.json").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.strategy(), InitStrategy::NEST);
        assert_eq!(cfg.sequence().unwrap().num_steps(), 5);
    }

    #[test]
    fn echo_round_trips() {
        let src = r#"{"strategy": "two_stage", "train": {"epochs": 3, "head_bias": true},
                      "ablation": {"strategies": ["random", "nest:random:both"], "seeds": 2}}"#;
        let cfg = ExperimentConfig::from_json(src, "t.json").unwrap();
        let again = ExperimentConfig::from_json(&cfg.to_json(), "echo.json").unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.to_json(), again.to_json());
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let src = "{\n  \"train\": {\n    \"epoch\": 3\n  }\n}";
        match ExperimentConfig::from_json(src, "t.json") {
            Err(LabError::Config { path, message }) => {
                assert!(path.starts_with("t.json:3:"), "{path}");
                assert!(message.contains("epoch"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::from_json("{\"worlds\": {}}", "t.json").is_err());
    }

    #[test]
    fn semantic_errors_point_at_the_key() {
        let src = "{\n  \"train\": {\n    \"lr\": 0.1\n  },\n  \"pretune\": {\n    \"epochs\": 0\n  }\n}";
        match ExperimentConfig::from_json(src, "t.json") {
            Err(LabError::Config { path, .. }) => assert_eq!(path, "t.json:6: pretune.epochs"),
            other => panic!("{other:?}"),
        }
        let bad_strategy = "{\"strategy\": \"nest:foo\"}";
        assert!(ExperimentConfig::from_json(bad_strategy, "t.json").is_err());
    }

    #[test]
    fn class_orders() {
        let seq = SequenceConfig {
            order_seed: Some(3),
            ..SequenceConfig::default()
        };
        let a = seq.build(10).unwrap();
        assert_eq!(a, seq.build(10).unwrap());
        assert_ne!(a.class_order, (1..=10).collect::<Vec<_>>());
        let both = SequenceConfig {
            class_order: Some((1..=10).collect()),
            order_seed: Some(1),
            ..SequenceConfig::default()
        };
        assert!(both.build(10).is_err());
    }

    #[test]
    fn seed_offsets_shift_world_and_training() {
        let cfg = ExperimentConfig::default();
        let s = cfg.with_seed_offset(InitStrategy::Random, 3);
        assert_eq!((s.world.seed, s.train.seed), (3, 3));
        assert_eq!(s.strategy(), InitStrategy::Random);
    }
}
