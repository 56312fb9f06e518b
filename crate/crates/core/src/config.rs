//! Flat JSON run configuration. Missing keys take the published defaults;
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{SolverConfig, LR14_FEATURES};
use crate::error::{Error, Result};
use crate::eval::AnchorRule;
use crate::neural::{DropoutRates, PlateauConfig, RmsPropConfig};
use crate::trainer::ModelKind;
use crate::trial::{Outcome, SegmentConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model kind trained by default.
    pub kind: ModelKind,
    pub hidden_sizes: Vec<usize>,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub patience: usize,
    pub reduce_rate: f64,
    pub max_reductions: usize,
    pub dropout: f64,
    pub recurrent_dropout: f64,
    pub l2: f64,
    pub rmsprop_rho: f64,
    pub rmsprop_epsilon: f64,
    pub forget_bias: f64,
    /// Hard cap on fine-tuning epochs; the schedule normally stops first.
    pub max_epochs: usize,
    pub pretext_epochs: usize,
    /// Replication factor for the perseverated kinds.
    pub perseveration: usize,
    pub freeze_transferred: bool,

    pub lr14_lambda: f64,
    pub lr14_alpha: f64,
    pub lr517_lambda: f64,
    pub lr517_alpha: f64,
    pub lr14_features: Vec<String>,
    pub solver_tolerance: f64,
    pub solver_max_iterations: usize,

    pub split_ratios: [f64; 3],
    pub split_seed: u64,
    /// Fine-tune seed of single models.
    pub seed: u64,
    /// Pretext seed of single transfer-learning models and the simple ensemble.
    pub pretext_seed: u64,
    pub pretext_seeds: Vec<u64>,
    pub finetune_seeds: Vec<u64>,
    /// Pretext checkpoint to transfer from instead of training one.
    pub tl_source: Option<String>,
    pub workers: usize,

    pub died_in_window: Outcome,
    pub anchor_rule: AnchorRule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::LstmPersTl,
            hidden_sizes: vec![128, 256, 128],
            batch_size: 12,
            initial_lr: 9.6e-4,
            patience: 10,
            reduce_rate: 0.9,
            max_reductions: 8,
            dropout: 0.35,
            recurrent_dropout: 0.2,
            l2: 1e-4,
            rmsprop_rho: 0.9,
            rmsprop_epsilon: 1e-7,
            forget_bias: 1.0,
            max_epochs: 300,
            pretext_epochs: 20,
            perseveration: 3,
            freeze_transferred: false,
            lr14_lambda: 0.75,
            lr14_alpha: 0.5,
            lr517_lambda: 1.15e-3,
            lr517_alpha: 0.2,
            lr14_features: LR14_FEATURES.iter().map(|s| s.to_string()).collect(),
            solver_tolerance: 1e-6,
            solver_max_iterations: 100_000,
            split_ratios: [341.0 / 637.0, 138.0 / 637.0, 158.0 / 637.0],
            split_seed: 0,
            seed: 1,
            pretext_seed: 101,
            pretext_seeds: vec![101, 102, 103, 104],
            finetune_seeds: vec![1, 2, 3, 4, 5],
            tl_source: None,
            workers: 1,
            died_in_window: Outcome::Censored,
            anchor_rule: AnchorRule::LastAtOrBefore,
        }
    }
}

fn bad(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            bad(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("config serializes"),
        ))
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(bad(
                "hidden_sizes",
                "need at least one layer, all sizes positive",
            ));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("perseveration", self.perseveration),
            ("workers", self.workers),
        ] {
            if v == 0 {
                return Err(bad(name, "must be at least 1"));
            }
        }
        for (name, v) in [
            ("initial_lr", self.initial_lr),
            ("rmsprop_epsilon", self.rmsprop_epsilon),
            ("solver_tolerance", self.solver_tolerance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(name, format!("must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("reduce_rate", self.reduce_rate),
            ("rmsprop_rho", self.rmsprop_rho),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(bad(name, format!("must lie in (0, 1), got {v}")));
            }
        }
        for (name, v) in [
            ("dropout", self.dropout),
            ("recurrent_dropout", self.recurrent_dropout),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(bad(name, format!("must lie in [0, 1), got {v}")));
            }
        }
        for (name, v) in [
            ("l2", self.l2),
            ("lr14_lambda", self.lr14_lambda),
            ("lr517_lambda", self.lr517_lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(name, format!("must be non-negative, got {v}")));
            }
        }
        for (name, v) in [
            ("lr14_alpha", self.lr14_alpha),
            ("lr517_alpha", self.lr517_alpha),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        let sum: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(bad(
                "split_ratios",
                format!(
                    "must be non-negative and sum to 1, got {:?}",
                    self.split_ratios
                ),
            ));
        }
        if self.lr14_features.is_empty() {
            return Err(bad("lr14_features", "must not be empty"));
        }
        if let AnchorRule::Nearest { window } = self.anchor_rule {
            if !(window >= 0.0) {
                return Err(bad("anchor_rule.window", "must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn segment(&self) -> SegmentConfig {
        SegmentConfig {
            died_in_window: self.died_in_window,
            ..SegmentConfig::default()
        }
    }

    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            initial_lr: self.initial_lr,
            patience: self.patience,
            factor: self.reduce_rate,
            max_reductions: self.max_reductions,
        }
    }

    pub fn rmsprop(&self) -> RmsPropConfig {
        RmsPropConfig {
            rho: self.rmsprop_rho,
            epsilon: self.rmsprop_epsilon,
        }
    }

    pub fn dropout_rates(&self) -> DropoutRates {
        DropoutRates {
            input: self.dropout,
            recurrent: self.recurrent_dropout,
        }
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            tolerance: self.solver_tolerance,
            max_iterations: self.solver_max_iterations,
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::from_json_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_gives_defaults() {
        let c = RunConfig::from_json_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.initial_lr, 9.6e-4);
        assert_eq!(c.batch_size, 12);
        assert_eq!(c.hidden_sizes, vec![128, 256, 128]);
    }

    #[test]
    fn bad_reduce_rate_names_field() {
        match RunConfig::from_json_str(r#"{"reduce_rate": 1.5}"#) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "reduce_rate"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_error_names_field() {
        match RunConfig::from_json_str(r#"{"hidden_sizes": [16, "x"]}"#) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "hidden_sizes[1]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            RunConfig::from_json_str(r#"{"learning_rate": 1}"#),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.hidden_sizes = vec![16, 32, 16];
        c.anchor_rule = AnchorRule::Nearest { window: 15.0 };
        let back = RunConfig::from_json_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }
}
