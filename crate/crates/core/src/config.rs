//! Experiment configuration: a single TOML file, schema version 1.
//!
//! Every table is optional and falls back to the defaults below. Unknown
//! keys are rejected. After overrides are applied the config is
//! [`resolve`](ExperimentConfig::resolve)d, which fills preset-dependent
//! loss weights so the written `config.resolved` replays the run exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{AdaptConfig, Method, DEFAULT_BATCH_SIZE, DEFAULT_LR, DEFAULT_MOMENTUM};
use crate::error::{CtaError, Result};
use crate::losses::{LabelMode, LossWeights};
use crate::model::{ArchConfig, PretrainConfig, TrainScope};
use crate::prototypes::{DEFAULT_ALPHA, DEFAULT_SOURCE_CAP};
use crate::streams::{Corruption, CorruptionKind, DomainOrder, TaskConfig};

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub method: Method,
    /// Output directory of a run.
    pub out: PathBuf,
    pub task: TaskConfig,
    pub arch: ArchSection,
    pub pretrain: PretrainSection,
    pub adapt: AdaptSection,
    pub stream: StreamSection,
    pub seeds: Seeds,
}

/// Layer widths; the input width follows from the image side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Minimum clean held-out accuracy (fraction) the source model must reach.
    pub min_heldout_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub scope: TrainScope,
    pub alpha: f64,
    /// Reliability threshold as a multiple of `ln C`.
    pub entropy_factor: f64,
    /// Unset weights take the method's preset value.
    pub lambda_ema: Option<f64>,
    pub lambda_src: Option<f64>,
    pub lambda_cons: Option<f64>,
    pub soft_labels: bool,
    pub consistency: bool,
    pub filter_unsup: bool,
    /// Cap on source samples used for the source prototypes.
    pub source_cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSection {
    pub source_per_class: usize,
    pub samples_per_domain: usize,
    pub severity: u8,
    /// Corruption kinds in declared order.
    pub kinds: Vec<String>,
    pub order: DomainOrder,
    pub clean_last: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub shuffle: u64,
    pub adapt: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: CONFIG_SCHEMA,
            method: Method::TentOurs,
            out: PathBuf::from("runs/default"),
            task: TaskConfig::default(),
            arch: ArchSection::default(),
            pretrain: PretrainSection::default(),
            adapt: AdaptSection::default(),
            stream: StreamSection::default(),
            seeds: Seeds::default(),
        }
    }
}

impl Default for ArchSection {
    fn default() -> Self {
        let a = ArchConfig::default();
        Self {
            hidden: a.hidden,
            feature_dim: a.feature_dim,
        }
    }
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            epochs: p.epochs,
            lr: p.lr,
            momentum: p.momentum,
            weight_decay: p.weight_decay,
            batch_size: p.batch_size,
            min_heldout_accuracy: 0.9,
        }
    }
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            scope: TrainScope::BnAffine,
            alpha: DEFAULT_ALPHA,
            entropy_factor: 0.4,
            lambda_ema: None,
            lambda_src: None,
            lambda_cons: None,
            soft_labels: false,
            consistency: false,
            filter_unsup: false,
            source_cap: DEFAULT_SOURCE_CAP,
        }
    }
}

impl Default for StreamSection {
    fn default() -> Self {
        Self {
            source_per_class: 500,
            samples_per_domain: 2000,
            severity: 5,
            kinds: CorruptionKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            order: DomainOrder::Fixed,
            clean_last: true,
        }
    }
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> CtaError {
    CtaError::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CtaError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CtaError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CtaError::Config(e.to_string()))
    }

    /// Sets every seed to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.seeds = Seeds {
            data: seed,
            model: seed,
            shuffle: seed,
            adapt: seed,
        };
    }

    /// Checks every field; the error names the first offending key.
    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(field_err("schema", format!("unsupported version {}", self.schema)));
        }
        let t = &self.task;
        if t.classes < 2 {
            return Err(field_err("task.classes", "must be >= 2"));
        }
        if t.side < 2 {
            return Err(field_err("task.side", "must be >= 2"));
        }
        for (name, v) in [
            ("task.grating_amplitude", t.grating_amplitude),
            ("task.blob_amplitude", t.blob_amplitude),
            ("task.phase_jitter", t.phase_jitter),
            ("task.brightness_jitter", t.brightness_jitter),
            ("task.pixel_noise", t.pixel_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(field_err(name, "must be finite and >= 0"));
            }
        }
        if self.arch.feature_dim == 0 {
            return Err(field_err("arch.feature_dim", "must be positive"));
        }
        if self.arch.hidden.contains(&0) {
            return Err(field_err("arch.hidden", "widths must be positive"));
        }
        let p = &self.pretrain;
        if !(p.lr.is_finite() && p.lr > 0.0) {
            return Err(field_err("pretrain.lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&p.momentum) {
            return Err(field_err("pretrain.momentum", "must be in [0, 1)"));
        }
        if !(p.weight_decay.is_finite() && p.weight_decay >= 0.0) {
            return Err(field_err("pretrain.weight_decay", "must be finite and >= 0"));
        }
        if p.batch_size < 2 {
            return Err(field_err("pretrain.batch_size", "must be >= 2"));
        }
        if !(0.0..=1.0).contains(&p.min_heldout_accuracy) {
            return Err(field_err("pretrain.min_heldout_accuracy", "must be in [0, 1]"));
        }
        let a = &self.adapt;
        if a.batch_size < 2 {
            return Err(field_err("adapt.batch_size", "must be >= 2"));
        }
        if !(a.lr.is_finite() && a.lr > 0.0) {
            return Err(field_err("adapt.lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&a.momentum) {
            return Err(field_err("adapt.momentum", "must be in [0, 1)"));
        }
        if !(a.alpha > 0.0 && a.alpha < 1.0) {
            return Err(field_err("adapt.alpha", "must be in (0, 1)"));
        }
        if !(a.entropy_factor.is_finite() && a.entropy_factor > 0.0) {
            return Err(field_err("adapt.entropy_factor", "must be > 0"));
        }
        for (name, v) in [
            ("adapt.lambda_ema", a.lambda_ema),
            ("adapt.lambda_src", a.lambda_src),
            ("adapt.lambda_cons", a.lambda_cons),
        ] {
            if let Some(v) = v {
                if !v.is_finite() || v < 0.0 {
                    return Err(field_err(name, "must be finite and >= 0"));
                }
            }
        }
        if a.source_cap == 0 {
            return Err(field_err("adapt.source_cap", "must be positive"));
        }
        let s = &self.stream;
        if s.source_per_class == 0 {
            return Err(field_err("stream.source_per_class", "must be positive"));
        }
        if s.samples_per_domain == 0 {
            return Err(field_err("stream.samples_per_domain", "must be positive"));
        }
        if s.severity > 5 {
            return Err(field_err("stream.severity", "must be in 0..=5"));
        }
        if s.kinds.is_empty() && !s.clean_last {
            return Err(field_err("stream.kinds", "no domains: empty and clean_last = false"));
        }
        self.corruptions()?;
        Ok(())
    }

    pub fn corruptions(&self) -> Result<Vec<Corruption>> {
        self.stream
            .kinds
            .iter()
            .map(|k| {
                let kind: CorruptionKind = k.parse().map_err(|e| field_err("stream.kinds", e))?;
                Corruption::new(kind, self.stream.severity).map_err(|e| field_err("stream.severity", e))
            })
            .collect()
    }

    /// Fills preset-dependent weights.
    pub fn resolve(mut self) -> Result<Self> {
        self.validate()?;
        let w = self.method.default_weights();
        let a = &mut self.adapt;
        a.lambda_ema.get_or_insert(w.ema);
        a.lambda_src.get_or_insert(w.src);
        a.lambda_cons.get_or_insert(w.cons);
        Ok(self)
    }

    pub fn arch_config(&self) -> ArchConfig {
        ArchConfig {
            input_dim: self.task.side * self.task.side,
            hidden: self.arch.hidden.clone(),
            feature_dim: self.arch.feature_dim,
            classes: self.task.classes,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain.epochs,
            lr: self.pretrain.lr,
            momentum: self.pretrain.momentum,
            weight_decay: self.pretrain.weight_decay,
            batch_size: self.pretrain.batch_size,
            seed: self.seeds.model,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        let w = self.method.default_weights();
        LossWeights {
            ema: self.adapt.lambda_ema.unwrap_or(w.ema),
            src: self.adapt.lambda_src.unwrap_or(w.src),
            cons: self.adapt.lambda_cons.unwrap_or(w.cons),
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        let a = &self.adapt;
        AdaptConfig {
            method: self.method,
            weights: self.loss_weights(),
            alpha: a.alpha,
            entropy_threshold: a.entropy_factor * (self.task.classes as f64).ln(),
            lr: a.lr,
            momentum: a.momentum,
            scope: a.scope,
            label_mode: if a.soft_labels { LabelMode::Soft } else { LabelMode::Hard },
            filter_unsup: a.filter_unsup,
            consistency: a.consistency,
            seed: self.seeds.adapt,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn resolved_round_trip() {
        let cfg = ExperimentConfig::from_toml_str("method = \"ours-only\"\n[adapt]\nalpha = 0.99\n")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(cfg.adapt.lambda_src, Some(20.0));
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn diagnostics_name_the_field() {
        let err = ExperimentConfig::from_toml_str("[adapt]\nalpha = 1.5\n")
            .unwrap()
            .validate()
            .unwrap_err();
        assert!(err.to_string().contains("adapt.alpha"), "{err}");
        let err = ExperimentConfig::from_toml_str("[stream]\nkinds = [\"fog\"]\n")
            .unwrap()
            .validate()
            .unwrap_err();
        assert!(err.to_string().contains("stream.kinds"), "{err}");
        let err = ExperimentConfig::from_toml_str("[adapt]\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn default_threshold() {
        let a = ExperimentConfig::default().adapt_config();
        assert!((a.entropy_threshold - 0.4 * 10f64.ln()).abs() < 1e-15);
    }
}
