//! Run configuration shared by every command. Loaded from JSON; every field
//! is optional and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compressor::PlanOptions;
use crate::lm::{LayerKind, TrainOptions, TransformerConfig};
use crate::pruner::{LambdaSchedule, Penalty, PruneConfig};
use crate::reparam::{AdapterConfig, ReparamConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub target_layer_kinds: Vec<LayerKind>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = TransformerConfig::desk(1);
        Self {
            n_layers: d.n_layers,
            d_model: d.d_model,
            n_heads: d.n_heads,
            d_ff: d.d_ff,
            max_seq_len: d.max_seq_len,
            target_layer_kinds: d.target_layer_kinds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self { steps: t.steps, batch_size: t.batch_size, lr: t.lr }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrunerConfig {
    pub lambda0: f64,
    pub factor: f64,
    pub every: usize,
    pub penalty: Penalty,
    pub lr: f64,
    pub r_stop: f64,
    pub post_tune_steps: usize,
    pub score_freeze_step: Option<usize>,
    pub max_steps: usize,
    pub batch_size: usize,
}

impl Default for PrunerConfig {
    fn default() -> Self {
        let p = PruneConfig::default();
        Self {
            lambda0: p.schedule.lambda0,
            factor: p.schedule.factor,
            every: p.schedule.every,
            penalty: p.penalty,
            lr: p.lr,
            r_stop: p.r_stop,
            post_tune_steps: p.post_tune_steps,
            score_freeze_step: p.score_freeze_step,
            max_steps: p.max_steps,
            batch_size: p.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Validation tokens used for perplexity; all of them when unset.
    pub max_tokens: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batch_size: 16, max_tokens: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pruner: PrunerConfig,
    pub adapter: AdapterConfig,
    pub mask_scale: f64,
    pub sweep_ratios: Vec<f64>,
    pub eval: EvalConfig,
    pub reset_rule: bool,
    pub count_adapters: bool,
    pub merge_adapters: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("data/shakespeare.txt"),
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pruner: PrunerConfig::default(),
            adapter: AdapterConfig::default(),
            mask_scale: ReparamConfig::default().mask_scale,
            sweep_ratios: vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4],
            eval: EvalConfig::default(),
            reset_rule: true,
            count_adapters: false,
            merge_adapters: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let config: Self = serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        self.transformer_config(1).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.prune_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return invalid("train.batch_size and train.lr must be positive".into());
        }
        if self.eval.batch_size == 0 {
            return invalid("eval.batch_size must be positive".into());
        }
        if !(self.mask_scale > 0.0) {
            return invalid(format!("mask_scale {} must be positive", self.mask_scale));
        }
        if !(0.0..1.0).contains(&self.adapter.dropout) || !self.adapter.alpha.is_finite() {
            return invalid(format!("adapter dropout {} outside [0, 1)", self.adapter.dropout));
        }
        if let Some(r) = self.sweep_ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return invalid(format!("sweep ratio {r} outside (0, 1]"));
        }
        Ok(())
    }

    pub fn transformer_config(&self, vocab_size: usize) -> TransformerConfig {
        let m = &self.model;
        TransformerConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            max_seq_len: m.max_seq_len,
            vocab_size,
            target_layer_kinds: m.target_layer_kinds.clone(),
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions { steps: self.train.steps, batch_size: self.train.batch_size, lr: self.train.lr, seed: self.seed }
    }

    pub fn prune_config(&self) -> PruneConfig {
        let p = &self.pruner;
        PruneConfig {
            lr: p.lr,
            schedule: LambdaSchedule { lambda0: p.lambda0, factor: p.factor, every: p.every },
            penalty: p.penalty,
            r_stop: p.r_stop,
            post_tune_steps: p.post_tune_steps,
            max_steps: p.max_steps,
            score_freeze_step: p.score_freeze_step,
            count_adapters: self.count_adapters,
            batch_size: p.batch_size,
            seq_len: self.model.max_seq_len,
            seed: self.seed,
        }
    }

    pub fn reparam_config(&self) -> ReparamConfig {
        ReparamConfig { adapter: self.adapter.clone(), mask_scale: self.mask_scale, seed: self.seed }
    }

    pub fn plan_options(&self) -> PlanOptions {
        PlanOptions { reset_rule: self.reset_rule, count_adapters: self.count_adapters }
    }
}
