use serde::{Deserialize, Serialize};

use crate::autodiff::AdamWConfig;
use crate::contrast::{ContrastConfig, LogBase};
use crate::encoder::EncoderConfig;
use crate::prompt::{EntPosition, PromptOptions};

use super::TrainError;

/// Flat run configuration; every field may be omitted from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub lambda_f: f64,
    pub lambda_c: f64,
    /// Hold the log-sum-exp normalizer constant in the contrastive gradient.
    pub detach_normalizer: bool,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub ent_position: EntPosition,
    pub use_type_rich: bool,
    pub use_descriptions: bool,
    pub threshold: f64,
    /// Add ancestors of predicted types at decode time.
    pub closure: bool,
    pub weight_decay: f64,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            tau: 0.1,
            lambda_f: 0.002,
            lambda_c: 0.001,
            detach_normalizer: false,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            ent_position: EntPosition::BeforePrompt,
            use_type_rich: true,
            use_descriptions: true,
            threshold: 0.5,
            closure: false,
            weight_decay: 0.01,
            dim: 64,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 128,
            dropout: 0.1,
            max_len: 64,
            min_count: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.lambda_f >= 0.0 && self.lambda_c >= 0.0) {
            return bad("lambda_f and lambda_c must be non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.max_len < 16 {
            return bad("max_len must be at least 16");
        }
        if self.min_count < 1 {
            return bad("min_count must be at least 1");
        }
        self.encoder_config(1)
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            max_len: self.max_len,
            dim: self.dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            dropout_rate: self.dropout,
            seed: self.seed,
        }
    }

    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            tau: self.tau,
            lambda_f: self.lambda_f,
            lambda_c: self.lambda_c,
            log_base: LogBase::Natural,
            detach_normalizer: self.detach_normalizer,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn prompt_options(&self) -> PromptOptions {
        PromptOptions {
            ent_position: self.ent_position,
            max_len: self.max_len,
        }
    }

    pub fn contrast_active(&self) -> bool {
        self.lambda_f > 0.0 || self.lambda_c > 0.0
    }
}
