//! Flat experiment configuration.
//!
//! Configs are TOML files with a fixed set of keys; unknown keys are hard
//! errors so a mistyped hyperparameter can never pass silently. Every run
//! artifact (metrics, checkpoints) embeds a snapshot of its config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to parse config: {0}")]
    Parse(String),
    #[error("failed to serialize config: {0}")]
    Serialize(String),
    #[error("invalid config value for {key}: {reason}")]
    Invalid { key: &'static str, reason: String },
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
}

/// Every knob of one experiment. Field names are the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Number of classes K.
    pub classes: usize,
    /// Number of domains N (one federated client per domain unless
    /// `clients_per_domain` > 1).
    pub domains: usize,
    /// Learnable tokens per prompt L (each prompt block is K x L x D).
    pub prompt_tokens: usize,
    /// Token embedding dimension D (must equal `embed_dim` for modulation).
    pub token_dim: usize,
    /// Shared image/text feature dimension.
    pub embed_dim: usize,
    /// ETF prototype space dimension M (>= max(classes, domains)).
    pub etf_dim: usize,
    /// Fixed class-text tokens appended after the prompts.
    pub text_tokens: usize,
    /// Softmax temperature for every cosine logit.
    pub tau: f64,
    /// Weight of the semantic alignment term in the global prompt objective.
    pub lambda: f64,
    /// Weight of the domain alignment term in the local prompt objective.
    pub eta: f64,
    /// Federated communication rounds.
    pub rounds: usize,
    /// Local epochs for transformation-network training per round.
    pub transform_epochs: usize,
    /// Local epochs for prompt training per round.
    pub prompt_epochs: usize,
    pub batch_size: usize,
    pub transform_lr: f64,
    pub prompt_lr: f64,
    pub seed: u64,
    /// Train share of each (domain, class) stratum.
    pub train_fraction: f64,
    /// Sub-clients per domain (label-skew mode when > 1).
    pub clients_per_domain: usize,
    /// Dirichlet concentration for the label split across sub-clients.
    pub dirichlet_alpha: Option<f64>,
    /// Ablation toggle: keep a per-client domain prompt.
    pub personalized_prompt: bool,
    /// Ablation toggle: semantic ETF alignment (trains the semantic net and
    /// adds the alignment term to the global prompt objective).
    pub semantic_align: bool,
    /// Ablation toggle: domain ETF alignment.
    pub domain_align: bool,
    /// Sample-count-weighted aggregation instead of the plain mean.
    pub weighted_aggregation: bool,
    /// Write a checkpoint every this many rounds.
    pub checkpoint_every: Option<usize>,
    /// Embedding container to train on; synthetic data when absent.
    pub data_path: Option<String>,
    /// Synthetic generator: raw feature dimension.
    pub raw_dim: usize,
    /// Synthetic generator: samples per (domain, class).
    pub samples_per_class: usize,
    pub prototype_scale: f64,
    pub domain_shift: f64,
    pub noise_sigma: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            classes: 7,
            domains: 4,
            prompt_tokens: 4,
            token_dim: 16,
            embed_dim: 16,
            etf_dim: 16,
            text_tokens: 4,
            tau: 0.07,
            lambda: 1.0,
            eta: 1.0,
            rounds: 30,
            transform_epochs: 1,
            prompt_epochs: 1,
            batch_size: 64,
            transform_lr: 0.05,
            prompt_lr: 0.1,
            seed: 0,
            train_fraction: 0.8,
            clients_per_domain: 1,
            dirichlet_alpha: None,
            personalized_prompt: true,
            semantic_align: true,
            domain_align: true,
            weighted_aggregation: false,
            checkpoint_every: None,
            data_path: None,
            raw_dim: 32,
            samples_per_class: 28,
            prototype_scale: 1.0,
            domain_shift: 2.0,
            noise_sigma: 0.25,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults: the whole run finishes in seconds.
    pub fn desk_scale() -> Self {
        Self::default()
    }

    /// Larger preset echoing common published settings (16 prompt tokens,
    /// 100 rounds, lr 0.001); feature dimensions stay desk-sized.
    pub fn paper_scale() -> Self {
        Self {
            prompt_tokens: 16,
            rounds: 100,
            batch_size: 64,
            transform_lr: 0.001,
            prompt_lr: 0.001,
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Serialize(e.to_string()))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// The synthetic generator settings implied by this config.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.classes,
            num_domains: self.domains,
            raw_dim: self.raw_dim,
            samples_per_class: self.samples_per_class,
            prototype_scale: self.prototype_scale,
            domain_shift: self.domain_shift,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    /// Total client count (domains x sub-clients).
    pub fn num_clients(&self) -> usize {
        self.domains * self.clients_per_domain
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn positive(key: &'static str, v: f64) -> Result<(), ConfigError> {
            if v > 0.0 {
                Ok(())
            } else {
                Err(ConfigError::Invalid {
                    key,
                    reason: format!("must be positive, got {v}"),
                })
            }
        }
        if self.classes < 2 {
            return Err(ConfigError::Invalid {
                key: "classes",
                reason: "need at least 2 classes".to_string(),
            });
        }
        if self.domains == 0 {
            return Err(ConfigError::Invalid {
                key: "domains",
                reason: "need at least 1 domain".to_string(),
            });
        }
        for (key, v) in [
            ("prompt_tokens", self.prompt_tokens),
            ("token_dim", self.token_dim),
            ("embed_dim", self.embed_dim),
            ("etf_dim", self.etf_dim),
            ("text_tokens", self.text_tokens),
            ("batch_size", self.batch_size),
            ("clients_per_domain", self.clients_per_domain),
            ("raw_dim", self.raw_dim),
            ("samples_per_class", self.samples_per_class),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid {
                    key,
                    reason: "must be positive".to_string(),
                });
            }
        }
        positive("tau", self.tau)?;
        positive("transform_lr", self.transform_lr)?;
        positive("prompt_lr", self.prompt_lr)?;
        if self.lambda < 0.0 || self.eta < 0.0 {
            return Err(ConfigError::Invalid {
                key: "lambda",
                reason: "loss weights must be non-negative".to_string(),
            });
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(ConfigError::Invalid {
                key: "train_fraction",
                reason: format!(
                    "must lie strictly between 0 and 1, got {}",
                    self.train_fraction
                ),
            });
        }
        if self.token_dim != self.embed_dim {
            return Err(ConfigError::Invalid {
                key: "token_dim",
                reason: format!(
                    "token_dim ({}) must equal embed_dim ({}) so the mean embedding can modulate prompt tokens elementwise",
                    self.token_dim, self.embed_dim
                ),
            });
        }
        if self.etf_dim < self.classes {
            return Err(ConfigError::Invalid {
                key: "etf_dim",
                reason: format!(
                    "must be at least the class count ({} < {})",
                    self.etf_dim, self.classes
                ),
            });
        }
        if self.domains >= 2 && self.etf_dim < self.domains {
            return Err(ConfigError::Invalid {
                key: "etf_dim",
                reason: format!(
                    "must be at least the domain count ({} < {})",
                    self.etf_dim, self.domains
                ),
            });
        }
        if self.domain_align && self.domains < 2 {
            return Err(ConfigError::Invalid {
                key: "domain_align",
                reason: "domain alignment needs at least 2 domains".to_string(),
            });
        }
        if let Some(alpha) = self.dirichlet_alpha {
            positive("dirichlet_alpha", alpha)?;
        }
        if self.clients_per_domain > 1 && self.dirichlet_alpha.is_none() {
            return Err(ConfigError::Invalid {
                key: "dirichlet_alpha",
                reason: "required when clients_per_domain > 1".to_string(),
            });
        }
        if let Some(every) = self.checkpoint_every {
            if every == 0 {
                return Err(ConfigError::Invalid {
                    key: "checkpoint_every",
                    reason: "must be positive".to_string(),
                });
            }
        }
        if self.prototype_scale < 0.0 || self.domain_shift < 0.0 || self.noise_sigma < 0.0 {
            return Err(ConfigError::Invalid {
                key: "noise_sigma",
                reason: "synthetic scales must be non-negative".to_string(),
            });
        }
        Ok(())
    }
}
