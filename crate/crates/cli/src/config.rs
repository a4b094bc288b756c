//! The run configuration: one TOML file, every key optional, unknown keys
//! rejected. `strokerig --print-config` writes the full schema with defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use strokerig_core::align::AlignConfig;
use strokerig_core::datakit::FilterCriteria;
use strokerig_core::stroke::StrokeSimConfig;
use strokerig_core::textenc::{HashEmbedder, RemoteConfig, RemoteEmbedder, TextEmbedder, DEFAULT_HASH_SEED, DEFAULT_TOY_WIDTH};
use strokerig_model::preference::DpoConfig;
use strokerig_model::skdit::{DitConfig, DitTrainConfig, SamplerConfig};
use strokerig_model::skvae::{VaeConfig, VaeTrainConfig};

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub version: u32,
    /// Seed for commands without a section of their own.
    pub seed: u64,
    pub models: ModelPaths,
    pub text: TextConfig,
    pub stroke: StrokeSimConfig,
    pub filter: FilterCriteria,
    pub align: AlignSection,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    pub dit: DitConfig,
    pub dit_train: DitTrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub dpo: DpoConfig,
    pub service: ServiceConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            models: ModelPaths::default(),
            text: TextConfig::default(),
            stroke: StrokeSimConfig::default(),
            filter: FilterCriteria::default(),
            align: AlignSection::default(),
            vae: VaeConfig::default(),
            vae_train: VaeTrainConfig::default(),
            dit: DitConfig::default(),
            dit_train: DitTrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            dpo: DpoConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

/// Checkpoints used by generation commands unless overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelPaths {
    pub vae: PathBuf,
    pub dit: PathBuf,
}

impl Default for ModelPaths {
    fn default() -> Self {
        Self { vae: "models/vae.ckpt".into(), dit: "models/dit.ckpt".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum TextConfig {
    /// Deterministic offline embedder.
    Hash {
        #[serde(default = "toy_width")]
        width: usize,
        #[serde(default = "hash_seed")]
        seed: u64,
    },
    /// External encoder; the token is read from the named environment variable.
    Remote { url: String, width: usize, token_env: Option<String>, timeout_secs: u64 },
}

fn toy_width() -> usize {
    DEFAULT_TOY_WIDTH
}

fn hash_seed() -> u64 {
    DEFAULT_HASH_SEED
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig::Hash { width: DEFAULT_TOY_WIDTH, seed: DEFAULT_HASH_SEED }
    }
}

impl TextConfig {
    pub fn width(&self) -> usize {
        match self {
            TextConfig::Hash { width, .. } | TextConfig::Remote { width, .. } => *width,
        }
    }

    pub fn build(&self) -> Result<Box<dyn TextEmbedder>> {
        match self {
            TextConfig::Hash { width, seed } => {
                if *width == 0 {
                    return Err(CliError::invalid("text.width must be positive"));
                }
                Ok(Box::new(HashEmbedder::with_seed(*width, *seed)))
            }
            TextConfig::Remote { url, width, token_env, timeout_secs } => {
                let token = match token_env {
                    Some(var) => Some(
                        std::env::var(var).map_err(|_| CliError::invalid(format!("text.token_env: ${var} is not set")))?,
                    ),
                    None => None,
                };
                let cfg = RemoteConfig { url: url.clone(), token, width: *width, timeout_secs: *timeout_secs };
                Ok(Box::new(RemoteEmbedder::new(cfg).map_err(CliError::internal)?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignSection {
    pub thresholds: AlignConfig,
    /// Use the offline mock orientation oracle as the last resort.
    pub mock_oracle: bool,
}

impl Default for AlignSection {
    fn default() -> Self {
        Self { thresholds: AlignConfig::default(), mock_oracle: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples_per_bone: usize,
    /// Joint counts removed from each stroke for the robustness curve.
    pub drop_ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples_per_bone: 32, drop_ks: (0..=5).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub bind: String,
    pub timeout_secs: u64,
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8080".into(), timeout_secs: 60, cors_origins: Vec::new() }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::invalid(format!("config: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::invalid(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| CliError::invalid(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::invalid(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.vae.check()?;
        self.dit.check()?;
        self.dpo.check()?;
        if self.text.width() != self.dit.text_dim {
            return Err(CliError::invalid(format!(
                "text.width {} must equal dit.text_dim {}",
                self.text.width(),
                self.dit.text_dim
            )));
        }
        if self.vae.latent_dim != self.dit.latent_dim {
            return Err(CliError::invalid(format!(
                "vae.latent_dim {} must equal dit.latent_dim {}",
                self.vae.latent_dim, self.dit.latent_dim
            )));
        }
        if !self.sampler.guidance.is_finite() {
            return Err(CliError::invalid("sampler.guidance must be finite"));
        }
        if self.eval.samples_per_bone < 2 {
            return Err(CliError::invalid("eval.samples_per_bone must be at least 2"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }
}
