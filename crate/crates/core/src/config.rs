//! The bumper config file: guidelines, actions and provider settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::actions::ActionSpec;
use crate::guidelines::{CheckVariant, Granularity, Guidelines};
use crate::llm::DEFAULT_MAX_IN_FLIGHT;

pub const CONFIG_SCHEMA: &str = include_str!("../schema/bumper-config.schema.json");

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Openai,
    Mock,
}

fn default_model() -> String {
    "gpt-4-0125-preview".into()
}

fn default_embedding_model() -> String {
    "text-embedding-3-small".into()
}

fn default_api_key_env() -> String {
    crate::llm::API_KEY_ENV.into()
}

fn default_max_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderSettings {
    #[serde(default)]
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_embedding_model")]
    pub embedding_model: String,
    /// Name of the environment variable holding the key; the key itself
    /// never appears in the config.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_log: Option<PathBuf>,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        Self {
            kind: ProviderKind::default(),
            base_url: None,
            model: default_model(),
            embedding_model: default_embedding_model(),
            api_key_env: default_api_key_env(),
            mock_script: None,
            max_in_flight: default_max_in_flight(),
            audit_log: None,
        }
    }
}

fn default_granularity() -> Granularity {
    Granularity::PerElement
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckDefaults {
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    #[serde(default = "yes")]
    pub with_explanation: bool,
    #[serde(default)]
    pub temperature: f64,
}

impl Default for CheckDefaults {
    fn default() -> Self {
        Self { granularity: default_granularity(), with_explanation: true, temperature: 0.0 }
    }
}

impl CheckDefaults {
    pub fn variant(&self) -> CheckVariant {
        CheckVariant::new(self.granularity, self.with_explanation)
    }
}

fn default_sampling_temperature() -> f64 {
    1.0
}

fn default_context_turns() -> usize {
    8
}

fn default_max_tokens() -> u32 {
    1024
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisDefaults {
    #[serde(default)]
    pub temperature: f64,
    /// Temperature used when sampling answers for stability analysis.
    #[serde(default = "default_sampling_temperature")]
    pub sampling_temperature: f64,
    /// Number of previous turns shown to the model.
    #[serde(default = "default_context_turns")]
    pub context_turns: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

impl Default for SynthesisDefaults {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            sampling_temperature: default_sampling_temperature(),
            context_turns: default_context_turns(),
            max_tokens: default_max_tokens(),
        }
    }
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BumperConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub guidelines: Guidelines,
    pub actions: Vec<ActionSpec>,
    #[serde(default)]
    pub provider: ProviderSettings,
    #[serde(default)]
    pub check: CheckDefaults,
    #[serde(default)]
    pub synthesis: SynthesisDefaults,
    /// Asset directory, relative to the config file.
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl BumperConfig {
    pub fn from_json(raw: &str, base_dir: impl Into<PathBuf>) -> Result<Self, serde_json::Error> {
        let mut cfg: BumperConfig = serde_json::from_str(raw)?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative paths inside it resolve
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cfg = Self::from_json(&raw, base).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.trim().is_empty() {
            return Err(ConfigError::Invalid("name is empty".into()));
        }
        self.guidelines.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.actions.is_empty() {
            return Err(ConfigError::Invalid("no actions defined".into()));
        }
        for a in &self.actions {
            a.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.provider.kind == ProviderKind::Mock && self.provider.mock_script.is_none() {
            return Err(ConfigError::Invalid("mock provider needs mock_script".into()));
        }
        Ok(())
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn set_base_dir(&mut self, dir: impl Into<PathBuf>) {
        self.base_dir = dir.into();
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn data_path(&self) -> PathBuf {
        self.resolve(&self.data_dir)
    }
}
