//! Flat key-value configuration (TOML syntax, no tables).

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{RetrievalPolicy, DEFAULT_MAX_TURNS};
use crate::gateway::{
    LiveConfig, RetryPolicy, API_KEY_ENV, DEFAULT_EMBEDDING_DIM, DIALOGUE_TEMPERATURE, JUDGE_TEMPERATURE,
};
use crate::ranker::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("{key} = {value} outside {range}")]
    Range { key: &'static str, value: String, range: &'static str },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub endpoint_url: String,
    pub model_name: String,
    pub embedding_model: String,
    pub api_key: Option<String>,
    pub judge_temperature: f64,
    pub dialogue_temperature: f64,
    pub timeout_secs: u64,

    pub learning_rate: f64,
    pub epochs: u32,
    pub seed: u64,
    pub embedding_dim: usize,

    pub policy: RetrievalPolicy,
    pub max_turns: u32,
    pub run_to_cap: bool,

    pub store_path: PathBuf,
    pub models_path: PathBuf,
    pub fixtures_path: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            endpoint_url: "http://127.0.0.1:8000/v1".into(),
            model_name: "default".into(),
            embedding_model: "default-embedding".into(),
            api_key: None,
            judge_temperature: JUDGE_TEMPERATURE,
            dialogue_temperature: DIALOGUE_TEMPERATURE,
            timeout_secs: 60,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            seed: train.seed,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            policy: RetrievalPolicy::PerSession,
            max_turns: DEFAULT_MAX_TURNS,
            run_to_cap: false,
            store_path: "data/historical.jsonl".into(),
            models_path: "models".into(),
            fixtures_path: "fixtures".into(),
        }
    }
}

fn range_err(key: &'static str, value: impl ToString, range: &'static str) -> ConfigError {
    ConfigError::Range { key, value: value.to_string(), range }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` and applies the API key from the environment, if set.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Ok(Self::parse(&text)?.with_env())
    }

    pub fn with_env(mut self) -> Self {
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            if !key.is_empty() {
                self.api_key = Some(key);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 10.0) {
            return Err(range_err("learning_rate", self.learning_rate, "(0, 10]"));
        }
        if !(1..=100_000).contains(&self.epochs) {
            return Err(range_err("epochs", self.epochs, "1..=100000"));
        }
        if !(1..=65_536).contains(&self.embedding_dim) {
            return Err(range_err("embedding_dim", self.embedding_dim, "1..=65536"));
        }
        if !(1..=100).contains(&self.max_turns) {
            return Err(range_err("max_turns", self.max_turns, "1..=100"));
        }
        for (key, t) in
            [("judge_temperature", self.judge_temperature), ("dialogue_temperature", self.dialogue_temperature)]
        {
            if !(0.0..=2.0).contains(&t) {
                return Err(range_err(key, t, "[0, 2]"));
            }
        }
        if self.timeout_secs == 0 {
            return Err(range_err("timeout_secs", 0, ">= 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization, with the key redacted.
    pub fn hash(&self) -> String {
        let mut redacted = self.clone();
        redacted.api_key = None;
        let text = serde_json::to_string(&redacted).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { learning_rate: self.learning_rate, epochs: self.epochs, seed: self.seed }
    }

    pub fn live_config(&self) -> LiveConfig {
        LiveConfig {
            endpoint_url: self.endpoint_url.clone(),
            model_name: self.model_name.clone(),
            embedding_model: self.embedding_model.clone(),
            embedding_dim: self.embedding_dim,
            api_key: self.api_key.clone(),
            timeout: Duration::from_secs(self.timeout_secs),
            retry: RetryPolicy::default(),
        }
    }
}
