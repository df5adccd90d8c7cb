//! Service configuration: TOML file, then environment, then flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::SimConfig;
use crate::improve::ImproveConfig;
use crate::ingest::RefreshConfig;
use crate::models::ModelsConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    #[default]
    Simulator,
    Gitlab,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub bind: String,
    /// Bearer token for mutating endpoints; unset leaves them open.
    pub api_token: Option<String>,
    pub cors_origins: Vec<String>,
    /// Directory served under /ui.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: "127.0.0.1:8080".into(),
            api_token: None,
            cors_origins: vec!["http://localhost:5173".into()],
            ui_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    /// Journal directory; in-memory when unset.
    pub path: Option<PathBuf>,
    /// Keep at most this many jobs per project.
    pub max_history_jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub base_url: Option<String>,
    pub token: Option<String>,
    pub timeout_seconds: u64,
    /// Branch used for repository file commits.
    pub branch: String,
    pub simulator: Option<SimConfig>,
    /// Simulated history length, e.g. "7d".
    pub horizon: String,
    /// Generate exactly this many simulated jobs instead of a horizon.
    pub history_jobs: Option<usize>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            kind: AdapterKind::Simulator,
            base_url: None,
            token: None,
            timeout_seconds: 30,
            branch: "main".into(),
            simulator: None,
            horizon: "1d".into(),
            history_jobs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct IngestConfig {
    pub webhook_token: Option<String>,
    pub refresh: RefreshConfig,
    pub backfill_on_start: bool,
    pub backfill_limit: Option<usize>,
    pub dead_letter_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlertsConfig {
    pub evaluation_interval_seconds: u64,
}

impl Default for AlertsConfig {
    fn default() -> Self {
        AlertsConfig {
            evaluation_interval_seconds: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BusConfig {
    pub ttl_seconds: u64,
}

impl Default for BusConfig {
    fn default() -> Self {
        BusConfig {
            ttl_seconds: crate::bus::DEFAULT_TTL.as_secs(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub server: ServerConfig,
    pub store: StoreConfig,
    pub adapter: AdapterConfig,
    pub ingest: IngestConfig,
    pub models: ModelsConfig,
    pub improve: ImproveConfig,
    pub alerts: AlertsConfig,
    pub bus: BusConfig,
}

fn parse_env<T: std::str::FromStr>(name: &str, value: String) -> Result<T, ConfigError> {
    value
        .trim()
        .parse()
        .map_err(|_| ConfigError::Invalid(format!("{name}={value:?} is not valid")))
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Config::from_toml(&text)
    }

    /// Applies recognised environment variables from `lookup`.
    pub fn apply_env(
        &mut self,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<(), ConfigError> {
        if let Some(v) = lookup("CBDT_API_TOKEN") {
            self.server.api_token = Some(v);
        }
        if let Some(v) = lookup("CBDT_BIND") {
            self.server.bind = v;
        }
        if let Some(v) = lookup("CBDT_WEBHOOK_TOKEN") {
            self.ingest.webhook_token = Some(v);
        }
        if let Some(v) = lookup("DATA_REFRESH_INTERVAL") {
            self.ingest.refresh.interval_seconds = parse_env("DATA_REFRESH_INTERVAL", v)?;
            self.ingest.refresh.enabled = true;
        }
        if let Some(v) = lookup("CBDT_MAX_HISTORY_JOBS") {
            self.store.max_history_jobs = Some(parse_env("CBDT_MAX_HISTORY_JOBS", v)?);
        }
        if let Some(v) = lookup("CBDT_AT_BASE_URL") {
            self.adapter.base_url = Some(v);
            self.adapter.kind = AdapterKind::Gitlab;
        }
        if let Some(v) = lookup("CBDT_AT_TOKEN") {
            self.adapter.token = Some(v);
        }
        if let Some(v) = lookup("CBDT_STORE_PATH") {
            self.store.path = Some(PathBuf::from(v));
        }
        Ok(())
    }

    pub fn apply_process_env(&mut self) -> Result<(), ConfigError> {
        self.apply_env(|k| std::env::var(k).ok().filter(|v| !v.is_empty()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.server.bind.parse::<std::net::SocketAddr>().is_err() {
            return invalid("server.bind must be host:port");
        }
        if self.adapter.kind == AdapterKind::Gitlab
            && (self.adapter.base_url.is_none() || self.adapter.token.is_none())
        {
            return invalid("gitlab adapter needs base_url and token");
        }
        if self.ingest.refresh.enabled && self.ingest.refresh.interval_seconds == 0 {
            return invalid("refresh interval must be ≥ 1 s");
        }
        if self.alerts.evaluation_interval_seconds == 0 {
            return invalid("alert evaluation interval must be ≥ 1 s");
        }
        if humantime::parse_duration(&self.adapter.horizon).is_err() {
            return invalid("adapter.horizon is not a duration");
        }
        if self.store.max_history_jobs == Some(0) {
            return invalid("max_history_jobs must be ≥ 1");
        }
        if let Some(sim) = &self.adapter.simulator {
            sim.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn horizon(&self) -> chrono::Duration {
        humantime::parse_duration(&self.adapter.horizon)
            .ok()
            .and_then(|d| chrono::Duration::from_std(d).ok())
            .unwrap_or(chrono::Duration::days(1))
    }
}
