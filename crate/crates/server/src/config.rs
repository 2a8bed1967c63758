use std::path::Path;
use std::time::Duration;

use ros_core::CompactionConfig;
use serde::Deserialize;

/// Policy knobs of the reference state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerConfig {
    /// A shard handle silent for longer than this is presumed dead.
    pub heartbeat_timeout: Duration,
    /// A group operation whose shards have not all arrived within this window
    /// is aborted.
    pub txn_timeout: Duration,
    /// Allow same-datacenter replicas that are still filling to serve as sources.
    pub pipeline: bool,
    /// Hide versions from `update` while their only local replica is seeding.
    pub smart_skipping: bool,
    pub compaction: CompactionConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            heartbeat_timeout: Duration::from_secs(5),
            txn_timeout: Duration::from_secs(60),
            pipeline: true,
            smart_skipping: true,
            compaction: CompactionConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("environment variable {name}: {message}")]
    Env { name: &'static str, message: String },
    #[error("{0}")]
    Invalid(String),
}

/// Settings of a running server process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub listen: String,
    /// Interval clients are told to heartbeat at; the server only enforces
    /// the timeout.
    pub heartbeat_interval: Duration,
    /// Addresses of backup servers handed out to operators; a backup starts
    /// empty and is repopulated by clients.
    pub backups: Vec<String>,
    pub server: ServerConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            listen: "127.0.0.1:7070".into(),
            heartbeat_interval: Duration::from_secs(1),
            backups: Vec::new(),
            server: ServerConfig::default(),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    listen: Option<String>,
    heartbeat_interval_ms: Option<u64>,
    heartbeat_timeout_ms: Option<u64>,
    txn_timeout_ms: Option<u64>,
    compaction_threshold: Option<u64>,
    group_capacity: Option<u64>,
    pipeline: Option<bool>,
    smart_skipping: Option<bool>,
    backups: Option<Vec<String>>,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config, ConfigError> {
        let file: FileConfig = toml::from_str(text)?;
        let mut cfg = Config::default();
        if let Some(v) = file.listen {
            cfg.listen = v;
        }
        if let Some(v) = file.heartbeat_interval_ms {
            cfg.heartbeat_interval = Duration::from_millis(v);
        }
        if let Some(v) = file.heartbeat_timeout_ms {
            cfg.server.heartbeat_timeout = Duration::from_millis(v);
        }
        if let Some(v) = file.txn_timeout_ms {
            cfg.server.txn_timeout = Duration::from_millis(v);
        }
        if let Some(v) = file.compaction_threshold {
            cfg.server.compaction.threshold = v;
        }
        if let Some(v) = file.group_capacity {
            cfg.server.compaction.group_capacity = v;
        }
        if let Some(v) = file.pipeline {
            cfg.server.pipeline = v;
        }
        if let Some(v) = file.smart_skipping {
            cfg.server.smart_skipping = v;
        }
        if let Some(v) = file.backups {
            cfg.backups = v;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Config::from_toml(&text)
    }

    /// Applies `ROS_*` overrides from `lookup` (normally `std::env::var`).
    pub fn apply_env<F>(&mut self, lookup: F) -> Result<(), ConfigError>
    where
        F: Fn(&str) -> Option<String>,
    {
        fn num(name: &'static str, v: &str) -> Result<u64, ConfigError> {
            v.trim().parse().map_err(|_| ConfigError::Env {
                name,
                message: format!("expected an integer, got {v:?}"),
            })
        }
        fn flag(name: &'static str, v: &str) -> Result<bool, ConfigError> {
            match v.trim() {
                "1" | "true" | "on" => Ok(true),
                "0" | "false" | "off" => Ok(false),
                _ => Err(ConfigError::Env {
                    name,
                    message: format!("expected a boolean, got {v:?}"),
                }),
            }
        }
        if let Some(v) = lookup("ROS_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = lookup("ROS_HEARTBEAT_INTERVAL_MS") {
            self.heartbeat_interval = Duration::from_millis(num("ROS_HEARTBEAT_INTERVAL_MS", &v)?);
        }
        if let Some(v) = lookup("ROS_HEARTBEAT_TIMEOUT_MS") {
            self.server.heartbeat_timeout = Duration::from_millis(num("ROS_HEARTBEAT_TIMEOUT_MS", &v)?);
        }
        if let Some(v) = lookup("ROS_COMPACTION_THRESHOLD") {
            self.server.compaction.threshold = num("ROS_COMPACTION_THRESHOLD", &v)?;
        }
        if let Some(v) = lookup("ROS_PIPELINE") {
            self.server.pipeline = flag("ROS_PIPELINE", &v)?;
        }
        if let Some(v) = lookup("ROS_SMART_SKIPPING") {
            self.server.smart_skipping = flag("ROS_SMART_SKIPPING", &v)?;
        }
        if let Some(v) = lookup("ROS_BACKUPS") {
            self.backups = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        }
        self.check()
    }

    fn check(&self) -> Result<(), ConfigError> {
        if self.server.compaction.threshold == 0 {
            return Err(ConfigError::Invalid("compaction_threshold must be positive".into()));
        }
        if self.server.compaction.group_capacity == 0 {
            return Err(ConfigError::Invalid("group_capacity must be positive".into()));
        }
        if self.server.heartbeat_timeout <= self.heartbeat_interval {
            return Err(ConfigError::Invalid("heartbeat timeout must exceed the interval".into()));
        }
        if self.listen.is_empty() {
            return Err(ConfigError::Invalid("listen address is empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_file_overrides() {
        let cfg = Config::from_toml("").unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.server.heartbeat_timeout, Duration::from_secs(5));

        let cfg = Config::from_toml(
            r#"
            listen = "0.0.0.0:9000"
            heartbeat_timeout_ms = 2500
            compaction_threshold = 4096
            pipeline = false
            backups = ["10.0.0.2:7070"]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.listen, "0.0.0.0:9000");
        assert_eq!(cfg.server.heartbeat_timeout, Duration::from_millis(2500));
        assert_eq!(cfg.server.compaction.threshold, 4096);
        assert!(!cfg.server.pipeline);
        assert_eq!(cfg.backups, vec!["10.0.0.2:7070".to_string()]);
    }

    #[test]
    fn env_overrides_win() {
        let mut cfg = Config::from_toml("listen = \"a:1\"").unwrap();
        cfg.apply_env(|k| match k {
            "ROS_LISTEN" => Some("b:2".into()),
            "ROS_BACKUPS" => Some("x:1, y:2".into()),
            "ROS_SMART_SKIPPING" => Some("off".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.listen, "b:2");
        assert_eq!(cfg.backups, vec!["x:1".to_string(), "y:2".to_string()]);
        assert!(!cfg.server.smart_skipping);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_toml("compaction_threshold = 0").is_err());
        assert!(Config::from_toml("bogus = 1").is_err());
        assert!(Config::from_toml("heartbeat_interval_ms = 9000").is_err());
        let mut cfg = Config::default();
        assert!(cfg
            .apply_env(|k| (k == "ROS_HEARTBEAT_TIMEOUT_MS").then(|| "soon".to_string()))
            .is_err());
    }
}
