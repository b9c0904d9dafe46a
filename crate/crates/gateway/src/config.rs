use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tadbot_core::signal::DEFAULT_MOTION_THRESHOLD;

use crate::error::ConfigError;

/// Registry entry tying a device or camera to the parenting pair it serves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub pair_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    /// North-bound HTTP API.
    pub listen: SocketAddr,
    /// TCP endpoint devices dial into with the line protocol.
    pub device_listen: SocketAddr,
    pub webhook: Option<String>,
    pub motion_threshold: f64,
    pub devices: BTreeMap<String, Binding>,
    pub cameras: BTreeMap<String, Binding>,
    /// Trial definitions and per-trial care logs live here.
    pub data_dir: PathBuf,
    /// First webhook retry delay; later retries double it.
    pub webhook_backoff_ms: u64,
    pub webhook_retries: u32,
    pub command_timeout_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".parse().unwrap(),
            device_listen: "127.0.0.1:7070".parse().unwrap(),
            webhook: None,
            motion_threshold: DEFAULT_MOTION_THRESHOLD,
            devices: BTreeMap::new(),
            cameras: BTreeMap::new(),
            data_dir: PathBuf::from("data"),
            webhook_backoff_ms: 1000,
            webhook_retries: 3,
            command_timeout_ms: 5000,
        }
    }
}

impl GatewayConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: GatewayConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (when given), then applies `GATEWAY_*` environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Io(p.to_owned(), e))?;
                toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
            }
            None => GatewayConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let bad = |key: &str, v: &str| ConfigError::Env(key.to_owned(), v.to_owned());
        if let Some(v) = get("GATEWAY_LISTEN") {
            self.listen = v.parse().map_err(|_| bad("GATEWAY_LISTEN", &v))?;
        }
        if let Some(v) = get("GATEWAY_DEVICE_LISTEN") {
            self.device_listen = v.parse().map_err(|_| bad("GATEWAY_DEVICE_LISTEN", &v))?;
        }
        if let Some(v) = get("GATEWAY_WEBHOOK") {
            self.webhook = if v.is_empty() { None } else { Some(v) };
        }
        if let Some(v) = get("GATEWAY_THRESHOLD") {
            self.motion_threshold = v.parse().map_err(|_| bad("GATEWAY_THRESHOLD", &v))?;
        }
        if let Some(v) = get("GATEWAY_DATA_DIR") {
            self.data_dir = PathBuf::from(v);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.motion_threshold) {
            return Err(ConfigError::Invalid(format!(
                "motion_threshold {} outside [0, 1]",
                self.motion_threshold
            )));
        }
        Ok(())
    }

    pub fn webhook_delays(&self) -> Vec<Duration> {
        (0..self.webhook_retries)
            .map(|i| Duration::from_millis(self.webhook_backoff_ms << i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_env() {
        let mut cfg = GatewayConfig::from_toml(
            r#"
            listen = "0.0.0.0:9000"
            webhook = "http://hooks.local/motion"
            [devices.tadbot-01]
            pair_id = "pair-A"
            [cameras.cam-1]
            pair_id = "pair-A"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.listen.port(), 9000);
        assert_eq!(cfg.devices["tadbot-01"].pair_id, "pair-A");
        assert_eq!(cfg.motion_threshold, 0.02);

        let env = |k: &str| match k {
            "GATEWAY_THRESHOLD" => Some("0.1".to_owned()),
            "GATEWAY_DATA_DIR" => Some("/tmp/x".to_owned()),
            "GATEWAY_WEBHOOK" => Some(String::new()),
            _ => None,
        };
        cfg.apply_env(env).unwrap();
        assert_eq!(cfg.motion_threshold, 0.1);
        assert_eq!(cfg.data_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.webhook, None);

        assert!(cfg.apply_env(|k| (k == "GATEWAY_LISTEN").then(|| "nope".to_owned())).is_err());
    }

    #[test]
    fn threshold_range_checked() {
        assert!(GatewayConfig::from_toml("motion_threshold = 1.5").is_err());
        assert!(GatewayConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn backoff_doubles() {
        let cfg = GatewayConfig::default();
        let d: Vec<u64> = cfg.webhook_delays().iter().map(|d| d.as_millis() as u64).collect();
        assert_eq!(d, vec![1000, 2000, 4000]);
    }
}
