//! The single configuration file shared by every subcommand (TOML).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::api::AuthRecord;
use crate::gateway::{validate_devices, DeviceConfig, PollPolicy};
use crate::registers::RegisterMap;
use crate::sim::SimConfig;
use crate::transport::Endpoint;

pub const DEFAULT_TOKEN_TTL_SECS: u64 = 12 * 3600;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub devices: Vec<DeviceConfig>,
    #[serde(default)]
    pub poll: PollPolicy,
    #[serde(default = "default_store_path")]
    pub store_path: PathBuf,
    #[serde(default = "default_api_bind")]
    pub api_bind: String,
    #[serde(default = "default_ttl")]
    pub token_ttl_secs: u64,
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub users: Vec<AuthRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sims: Vec<SimConfig>,
}

fn default_store_path() -> PathBuf {
    PathBuf::from("switchmon.store")
}

fn default_api_bind() -> String {
    "127.0.0.1:8080".into()
}

fn default_ttl() -> u64 {
    DEFAULT_TOKEN_TTL_SECS
}

impl Default for Config {
    fn default() -> Self {
        Config {
            devices: Vec::new(),
            poll: PollPolicy::default(),
            store_path: default_store_path(),
            api_bind: default_api_bind(),
            token_ttl_secs: default_ttl(),
            static_dir: None,
            users: Vec::new(),
            sims: Vec::new(),
        }
    }
}

impl Config {
    /// One analyser `pm01` at unit 1 and its simulator, joined by an
    /// in-memory bus.
    pub fn demo() -> Config {
        let bus = Endpoint::Memory("rs485".into());
        Config {
            devices: vec![DeviceConfig {
                name: "pm01".into(),
                unit: 1,
                transport: bus.clone(),
                register_map: RegisterMap::default(),
            }],
            sims: vec![SimConfig { unit: 1, listen: Some(bus), ..SimConfig::default() }],
            ..Config::default()
        }
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Config, ConfigError> {
        let config: Config = toml::from_str(text)
            .map_err(|e| ConfigError::Parse { path: origin.to_path_buf(), message: e.to_string() })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Config::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_devices(&self.devices, &self.poll).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.validate_sims()?;
        for user in &self.users {
            user.validate().map_err(ConfigError::Invalid)?;
        }
        let mut names = HashMap::new();
        for user in &self.users {
            if names.insert(&user.username, ()).is_some() {
                return Err(ConfigError::Invalid(format!("duplicate user '{}'", user.username)));
            }
        }
        if self.token_ttl_secs == 0 {
            return Err(ConfigError::Invalid("token_ttl_secs must be positive".into()));
        }
        Ok(())
    }

    pub fn validate_sims(&self) -> Result<(), ConfigError> {
        let mut seen = HashMap::new();
        for sim in &self.sims {
            sim.validate().map_err(|e| ConfigError::Invalid(format!("sim unit {}: {e}", sim.unit)))?;
            let listen = sim.listen.as_ref().ok_or_else(|| {
                ConfigError::Invalid(format!("sim unit {} has no listen endpoint", sim.unit))
            })?;
            if let Endpoint::Serial(_) = listen {
                return Err(ConfigError::Invalid(format!(
                    "sim unit {}: simulators cannot listen on a serial port",
                    sim.unit
                )));
            }
            if seen.insert((listen.clone(), sim.unit), ()).is_some() {
                return Err(ConfigError::Invalid(format!(
                    "duplicate unit {} on {listen}",
                    sim.unit
                )));
            }
        }
        Ok(())
    }

    pub fn token_ttl(&self) -> chrono::Duration {
        chrono::Duration::seconds(self.token_ttl_secs as i64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
store_path = "data/pm.store"
api_bind = "127.0.0.1:9000"

[poll]
interval_ms = 1000
timeout_ms = 300

[[devices]]
name = "pm01"
unit = 1
transport = { tcp = "127.0.0.1:15020" }

[[devices]]
name = "pm02"
unit = 2
transport = { serial = { port = "/dev/ttyUSB0", baud = 9600, parity = "none", data_bits = 8, stop_bits = 1 } }

[[sims]]
unit = 1
seed = 7
listen = { tcp = "127.0.0.1:15020" }
admin = "127.0.0.1:15021"
"#;

    #[test]
    fn parses_full_example() {
        let cfg = Config::parse(SAMPLE, Path::new("x.toml")).unwrap();
        assert_eq!(cfg.devices.len(), 2);
        assert_eq!(cfg.poll.timeout_ms, 300);
        assert_eq!(cfg.poll.retries, 3);
        assert_eq!(cfg.sims[0].seed, 7);
        assert_eq!(cfg.sims[0].power_factor, 0.85);
        assert_eq!(cfg.token_ttl_secs, 12 * 3600);
        match &cfg.devices[1].transport {
            Endpoint::Serial(s) => assert_eq!(s.baud, 9600),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_reports_location() {
        let text = "store_path = \"a\"\n[poll]\ninterval_ms = 1000\nintervall = 3\n";
        let err = Config::parse(text, Path::new("bad.toml")).unwrap_err().to_string();
        assert!(err.contains("bad.toml"), "{err}");
        assert!(err.contains("intervall"), "{err}");
        assert!(err.contains("line 4"), "{err}");
    }

    #[test]
    fn duplicate_sim_unit_rejected() {
        let mut cfg = Config::demo();
        cfg.sims.push(cfg.sims[0].clone());
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(m)) if m.contains("duplicate unit")));
    }

    #[test]
    fn duplicate_device_name_rejected() {
        let mut cfg = Config::demo();
        let mut d = cfg.devices[0].clone();
        d.unit = 2;
        cfg.devices.push(d);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn demo_round_trips_through_toml() {
        let cfg = Config::demo();
        cfg.validate().unwrap();
        let back = Config::parse(&cfg.to_toml(), Path::new("demo.toml")).unwrap();
        assert_eq!(back, cfg);
    }
}
