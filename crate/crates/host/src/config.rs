//! Shared JSON run configuration. Every section is optional and falls
//! back to the built-in defaults.

use std::path::{Path, PathBuf};

use keyhand_core::firmware::FirmwareConfig;
use keyhand_core::mechanics::MechanicsConfig;
use keyhand_core::model::HandSpec;
use keyhand_core::plant::{LatencyConfig, PlantConfig};
use keyhand_core::retarget::RetargetConfig;
use keyhand_core::session::{Condition, Task};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("section {section}: {message}")]
    Invalid {
        section: &'static str,
        message: String,
    },
    #[error("a seed is required (config `seed` or --seed)")]
    MissingSeed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionMeta {
    pub task: Task,
    pub condition: Condition,
    pub splay_level: u8,
    pub subject: String,
}

impl Default for SessionMeta {
    fn default() -> Self {
        SessionMeta {
            task: Task::Typing,
            condition: Condition::Full,
            splay_level: 1,
            subject: "sim".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub hand: HandSpec,
    pub mechanics: MechanicsConfig,
    pub firmware: FirmwareConfig,
    pub plant: PlantConfig,
    pub latency: LatencyConfig,
    pub retarget: RetargetConfig,
    pub session: SessionMeta,
    pub seed: Option<u64>,
    /// World and telemetry records are logged every this many ticks.
    pub snapshot_every: u32,
    /// Simulated time kept running after the last command goes idle.
    pub settle_time: f64,
    /// Hard cap on simulated time after calibration.
    pub max_time: f64,
    pub record: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hand: HandSpec::default(),
            mechanics: MechanicsConfig::default(),
            firmware: FirmwareConfig::default(),
            plant: PlantConfig::default(),
            latency: LatencyConfig::default(),
            retarget: RetargetConfig::default(),
            session: SessionMeta::default(),
            seed: None,
            snapshot_every: 10,
            settle_time: 0.5,
            max_time: 600.0,
            record: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section, e: &dyn std::fmt::Display| ConfigError::Invalid {
            section,
            message: e.to_string(),
        };
        self.hand.validate().map_err(|e| invalid("hand", &e))?;
        self.mechanics
            .validate()
            .map_err(|e| invalid("mechanics", &e))?;
        self.firmware
            .validate()
            .map_err(|e| invalid("firmware", &e))?;
        self.plant.validate().map_err(|e| invalid("plant", &e))?;
        self.plant
            .keybed
            .build()
            .map_err(|e| invalid("plant", &e))?;
        if !(self.latency.min >= 0.0 && self.latency.max >= self.latency.min) {
            return Err(invalid(
                "latency",
                &format!(
                    "bounds [{}, {}] invalid",
                    self.latency.min, self.latency.max
                ),
            ));
        }
        self.hand
            .splay(self.session.splay_level)
            .map_err(|e| invalid("session", &e))?;
        if self.snapshot_every == 0 {
            return Err(invalid("snapshot_every", &"must be at least 1"));
        }
        if !(self.settle_time >= 0.0 && self.max_time > 0.0) {
            return Err(invalid("settle_time", &"times must be non-negative"));
        }
        if self.retarget.v_ref <= 0.0 {
            return Err(invalid("retarget", &"v_ref must be positive"));
        }
        Ok(())
    }

    /// Seed from the command line, else from the file.
    pub fn resolve_seed(&self, cli: Option<u64>) -> Result<u64, ConfigError> {
        cli.or(self.seed).ok_or(ConfigError::MissingSeed)
    }

    /// Splay level actually in effect for the session's condition.
    pub fn effective_splay(&self) -> u8 {
        if self.session.condition.allows_splay() {
            self.session.splay_level
        } else {
            1
        }
    }
}
