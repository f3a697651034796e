//! The JSON run configuration.
//!
//! Every section and field is optional; missing values take their defaults
//! and unknown keys are rejected.
//!
//! ```json
//! {
//!   "scene": { "n_frames": 8, "noise": { "pose": 0.03 } },
//!   "optim": { "max_epochs": 300, "loss": { "delta": 0.05, "terms": { "cons": true, "cam": true } } },
//!   "eval": { "rpe_step": 1 }
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::EvalConfig;
use crate::io::{read_json, IoError};
use crate::optim::OptimConfig;
use crate::synth::{SceneConfig, SynthError};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    /// The file could not be read or is not a valid document.
    #[error(transparent)]
    Io(IoError),
    /// The document parsed but a value is out of range.
    #[error("invalid config: {field}: {reason}")]
    Invalid { field: String, reason: String },
}

impl From<SynthError> for ConfigError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::ConfigInvalid { field, reason } => ConfigError::Invalid {
                field: format!("scene.{field}"),
                reason,
            },
        }
    }
}

fn section(prefix: &str, msg: String) -> ConfigError {
    // Validators report "<field> <reason>".
    let (field, reason) = msg.split_once(' ').unwrap_or((msg.as_str(), ""));
    ConfigError::Invalid {
        field: format!("{prefix}.{field}"),
        reason: reason.to_string(),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scene.validate()?;
        self.optim.validate().map_err(|m| section("optim", m))?;
        self.eval.validate().map_err(|m| section("eval", m))?;
        Ok(())
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: RunConfig = read_json(path).map_err(ConfigError::Io)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"scene": {"n_frames": 5}, "optim": {"loss": {"delta": 0.1}}}"#).unwrap();
        assert_eq!(cfg.scene.n_frames, 5);
        assert_eq!(cfg.scene.n_static, SceneConfig::default().n_static);
        assert_eq!(cfg.optim.loss.delta, 0.1);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"scene": {"n_frame": 5}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn invalid_values_name_the_field() {
        let mut cfg = RunConfig::default();
        cfg.scene.n_frames = 0;
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("scene.n_frames"), "{e}");

        let mut cfg = RunConfig::default();
        cfg.optim.max_epochs = 0;
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("optim.max_epochs"), "{e}");
    }
}
