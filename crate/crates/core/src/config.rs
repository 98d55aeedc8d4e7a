//! TOML configuration file.
//!
//! ```toml
//! [preprocess]
//! channel_order = "BGR"
//! means = [104.0, 117.0, 123.0]
//!
//! [power]
//! "ARM+SqJ" = 2.227
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::PowerProfile;
use crate::error::{Error, Result};
use crate::preprocess::PreprocessConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub preprocess: PreprocessConfig,
    pub power: PowerProfile,
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: AppConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.preprocess.validate()?;
        cfg.power.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}
