//! Run configuration file loading.
//!
//! The config file is TOML whose keys mirror [`RunConfig`] field names
//! exactly. Every field is required and unknown keys are errors, so a typo in
//! an experiment sweep fails fast instead of silently running the defaults.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::RunConfig;

/// Parse a [`RunConfig`] from TOML text.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let config: RunConfig = toml::from_str(text)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Load a [`RunConfig`] from a TOML file.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_run_config(&text)
}

/// Serialize a [`RunConfig`] as TOML, e.g. to produce a starter config file.
pub fn run_config_to_toml(config: &RunConfig) -> String {
    toml::to_string_pretty(config).expect("run config serializes")
}
