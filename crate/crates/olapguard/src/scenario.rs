//! Scenario files (TOML).
//!
//! Every field is optional and unknown keys are rejected. An empty file is
//! the default scenario.

use std::path::Path;

use olapguard_core::sim::Scenario;

use crate::doc;
use crate::error::{Error, Problem, Result};

pub fn parse_scenario_str(text: &str) -> Result<Scenario> {
    let scenario: Scenario = doc::from_toml(text)?;
    scenario.validate().map_err(|errs| {
        Error::parse(errs.into_iter().map(|e| Problem::new(e.path, e.message)).collect())
    })?;
    Ok(scenario)
}

pub fn parse_scenario(path: &Path) -> Result<Scenario> {
    parse_scenario_str(&doc::read(path)?).map_err(|e| e.in_file(path))
}

/// Serializes a scenario back to TOML. Seeds above `i64::MAX` have no TOML
/// representation and are refused.
pub fn emit_scenario(scenario: &Scenario) -> Result<String> {
    if i64::try_from(scenario.seed).is_err() {
        return Err(Error::field("seed", "does not fit a TOML integer (at most 9223372036854775807)"));
    }
    toml::to_string(scenario).map_err(|e| Error::field("", e.to_string()))
}
