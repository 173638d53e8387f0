//! Resolution of a run configuration from preset, JSON file, environment
//! and flags. Later sources win.

use std::path::Path;

use foresee::experiment::{Preset, RunConfig};
use serde_json::Value;

use crate::CliError;

pub const SEED_ENV: &str = "FORESEE_SEED";

/// Overwrites `base` with `patch`, recursing into objects so a file only
/// needs the keys it changes.
pub fn deep_merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Preset merged with the optional config file. The second value tells
/// whether the file set a seed.
pub fn load(preset: Preset, file: Option<&Path>) -> Result<(RunConfig, bool), CliError> {
    let mut value = serde_json::to_value(RunConfig::preset(preset)).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut file_seed = false;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(CliError::Usage(format!("config {} must be a JSON object", path.display())));
        }
        file_seed = patch.get("seed").is_some();
        deep_merge(&mut value, patch);
    }
    let cfg = serde_json::from_value(value).map_err(|e| CliError::Usage(format!("bad config: {e}")))?;
    Ok((cfg, file_seed))
}

/// Flag, then config file, then `FORESEE_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>, env: Option<&str>) -> Result<u64, CliError> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match env.map(str::trim).filter(|s| !s.is_empty()) {
        Some(s) => s
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}=`{s}` is not an unsigned integer"))),
        None => Ok(0),
    }
}
