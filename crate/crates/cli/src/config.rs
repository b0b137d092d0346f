use std::fs;
use std::path::Path;

use serde_json::Value;
use sketchlaw::experiments::{ExperimentConfig, PresetTarget};

use crate::commands::CliError;
use crate::Common;

/// Defaults, then the config file or preset, then explicit flags.
pub fn resolve(common: &Common, target: PresetTarget) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(_), Some(_)) => return Err(CliError::config("--config and --preset are mutually exclusive")),
        (Some(path), None) => from_file(path, target)?,
        (None, Some(name)) => ExperimentConfig::preset(name, target)
            .ok_or_else(|| CliError::config(format!("unknown preset {name:?}; expected default, quick, paper-a2 or paper-a3")))?,
        (None, None) => ExperimentConfig::defaults_for(target),
    };
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(trials) = common.trials {
        cfg.trials = trials;
    }
    cfg.validate().map_err(CliError::from_config)?;
    Ok(cfg)
}

/// Keys present in the file replace the command's defaults; unknown keys are
/// rejected.
fn from_file(path: &Path, target: PresetTarget) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let overrides: Value = serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let Value::Object(overrides) = overrides else {
        return Err(CliError::config(format!("{}: expected a JSON object", path.display())));
    };
    let mut merged = serde_json::to_value(ExperimentConfig::defaults_for(target)).expect("config serializes");
    let base = merged.as_object_mut().expect("config is an object");
    for (k, v) in overrides {
        base.insert(k, v);
    }
    serde_json::from_value(merged).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn threads(common: &Common) -> Result<usize, CliError> {
    match common.threads {
        Some(0) => Err(CliError::config("--threads must be at least 1")),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}
