//! Run configuration files: TOML (or JSON by extension) over the defaults,
//! then command-line overrides.

use std::fs;
use std::path::Path;

use roar3d_core::config::RunConfig;

use crate::error::{CliError, CliResult};

pub const RESOLVED_CONFIG: &str = "config.toml";

/// Flag values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub p_pert: Option<f64>,
    pub view_counts: Option<Vec<usize>>,
}

pub fn parse_config(text: &str, json: bool) -> CliResult<RunConfig> {
    if json {
        serde_json::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))
    } else {
        toml::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))
    }
}

pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    if !path.exists() {
        return Err(CliError::missing(path));
    }
    let text = fs::read_to_string(path)?;
    let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    parse_config(&text, json)
}

pub fn apply(mut cfg: RunConfig, o: &Overrides) -> CliResult<RunConfig> {
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(p) = o.p_pert {
        cfg.multi.p_pert = p;
    }
    if let Some(v) = &o.view_counts {
        cfg.eval.view_counts = v.clone();
    }
    cfg.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(cfg)
}

pub fn resolve(path: Option<&Path>, o: &Overrides) -> CliResult<RunConfig> {
    apply(load_config(path)?, o)
}

pub fn to_toml(cfg: &RunConfig) -> CliResult<String> {
    toml::to_string(cfg).map_err(|e| CliError::config(format!("config does not serialize: {e}")))
}

pub fn write_resolved(dir: &Path, cfg: &RunConfig) -> CliResult<()> {
    fs::write(dir.join(RESOLVED_CONFIG), to_toml(cfg)?)?;
    Ok(())
}
