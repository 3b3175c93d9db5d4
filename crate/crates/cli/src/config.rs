//! Resolution of training settings from defaults, a `key=value` file and
//! command-line flags, in increasing order of precedence.

use std::path::Path;

use pcgans_core::error::{Error, Result};
use pcgans_core::io::write_key_values;
use pcgans_core::trainer::TrainConfig;

pub const RESOLVED: &str = "config.resolved";

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; anything else without `=` is an error.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Applies the layers in order; later layers override earlier ones.
/// Unknown keys in any layer are rejected.
pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)?;
        for (k, v) in parse_pairs(&text)? {
            cfg.set(&k, &v)?;
        }
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the effective settings to `dir/config.resolved`.
pub fn write_resolved(dir: &Path, cfg: &TrainConfig) -> Result<()> {
    let entries: Vec<(String, String)> = cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    write_key_values(&dir.join(RESOLVED), &entries)
}
