//! Config loading: one JSON document, dotted-path `--set` overrides, strict
//! schema validation with path-precise diagnostics.

use anyhow::{anyhow, bail, Context, Result};
use fsrw_core::config::ExperimentConfig;
use std::path::Path;

/// Load the experiment config, apply `section.key=value` overrides, then
/// validate strictly (unknown keys rejected, invariants checked).
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut value: serde_json::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => serde_json::json!({}),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let deserializer = value;
    let config: ExperimentConfig = serde_path_to_error::deserialize(deserializer)
        .map_err(|e| anyhow!("config schema error at '{}': {}", e.path(), e.inner()))?;
    config.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(config)
}

/// Apply one `a.b.c=value` override; the value parses as JSON when possible
/// and falls back to a plain string.
fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let Some((path, raw)) = spec.split_once('=') else {
        bail!("override '{spec}' must look like section.key=value");
    };
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override path '{path}' has an empty segment");
    }
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("override path '{path}' crosses a non-object value"))?
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    node.as_object_mut()
        .ok_or_else(|| anyhow!("override path '{path}' crosses a non-object value"))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Canonical serialization used for hashing.
pub fn canonical_json(config: &ExperimentConfig) -> String {
    serde_json::to_string(config).expect("config serializes")
}
