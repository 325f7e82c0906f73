//! Run configuration: defaults, TOML file, preset shorthand, and dotted
//! `--set key=value` overrides, applied in that order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::network::{NetworkConfig, Preset, Task};
use crate::train::TrainConfig;

/// Everything a run needs, grouped into the TOML sections `[network]`,
/// `[train]` and `[data]`. Keys mirror the struct field names.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: GenConfig,
}

/// Recursively lay `over` on top of `base`: tables merge, scalars replace.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (key, value) in o {
                match b.get_mut(&key) {
                    Some(slot) => merge(slot, value),
                    None => {
                        b.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

/// Parse the right-hand side of a `--set` as a TOML literal, falling back to
/// a plain string so unquoted enum names like `pe_sin` work.
fn parse_literal(text: &str) -> toml::Value {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut table) => table.remove("v").expect("parsed document has the key"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("config key '{path}' has an empty segment")));
    }
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("'{part}' in '{path}' is not a config section")))?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let leaf = parts[parts.len() - 1];
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::Usage(format!("'{leaf}' in '{path}' is not a config section")))?;
    table.insert(leaf.to_string(), value);
    Ok(())
}

fn to_value(cfg: &AppConfig) -> Result<toml::Value> {
    toml::Value::try_from(cfg).map_err(|e| Error::Config(format!("config does not serialize: {e}")))
}

fn from_value(value: toml::Value) -> Result<AppConfig> {
    value.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
}

/// Apply `key=value` overrides to a config (keys dotted per section, e.g.
/// `network.encoding.kind=pe_sin`). Unknown keys are rejected.
pub fn apply_sets(cfg: &AppConfig, sets: &[String]) -> Result<AppConfig> {
    if sets.is_empty() {
        return Ok(cfg.clone());
    }
    let mut value = to_value(cfg)?;
    for entry in sets {
        let (key, text) = entry
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects key=value, got '{entry}'")))?;
        set_path(&mut value, key.trim(), parse_literal(text.trim()))?;
    }
    from_value(value)
}

/// Assemble the effective config: defaults, then the file, then the preset
/// and task shorthands, then `--set` overrides. Validates before returning.
pub fn load(
    file: Option<&Path>,
    preset: Option<Preset>,
    task: Option<Task>,
    sets: &[String],
) -> Result<AppConfig> {
    let mut cfg = AppConfig::default();
    if let Some(path) = file {
        let text = fs::read_to_string(path)?;
        let file_value: toml::Value = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let mut value = to_value(&cfg)?;
        merge(&mut value, file_value);
        cfg = from_value(value)?;
    }
    if let Some(t) = task {
        cfg.network.task = t;
    }
    if let Some(p) = preset {
        cfg.network.c_embed = p.embed_width();
        cfg.network.ref_depths = p.ref_depths().to_vec();
    }
    cfg = apply_sets(&cfg, sets)?;
    cfg.network.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}
