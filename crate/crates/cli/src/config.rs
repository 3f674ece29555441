//! Run configuration: TOML sections `[scenario]`, `[model]`, `[mixer]`,
//! `[trainer]` plus top-level `seed`, `out_dir` and `checkpoint`. Every key
//! can be overridden with `section.key=value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use updet::battlesim::ScenarioSpec;
use updet::mixer::MixerConfig;
use updet::model::ModelConfig;
use updet::trainer::TrainerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Checkpoint to resume, evaluate or transfer from.
    pub checkpoint: Option<PathBuf>,
    pub scenario: ScenarioSpec,
    pub model: ModelConfig,
    pub mixer: MixerConfig,
    pub trainer: TrainerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            checkpoint: None,
            scenario: ScenarioSpec::default(),
            model: ModelConfig::default(),
            mixer: MixerConfig::default(),
            trainer: TrainerConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text` and applies `overrides` (`section.key=value`) on top.
    /// Values are read as TOML literals; anything that is not a literal is
    /// taken as a bare string.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, String> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, String> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.scenario.validate().map_err(|e| e.to_string())?;
        self.model.validate().map_err(|e| e.to_string())?;
        self.trainer.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), String> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override {spec:?} is not key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(format!("override {spec:?} has an empty key"));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut node = table;
    for k in parents {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| format!("override {spec:?}: {k} is not a section"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Parses `NxM` into (allies, enemies).
pub fn parse_scenario(s: &str) -> Result<(usize, usize), String> {
    let (a, e) = s
        .split_once(['x', 'v'])
        .ok_or_else(|| format!("scenario {s:?} is not NxM"))?;
    let parse = |t: &str| {
        t.parse::<usize>()
            .map_err(|_| format!("scenario {s:?} is not NxM"))
    };
    Ok((parse(a)?, parse(e)?))
}
