//! Flat `section.key = value` run configuration.
//!
//! Every key is a leaf of the serialized [`RunConfig`]; the defaults of the
//! chosen preset give each key its type, so parsing needs no schema beyond the
//! structs themselves. Lists are comma-separated. `#` starts a comment line.

use std::fmt;
use std::path::Path;

use hatr_core::encoder::ScalePreset;
use hatr_core::model::ModelConfig;
use hatr_core::synth::SynthSpec;
use hatr_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

/// Keys filled from `seed` rather than set directly.
const DERIVED: [&str; 2] = ["train.seed", "synth.seed"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Beam width.
    pub k: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    /// Empty means unset.
    pub train_data: String,
    pub eval_data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: ScalePreset,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub eval: EvalConfig,
    pub paths: Paths,
}

#[derive(Debug, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

impl RunConfig {
    pub fn preset(preset: ScalePreset) -> Self {
        let mut c = RunConfig {
            preset,
            seed: 0,
            model: ModelConfig::preset(preset),
            train: match preset {
                ScalePreset::Full => TrainConfig::full(),
                ScalePreset::Desk => TrainConfig::desk(),
            },
            synth: SynthSpec::default(),
            eval: EvalConfig { k: 5 },
            paths: Paths::default(),
        };
        if preset == ScalePreset::Full {
            c.synth.width = c.model.encoder.input_width;
            c.synth.height = c.model.encoder.input_height;
        }
        c
    }

    /// Applies `(key, value)` pairs in order on top of the preset named by the
    /// last `preset` entry (desk if none).
    pub fn from_entries(entries: &[(String, String)]) -> Result<Self> {
        let preset = match entries.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => parse_preset(v)?,
            None => ScalePreset::Desk,
        };
        let mut tree = serde_json::to_value(RunConfig::preset(preset)).expect("config serializes");
        for (key, text) in entries {
            if key == "preset" {
                continue;
            }
            if DERIVED.contains(&key.as_str()) {
                return err(format!("`{key}` is derived from `seed` and cannot be set"));
            }
            let slot = lookup(&mut tree, key).ok_or_else(|| ConfigError(format!("unknown config key `{key}`")))?;
            *slot = parse_like(slot, text).map_err(|m| ConfigError(format!("`{key}`: {m}")))?;
        }
        let mut config: RunConfig = serde_json::from_value(tree).map_err(|e| ConfigError(format!("invalid config: {e}")))?;
        config.train.seed = config.seed;
        config.model.validate().map_err(|e| ConfigError(e.to_string()))?;
        config.train.validate().map_err(|e| ConfigError(e.to_string()))?;
        config.synth.validate().map_err(|e| ConfigError(e.to_string()))?;
        if config.eval.k == 0 {
            return err("eval.k must be at least 1");
        }
        Ok(config)
    }

    #[cfg(test)]
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_entries(&parse_lines(text)?)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let mut entries = parse_lines(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        entries.extend_from_slice(overrides);
        Ok(Self::from_entries(&entries)?)
    }

    /// Every settable key with its current value, sorted by key.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out.retain(|(k, _)| !DERIVED.contains(&k.as_str()));
        out
    }

    /// A config file that parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

fn parse_preset(v: &str) -> Result<ScalePreset> {
    match v {
        "desk" => Ok(ScalePreset::Desk),
        "full" => Ok(ScalePreset::Full),
        _ => err(format!("unknown preset `{v}` (desk, full)")),
    }
}

/// Splits `key = value` lines, skipping blanks and comments.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_assignment(line) {
            Some(kv) => out.push(kv),
            None => return err(format!("line {}: expected `key = value`", i + 1)),
        }
    }
    Ok(out)
}

pub fn parse_assignment(s: &str) -> Option<(String, String)> {
    let (k, v) = s.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then(|| (k.to_string(), v.trim().to_string()))
}

fn lookup<'a>(tree: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    let mut node = tree;
    for part in key.split('.') {
        node = node.as_object_mut()?.get_mut(part)?;
    }
    (!node.is_object()).then_some(node)
}

fn parse_like(template: &Value, text: &str) -> std::result::Result<Value, String> {
    match template {
        Value::Bool(_) => text.parse::<bool>().map(Value::Bool).map_err(|_| format!("expected true or false, got `{text}`")),
        Value::Number(n) if n.is_u64() => text.parse::<u64>().map(Value::from).map_err(|_| format!("expected a non-negative integer, got `{text}`")),
        Value::Number(_) => {
            let x: f64 = text.parse().map_err(|_| format!("expected a number, got `{text}`"))?;
            Number::from_f64(x).map(Value::Number).ok_or_else(|| format!("`{text}` is not finite"))
        }
        Value::String(_) => Ok(Value::String(text.to_string())),
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::String(String::new()));
            text.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse_like(&elem, s))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        Value::Null | Value::Object(_) => Err("not a settable value".into()),
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => flatten_map(prefix, map, out),
        leaf => out.push((prefix.to_string(), render(leaf))),
    }
}

fn flatten_map(prefix: &str, map: &Map<String, Value>, out: &mut Vec<(String, String)>) {
    for (k, v) in map {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        flatten(&key, v, out);
    }
}
