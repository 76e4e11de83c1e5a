//! Run configuration: defaults, named profiles, TOML files and dotted
//! command-line overrides, merged in that order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::evalkit::Protocol;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::srst::SrstConfig;
use crate::tracker::TrackerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub pairs_per_epoch: u64,
    pub batch_size: usize,
    /// Fixed step count; 0 derives it from epochs and pairs per epoch.
    pub steps: u64,
    /// Learning rate of the backbone and heads.
    pub lr: f64,
    /// Learning rate of the cross-attention modules.
    pub scam_lr: f64,
    pub weight_decay: f64,
    /// Draw every batch from a fixed pool of this many examples; 0 samples
    /// fresh examples each step.
    pub pool_size: usize,
    pub precision: Precision,
    pub log_every: u64,
    /// Also write a checkpoint every this many steps; 0 only at the end.
    pub checkpoint_every: u64,
    pub sot_root: Option<PathBuf>,
    pub detection_json: Option<PathBuf>,
    /// Warm-start parameters from this checkpoint.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            pairs_per_epoch: 60_000,
            batch_size: 64,
            steps: 0,
            lr: 1e-5,
            scam_lr: 1e-6,
            weight_decay: 1e-4,
            pool_size: 0,
            precision: Precision::F32,
            log_every: 10,
            checkpoint_every: 0,
            sot_root: None,
            detection_json: None,
            init_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        if self.steps > 0 {
            self.steps
        } else {
            (self.epochs * self.pairs_per_epoch).div_ceil(self.batch_size.max(1) as u64)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if self.total_steps() == 0 {
            return Err(Error::config("training would run zero steps"));
        }
        for (k, v) in [("train.lr", self.lr), ("train.scam_lr", self.scam_lr), ("train.weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{k} must be a finite non-negative number")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    pub sequences: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub detection_images: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            sequences: 6,
            frames: 40,
            width: 160,
            height: 120,
            detection_images: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for data preparation and evaluation; 0 uses all cores.
    /// Results do not depend on this value.
    pub threads: usize,
    pub model: ModelConfig,
    pub srst: SrstConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub eval: Protocol,
    pub datagen: DatagenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            model: ModelConfig::default(),
            srst: SrstConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            tracker: TrackerConfig::default(),
            eval: Protocol::default(),
            datagen: DatagenConfig::default(),
        }
    }
}

pub const PROFILES: [&str; 2] = ["full", "toy"];

/// Desk-scale setting: a two-layer, 64-wide model on small crops that
/// trains on one CPU core in minutes.
const TOY_PROFILE: &str = r#"
[model.backbone]
depth = 2
dim = 64
heads = 2
template_size = 64
search_size = 128
scam_layers = [1, 2]

[model.head]
stages = 2

[train]
steps = 1200
batch_size = 8
pool_size = 0
lr = 1e-3
scam_lr = 1e-4
log_every = 10

[srst]
max_gap = 30
"#;

fn profile_toml(name: &str) -> Result<&'static str> {
    match name {
        "full" => Ok(""),
        "toy" => Ok(TOY_PROFILE),
        other => Err(Error::config(format!(
            "unknown profile {other:?} (available: {})",
            PROFILES.join(", ")
        ))),
    }
}

/// Short flag names mapped to their full keys.
const ALIASES: [(&str, &str); 4] = [
    ("scam.layers", "model.backbone.scam_layers"),
    ("scam.mode", "model.scam.mode"),
    ("backbone.depth", "model.backbone.depth"),
    ("backbone.dim", "model.backbone.dim"),
];

pub fn resolve_alias(key: &str) -> &str {
    ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, full)| full)
}

fn to_json(text: &str, origin: &str) -> Result<Value> {
    let v: toml::Value = toml::from_str(text).map_err(|e| Error::config(format!("{origin}: {e}")))?;
    serde_json::to_value(v).map_err(Error::from)
}

/// Merges `src` into `dst`, rejecting keys that do not exist in `dst`.
fn merge(dst: &mut Value, src: &Value, path: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = d
                    .get_mut(k)
                    .ok_or_else(|| Error::config(format!("unknown config key {key}")))?;
                merge(slot, v, &key)?;
            }
            Ok(())
        }
        (d, s) => {
            if d.is_object() {
                return Err(Error::config(format!("{path} is a section, not a value")));
            }
            *d = s.clone();
            Ok(())
        }
    }
}

/// Parses an override value: TOML syntax, `on`/`off`, comma lists, or a
/// bare string.
pub fn parse_value(raw: &str) -> Value {
    let t = raw.trim();
    match t {
        "on" => return Value::Bool(true),
        "off" => return Value::Bool(false),
        _ => {}
    }
    let candidate = if t.contains(',') && !t.starts_with('[') {
        format!("[{t}]")
    } else {
        t.to_string()
    };
    match toml::from_str::<toml::Table>(&format!("v = {candidate}")) {
        Ok(mut table) => serde_json::to_value(table.remove("v").expect("key v")).unwrap_or(Value::String(t.into())),
        Err(_) => Value::String(t.to_string()),
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("{} is not a section", parts[..i].join("."))))?;
        let slot = obj
            .get_mut(*p)
            .ok_or_else(|| Error::config(format!("unknown config key {key}")))?;
        if i + 1 == parts.len() {
            if slot.is_object() {
                return Err(Error::config(format!("{key} is a section, not a value")));
            }
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(Error::config("empty config key"))
}

/// Builds a config from a profile, an optional TOML file and `key=value`
/// overrides. A `profile` key at the top of the file selects the profile
/// when `profile` is `None`.
pub fn load(profile: Option<&str>, file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut merged = serde_json::to_value(RunConfig::default())?;
    let mut file_json = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
            Some(to_json(&text, &p.display().to_string())?)
        }
        None => None,
    };
    let file_profile = file_json
        .as_mut()
        .and_then(|v| v.as_object_mut())
        .and_then(|o| o.remove("profile"))
        .map(|v| v.as_str().map(str::to_string).ok_or_else(|| Error::config("profile must be a string")))
        .transpose()?;
    let profile = profile.map(str::to_string).or(file_profile).unwrap_or_else(|| "full".into());
    merge(&mut merged, &to_json(profile_toml(&profile)?, &format!("profile {profile}"))?, "")?;
    if let Some(f) = &file_json {
        merge(&mut merged, f, "")?;
    }
    for (k, v) in overrides {
        set_path(&mut merged, resolve_alias(k), parse_value(v))?;
    }
    let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.srst.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.tracker.threshold) {
            return Err(Error::config("tracker.threshold must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_default()
    }
}

/// Every leaf key of the default config with its default, one
/// `key = value` line each, sorted by key.
pub fn key_listing() -> Vec<String> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            Value::Null => out.push(format!("{prefix} = (unset)")),
            other => out.push(format!("{prefix} = {other}")),
        }
    }
    let mut out = Vec::new();
    walk("", &serde_json::to_value(RunConfig::default()).expect("config serializes"), &mut out);
    out
}
