//! Run configuration as flat JSON with dotted keys (`model.d_model`,
//! `train.lr0`, ...). Every hyperparameter is addressable by key, unknown
//! keys are rejected, and the effective configuration can be echoed back.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sigproc::{PreprocessConfig, Protocol, SynthConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for initialization, gate noise and shuffling.
    pub seed: u64,
    pub protocol: Protocol,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            protocol: Protocol::InterSession,
            synth: SynthConfig::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// A reduced model that trains on the default synthetic set in minutes
    /// on one core: narrow wavelet stage, `D_model = 8`, `N = 4`, expansion 2.
    /// The larger step size compensates for the shorter schedule.
    pub fn desk() -> Self {
        let d = Self::default();
        Self {
            model: ModelConfig {
                wtfm_channels: 2,
                value_channels: 2,
                attn_reduction: 1,
                d_model: 8,
                state: 4,
                expand: 2,
                ..d.model
            },
            train: TrainConfig { lr0: 3e-3, eval_every: 10, ..d.train },
            ..d
        }
    }
}

fn flatten_into(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), v.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("config keys form a tree");
            }
        }
    }
    Value::Object(root)
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

impl RunConfig {
    /// Every addressable key with its current value.
    pub fn flatten(&self) -> BTreeMap<String, Value> {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut out = BTreeMap::new();
        flatten_into("", &value, &mut out);
        out
    }

    pub fn keys() -> Vec<String> {
        Self::default().flatten().into_keys().collect()
    }

    /// Apply `key → value` overrides. Unknown keys and values of the wrong
    /// type are configuration errors.
    pub fn apply(&self, overrides: &BTreeMap<String, Value>) -> Result<Self> {
        let mut flat = self.flatten();
        for (key, value) in overrides {
            let Some(slot) = flat.get_mut(key) else {
                return Err(Error::Config(format!("unknown configuration key {key:?}")));
            };
            if kind(slot) != kind(value) {
                return Err(Error::Config(format!("{key} expects a {}, got {value}", kind(slot))));
            }
            *slot = value.clone();
        }
        let cfg: RunConfig = serde_json::from_value(unflatten(&flat)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply a single `key=value` assignment; the value is read as JSON when
    /// it parses, otherwise as a bare string.
    pub fn set(&self, assignment: &str) -> Result<Self> {
        self.set_all(&[assignment])
    }

    /// Apply several assignments at once, so validation sees only the final
    /// combination. Later assignments to the same key win.
    pub fn set_all<S: AsRef<str>>(&self, assignments: &[S]) -> Result<Self> {
        let mut overrides = BTreeMap::new();
        for assignment in assignments {
            let assignment = assignment.as_ref();
            let (key, raw) = assignment
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("expected key=value, got {assignment:?}")))?;
            let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
            overrides.insert(key.trim().to_string(), value);
        }
        self.apply(&overrides)
    }

    /// Parse a flat JSON object on top of the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        Self::default().apply_json(text)
    }

    /// Apply a flat JSON object of dotted keys on top of `self`.
    pub fn apply_json(&self, text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let Value::Object(map) = value else {
            return Err(Error::Config("config must be a JSON object of dotted keys".into()));
        };
        let mut flat = BTreeMap::new();
        for (k, v) in map {
            if v.is_object() {
                return Err(Error::Config(format!("{k}: nested objects are not allowed, use dotted keys")));
            }
            flat.insert(k, v);
        }
        self.apply(&flat)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Effective configuration as sorted, flat, pretty-printed JSON.
    pub fn to_json(&self) -> String {
        let map: Map<String, Value> = self.flatten().into_iter().collect();
        serde_json::to_string_pretty(&Value::Object(map)).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.preprocess.window == 0 || self.preprocess.step == 0 {
            return Err(Error::Config("window and step must be positive".into()));
        }
        if self.preprocess.low_hz >= self.preprocess.high_hz {
            return Err(Error::Config("band-stop needs low_hz < high_hz".into()));
        }
        Ok(())
    }
}
