//! Experiment configuration: one JSON document with a section per pipeline,
//! plus dotted-key overrides checked against the existing value's JSON type.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::mi::MiConfig;
use crate::model::{Decoding, ModelConfig};
use crate::theory::TheoryConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_set: Vec<usize>,
    pub budget: usize,
    /// Sampling temperature; 0 means greedy decoding.
    pub temperature: f64,
    pub seeds: Vec<u64>,
    pub tau: f64,
    pub n_tasks: usize,
    pub difficulty: usize,
    /// Seed of the held-out task set.
    pub task_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_set: vec![1, 2, 4, 8],
            budget: 64,
            temperature: 1.0,
            seeds: vec![0],
            tau: 0.0,
            n_tasks: 100,
            difficulty: 2,
            task_seed: 12345,
        }
    }
}

impl EvalConfig {
    pub fn decoding(&self) -> Decoding {
        if self.temperature == 0.0 {
            Decoding::Greedy
        } else {
            Decoding::Temperature(self.temperature)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_set.is_empty() || self.k_set.contains(&0) {
            return Err(Error::Config("eval.k_set must be non-empty with k ≥ 1".into()));
        }
        if self.seeds.is_empty() || self.n_tasks == 0 || self.budget == 0 {
            return Err(Error::Config("eval needs seeds, tasks and a positive budget".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("eval.temperature must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for pipelines without their own; `--seed` overwrites every seed field.
    pub seed: u64,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
    pub mi: MiConfig,
    pub bench: BenchConfig,
    pub theory: TheoryConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.trainer.seed = seed;
        self.bench.seed = seed;
    }

    /// Applies `key=value` overrides in order. `value` is read as JSON, falling
    /// back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            apply_override(&mut tree, key.trim(), raw.trim())?;
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        self.eval.validate()?;
        self.bench.validate()
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_f64() => "number",
        Value::Number(_) => "integer",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn compatible(old: &Value, new: &Value) -> bool {
    match (old, new) {
        // optional fields currently unset accept any value; the typed decode decides
        (Value::Null, _) => true,
        (Value::Number(o), Value::Number(n)) => o.is_f64() || !n.is_f64(),
        (Value::Bool(_), Value::Bool(_)) | (Value::String(_), Value::String(_)) | (Value::Array(_), Value::Array(_)) => true,
        (Value::Object(_), Value::Object(_)) => true,
        _ => false,
    }
}

fn apply_override(tree: &mut Value, key: &str, raw: &str) -> Result<()> {
    if key.is_empty() {
        return Err(Error::Config("empty override key".into()));
    }
    let mut node = tree;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    if !compatible(node, &new) {
        return Err(Error::Config(format!(
            "type error for `{key}`: expected {}, got {} `{raw}`",
            type_name(node),
            type_name(&new)
        )));
    }
    *node = new;
    Ok(())
}
