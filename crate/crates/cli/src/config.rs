//! Layered configuration: built-in defaults, then a TOML file, then
//! `FERSNET_`-prefixed environment variables, then `--dotted.key value`
//! flags. Every key is checked against the default tree, so typos are
//! rejected instead of silently ignored.

use std::path::{Path, PathBuf};

use fersnet_core::data::ToyFaceSpec;
use fersnet_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const ENV_PREFIX: &str = "FERSNET_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyGen {
    pub subjects: usize,
    pub counts: Vec<usize>,
    pub seed: u64,
    pub face: ToyFaceSpec,
}

impl Default for ToyGen {
    fn default() -> Self {
        ToyGen { subjects: 20, counts: vec![45, 18, 59, 25, 69, 28], seed: 7, face: ToyFaceSpec::default() }
    }
}

/// Settings that are not part of the training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub out: PathBuf,
    pub manifest: Option<PathBuf>,
    /// When unset, one identity fold of `manifest` is held out instead.
    pub eval_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub threads: Option<usize>,
    pub folds: usize,
    pub holdout_fold: usize,
    pub ablation_seeds: Vec<u64>,
    pub viz_samples: usize,
    pub synth_samples: usize,
    pub toy: ToyGen,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            out: PathBuf::from("runs/default"),
            manifest: None,
            eval_manifest: None,
            checkpoint: None,
            threads: None,
            folds: 5,
            holdout_fold: 0,
            ablation_seeds: vec![0, 1, 2],
            viz_samples: 4,
            synth_samples: 6,
            toy: ToyGen::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CliConfig {
    pub run: RunOptions,
    pub train: TrainConfig,
}

fn run_keys() -> Vec<String> {
    match serde_json::to_value(RunOptions::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => unreachable!("struct serializes to a map"),
    }
}

impl CliConfig {
    /// One flat tree: training keys at the top level beside the run options.
    pub fn to_value(&self) -> Value {
        let mut tree = match serde_json::to_value(&self.train) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("struct serializes to a map"),
        };
        if let Ok(Value::Object(run)) = serde_json::to_value(&self.run) {
            tree.extend(run);
        }
        Value::Object(tree)
    }

    pub fn from_value(v: Value) -> Result<Self, Vec<String>> {
        let Value::Object(all) = v else { return Err(vec!["configuration must be a table".into()]) };
        let keys = run_keys();
        let (run, train): (Map<String, Value>, Map<String, Value>) = all.into_iter().partition(|(k, _)| keys.contains(k));
        let mut errs = Vec::new();
        let run = RunOptions::deserialize(Value::Object(run)).map_err(|e| errs.push(e.to_string())).ok();
        let train = TrainConfig::deserialize(Value::Object(train)).map_err(|e| errs.push(e.to_string())).ok();
        match (run, train) {
            (Some(run), Some(train)) if errs.is_empty() => Ok(CliConfig { run, train }),
            _ => Err(errs),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.train.validate();
        let r = &self.run;
        errs.extend(r.toy.face.validate());
        if r.toy.counts.is_empty() {
            errs.push("toy.counts must list at least one class".into());
        }
        if r.folds < 2 {
            errs.push(format!("folds must be >= 2, got {}", r.folds));
        }
        if r.holdout_fold >= r.folds {
            errs.push(format!("holdout_fold ({}) must be < folds ({})", r.holdout_fold, r.folds));
        }
        if r.threads == Some(0) {
            errs.push("threads must be positive".into());
        }
        if r.ablation_seeds.is_empty() {
            errs.push("ablation_seeds must not be empty".into());
        }
        errs
    }

    /// Effective configuration as TOML (unset options omitted).
    pub fn echo(&self) -> String {
        fn strip(v: Value) -> Value {
            match v {
                Value::Object(m) => Value::Object(m.into_iter().filter(|(_, v)| !v.is_null()).map(|(k, v)| (k, strip(v))).collect()),
                other => other,
            }
        }
        toml::to_string(&strip(self.to_value())).expect("configuration is representable as TOML")
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "unset",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "table",
    }
}

fn merge(base: &mut Value, incoming: Value, path: &str, origin: &str, errs: &mut Vec<String>) {
    match (base, incoming) {
        (Value::Object(b), Value::Object(inc)) => {
            for (k, v) in inc {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &p, origin, errs),
                    None => errs.push(format!("{origin}: unknown key '{p}'")),
                }
            }
        }
        (slot, v) => {
            let compatible = slot.is_null() || kind(slot) == kind(&v);
            if compatible {
                *slot = v;
            } else {
                errs.push(format!("{origin}: '{path}' expects a {}, got a {}", kind(slot), kind(&v)));
            }
        }
    }
}

fn parse_scalar(s: &str) -> Value {
    let s = s.trim();
    if let Ok(b) = s.parse::<bool>() {
        return Value::Bool(b);
    }
    if let Ok(i) = s.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(f) = s.parse::<f64>() {
        return Value::from(f);
    }
    Value::String(s.to_string())
}

/// Interpret a flag/env string using the type of the value it replaces.
fn parse_as(existing: &Value, raw: &str) -> Result<Value, String> {
    match existing {
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(_) => {
            let inner = raw.trim().trim_start_matches('[').trim_end_matches(']');
            Ok(Value::Array(inner.split(',').filter(|s| !s.trim().is_empty()).map(parse_scalar).collect()))
        }
        Value::Object(_) => Err("is a table; set one of its keys instead".into()),
        Value::Null if raw.trim_start().starts_with('[') || raw.contains(',') => parse_as(&Value::Array(vec![]), raw),
        _ => Ok(parse_scalar(raw)),
    }
}

fn set_dotted(tree: &mut Value, key: &str, raw: &str, origin: &str, errs: &mut Vec<String>) {
    let mut slot = &mut *tree;
    for seg in key.split('.') {
        match slot {
            Value::Object(m) if m.contains_key(seg) => slot = m.get_mut(seg).expect("checked"),
            _ => {
                errs.push(format!("{origin}: unknown key '{key}'"));
                return;
            }
        }
    }
    match parse_as(slot, raw) {
        Ok(v) => merge(slot, v, key, origin, errs),
        Err(e) => errs.push(format!("{origin}: '{key}' {e}")),
    }
}

/// `--a.b v`, `--a.b=v` and bare `--flag` (meaning `true`) pairs.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>, Vec<String>> {
    let mut out = Vec::new();
    let mut errs = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let Some(body) = args[i].strip_prefix("--") else {
            errs.push(format!("unexpected argument '{}'", args[i]));
            i += 1;
            continue;
        };
        if let Some((k, v)) = body.split_once('=') {
            out.push((k.replace('-', "_"), v.to_string()));
            i += 1;
        } else if i + 1 < args.len() && !args[i + 1].starts_with("--") {
            out.push((body.replace('-', "_"), args[i + 1].clone()));
            i += 2;
        } else {
            out.push((body.replace('-', "_"), "true".into()));
            i += 1;
        }
    }
    if errs.is_empty() {
        Ok(out)
    } else {
        Err(errs)
    }
}

/// Resolve defaults < file < environment < flags, then validate. All
/// problems are returned together.
pub fn resolve(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    flags: &[(String, String)],
) -> Result<CliConfig, Vec<String>> {
    let mut tree = CliConfig::default().to_value();
    let mut errs = Vec::new();
    if let Some(path) = file {
        let origin = path.display().to_string();
        match std::fs::read_to_string(path) {
            Err(e) => errs.push(format!("{origin}: {e}")),
            Ok(text) => match toml::from_str::<toml::Table>(&text) {
                Err(e) => errs.push(format!("{origin}: {e}")),
                Ok(t) => merge(&mut tree, serde_json::to_value(t).expect("toml is json-representable"), "", &origin, &mut errs),
            },
        }
    }
    let mut env: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env.sort();
    for (k, v) in env {
        let key = k[ENV_PREFIX.len()..].to_ascii_lowercase().replace("__", ".");
        set_dotted(&mut tree, &key, &v, &format!("environment {k}"), &mut errs);
    }
    for (k, v) in flags {
        set_dotted(&mut tree, k, v, &format!("flag --{k}"), &mut errs);
    }
    if !errs.is_empty() {
        return Err(errs);
    }
    let cfg = CliConfig::from_value(tree)?;
    let errs = cfg.validate();
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(errs)
    }
}
