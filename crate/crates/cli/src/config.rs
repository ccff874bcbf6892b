//! Run configuration: a flat `key = value` file with dotted keys, overridden
//! by `--key value` flags.
//!
//! Keys are the dotted paths of [`RunConfig`]'s serialized form, e.g.
//! `train.stage3.lr`. A flag or file key may also be any unique suffix of a
//! full key (`--n-clips` for `generate.n_clips`); dashes read as underscores.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use stact_core::model::Variant;
use stact_core::synth::GenConfig;
use stact_core::training::TrainConfig;

/// Keys that fan out to several full keys.
const ALIASES: [(&str, &[&str]); 1] = [("seed", &["generate.seed", "train.seed", "grad_check.seed"])];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Schedule and sizes as published: 64-pixel stacks, 100 epochs per stage.
    Full,
    /// [`TrainConfig::desk`].
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k: usize,
    pub threshold: f64,
    pub variants: Vec<Variant>,
    /// Checkpoint read by `evaluate`.
    pub checkpoint: Option<PathBuf>,
    /// Write one checkpoint per fold and variant from `crossval`.
    pub save_checkpoints: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub samples_per_tensor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub out: PathBuf,
    pub manifest: Option<PathBuf>,
    pub parallel: bool,
    pub generate: GenConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub grad_check: GradCheckOptions,
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        Self {
            profile,
            out: PathBuf::from("out"),
            manifest: None,
            parallel: true,
            generate: GenConfig::default(),
            train: match profile {
                Profile::Full => TrainConfig::default(),
                Profile::Desk => TrainConfig::desk(),
            },
            eval: EvalOptions {
                k: 5,
                threshold: 0.5,
                variants: vec![Variant::Stact],
                checkpoint: None,
                save_checkpoints: true,
            },
            grad_check: GradCheckOptions {
                seed: 0,
                samples_per_tensor: 12,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

/// One `key = value` assignment and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    pub origin: String,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("config keys form a tree");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

fn keys_of(cfg: &RunConfig) -> BTreeMap<String, Value> {
    let mut flat = BTreeMap::new();
    flatten("", &serde_json::to_value(cfg).expect("config serializes"), &mut flat);
    flat
}

/// Maps a user-supplied key onto full keys.
pub fn resolve_key(known: &BTreeMap<String, Value>, raw: &str) -> Result<Vec<String>> {
    let key = raw.trim().replace('-', "_");
    if let Some((_, targets)) = ALIASES.iter().find(|(a, _)| *a == key) {
        return Ok(targets.iter().map(|s| s.to_string()).collect());
    }
    if known.contains_key(&key) {
        return Ok(vec![key]);
    }
    let suffix = format!(".{key}");
    let hits: Vec<&String> = known.keys().filter(|k| k.ends_with(&suffix)).collect();
    match hits.as_slice() {
        [one] => Ok(vec![(*one).clone()]),
        [] => err(format!("unknown config key '{raw}'")),
        many => err(format!(
            "ambiguous config key '{raw}': matches {}",
            many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )),
    }
}

/// Parses `raw` with the type of the default value at `key`.
fn parse_like(key: &str, default: &Value, raw: &str) -> Result<Value> {
    let raw = raw.trim();
    let unquoted = raw.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(raw);
    let bad = |what: &str| err(format!("{key}: expected {what}, got '{raw}'"));
    match default {
        Value::Bool(_) => match raw {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => bad("true or false"),
        },
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().map(Value::from).or_else(|_| bad("a non-negative integer")),
        Value::Number(n) if n.is_i64() => raw.parse::<i64>().map(Value::from).or_else(|_| bad("an integer")),
        Value::Number(_) => match raw.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(Value::from(x)),
            _ => bad("a finite number"),
        },
        Value::Array(_) => Ok(Value::Array(
            unquoted
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| Value::String(s.to_string()))
                .collect(),
        )),
        Value::Null | Value::String(_) => {
            if matches!(default, Value::Null) && (unquoted.is_empty() || unquoted == "none") {
                Ok(Value::Null)
            } else {
                Ok(Value::String(unquoted.to_string()))
            }
        }
        Value::Object(_) => bad("a leaf value"),
    }
}

/// Reads a config file. `[section]` lines prefix the keys that follow.
pub fn parse_file(path: &Path) -> Result<Vec<Assignment>> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    parse_text(&text, &path.display().to_string())
}

pub fn parse_text(text: &str, origin: &str) -> Result<Vec<Assignment>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return err(format!("{origin}:{}: expected 'key = value'", n + 1));
        };
        let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
        out.push(Assignment {
            key,
            value: v.trim().to_string(),
            origin: format!("{origin}:{}", n + 1),
        });
    }
    Ok(out)
}

/// Turns `--key value` / `--key=value` pairs into assignments.
pub fn parse_flags(args: &[String]) -> Result<Vec<Assignment>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            return err(format!("unexpected argument '{a}'"));
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| ConfigError(format!("flag --{body} needs a value")))?;
                (body.to_string(), v.clone())
            }
        };
        out.push(Assignment {
            key,
            value,
            origin: format!("--{body}"),
        });
    }
    Ok(out)
}

/// Applies assignments in order over the defaults of the selected profile.
pub fn resolve(assignments: &[Assignment]) -> Result<RunConfig> {
    let probe = keys_of(&RunConfig::defaults(Profile::Full));
    let mut profile = Profile::Full;
    for a in assignments {
        let keys = resolve_key(&probe, &a.key).map_err(|e| ConfigError(format!("{}: {e}", a.origin)))?;
        if keys == ["profile"] {
            profile = serde_json::from_value(Value::String(a.value.trim().to_string()))
                .map_err(|_| ConfigError(format!("{}: unknown profile '{}' (full or desk)", a.origin, a.value)))?;
        }
    }
    let mut flat = keys_of(&RunConfig::defaults(profile));
    for a in assignments {
        for key in resolve_key(&flat, &a.key).map_err(|e| ConfigError(format!("{}: {e}", a.origin)))? {
            let v = parse_like(&key, &flat[&key], &a.value).map_err(|e| ConfigError(format!("{}: {e}", a.origin)))?;
            flat.insert(key, v);
        }
    }
    serde_json::from_value(unflatten(&flat)).map_err(|e| ConfigError(format!("invalid configuration: {e}")))
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(a) => a.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// Every key with its resolved value, sorted, in the config-file syntax.
pub fn snapshot(cfg: &RunConfig) -> String {
    keys_of(cfg).iter().map(|(k, v)| format!("{k} = {}\n", render(v))).collect()
}
