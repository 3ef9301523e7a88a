//! Run configuration: a fixed registry of dotted keys, read from a TOML file
//! (or a previous run manifest) and overridden by `--key=value` flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use incontext::backend::ToySpec;
use incontext::concept::prompt::CONTEXT_TEMPLATE;
use incontext::concept::{AugmentationConfig, TrainingConfig};
use incontext::roi::{ExtractionConfig, RegionConfig};
use incontext::transfer::{EditConfig, GenerationConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Learn,
    Edit,
    Generate,
    MatchMask,
    DiscoverMask,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Learn => "learn",
            Command::Edit => "edit",
            Command::Generate => "generate",
            Command::MatchMask => "match-mask",
            Command::DiscoverMask => "discover-mask",
        }
    }

    /// Keys that must be set for this command.
    pub fn required_keys(self) -> &'static [&'static str] {
        match self {
            Command::Learn => &["input.image", "input.mask", "input.object_class"],
            Command::Edit => &["input.checkpoint", "input.image", "input.mask"],
            Command::Generate => &["input.checkpoint", "input.object_class"],
            Command::MatchMask => &["input.checkpoint", "input.image", "input.mask", "input.target"],
            Command::DiscoverMask => &["input.images", "input.object_class"],
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Bool,
    UInt,
    Float,
    Text,
    Choice(&'static [&'static str]),
    Path,
    UIntList,
    PathList,
}

/// A typed configuration value. Serialized untagged so manifests stay plain JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    UInt(u64),
    Float(f64),
    Text(String),
    List(Vec<Value>),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::UInt(u) => write!(f, "{u}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Text(s) => f.write_str(s),
            Value::List(items) => {
                let parts: Vec<String> = items.iter().map(|v| v.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl Kind {
    fn describe(self) -> String {
        match self {
            Kind::Bool => "a boolean".into(),
            Kind::UInt => "a non-negative integer".into(),
            Kind::Float => "a number".into(),
            Kind::Text => "a string".into(),
            Kind::Choice(options) => format!("one of {}", options.join(", ")),
            Kind::Path => "a path".into(),
            Kind::UIntList => "a comma-separated list of non-negative integers".into(),
            Kind::PathList => "a comma-separated list of paths".into(),
        }
    }

    /// Parses a flag or default written as text.
    fn parse(self, raw: &str) -> Option<Value> {
        let raw = raw.trim();
        match self {
            Kind::Bool => bool::from_str(raw).ok().map(Value::Bool),
            Kind::UInt => u64::from_str(raw).ok().map(Value::UInt),
            Kind::Float => f64::from_str(raw).ok().filter(|x| x.is_finite()).map(Value::Float),
            Kind::Text => Some(Value::Text(raw.to_string())),
            Kind::Choice(options) => options.contains(&raw).then(|| Value::Text(raw.to_string())),
            Kind::Path => (!raw.is_empty()).then(|| Value::Text(raw.to_string())),
            Kind::UIntList => raw
                .split(',')
                .map(|p| u64::from_str(p.trim()).ok().map(Value::UInt))
                .collect::<Option<Vec<_>>>()
                .map(Value::List),
            Kind::PathList => {
                let items: Vec<_> = raw.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
                (!items.is_empty()).then(|| Value::List(items.into_iter().map(|p| Value::Text(p.into())).collect()))
            }
        }
    }

    /// Checks and normalizes a value that arrived already typed (TOML or JSON).
    fn coerce(self, v: Value) -> Option<Value> {
        match (self, v) {
            (Kind::Bool, v @ Value::Bool(_)) => Some(v),
            (Kind::UInt, v @ Value::UInt(_)) => Some(v),
            (Kind::Float, Value::UInt(u)) => Some(Value::Float(u as f64)),
            (Kind::Float, v @ Value::Float(_)) => Some(v),
            (Kind::Text | Kind::Choice(_) | Kind::Path, Value::Text(s)) => self.parse(&s),
            (Kind::UIntList, Value::List(items)) => items
                .into_iter()
                .map(|i| Kind::UInt.coerce(i))
                .collect::<Option<Vec<_>>>()
                .map(Value::List),
            (Kind::PathList, Value::List(items)) => items
                .into_iter()
                .map(|i| Kind::Path.coerce(i))
                .collect::<Option<Vec<_>>>()
                .filter(|v| !v.is_empty())
                .map(Value::List),
            (Kind::UIntList | Kind::PathList, Value::Text(s)) => self.parse(&s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KeySpec {
    pub name: &'static str,
    pub kind: Kind,
    /// Textual default; `None` for inputs that have no default.
    pub default: Option<String>,
    pub help: &'static str,
}

fn key(name: &'static str, kind: Kind, default: impl ToString, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        kind,
        default: Some(default.to_string()),
        help,
    }
}

fn input(name: &'static str, kind: Kind, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        kind,
        default: None,
        help,
    }
}

fn list(items: &[usize]) -> String {
    items.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

/// Every recognized key. Defaults are taken from the library's own defaults.
pub fn registry() -> Vec<KeySpec> {
    let toy = ToySpec::default();
    let train = TrainingConfig::default();
    let aug = AugmentationConfig::default();
    let edit = EditConfig::default();
    let generate = GenerationConfig::default();
    let region = RegionConfig::default();
    let extract = ExtractionConfig::default();
    vec![
        key("seed", Kind::UInt, 0, "master seed; per-subsystem seeds are derived from it"),
        input("output.dir", Kind::Path, "directory receiving the manifest and artifacts"),
        key("backend.kind", Kind::Choice(&["toy", "external"]), "toy", "denoiser implementation"),
        input("backend.weights", Kind::Path, "weights of an external backend"),
        key("backend.seed", Kind::UInt, toy.seed, "toy weight initialization seed"),
        key("backend.channels", Kind::UInt, toy.channels, "toy latent channels"),
        key("backend.height", Kind::UInt, toy.height, "toy latent height"),
        key("backend.width", Kind::UInt, toy.width, "toy latent width"),
        key("backend.embed_dim", Kind::UInt, toy.embed_dim, "toy text embedding width"),
        key("backend.num_heads", Kind::UInt, toy.num_heads, "toy attention heads"),
        key("backend.timesteps", Kind::UInt, toy.timesteps, "sampler steps T"),
        input("input.image", Kind::Path, "source image (learn, match-mask) or target image (edit)"),
        input("input.mask", Kind::Path, "mask matching input.image"),
        input("input.images", Kind::PathList, "images sharing a concept (discover-mask)"),
        input("input.target", Kind::Path, "image to segment (match-mask)"),
        input("input.checkpoint", Kind::Path, "learned concept checkpoint"),
        input("input.object_class", Kind::Text, "object word substituted for {OBJECT}"),
        key("input.prompt", Kind::Text, CONTEXT_TEMPLATE, "prompt template for learn and edit"),
        key("train.steps", Kind::UInt, train.steps, "optimization steps"),
        key("train.learning_rate", Kind::Float, train.learning_rate, "Adam learning rate"),
        key("train.lambda_att", Kind::Float, train.lambda_att, "attention loss weight"),
        key("train.lambda_roi", Kind::Float, train.lambda_roi, "RoI loss weight"),
        key("train.alpha", Kind::Float, train.alpha, "out-of-mask weight of the soft mask"),
        key("train.optimizer", Kind::Choice(&["adam"]), "adam", "optimizer"),
        key("train.init_word", Kind::Text, &train.init_word, "word initializing the concept token"),
        key("train.token", Kind::Text, &train.token_name, "concept token name"),
        key("train.eval_draws", Kind::UInt, train.eval_draws, "fixed draws for before/after loss"),
        key("augment.p_hflip", Kind::Float, aug.p_hflip, "horizontal flip probability"),
        key("augment.p_grayscale", Kind::Float, aug.p_grayscale, "grayscale probability"),
        key("augment.p_zoom", Kind::Float, aug.p_zoom, "zoom probability"),
        key("augment.zoom_min", Kind::Float, aug.zoom_min, "smallest zoom scale"),
        key("augment.zoom_max", Kind::Float, aug.zoom_max, "largest zoom scale"),
        key("augment.p_jitter", Kind::Float, aug.p_jitter, "colour jitter probability"),
        key("augment.brightness", Kind::Float, aug.brightness, "brightness jitter strength"),
        key("augment.contrast", Kind::Float, aug.contrast, "contrast jitter strength"),
        key("augment.saturation", Kind::Float, aug.saturation, "saturation jitter strength"),
        key("edit.t_start", Kind::UInt, edit.t_start, "step at which editing starts"),
        key("edit.eta", Kind::Float, edit.eta, "attention guidance step size"),
        key("edit.guidance_iters", Kind::UInt, edit.guidance_iters, "guidance steps per denoising step"),
        key(
            "edit.blend_mode",
            Kind::Choice(&["noise_matched", "fixed_start"]),
            "noise_matched",
            "out-of-mask reference latent",
        ),
        key("generate.t_s", Kind::UInt, generate.t_s, "steps run on the base model"),
        key("match.steps", Kind::UInt, region.steps, "region token optimization steps"),
        key("match.learning_rate", Kind::Float, region.learning_rate, "region token learning rate"),
        key("match.token", Kind::Text, &region.token_name, "region token name"),
        key("match.init_word", Kind::Text, &region.init_word, "word initializing a discovery token"),
        key("match.augment", Kind::Bool, false, "apply the augment.* settings during discovery"),
        key("match.eval_draws", Kind::UInt, region.eval_draws, "fixed draws for before/after loss"),
        key("extract.probes", Kind::UIntList, list(&extract.probe_timesteps), "probe timesteps"),
        key("extract.threshold", Kind::Float, extract.threshold, "binarization threshold"),
        key("extract.largest_component", Kind::Bool, extract.largest_component, "keep only the largest region"),
    ]
}

/// Resolves a user-supplied key to its registry name. A bare name is
/// accepted when it matches the last segment of exactly one key.
pub fn resolve_key<'a>(registry: &'a [KeySpec], name: &str) -> Result<&'a KeySpec, CliError> {
    if let Some(k) = registry.iter().find(|k| k.name == name) {
        return Ok(k);
    }
    let matches: Vec<&KeySpec> = if name.contains('.') {
        Vec::new()
    } else {
        registry.iter().filter(|k| k.name.rsplit('.').next() == Some(name)).collect()
    };
    match matches.as_slice() {
        [k] => Ok(k),
        [] => Err(CliError::Usage(format!("unknown config key `{name}`"))),
        many => Err(CliError::Usage(format!(
            "ambiguous config key `{name}`; use one of {}",
            many.iter().map(|k| k.name).collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// A fully resolved configuration for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub values: BTreeMap<String, Value>,
}

fn type_error(spec: &KeySpec, shown: &str) -> CliError {
    CliError::Usage(format!("config key `{}` expects {}, got `{shown}`", spec.name, spec.kind.describe()))
}

impl RunConfig {
    /// Defaults, then `file_values`, then `flags` (raw `key`, `value` pairs).
    pub fn build(command: Command, file_values: BTreeMap<String, Value>, flags: &[(String, String)]) -> Result<Self, CliError> {
        let reg = registry();
        let mut values = BTreeMap::new();
        for spec in &reg {
            if let Some(d) = &spec.default {
                let v = spec.kind.parse(d).expect("registry default parses");
                values.insert(spec.name.to_string(), v);
            }
        }
        for (name, v) in file_values {
            let spec = resolve_key(&reg, &name)?;
            let shown = v.to_string();
            let v = spec.kind.coerce(v).ok_or_else(|| type_error(spec, &shown))?;
            values.insert(spec.name.to_string(), v);
        }
        for (name, raw) in flags {
            let spec = resolve_key(&reg, name)?;
            let v = spec.kind.parse(raw).ok_or_else(|| type_error(spec, raw))?;
            values.insert(spec.name.to_string(), v);
        }
        let cfg = Self { command, values };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Required keys are present and every referenced input file exists.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut required = vec!["output.dir"];
        required.extend_from_slice(self.command.required_keys());
        for k in required {
            if !self.values.contains_key(k) {
                return Err(CliError::Usage(format!("`{}` requires `{k}`", self.command)));
            }
        }
        for (k, _) in self.values.iter().filter(|(k, _)| k.starts_with("input.") || *k == "backend.weights") {
            for p in self.paths(k) {
                if !p.exists() {
                    return Err(CliError::Usage(format!("`{k}`: file {} does not exist", p.display())));
                }
            }
        }
        if let Some(Value::List(items)) = self.values.get("input.images") {
            if self.command == Command::DiscoverMask && items.len() < 2 {
                return Err(CliError::Usage("`input.images` needs at least two images".into()));
            }
        }
        Ok(())
    }

    fn paths(&self, key: &str) -> Vec<PathBuf> {
        let reg = registry();
        let kind = reg.iter().find(|k| k.name == key).map(|k| k.kind);
        match (kind, self.values.get(key)) {
            (Some(Kind::Path), Some(Value::Text(p))) => vec![PathBuf::from(p)],
            (Some(Kind::PathList), Some(Value::List(items))) => items.iter().map(|v| PathBuf::from(v.to_string())).collect(),
            _ => Vec::new(),
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.paths(key).into_iter().next()
    }

    pub fn path_list(&self, key: &str) -> Vec<PathBuf> {
        self.paths(key)
    }

    pub fn text(&self, key: &str) -> Option<&str> {
        match self.values.get(key) {
            Some(Value::Text(s)) => Some(s),
            _ => None,
        }
    }

    pub fn uint(&self, key: &str) -> u64 {
        match self.values.get(key) {
            Some(Value::UInt(u)) => *u,
            other => panic!("config key {key} is not an integer: {other:?}"),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        usize::try_from(self.uint(key)).map_err(|_| CliError::Usage(format!("`{key}` is too large")))
    }

    pub fn float(&self, key: &str) -> f64 {
        match self.values.get(key) {
            Some(Value::Float(x)) => *x,
            other => panic!("config key {key} is not a number: {other:?}"),
        }
    }

    pub fn flag(&self, key: &str) -> bool {
        matches!(self.values.get(key), Some(Value::Bool(true)))
    }

    pub fn uint_list(&self, key: &str) -> Vec<u64> {
        match self.values.get(key) {
            Some(Value::List(items)) => items
                .iter()
                .map(|v| match v {
                    Value::UInt(u) => *u,
                    other => panic!("config key {key} holds a non-integer: {other:?}"),
                })
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// Flattens a TOML document into dotted keys.
pub fn parse_toml(text: &str) -> Result<BTreeMap<String, Value>, CliError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Usage(format!("config file: {e}")))?;
    let mut out = BTreeMap::new();
    flatten("", &table, &mut out)?;
    Ok(out)
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) -> Result<(), CliError> {
    for (k, v) in table {
        let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if let toml::Value::Table(t) = v {
            flatten(&name, t, out)?;
        } else {
            out.insert(name.clone(), toml_value(&name, v)?);
        }
    }
    Ok(())
}

fn toml_value(name: &str, v: &toml::Value) -> Result<Value, CliError> {
    Ok(match v {
        toml::Value::Boolean(b) => Value::Bool(*b),
        toml::Value::Integer(i) => Value::UInt(
            u64::try_from(*i).map_err(|_| CliError::Usage(format!("config key `{name}` must not be negative")))?,
        ),
        toml::Value::Float(x) => Value::Float(*x),
        toml::Value::String(s) => Value::Text(s.clone()),
        toml::Value::Array(items) => Value::List(items.iter().map(|i| toml_value(name, i)).collect::<Result<_, _>>()?),
        other => return Err(CliError::Usage(format!("config key `{name}` has unsupported value {other}"))),
    })
}

/// Reads a config file: TOML, or the JSON manifest of an earlier run.
pub fn read_config_file(path: &Path, command: Command) -> Result<BTreeMap<String, Value>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    if text.trim_start().starts_with('{') {
        let manifest: ManifestConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("manifest {}: {e}", path.display())))?;
        if manifest.command != command {
            return Err(CliError::Usage(format!(
                "manifest {} records command `{}`, not `{command}`",
                path.display(),
                manifest.command
            )));
        }
        Ok(manifest.config)
    } else {
        parse_toml(&text)
    }
}

#[derive(Deserialize)]
struct ManifestConfig {
    command: Command,
    config: BTreeMap<String, Value>,
}

/// Splits `--key=value` / `--key value` override arguments.
pub fn parse_flags(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            return Err(CliError::Usage(format!("unexpected argument `{arg}`; overrides look like --key=value")));
        };
        match body.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage(format!("missing value for --{body}")))?;
                out.push((body.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}
