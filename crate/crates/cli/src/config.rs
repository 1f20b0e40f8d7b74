//! Run configuration: a flat `section.key = value` file plus command-line
//! overrides, resolved and validated in full before any work starts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pseudolabel_core::classifier::optim::OptimizerKind;
use pseudolabel_core::classifier::{split_selector, BackendRegistry, TrainConfig};
use pseudolabel_core::selection::{RankingKind, SelectionConfig};
use pseudolabel_core::{Error, Result};

/// The documented template, with every key at its native default.
pub const DEFAULT_CONF: &str = include_str!("../configs/default.conf");

const TRAIN_KEYS: [&str; 8] = [
    "optimizer",
    "learning_rate",
    "max_input_length",
    "batch_size",
    "epochs",
    "l2_penalty",
    "feature_dim",
    "ngram_max",
];

pub const SPLITS: [&str; 4] = ["train", "dev", "test", "unlabeled"];

/// Every accepted key, in rendering order.
pub fn known_keys() -> Vec<String> {
    let mut keys: Vec<String> = SPLITS.iter().map(|s| format!("data.{s}")).collect();
    for section in ["train", "finetune"] {
        keys.extend(TRAIN_KEYS.iter().map(|k| format!("{section}.{k}")));
    }
    keys.extend(
        [
            "selection.k_per_class",
            "selection.ranking_score",
            "run.backend",
            "run.out",
            "run.seeds",
            "run.rounds",
            "run.parallel",
        ]
        .map(String::from),
    );
    keys
}

#[derive(Debug, Clone, PartialEq)]
struct Value {
    text: String,
    /// Directory that relative paths in `text` are resolved against.
    base: Option<PathBuf>,
}

/// Raw key/value layers before typing. Later inserts win.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<String, Value>,
}

impl RawConfig {
    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut raw = RawConfig::default();
        raw.merge_text(&text, Some(&base))
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(raw)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        raw.merge_text(text, None).map_err(Error::Config)?;
        Ok(raw)
    }

    fn merge_text(&mut self, text: &str, base: Option<&Path>) -> std::result::Result<(), String> {
        let mut section = String::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`, got {line:?}", i + 1))?;
            let key = key.trim();
            let key = if section.is_empty() || key.contains('.') {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            self.set(&key, value.trim(), base.map(Path::to_path_buf))
                .map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }

    /// Sets one key; relative paths in command-line values stay relative to
    /// the working directory.
    pub fn set(
        &mut self,
        key: &str,
        value: &str,
        base: Option<PathBuf>,
    ) -> std::result::Result<(), String> {
        if !known_keys().iter().any(|k| k == key) {
            return Err(format!(
                "unknown key `{key}` (valid keys: {})",
                known_keys().join(", ")
            ));
        }
        self.values.insert(
            key.to_string(),
            Value {
                text: value.to_string(),
                base,
            },
        );
        Ok(())
    }

    pub fn set_override(&mut self, key: &str, value: &str) -> Result<()> {
        self.set(key, value, None).map_err(Error::Config)
    }

    fn get(&self, key: &str) -> Option<&Value> {
        self.values.get(key)
    }
}

fn parse_value<T: FromStr>(key: &str, value: &Value) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .text
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {:?}: {e}", value.text)))
}

fn parse_bool(key: &str, value: &Value) -> Result<bool> {
    match value.text.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key} = {:?}: expected true or false",
            value.text
        ))),
    }
}

fn parse_seeds(key: &str, value: &Value) -> Result<Vec<u64>> {
    value
        .text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|e| Error::Config(format!("{key}: seed {s:?}: {e}")))
        })
        .collect()
}

fn resolve_path(value: &Value) -> Option<PathBuf> {
    if value.text.is_empty() {
        return None;
    }
    let path = PathBuf::from(&value.text);
    Some(match &value.base {
        Some(base) if path.is_relative() => base.join(path),
        _ => path,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
}

impl DataPaths {
    pub fn get(&self, split: &str) -> Option<&Path> {
        match split {
            "train" => self.train.as_deref(),
            "dev" => self.dev.as_deref(),
            "test" => self.test.as_deref(),
            "unlabeled" => self.unlabeled.as_deref(),
            _ => None,
        }
    }

    fn slot(&mut self, split: &str) -> &mut Option<PathBuf> {
        match split {
            "train" => &mut self.train,
            "dev" => &mut self.dev,
            "test" => &mut self.test,
            _ => &mut self.unlabeled,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataPaths,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    pub selection: SelectionConfig,
    pub backend: String,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub rounds: u32,
    pub parallel: bool,
}

impl RunConfig {
    /// Types the raw layers. Unset training keys fall back to the native
    /// defaults, or to the external defaults when the backend is `exec`.
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let backend = raw
            .get("run.backend")
            .map(|v| v.text.clone())
            .unwrap_or_else(|| "native".to_string());
        let (base, finetune_base) = if split_selector(&backend).0 == "native" {
            (
                TrainConfig::native_default(),
                TrainConfig::native_finetune_default(),
            )
        } else {
            (
                TrainConfig::external_default(),
                TrainConfig::external_default(),
            )
        };

        let mut data = DataPaths::default();
        for split in SPLITS {
            if let Some(v) = raw.get(&format!("data.{split}")) {
                *data.slot(split) = resolve_path(v);
            }
        }

        let train = train_section(raw, "train", base)?;
        let finetune = train_section(raw, "finetune", finetune_base)?;

        let mut selection = SelectionConfig::default();
        if let Some(v) = raw.get("selection.k_per_class") {
            selection.k_per_class = parse_value("selection.k_per_class", v)?;
        }
        if let Some(v) = raw.get("selection.ranking_score") {
            selection.ranking_score = parse_value::<RankingKind>("selection.ranking_score", v)?;
        }

        let out = raw
            .get("run.out")
            .and_then(resolve_path)
            .unwrap_or_else(|| PathBuf::from("runs/default"));
        let seeds = match raw.get("run.seeds") {
            Some(v) => parse_seeds("run.seeds", v)?,
            None => vec![0],
        };
        let rounds = match raw.get("run.rounds") {
            Some(v) => parse_value("run.rounds", v)?,
            None => 1,
        };
        let parallel = match raw.get("run.parallel") {
            Some(v) => parse_bool("run.parallel", v)?,
            None => true,
        };
        Ok(RunConfig {
            data,
            train,
            finetune,
            selection,
            backend,
            out,
            seeds,
            rounds,
            parallel,
        })
    }

    /// Checks everything a command needs, before anything is written.
    pub fn validate(&self, registry: &BackendRegistry, required: &[&str]) -> Result<()> {
        self.train.validate().map_err(|e| prefix("train", e))?;
        self.finetune
            .validate()
            .map_err(|e| prefix("finetune", e))?;
        self.selection.validate()?;
        registry.validate(&self.backend)?;
        if self.seeds.is_empty() {
            return Err(Error::Config(
                "run.seeds must list at least one seed".into(),
            ));
        }
        let distinct: BTreeSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::Config("run.seeds must be distinct".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("run.rounds must be at least 1".into()));
        }
        for split in required {
            if self.data.get(split).is_none() {
                return Err(Error::Config(format!(
                    "data.{split} is required for this command"
                )));
            }
        }
        for split in SPLITS {
            if let Some(path) = self.data.get(split) {
                if !path.is_file() {
                    return Err(Error::Config(format!(
                        "data.{split}: {} does not exist",
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn first_seed(&self) -> u64 {
        self.seeds[0]
    }

    /// The resolved configuration in file syntax. Parsing it back yields the
    /// same configuration.
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str("[data]\n");
        for split in SPLITS {
            let path = self
                .data
                .get(split)
                .map(|p| p.display().to_string())
                .unwrap_or_default();
            let _ = writeln!(s, "{split} = {path}");
        }
        for (name, cfg) in [("train", &self.train), ("finetune", &self.finetune)] {
            let _ = writeln!(s, "\n[{name}]");
            let _ = writeln!(s, "optimizer = {}", cfg.optimizer.name());
            let _ = writeln!(s, "learning_rate = {:?}", cfg.learning_rate);
            let _ = writeln!(s, "max_input_length = {}", cfg.max_input_length);
            let _ = writeln!(s, "batch_size = {}", cfg.batch_size);
            let _ = writeln!(s, "epochs = {}", cfg.epochs);
            let _ = writeln!(s, "l2_penalty = {:?}", cfg.l2_penalty);
            let _ = writeln!(s, "feature_dim = {}", cfg.feature_dim);
            let _ = writeln!(s, "ngram_max = {}", cfg.ngram_max);
        }
        let _ = writeln!(s, "\n[selection]");
        let _ = writeln!(s, "k_per_class = {}", self.selection.k_per_class);
        let _ = writeln!(s, "ranking_score = {}", self.selection.ranking_score);
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "backend = {}", self.backend);
        let _ = writeln!(s, "out = {}", self.out.display());
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "seeds = {}", seeds.join(","));
        let _ = writeln!(s, "rounds = {}", self.rounds);
        let _ = writeln!(s, "parallel = {}", self.parallel);
        s
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("{section}.{msg}")),
        other => other,
    }
}

fn train_section(raw: &RawConfig, section: &str, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    for key in TRAIN_KEYS {
        let full = format!("{section}.{key}");
        let Some(v) = raw.get(&full) else { continue };
        match key {
            "optimizer" => cfg.optimizer = parse_value::<OptimizerKind>(&full, v)?,
            "learning_rate" => cfg.learning_rate = parse_value(&full, v)?,
            "max_input_length" => cfg.max_input_length = parse_value(&full, v)?,
            "batch_size" => cfg.batch_size = parse_value(&full, v)?,
            "epochs" => cfg.epochs = parse_value(&full, v)?,
            "l2_penalty" => cfg.l2_penalty = parse_value(&full, v)?,
            "feature_dim" => cfg.feature_dim = parse_value(&full, v)?,
            "ngram_max" => cfg.ngram_max = parse_value(&full, v)?,
            _ => unreachable!("TRAIN_KEYS is exhaustive"),
        }
    }
    Ok(cfg)
}

/// `(key, value)` pairs from `--section.key value` flags, in command-line order.
pub type Overrides = Vec<(String, String)>;

/// Splits `--section.key value` and `--section.key=value` pairs out of
/// `args`, returning the remaining arguments and the overrides.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        if arg == "--" {
            rest.push(arg);
            rest.extend(iter.by_ref());
            break;
        }
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => iter
                .next()
                .ok_or_else(|| Error::Config(format!("--{name} needs a value")))?,
        };
        overrides.push((name.to_string(), value));
    }
    Ok((rest, overrides))
}
