//! Classifier backends used for both teacher and student.
//!
//! Every backend implements [`ClassifierBackend`] and is created by name from
//! a [`BackendRegistry`]. Two are built in:
//!
//! * `native`: the in-process [`LinearModel`] over hashed n-grams.
//! * `exec:<argv>`: a child process speaking the line-delimited JSON
//!   protocol in [`protocol`].
//!
//! Models live on disk. `fit` writes a model to a path and `predict` reads
//! one, so every pipeline stage can be replayed from its persisted inputs.

pub mod exec;
pub mod features;
pub mod linear;
pub mod optim;
pub mod protocol;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::label::{SeverityLabel, NUM_CLASSES};

pub use features::{featurize, FeatureConfig, FeatureVector};
pub use linear::LinearModel;
pub use optim::OptimizerKind;

/// Raw pre-softmax scores in canonical class order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitVector(pub [f64; NUM_CLASSES]);

impl LogitVector {
    pub fn get(&self, label: SeverityLabel) -> f64 {
        self.0[label.index()]
    }

    /// Highest-scoring class; ties go to the lower class index.
    pub fn argmax(&self) -> SeverityLabel {
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if self.0[c] > self.0[best] {
                best = c;
            }
        }
        SeverityLabel::from_index(best).expect("index < NUM_CLASSES")
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn probabilities(&self) -> [f64; NUM_CLASSES] {
        softmax(self)
    }
}

/// Max-subtracted exp-normalization.
pub fn softmax(logits: &LogitVector) -> [f64; NUM_CLASSES] {
    let max = logits.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.0.map(|z| (z - max).exp());
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Tokens kept per post.
    pub max_input_length: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2_penalty: f64,
    pub seed: u64,
    /// Hashed feature space size (native backend only).
    pub feature_dim: usize,
    /// Highest n-gram order hashed (native backend only).
    pub ngram_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::native_default()
    }
}

impl TrainConfig {
    /// Defaults for the in-process linear model. Mirrors `configs/default.conf`.
    pub fn native_default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.1,
            max_input_length: 256,
            batch_size: 8,
            epochs: 10,
            l2_penalty: 1e-6,
            seed: 0,
            feature_dim: features::DEFAULT_FEATURE_DIM,
            ngram_max: 2,
        }
    }

    /// Continued training of the student on clean labels: a smaller step and
    /// fewer epochs, so the labeled set refines the student instead of
    /// overwriting it.
    pub fn native_finetune_default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 3,
            ..Self::native_default()
        }
    }

    /// Defaults handed to external (transformer) backends.
    pub fn external_default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-5,
            max_input_length: 256,
            batch_size: 8,
            epochs: 3,
            l2_penalty: 0.0,
            ..Self::native_default()
        }
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            dim: self.feature_dim,
            ngram_max: self.ngram_max,
            max_input_length: self.max_input_length,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.l2_penalty.is_finite() && self.l2_penalty >= 0.0) {
            return Err(Error::Config(format!(
                "l2_penalty must be nonnegative, got {}",
                self.l2_penalty
            )));
        }
        self.feature_config().validate()
    }
}

/// A teacher/student model implementation.
pub trait ClassifierBackend: Send {
    fn name(&self) -> &str;

    /// Trains on `train` and writes the model to `out`. With `warm_start`
    /// training continues from the model stored there.
    fn fit(
        &mut self,
        train: &Dataset,
        cfg: &TrainConfig,
        warm_start: Option<&Path>,
        out: &Path,
    ) -> Result<()>;

    /// Raw logits of the model stored at `model` for each text, in order.
    fn predict(&mut self, model: &Path, texts: &[String]) -> Result<Vec<LogitVector>>;
}

pub struct NativeBackend;

impl ClassifierBackend for NativeBackend {
    fn name(&self) -> &str {
        "native"
    }

    fn fit(
        &mut self,
        train: &Dataset,
        cfg: &TrainConfig,
        warm_start: Option<&Path>,
        out: &Path,
    ) -> Result<()> {
        let init = warm_start.map(LinearModel::load).transpose()?;
        let outcome = linear::fit_from(train, cfg, init)?;
        outcome.model.save(out)
    }

    fn predict(&mut self, model: &Path, texts: &[String]) -> Result<Vec<LogitVector>> {
        Ok(LinearModel::load(model)?.predict_logits(texts))
    }
}

/// Builds a backend from the argument part of a selector (`exec:<argv>`
/// passes `<argv>`).
pub type BackendFactory = fn(args: Option<&str>) -> Result<Box<dyn ClassifierBackend>>;

/// Backends by name.
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl BackendRegistry {
    pub fn empty() -> Self {
        BackendRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut registry = Self::empty();
        registry.register("native", |args| match args {
            None => Ok(Box::new(NativeBackend)),
            Some(a) => Err(Error::Config(format!(
                "backend `native` takes no arguments, got {a:?}"
            ))),
        });
        registry.register("exec", |args| {
            let argv = args.ok_or_else(|| {
                Error::Config("backend `exec` needs a command: exec:<argv>".into())
            })?;
            Ok(Box::new(exec::ExecBackend::spawn_command_line(argv)?))
        });
        registry
    }

    pub fn register(&mut self, name: &str, factory: BackendFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    /// Checks that `selector` names a registered backend without building it.
    pub fn validate(&self, selector: &str) -> Result<()> {
        let (name, _) = split_selector(selector);
        if self.factories.contains_key(name) {
            Ok(())
        } else {
            Err(self.unknown(name))
        }
    }

    /// Builds the backend named by `selector`: `name` or `name:args`.
    pub fn create(&self, selector: &str) -> Result<Box<dyn ClassifierBackend>> {
        let (name, args) = split_selector(selector);
        let factory = self.factories.get(name).ok_or_else(|| self.unknown(name))?;
        factory(args)
    }

    fn unknown(&self, name: &str) -> Error {
        Error::Config(format!(
            "unknown backend {name:?} (known: {})",
            self.names().collect::<Vec<_>>().join(", ")
        ))
    }
}

pub fn split_selector(selector: &str) -> (&str, Option<&str>) {
    match selector.split_once(':') {
        Some((name, args)) => (name.trim(), Some(args)),
        None => (selector.trim(), None),
    }
}
