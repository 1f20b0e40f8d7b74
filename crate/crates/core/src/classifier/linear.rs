//! Multinomial logistic regression over hashed features.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::features::{featurize, FeatureConfig, FeatureVector};
use super::{softmax, LogitVector, TrainConfig};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::label::{SeverityLabel, NUM_CLASSES};

pub const MODEL_MAGIC: &[u8; 8] = b"PLMODEL\0";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Weights are stored feature-major: the three class weights of feature `j`
/// live at `weights[3j..3j+3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    features: FeatureConfig,
    weights: Vec<f64>,
    bias: [f64; NUM_CLASSES],
}

/// Gradient of the mean data loss over a batch, without the L2 term.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient {
    rows: Vec<(u32, [f64; NUM_CLASSES])>,
    bias: [f64; NUM_CLASSES],
}

impl SparseGradient {
    pub fn from_parts(mut rows: Vec<(u32, [f64; NUM_CLASSES])>, bias: [f64; NUM_CLASSES]) -> Self {
        rows.sort_by_key(|&(row, _)| row);
        SparseGradient { rows, bias }
    }

    pub fn rows(&self) -> &[(u32, [f64; NUM_CLASSES])] {
        &self.rows
    }

    pub fn bias(&self) -> [f64; NUM_CLASSES] {
        self.bias
    }
}

/// A featurized, labeled training example.
#[derive(Debug, Clone)]
pub struct Example {
    pub features: FeatureVector,
    pub label: SeverityLabel,
}

impl LinearModel {
    pub fn zeros(features: FeatureConfig) -> Self {
        LinearModel {
            weights: vec![0.0; features.dim * NUM_CLASSES],
            bias: [0.0; NUM_CLASSES],
            features,
        }
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.features.dim
    }

    pub fn row(&self, row: u32) -> [f64; NUM_CLASSES] {
        let base = row as usize * NUM_CLASSES;
        [
            self.weights[base],
            self.weights[base + 1],
            self.weights[base + 2],
        ]
    }

    pub fn row_mut(&mut self, row: u32) -> &mut [f64] {
        let base = row as usize * NUM_CLASSES;
        &mut self.weights[base..base + NUM_CLASSES]
    }

    pub fn bias(&self) -> [f64; NUM_CLASSES] {
        self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64; NUM_CLASSES] {
        &mut self.bias
    }

    /// Flat feature-major weight matrix.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn nonzero_rows(&self) -> impl Iterator<Item = u32> + '_ {
        self.weights
            .chunks_exact(NUM_CLASSES)
            .enumerate()
            .filter(|(_, w)| w.iter().any(|&x| x != 0.0))
            .map(|(j, _)| j as u32)
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.bias.iter())
            .all(|w| w.is_finite())
    }

    pub fn featurize(&self, text: &str) -> FeatureVector {
        featurize(text, &self.features)
    }

    /// `W·x + b` for one feature vector.
    pub fn logits(&self, x: &FeatureVector) -> LogitVector {
        let mut z = [0.0; NUM_CLASSES];
        for &(j, value) in x.entries() {
            let w = self.row(j);
            for c in 0..NUM_CLASSES {
                z[c] += w[c] * value;
            }
        }
        for c in 0..NUM_CLASSES {
            z[c] += self.bias[c];
        }
        LogitVector(z)
    }

    /// Logits for a batch of cleaned texts, in input order.
    pub fn predict_logits<S: AsRef<str> + Sync>(&self, texts: &[S]) -> Vec<LogitVector> {
        texts
            .par_iter()
            .map(|t| self.logits(&self.featurize(t.as_ref())))
            .collect()
    }

    /// `0.5 * l2 * ||W||^2`; the bias is not penalized.
    pub fn penalty(&self, l2: f64) -> f64 {
        if l2 == 0.0 {
            return 0.0;
        }
        0.5 * l2 * self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Mean cross-entropy over `batch` and its gradient.
    pub fn batch_gradient(&self, batch: &[&Example]) -> (f64, SparseGradient) {
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut rows: BTreeMap<u32, [f64; NUM_CLASSES]> = BTreeMap::new();
        let mut bias = [0.0; NUM_CLASSES];
        let mut loss = 0.0;
        for example in batch {
            let z = self.logits(&example.features);
            let p = softmax(&z);
            let y = example.label.index();
            loss += log_sum_exp(&z.0) - z.0[y];
            let mut delta = p;
            delta[y] -= 1.0;
            for &(j, value) in example.features.entries() {
                let g = rows.entry(j).or_insert([0.0; NUM_CLASSES]);
                for c in 0..NUM_CLASSES {
                    g[c] += delta[c] * value * scale;
                }
            }
            for c in 0..NUM_CLASSES {
                bias[c] += delta[c] * scale;
            }
        }
        (
            loss * scale,
            SparseGradient {
                rows: rows.into_iter().collect(),
                bias,
            },
        )
    }

    /// Penalized mean cross-entropy over `examples`.
    pub fn objective(&self, examples: &[Example], l2: f64) -> f64 {
        let refs: Vec<&Example> = examples.iter().collect();
        self.batch_gradient(&refs).0 + self.penalty(l2)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Model {
            path: path.to_path_buf(),
            msg,
        })
    }

    /// Binary container, all integers and floats little-endian:
    ///
    /// ```text
    /// magic "PLMODEL\0" | u32 version | u32 header_len | header JSON (FeatureConfig)
    /// | 3 x f64 bias | u64 n_rows | n_rows x (u32 row, 3 x f64)
    /// ```
    ///
    /// Only rows with a nonzero weight are written, in ascending order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.features).expect("feature config serializes");
        let rows: Vec<u32> = self.nonzero_rows().collect();
        let mut out = Vec::with_capacity(32 + header.len() + rows.len() * 28);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for b in self.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
        for row in rows {
            out.extend_from_slice(&row.to_le_bytes());
            for w in self.row(row) {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != MODEL_MAGIC {
            return Err("not a model file (bad magic)".into());
        }
        let version = r.u32()?;
        if version != MODEL_FORMAT_VERSION {
            return Err(format!(
                "format version {version} is not supported (expected {MODEL_FORMAT_VERSION})"
            ));
        }
        let header_len = r.u32()? as usize;
        let features: FeatureConfig =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| format!("header: {e}"))?;
        features.validate().map_err(|e| e.to_string())?;
        let mut model = LinearModel::zeros(features);
        for c in 0..NUM_CLASSES {
            model.bias[c] = r.f64()?;
        }
        let n_rows = r.u64()?;
        for _ in 0..n_rows {
            let row = r.u32()?;
            if row as usize >= features.dim {
                return Err(format!("row {row} out of range for dim {}", features.dim));
            }
            for c in 0..NUM_CLASSES {
                model.row_mut(row)[c] = r.f64()?;
            }
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        if !model.is_finite() {
            return Err("non-finite parameter".into());
        }
        Ok(model)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or("truncated model file")?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn log_sum_exp(z: &[f64; NUM_CLASSES]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Result of a training run: the model and the full-dataset objective
/// after each epoch.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: LinearModel,
    pub epoch_objective: Vec<f64>,
}

pub fn featurize_dataset(ds: &Dataset, features: &FeatureConfig) -> Result<Vec<Example>> {
    ds.iter()
        .map(|post| {
            let label = post
                .label
                .ok_or_else(|| Error::Dataset(format!("post {:?} has no label", post.id)))?;
            Ok(Example {
                features: featurize(&post.text, features),
                label,
            })
        })
        .collect()
}

/// Trains from zero weights.
pub fn fit(ds: &Dataset, cfg: &TrainConfig) -> Result<LinearModel> {
    Ok(fit_from(ds, cfg, None)?.model)
}

/// Minibatch training of the penalized cross-entropy. With `init` the run
/// continues from that model (its feature config wins); otherwise from zeros.
/// The batch order is a fresh shuffle per epoch from a ChaCha8 stream seeded
/// with `cfg.seed`.
pub fn fit_from(ds: &Dataset, cfg: &TrainConfig, init: Option<LinearModel>) -> Result<FitOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Training("training dataset is empty".into()));
    }
    let mut model = init.unwrap_or_else(|| LinearModel::zeros(cfg.feature_config()));
    let examples = featurize_dataset(ds, model.feature_config())?;

    let mut optimizer = cfg.optimizer.build(cfg.learning_rate, model.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_objective = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grad) = model.batch_gradient(&batch);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {batch_idx}"
                )));
            }
            optimizer.step(&mut model, &grad, cfg.l2_penalty);
        }
        let objective = model.objective(&examples, cfg.l2_penalty);
        if !objective.is_finite() {
            return Err(Error::Training(format!(
                "non-finite objective after epoch {epoch}"
            )));
        }
        log::debug!("epoch {epoch}: objective {objective:.6}");
        epoch_objective.push(objective);
    }
    Ok(FitOutcome {
        model,
        epoch_objective,
    })
}
