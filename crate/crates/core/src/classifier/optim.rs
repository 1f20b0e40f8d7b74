//! First-order update rules for the linear model.
//!
//! Both optimizers apply the full penalized gradient `g + l2 * W` but only
//! visit *active* feature rows: rows that were nonzero at the start or have
//! received a data gradient since. A row outside that set has zero weight,
//! zero gradient and zero optimizer state, so its update is exactly zero
//! and skipping it changes nothing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::linear::{LinearModel, SparseGradient};
use crate::error::Error;
use crate::label::NUM_CLASSES;

pub trait Optimizer {
    fn name(&self) -> &'static str;

    /// One update with data gradient `grad` plus the L2 term `l2 * W`
    /// (bias unpenalized).
    fn step(&mut self, model: &mut LinearModel, grad: &SparseGradient, l2: f64);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

type OptimizerFactory = fn(learning_rate: f64, dim: usize) -> Box<dyn Optimizer>;

/// Name → constructor table for the update rules.
const OPTIMIZERS: &[(&str, OptimizerKind, OptimizerFactory)] = &[
    ("sgd", OptimizerKind::Sgd, |lr, dim| {
        Box::new(Sgd::new(lr, dim))
    }),
    ("adam", OptimizerKind::Adam, |lr, dim| {
        Box::new(Adam::new(lr, dim))
    }),
];

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        OPTIMIZERS
            .iter()
            .find(|(_, kind, _)| *kind == self)
            .map(|(name, _, _)| *name)
            .expect("every kind is registered")
    }

    pub fn build(self, learning_rate: f64, dim: usize) -> Box<dyn Optimizer> {
        let (_, _, factory) = OPTIMIZERS
            .iter()
            .find(|(_, kind, _)| *kind == self)
            .expect("every kind is registered");
        factory(learning_rate, dim)
    }

    pub fn names() -> impl Iterator<Item = &'static str> {
        OPTIMIZERS.iter().map(|(name, _, _)| *name)
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        OPTIMIZERS
            .iter()
            .find(|(name, _, _)| *name == s)
            .map(|(_, kind, _)| *kind)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown optimizer {s:?} (known: {})",
                    Self::names().collect::<Vec<_>>().join(", ")
                ))
            })
    }
}

#[derive(Debug, Default)]
struct ActiveRows {
    rows: Vec<u32>,
    member: Vec<bool>,
    initialized: bool,
}

impl ActiveRows {
    fn new(dim: usize) -> Self {
        ActiveRows {
            rows: Vec::new(),
            member: vec![false; dim],
            initialized: false,
        }
    }

    fn update(&mut self, model: &LinearModel, grad: &SparseGradient) {
        if !self.initialized {
            for row in model.nonzero_rows() {
                self.insert(row);
            }
            self.initialized = true;
        }
        for &(row, _) in grad.rows() {
            self.insert(row);
        }
    }

    fn insert(&mut self, row: u32) {
        let slot = &mut self.member[row as usize];
        if !*slot {
            *slot = true;
            self.rows.push(row);
        }
    }
}

/// Sparse gradient rows as a lookup table for the active-row sweep.
fn grad_lookup(grad: &SparseGradient) -> BTreeMap<u32, [f64; NUM_CLASSES]> {
    grad.rows().iter().copied().collect()
}

pub struct Sgd {
    learning_rate: f64,
    active: ActiveRows,
}

impl Sgd {
    pub fn new(learning_rate: f64, dim: usize) -> Self {
        Sgd {
            learning_rate,
            active: ActiveRows::new(dim),
        }
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, model: &mut LinearModel, grad: &SparseGradient, l2: f64) {
        self.active.update(model, grad);
        let lr = self.learning_rate;
        let data = grad_lookup(grad);
        let zero = [0.0; NUM_CLASSES];
        for &row in &self.active.rows {
            let g = data.get(&row).unwrap_or(&zero);
            let w = model.row_mut(row);
            for c in 0..NUM_CLASSES {
                w[c] -= lr * (g[c] + l2 * w[c]);
            }
        }
        let bias = model.bias_mut();
        for c in 0..NUM_CLASSES {
            bias[c] -= lr * grad.bias()[c];
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam with bias-corrected moment estimates.
pub struct Adam {
    learning_rate: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
    m_bias: [f64; NUM_CLASSES],
    v_bias: [f64; NUM_CLASSES],
    active: ActiveRows,
}

impl Adam {
    pub fn new(learning_rate: f64, dim: usize) -> Self {
        Adam {
            learning_rate,
            t: 0,
            m: vec![0.0; dim * NUM_CLASSES],
            v: vec![0.0; dim * NUM_CLASSES],
            m_bias: [0.0; NUM_CLASSES],
            v_bias: [0.0; NUM_CLASSES],
            active: ActiveRows::new(dim),
        }
    }
}

#[inline]
fn adam_update(w: &mut f64, m: &mut f64, v: &mut f64, g: f64, step_size: f64, v_correction: f64) {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    *w -= step_size * *m / ((*v / v_correction).sqrt() + ADAM_EPSILON);
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, model: &mut LinearModel, grad: &SparseGradient, l2: f64) {
        self.active.update(model, grad);
        self.t = self.t.saturating_add(1);
        let m_correction = 1.0 - ADAM_BETA1.powi(self.t);
        let v_correction = 1.0 - ADAM_BETA2.powi(self.t);
        let step_size = self.learning_rate / m_correction;

        let data = grad_lookup(grad);
        let zero = [0.0; NUM_CLASSES];
        for &row in &self.active.rows {
            let g = data.get(&row).unwrap_or(&zero);
            let base = row as usize * NUM_CLASSES;
            let w = model.row_mut(row);
            for c in 0..NUM_CLASSES {
                let total = g[c] + l2 * w[c];
                adam_update(
                    &mut w[c],
                    &mut self.m[base + c],
                    &mut self.v[base + c],
                    total,
                    step_size,
                    v_correction,
                );
            }
        }
        let bias = model.bias_mut();
        for c in 0..NUM_CLASSES {
            adam_update(
                &mut bias[c],
                &mut self.m_bias[c],
                &mut self.v_bias[c],
                grad.bias()[c],
                step_size,
                v_correction,
            );
        }
    }
}
