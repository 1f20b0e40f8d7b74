//! Hashed word n-gram features.
//!
//! Tokens are the lowercased, Unicode-whitespace-separated words of a
//! cleaned text, truncated to `max_input_length`. Every n-gram of order
//! 1..=`ngram_max` is hashed with 64-bit FNV-1a into `[0, dim)`:
//!
//! ```text
//! h = FNV-1a( salt[n] as 8 little-endian bytes
//!             ++ token_1 ++ 0x1F ++ token_2 ++ ... ++ token_n )
//! index = h mod dim
//! ```
//!
//! Counts per index (collisions add up) are L2-normalized.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FEATURE_DIM: usize = 1 << 18;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const NGRAM_SEPARATOR: u8 = 0x1f;

/// Per-order salts; index 0 is unigrams.
const ORDER_SALTS: [u64; 4] = [
    0x9e37_79b9_7f4a_7c15,
    0xc2b2_ae3d_27d4_eb4f,
    0x1656_67b1_9e37_79f9,
    0x85eb_ca77_c2b2_ae63,
];

pub const MAX_NGRAM: usize = ORDER_SALTS.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub dim: usize,
    pub ngram_max: usize,
    pub max_input_length: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            dim: DEFAULT_FEATURE_DIM,
            ngram_max: 2,
            max_input_length: 256,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > u32::MAX as usize {
            return Err(Error::Config(format!(
                "feature dim must be in [1, 2^32), got {}",
                self.dim
            )));
        }
        if !(1..=MAX_NGRAM).contains(&self.ngram_max) {
            return Err(Error::Config(format!(
                "ngram_max must be in [1, {MAX_NGRAM}], got {}",
                self.ngram_max
            )));
        }
        if self.max_input_length == 0 {
            return Err(Error::Config("max_input_length must be positive".into()));
        }
        Ok(())
    }
}

/// Sparse, L2-normalized feature vector; entries sorted by index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    dim: usize,
    entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    pub fn zero(dim: usize) -> Self {
        FeatureVector {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn get(&self, index: u32) -> f64 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map_or(0.0, |pos| self.entries[pos].1)
    }
}

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(state, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn hash_ngram(order: usize, tokens: &[String]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &ORDER_SALTS[order - 1].to_le_bytes());
    for (i, token) in tokens.iter().enumerate() {
        if i > 0 {
            h = fnv1a(h, &[NGRAM_SEPARATOR]);
        }
        h = fnv1a(h, token.as_bytes());
    }
    h
}

pub fn tokenize(text: &str, max_tokens: usize) -> Vec<String> {
    text.split_whitespace()
        .take(max_tokens)
        .map(str::to_lowercase)
        .collect()
}

/// Raw n-gram counts per hashed index, before normalization.
pub fn hashed_counts(text: &str, cfg: &FeatureConfig) -> BTreeMap<u32, f64> {
    let tokens = tokenize(text, cfg.max_input_length);
    let mut counts = BTreeMap::new();
    for order in 1..=cfg.ngram_max {
        for gram in tokens.windows(order) {
            let index = (hash_ngram(order, gram) % cfg.dim as u64) as u32;
            *counts.entry(index).or_insert(0.0) += 1.0;
        }
    }
    counts
}

pub fn featurize(text: &str, cfg: &FeatureConfig) -> FeatureVector {
    let counts = hashed_counts(text, cfg);
    let norm = counts.values().map(|c| c * c).sum::<f64>().sqrt();
    if norm == 0.0 {
        return FeatureVector::zero(cfg.dim);
    }
    FeatureVector {
        dim: cfg.dim,
        entries: counts.into_iter().map(|(i, c)| (i, c / norm)).collect(),
    }
}
