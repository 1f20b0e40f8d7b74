//! Synthetic 3-class corpora for exercising the pipeline end to end.
//!
//! Each class owns a keyword vocabulary drawn with a Zipf law, so a small
//! labeled sample sees the frequent keywords of a class but misses most of
//! its long tail. Posts mix class keywords, a few keywords of another class,
//! and shared filler words. Unlabeled posts carry a subreddit tag drawn from
//! a class-dependent distribution. Label noise flips a fraction of the
//! training labels to a uniformly chosen other class; dev and test labels
//! are clean.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Post};
use crate::label::{SeverityLabel, NUM_CLASSES};

const CLASS_PREFIX: [&str; NUM_CLASSES] = ["lo", "mo", "se"];

const SUBREDDITS: [&str; 9] = [
    "r/depression",
    "r/adhd",
    "r/anxiety",
    "r/mentalhealth",
    "r/suicidewatch",
    "r/lonely",
    "r/bpd",
    "r/ptsd",
    "r/fitness",
];

/// Relative subreddit weights per class, aligned with `SUBREDDITS`.
const SUBREDDIT_WEIGHTS: [[u32; 9]; NUM_CLASSES] = [
    [2, 3, 4, 6, 1, 3, 1, 2, 10],
    [8, 5, 6, 5, 2, 4, 3, 3, 2],
    [9, 8, 3, 3, 7, 3, 3, 3, 1],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub n_unlabeled: usize,
    pub label_noise: f64,
    pub class_priors: [f64; NUM_CLASSES],
    pub class_vocab: usize,
    pub shared_vocab: usize,
    pub zipf_exponent: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Probability that a token is a keyword of the post's own class.
    pub signal_rate: f64,
    /// Probability that a token is a keyword of some other class.
    pub confuser_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_train: 300,
            n_dev: 300,
            n_test: 300,
            n_unlabeled: 5000,
            label_noise: 0.10,
            class_priors: [0.3, 0.45, 0.25],
            class_vocab: 400,
            shared_vocab: 600,
            zipf_exponent: 0.9,
            min_tokens: 6,
            max_tokens: 20,
            signal_rate: 0.3,
            confuser_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub unlabeled: Dataset,
    /// Hidden true class of each unlabeled post, in dataset order.
    pub unlabeled_truth: Vec<SeverityLabel>,
}

struct Generator<'a> {
    cfg: &'a SyntheticConfig,
    rng: ChaCha8Rng,
    classes: WeightedIndex<f64>,
    keyword: WeightedIndex<f64>,
    filler: WeightedIndex<f64>,
    subreddit: Vec<WeightedIndex<u32>>,
}

fn zipf(n: usize, exponent: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n.max(1)).map(|r| (r as f64).powf(-exponent)))
        .expect("positive weights")
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a SyntheticConfig, seed: u64) -> Self {
        Generator {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            classes: WeightedIndex::new(cfg.class_priors).expect("valid class priors"),
            keyword: zipf(cfg.class_vocab, cfg.zipf_exponent),
            filler: zipf(cfg.shared_vocab, cfg.zipf_exponent),
            subreddit: SUBREDDIT_WEIGHTS
                .iter()
                .map(|w| WeightedIndex::new(w).expect("valid weights"))
                .collect(),
        }
    }

    fn class(&mut self) -> SeverityLabel {
        SeverityLabel::from_index(self.classes.sample(&mut self.rng)).expect("3 classes")
    }

    fn text(&mut self, class: SeverityLabel) -> String {
        let n = self
            .rng
            .gen_range(self.cfg.min_tokens..=self.cfg.max_tokens);
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = self.rng.gen();
            let token = if u < self.cfg.signal_rate {
                format!(
                    "{}{}",
                    CLASS_PREFIX[class.index()],
                    self.keyword.sample(&mut self.rng)
                )
            } else if u < self.cfg.signal_rate + self.cfg.confuser_rate {
                let other = (class.index() + self.rng.gen_range(1..NUM_CLASSES)) % NUM_CLASSES;
                format!(
                    "{}{}",
                    CLASS_PREFIX[other],
                    self.keyword.sample(&mut self.rng)
                )
            } else {
                format!("w{}", self.filler.sample(&mut self.rng))
            };
            tokens.push(token);
        }
        tokens.join(" ")
    }

    fn noisy(&mut self, class: SeverityLabel) -> SeverityLabel {
        // both draws happen unconditionally so the noise rate does not
        // shift the rest of the stream
        let flip = self.rng.gen::<f64>() < self.cfg.label_noise;
        let shift = self.rng.gen_range(1..NUM_CLASSES);
        if flip {
            SeverityLabel::from_index((class.index() + shift) % NUM_CLASSES).expect("3 classes")
        } else {
            class
        }
    }

    fn labeled(&mut self, prefix: &str, n: usize, noisy: bool) -> Dataset {
        let posts = (0..n)
            .map(|i| {
                let class = self.class();
                let text = self.text(class);
                let label = if noisy { self.noisy(class) } else { class };
                Post::labeled(format!("{prefix}-{i:05}"), text, label)
            })
            .collect();
        Dataset::labeled(posts).expect("generated ids are unique")
    }
}

pub fn generate(cfg: &SyntheticConfig, seed: u64) -> SyntheticCorpus {
    let mut g = Generator::new(cfg, seed);
    let train = g.labeled("train", cfg.n_train, true);
    let dev = g.labeled("dev", cfg.n_dev, false);
    let test = g.labeled("test", cfg.n_test, false);
    let mut truth = Vec::with_capacity(cfg.n_unlabeled);
    let posts = (0..cfg.n_unlabeled)
        .map(|i| {
            let class = g.class();
            truth.push(class);
            let text = g.text(class);
            let subreddit = SUBREDDITS[g.subreddit[class.index()].sample(&mut g.rng)];
            Post::new(format!("u-{i:06}"), text).with_subreddit(subreddit)
        })
        .collect();
    SyntheticCorpus {
        train,
        dev,
        test,
        unlabeled: Dataset::unlabeled(posts).expect("generated ids are unique"),
        unlabeled_truth: truth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DatasetKind;

    #[test]
    fn sizes_kinds_and_determinism() {
        let cfg = SyntheticConfig::default();
        let a = generate(&cfg, 3);
        assert_eq!(a.train.len(), 300);
        assert_eq!(a.dev.len(), 300);
        assert_eq!(a.unlabeled.len(), 5000);
        assert_eq!(a.unlabeled.kind(), DatasetKind::Unlabeled);
        assert!(a.unlabeled.iter().all(|p| p.subreddit.is_some()));
        let b = generate(&cfg, 3);
        assert_eq!(a.train, b.train);
        assert_eq!(a.unlabeled, b.unlabeled);
        assert_ne!(generate(&cfg, 4).train, a.train);
    }

    #[test]
    fn label_noise_rate() {
        let cfg = SyntheticConfig {
            n_train: 20_000,
            n_dev: 0,
            n_test: 0,
            n_unlabeled: 0,
            ..SyntheticConfig::default()
        };
        let corpus = generate(&cfg, 1);
        let clean = generate(
            &SyntheticConfig {
                label_noise: 0.0,
                ..cfg
            },
            1,
        );
        let flips = corpus
            .train
            .iter()
            .zip(clean.train.iter())
            .filter(|(a, b)| a.label != b.label)
            .count();
        let rate = flips as f64 / 20_000.0;
        assert!((rate - 0.10).abs() < 0.01, "{rate}");
    }
}
