//! Confidence-ranked pseudo-label harvesting.
//!
//! Each unlabeled post is assigned to the teacher's argmax class only. Within
//! a class, candidates are ranked by a [`RankingScore`] (descending, ties by
//! ascending post id) and the first `k_per_class` are kept. The output is the
//! Low block, then Moderate, then Severe, each in rank order.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::LogitVector;
use crate::corpus::{Dataset, Post};
use crate::error::{Error, Result};
use crate::label::{SeverityLabel, NUM_CLASSES};

/// Orders a class's candidates; higher is more confident.
pub trait RankingScore: Send + Sync {
    fn name(&self) -> &'static str;
    fn score(&self, logits: &LogitVector, class: SeverityLabel) -> f64;
}

/// The class's raw logit.
pub struct RawLogit;

/// The class's softmax probability.
pub struct Probability;

/// The class's logit minus the best competing logit.
pub struct Margin;

impl RankingScore for RawLogit {
    fn name(&self) -> &'static str {
        "raw_logit"
    }

    fn score(&self, logits: &LogitVector, class: SeverityLabel) -> f64 {
        logits.get(class)
    }
}

impl RankingScore for Probability {
    fn name(&self) -> &'static str {
        "probability"
    }

    fn score(&self, logits: &LogitVector, class: SeverityLabel) -> f64 {
        logits.probabilities()[class.index()]
    }
}

impl RankingScore for Margin {
    fn name(&self) -> &'static str {
        "margin"
    }

    fn score(&self, logits: &LogitVector, class: SeverityLabel) -> f64 {
        let runner_up = SeverityLabel::ALL
            .iter()
            .filter(|&&c| c != class)
            .map(|&c| logits.get(c))
            .fold(f64::NEG_INFINITY, f64::max);
        logits.get(class) - runner_up
    }
}

static RANKERS: [&dyn RankingScore; 3] = [&RawLogit, &Probability, &Margin];

/// Looks up a ranking score by name.
pub fn ranker(name: &str) -> Option<&'static dyn RankingScore> {
    RANKERS.iter().copied().find(|r| r.name() == name)
}

pub fn ranker_names() -> impl Iterator<Item = &'static str> {
    RANKERS.iter().map(|r| r.name())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingKind {
    #[default]
    RawLogit,
    Probability,
    Margin,
}

impl RankingKind {
    pub fn name(self) -> &'static str {
        match self {
            RankingKind::RawLogit => "raw_logit",
            RankingKind::Probability => "probability",
            RankingKind::Margin => "margin",
        }
    }

    pub fn scorer(self) -> &'static dyn RankingScore {
        ranker(self.name()).expect("every kind is registered")
    }
}

impl fmt::Display for RankingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RankingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "raw_logit" => Ok(RankingKind::RawLogit),
            "probability" => Ok(RankingKind::Probability),
            "margin" => Ok(RankingKind::Margin),
            other => Err(Error::Config(format!(
                "unknown ranking score {other:?} (known: {})",
                ranker_names().collect::<Vec<_>>().join(", ")
            ))),
        }
    }
}

pub const DEFAULT_K_PER_CLASS: usize = 30_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub k_per_class: usize,
    pub ranking_score: RankingKind,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            k_per_class: DEFAULT_K_PER_CLASS,
            ranking_score: RankingKind::RawLogit,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_per_class == 0 {
            return Err(Error::Config("k_per_class must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeledSample {
    pub post: Post,
    pub pseudo_label: SeverityLabel,
    pub score: f64,
    pub teacher_probability: f64,
}

/// Ranking order: score descending, then id ascending.
fn rank_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

pub fn select_top_k(
    logits: &[LogitVector],
    posts: &[Post],
    cfg: &SelectionConfig,
) -> Result<Vec<PseudoLabeledSample>> {
    cfg.validate()?;
    if logits.len() != posts.len() {
        return Err(Error::Dataset(format!(
            "{} logit vectors for {} posts",
            logits.len(),
            posts.len()
        )));
    }
    if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
        return Err(Error::Dataset(format!(
            "non-finite logits {:?} for post {:?}",
            logits[i].0, posts[i].id
        )));
    }

    let scorer = cfg.ranking_score.scorer();
    let mut buckets: [Vec<(usize, f64)>; NUM_CLASSES] = Default::default();
    for (i, z) in logits.iter().enumerate() {
        let class = z.argmax();
        buckets[class.index()].push((i, scorer.score(z, class)));
    }

    let mut selected = Vec::new();
    for (class, bucket) in SeverityLabel::ALL.into_iter().zip(buckets.iter_mut()) {
        bucket.sort_by(|&(i, si), &(j, sj)| rank_order((si, &posts[i].id), (sj, &posts[j].id)));
        bucket.truncate(cfg.k_per_class);
        selected.extend(bucket.iter().map(|&(i, score)| PseudoLabeledSample {
            post: posts[i].clone(),
            pseudo_label: class,
            score,
            teacher_probability: logits[i].probabilities()[class.index()],
        }));
    }
    Ok(selected)
}

/// Per-class counts in canonical class order.
pub fn class_counts(samples: &[PseudoLabeledSample]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for s in samples {
        counts[s.pseudo_label.index()] += 1;
    }
    counts
}

/// Hard-labeled training set from selected samples. The teacher's
/// probabilities are deliberately dropped: every sample gets unit weight.
pub fn build_pseudo_dataset(samples: &[PseudoLabeledSample]) -> Result<Dataset> {
    let mut seen = HashSet::with_capacity(samples.len());
    let posts = samples
        .iter()
        .map(|s| {
            if !seen.insert(s.post.id.as_str()) {
                return Err(Error::DuplicateId(s.post.id.clone()));
            }
            Ok(Post {
                label: Some(s.pseudo_label),
                ..s.post.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::labeled(posts)
}

#[derive(Serialize, Deserialize)]
struct PseudoRow {
    id: String,
    text: String,
    pseudo_label: SeverityLabel,
    score: f64,
    teacher_probability: f64,
    #[serde(default)]
    subreddit: Option<String>,
}

/// One JSON object per line: id, text, pseudo_label, score,
/// teacher_probability, subreddit (null when unknown).
pub fn write_pseudo_jsonl(samples: &[PseudoLabeledSample], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        let row = PseudoRow {
            id: s.post.id.clone(),
            text: s.post.text.clone(),
            pseudo_label: s.pseudo_label,
            score: s.score,
            teacher_probability: s.teacher_probability,
            subreddit: s.post.subreddit.clone(),
        };
        serde_json::to_writer(&mut buf, &row).expect("row serializes");
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_pseudo_jsonl(path: &Path) -> Result<Vec<PseudoLabeledSample>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: PseudoRow = serde_json::from_str(line)
            .map_err(|e| Error::row(path, idx + 1, "<row>", e.to_string()))?;
        if !row.score.is_finite() {
            return Err(Error::row(path, idx + 1, "score", "must be finite"));
        }
        samples.push(PseudoLabeledSample {
            post: Post {
                id: row.id,
                text: row.text,
                label: None,
                subreddit: row.subreddit,
            },
            pseudo_label: row.pseudo_label,
            score: row.score,
            teacher_probability: row.teacher_probability,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use SeverityLabel::*;

    /// Logits whose argmax is `class` and whose raw logit there is `score`.
    fn logits_for(class: SeverityLabel, score: f64) -> LogitVector {
        let mut z = [score - 10.0; 3];
        z[class.index()] = score;
        LogitVector(z)
    }

    fn posts(n: usize) -> Vec<Post> {
        (0..n)
            .map(|i| Post::new(format!("p{i}"), format!("text {i}")))
            .collect()
    }

    fn ids(samples: &[PseudoLabeledSample]) -> Vec<&str> {
        samples.iter().map(|s| s.post.id.as_str()).collect()
    }

    #[test]
    fn worked_example() {
        let classes = [Severe, Severe, Severe, Moderate, Low, Low];
        let scores = [9.0, 7.0, 8.0, 5.0, 4.0, 3.0];
        let logits: Vec<_> = classes
            .iter()
            .zip(scores)
            .map(|(&c, s)| logits_for(c, s))
            .collect();
        let cfg = SelectionConfig {
            k_per_class: 2,
            ..Default::default()
        };
        let out = select_top_k(&logits, &posts(6), &cfg).unwrap();
        assert_eq!(ids(&out), ["p4", "p5", "p3", "p0", "p2"]);
        assert_eq!(class_counts(&out), [2, 1, 2]);
        assert_eq!(out[3].score, 9.0);
        assert_eq!(out[3].pseudo_label, Severe);
    }

    #[test]
    fn no_truncation_when_k_is_large() {
        let classes = [Low, Severe, Moderate, Low];
        let logits: Vec<_> = classes.iter().map(|&c| logits_for(c, 1.0)).collect();
        let cfg = SelectionConfig {
            k_per_class: 100,
            ..Default::default()
        };
        let out = select_top_k(&logits, &posts(4), &cfg).unwrap();
        assert_eq!(ids(&out), ["p0", "p3", "p2", "p1"]);
    }

    #[test]
    fn tie_at_cut_goes_to_smaller_id() {
        let p = vec![
            Post::new("b", "x"),
            Post::new("a", "y"),
            Post::new("c", "z"),
        ];
        let logits = vec![
            logits_for(Low, 2.0),
            logits_for(Low, 2.0),
            logits_for(Low, 5.0),
        ];
        let cfg = SelectionConfig {
            k_per_class: 2,
            ..Default::default()
        };
        assert_eq!(ids(&select_top_k(&logits, &p, &cfg).unwrap()), ["c", "a"]);
    }

    #[test]
    fn empty_and_misaligned_inputs() {
        let cfg = SelectionConfig::default();
        assert!(select_top_k(&[], &[], &cfg).unwrap().is_empty());
        assert!(select_top_k(&[logits_for(Low, 1.0)], &[], &cfg).is_err());
        assert!(select_top_k(&[LogitVector([f64::NAN, 0.0, 0.0])], &posts(1), &cfg).is_err());
        assert!(SelectionConfig {
            k_per_class: 0,
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn ranking_strategies() {
        let z = LogitVector([1.0, 3.0, 2.5]);
        assert_eq!(RawLogit.score(&z, Moderate), 3.0);
        assert_eq!(Margin.score(&z, Moderate), 0.5);
        assert!((Probability.score(&z, Moderate) - z.probabilities()[1]).abs() < 1e-15);
        for name in ranker_names() {
            let kind: RankingKind = name.parse().unwrap();
            assert_eq!(kind.scorer().name(), name);
        }
        assert!("entropy".parse::<RankingKind>().is_err());

        // Raw-logit and probability rankings can disagree.
        let a = LogitVector([5.0, 4.9, 0.0]);
        let b = LogitVector([3.0, 0.0, 0.0]);
        assert!(RawLogit.score(&a, Low) > RawLogit.score(&b, Low));
        assert!(Probability.score(&a, Low) < Probability.score(&b, Low));
    }

    #[test]
    fn hard_labels_only() {
        let samples = vec![
            PseudoLabeledSample {
                post: Post::new("a", "x"),
                pseudo_label: Low,
                score: 3.0,
                teacher_probability: 0.97,
            },
            PseudoLabeledSample {
                post: Post::new("b", "y").with_subreddit("r/x"),
                pseudo_label: Severe,
                score: 1.0,
                teacher_probability: 0.51,
            },
        ];
        let ds = build_pseudo_dataset(&samples).unwrap();
        assert_eq!(ds.labels().unwrap(), [Low, Severe]);
        assert_eq!(ds.posts()[1].subreddit.as_deref(), Some("r/x"));
        assert!(build_pseudo_dataset(&[]).unwrap().is_empty());

        let dup = vec![samples[0].clone(), samples[0].clone()];
        assert!(matches!(
            build_pseudo_dataset(&dup),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn pseudo_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pseudo.jsonl");
        let samples = vec![PseudoLabeledSample {
            post: Post::new("a", "x y").with_subreddit("r/adhd"),
            pseudo_label: Moderate,
            score: 1.25,
            teacher_probability: 0.75,
        }];
        write_pseudo_jsonl(&samples, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"id\":\"a\",\"text\":\"x y\",\"pseudo_label\":\"moderate\",\"score\":1.25,\"teacher_probability\":0.75,\"subreddit\":\"r/adhd\"}\n"
        );
        assert_eq!(read_pseudo_jsonl(&path).unwrap(), samples);
    }

    /// Independent reference: for each class, every candidate sorted with
    /// `partial_cmp` on (-score, id), prefix of length k.
    fn oracle(logits: &[LogitVector], posts: &[Post], k: usize) -> Vec<(String, SeverityLabel)> {
        let mut out = Vec::new();
        for class in [Low, Moderate, Severe] {
            let mut candidates: Vec<(f64, String)> = Vec::new();
            for (z, p) in logits.iter().zip(posts) {
                let best = z.0.iter().cloned().fold(f64::MIN, f64::max);
                let first_best = z.0.iter().position(|&v| v == best).unwrap();
                if first_best == class.index() {
                    candidates.push((-z.0[class.index()], p.id.clone()));
                }
            }
            candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out.extend(candidates.into_iter().take(k).map(|(_, id)| (id, class)));
        }
        out
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..40 {
            let n = rng.gen_range(0..2000);
            let k = rng.gen_range(1..n.max(2));
            let p: Vec<Post> = (0..n)
                .map(|i| Post::new(format!("{:05}", (i * 7919) % 100_000), "t"))
                .collect();
            // coarse values force plenty of ties
            let logits: Vec<LogitVector> = (0..n)
                .map(|_| LogitVector([0, 1, 2].map(|_| rng.gen_range(0..6) as f64)))
                .collect();
            let got = select_top_k(
                &logits,
                &p,
                &SelectionConfig {
                    k_per_class: k,
                    ..Default::default()
                },
            )
            .unwrap();
            let got: Vec<_> = got
                .into_iter()
                .map(|s| (s.post.id, s.pseudo_label))
                .collect();
            assert_eq!(got, oracle(&logits, &p, k));
        }
    }

    proptest! {
        #[test]
        fn selection_invariants(
            raw in proptest::collection::vec(proptest::array::uniform3(-3i32..3), 0..200),
            k in 1usize..50,
            kind in prop_oneof![Just(RankingKind::RawLogit), Just(RankingKind::Probability), Just(RankingKind::Margin)],
        ) {
            let logits: Vec<_> = raw.iter().map(|z| LogitVector(z.map(f64::from))).collect();
            let p = posts(logits.len());
            let cfg = SelectionConfig { k_per_class: k, ranking_score: kind };
            let out = select_top_k(&logits, &p, &cfg).unwrap();

            let mut seen = HashSet::new();
            for s in &out {
                prop_assert!(seen.insert(s.post.id.clone()));
                let i: usize = s.post.id[1..].parse().unwrap();
                prop_assert_eq!(s.pseudo_label, logits[i].argmax());
            }
            for c in class_counts(&out) {
                prop_assert!(c <= k);
            }
            // monotonicity: no unselected same-class post outranks a selected one
            let scorer = kind.scorer();
            for (i, z) in logits.iter().enumerate() {
                if seen.contains(&p[i].id) { continue; }
                let class = z.argmax();
                let unselected = (scorer.score(z, class), p[i].id.as_str());
                for s in out.iter().filter(|s| s.pseudo_label == class) {
                    prop_assert_ne!(rank_order(unselected, (s.score, &s.post.id)), Ordering::Less);
                }
            }
        }

        #[test]
        fn scores_survive_the_file_bit_for_bit(
            scores in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..20),
        ) {
            let samples: Vec<_> = scores
                .iter()
                .enumerate()
                .map(|(i, &score)| PseudoLabeledSample {
                    post: Post::new(format!("p{i}"), "t"),
                    pseudo_label: Low,
                    score,
                    teacher_probability: score.abs().fract(),
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("pseudo.jsonl");
            write_pseudo_jsonl(&samples, &path).unwrap();
            let back = read_pseudo_jsonl(&path).unwrap();
            for (a, b) in samples.iter().zip(&back) {
                prop_assert_eq!(a.score.to_bits(), b.score.to_bits());
                prop_assert_eq!(a.teacher_probability.to_bits(), b.teacher_probability.to_bits());
            }
        }
    }
}
