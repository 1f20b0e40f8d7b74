//! Shared-task scoring: per-class precision/recall/F1 and macro-F1 over the
//! three severity classes, plus aggregation over repeated seeded runs.
//!
//! Zero-division convention: an undefined precision or recall is 0, and F1
//! is 0 when both are 0. The macro mean always divides by 3, so a class
//! absent from both gold and predictions contributes an F1 of 0.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{SeverityLabel, NUM_CLASSES};

/// Rows are gold classes, columns predicted classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[u64; NUM_CLASSES]; NUM_CLASSES]);

impl ConfusionMatrix {
    pub fn get(&self, gold: SeverityLabel, pred: SeverityLabel) -> u64 {
        self.0[gold.index()][pred.index()]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn true_positives(&self, c: SeverityLabel) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: SeverityLabel) -> u64 {
        (0..NUM_CLASSES)
            .filter(|&g| g != c.index())
            .map(|g| self.0[g][c.index()])
            .sum()
    }

    pub fn false_negatives(&self, c: SeverityLabel) -> u64 {
        (0..NUM_CLASSES)
            .filter(|&p| p != c.index())
            .map(|p| self.0[c.index()][p])
            .sum()
    }

    pub fn support(&self, c: SeverityLabel) -> u64 {
        self.0[c.index()].iter().sum()
    }

    pub fn class_metrics(&self, c: SeverityLabel) -> ClassMetrics {
        let tp = self.true_positives(c) as f64;
        let fp = self.false_positives(c) as f64;
        let fn_ = self.false_negatives(c) as f64;
        let ratio = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
        ClassMetrics {
            label: c,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            // harmonic mean of P and R, written so that 0/0 cases fall out as 0
            f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
            support: self.support(c),
        }
    }
}

pub fn confusion(gold: &[SeverityLabel], pred: &[SeverityLabel]) -> Result<ConfusionMatrix> {
    if gold.len() != pred.len() {
        return Err(Error::Dataset(format!(
            "{} gold labels but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Dataset(
            "cannot score an empty evaluation set".into(),
        ));
    }
    let mut cm = ConfusionMatrix::default();
    for (g, p) in gold.iter().zip(pred) {
        cm.0[g.index()][p.index()] += 1;
    }
    Ok(cm)
}

pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    SeverityLabel::ALL
        .iter()
        .map(|&c| cm.class_metrics(c).f1)
        .sum::<f64>()
        / NUM_CLASSES as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: SeverityLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub n: u64,
    pub seed: u64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(cm: ConfusionMatrix, seed: u64) -> Self {
        EvalReport {
            per_class: SeverityLabel::ALL
                .iter()
                .map(|&c| cm.class_metrics(c))
                .collect(),
            macro_f1: macro_f1(&cm),
            n: cm.total(),
            seed,
            confusion: cm,
        }
    }
}

pub fn evaluate(gold: &[SeverityLabel], pred: &[SeverityLabel], seed: u64) -> Result<EvalReport> {
    Ok(EvalReport::from_confusion(confusion(gold, pred)?, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiRunReport {
    pub runs: Vec<EvalReport>,
    pub mean_macro_f1: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single run.
    pub std_macro_f1: f64,
}

impl MultiRunReport {
    pub fn from_runs(runs: Vec<EvalReport>) -> Self {
        let scores: Vec<f64> = runs.iter().map(|r| r.macro_f1).collect();
        let n = scores.len() as f64;
        let mean = if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / n
        };
        let std = if scores.len() < 2 {
            0.0
        } else {
            (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MultiRunReport {
            runs,
            mean_macro_f1: mean,
            std_macro_f1: std,
        }
    }

    /// One row per run: seed, n, macro_f1, then F1 per class.
    pub fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record([
                "seed",
                "n",
                "macro_f1",
                "f1_low",
                "f1_moderate",
                "f1_severe",
            ])
            .expect("in-memory write");
        for run in &self.runs {
            let mut row = vec![
                run.seed.to_string(),
                run.n.to_string(),
                run.macro_f1.to_string(),
            ];
            row.extend(run.per_class.iter().map(|c| c.f1.to_string()));
            writer.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

/// Runs `job` once per seed and returns the results in seed-list order.
/// Seeds must be distinct. The first failure in list order is reported with
/// its seed.
pub fn run_per_seed<T, F>(seeds: &[u64], parallel: bool, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut distinct = HashSet::new();
    if let Some(dup) = seeds.iter().find(|s| !distinct.insert(**s)) {
        return Err(Error::Config(format!("seed {dup} is listed twice")));
    }
    let results: Vec<Result<T>> = if parallel {
        seeds.par_iter().map(|&seed| job(seed)).collect()
    } else {
        seeds.iter().map(|&seed| job(seed)).collect()
    };
    seeds
        .iter()
        .zip(results)
        .map(|(seed, result)| {
            result.map_err(|e| Error::Training(format!("run with seed {seed} failed: {e}")))
        })
        .collect()
}

/// Runs `pipeline` once per seed (in parallel) and aggregates the reports.
pub fn evaluate_runs<F>(seeds: &[u64], pipeline: F) -> Result<MultiRunReport>
where
    F: Fn(u64) -> Result<EvalReport> + Sync,
{
    Ok(MultiRunReport::from_runs(run_per_seed(
        seeds, true, pipeline,
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use SeverityLabel::*;

    #[test]
    fn worked_example() {
        let gold = [Low, Low, Moderate, Moderate, Severe, Severe];
        let pred = [Low, Moderate, Moderate, Moderate, Severe, Low];
        let cm = confusion(&gold, &pred).unwrap();
        assert_eq!(cm.0, [[1, 1, 0], [0, 2, 0], [1, 0, 1]]);
        let report = EvalReport::from_confusion(cm, 0);
        let f1: Vec<f64> = report.per_class.iter().map(|c| c.f1).collect();
        assert!((f1[0] - 0.5).abs() < 1e-12);
        assert!((f1[1] - 0.8).abs() < 1e-12);
        assert!((f1[2] - 2.0 / 3.0).abs() < 1e-12);
        assert!((report.macro_f1 - (0.5 + 0.8 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
        assert!((report.macro_f1 - 0.6556).abs() < 1e-4);
    }

    #[test]
    fn perfect_and_one_hot() {
        let gold = [Low, Moderate, Severe, Severe];
        let cm = confusion(&gold, &gold).unwrap();
        assert_eq!(cm.0, [[1, 0, 0], [0, 1, 0], [0, 0, 2]]);
        assert_eq!(macro_f1(&cm), 1.0);

        let cm = confusion(&[Moderate], &[Severe]).unwrap();
        assert_eq!(cm.total(), 1);
        assert_eq!(cm.get(Moderate, Severe), 1);
    }

    #[test]
    fn single_class_prediction_closed_form() {
        // gold uniform over 3 classes, everything predicted Moderate:
        // Moderate has P = 1/3, R = 1, F1 = 1/2; others 0.
        let gold = [Low, Moderate, Severe, Low, Moderate, Severe];
        let pred = [Moderate; 6];
        let cm = confusion(&gold, &pred).unwrap();
        assert!((macro_f1(&cm) - 0.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_contributes_zero() {
        let gold = [Low, Low, Moderate];
        let cm = confusion(&gold, &gold).unwrap();
        assert!((macro_f1(&cm) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(confusion(&[Low], &[]).is_err());
        assert!(confusion(&[], &[]).is_err());
    }

    fn report(f1: f64, seed: u64) -> EvalReport {
        let mut r = EvalReport::from_confusion(confusion(&[Low], &[Low]).unwrap(), seed);
        r.macro_f1 = f1;
        r
    }

    #[test]
    fn aggregation() {
        let multi = MultiRunReport::from_runs((0..5).map(|s| report(0.6, s)).collect());
        assert!((multi.mean_macro_f1 - 0.6).abs() < 1e-15);
        assert_eq!(multi.std_macro_f1, 0.0);

        let multi = MultiRunReport::from_runs(vec![report(0.5, 0), report(0.7, 1)]);
        assert!((multi.mean_macro_f1 - 0.6).abs() < 1e-15);
        assert!((multi.std_macro_f1 - 0.02f64.sqrt()).abs() < 1e-12);
        let csv = multi.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("seed,n,macro_f1,f1_low,f1_moderate,f1_severe\n"));
    }

    #[test]
    fn evaluate_runs_contract() {
        let seeds = [1, 2, 3, 4, 5];
        let run = |seed: u64| Ok(report(seed as f64 / 10.0, seed));
        let a = evaluate_runs(&seeds, run).unwrap();
        let b = evaluate_runs(&seeds, run).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), seeds);

        assert!(evaluate_runs(&[1, 1], run).is_err());
        let msg = evaluate_runs(&seeds, |s| {
            if s == 4 {
                Err(Error::Training("boom".into()))
            } else {
                run(s)
            }
        })
        .unwrap_err()
        .to_string();
        assert!(msg.contains("seed 4") && msg.contains("boom"), "{msg}");
    }

    fn label() -> impl Strategy<Value = SeverityLabel> {
        (0usize..3).prop_map(|i| SeverityLabel::from_index(i).unwrap())
    }

    fn pairs() -> impl Strategy<Value = Vec<(SeverityLabel, SeverityLabel)>> {
        proptest::collection::vec((label(), label()), 1..60)
    }

    proptest! {
        #[test]
        fn bounded_and_diagonal_iff_perfect(pairs in pairs()) {
            let (gold, pred): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let cm = confusion(&gold, &pred).unwrap();
            let m = macro_f1(&cm);
            prop_assert!((0.0..=1.0).contains(&m));
            let all_present = SeverityLabel::ALL.iter().all(|&c| cm.support(c) > 0);
            prop_assert_eq!(m == 1.0, gold == pred && all_present);
        }

        #[test]
        fn permutation_invariance(pairs in pairs(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let score = |p: &[(SeverityLabel, SeverityLabel)]| {
                let (g, q): (Vec<_>, Vec<_>) = p.iter().cloned().unzip();
                EvalReport::from_confusion(confusion(&g, &q).unwrap(), 0)
            };
            prop_assert_eq!(score(&pairs), score(&shuffled));
        }

        #[test]
        fn class_relabeling_symmetry(pairs in pairs(), perm_idx in 0usize..6) {
            const PERMS: [[usize; 3]; 6] = [[0,1,2],[0,2,1],[1,0,2],[1,2,0],[2,0,1],[2,1,0]];
            let perm = PERMS[perm_idx];
            let relabel = |l: SeverityLabel| SeverityLabel::from_index(perm[l.index()]).unwrap();
            let (gold, pred): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let base = EvalReport::from_confusion(confusion(&gold, &pred).unwrap(), 0);
            let g2: Vec<_> = gold.iter().map(|&l| relabel(l)).collect();
            let p2: Vec<_> = pred.iter().map(|&l| relabel(l)).collect();
            let moved = EvalReport::from_confusion(confusion(&g2, &p2).unwrap(), 0);
            for c in 0..3 {
                prop_assert_eq!(base.per_class[c].f1, moved.per_class[perm[c]].f1);
            }
            prop_assert!((base.macro_f1 - moved.macro_f1).abs() < 1e-15);
        }
    }
}
