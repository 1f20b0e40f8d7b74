//! Where did the pseudo-labels come from? Counts of selected samples per
//! (subreddit, class), with concentration and per-class share statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::label::{SeverityLabel, NUM_CLASSES};
use crate::selection::PseudoLabeledSample;

/// Bucket for samples without provenance.
pub const UNKNOWN_SUBREDDIT: &str = "unknown";
/// Aggregate row name in figure data.
pub const OTHER_GROUP: &str = "other";
/// Subreddits counted by [`DistributionReport::top5_concentration`].
pub const CONCENTRATION_TOP_N: usize = 5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerClass<T> {
    pub low: T,
    pub moderate: T,
    pub severe: T,
}

impl<T: Copy> PerClass<T> {
    pub fn from_array(a: [T; NUM_CLASSES]) -> Self {
        PerClass {
            low: a[0],
            moderate: a[1],
            severe: a[2],
        }
    }

    pub fn to_array(self) -> [T; NUM_CLASSES] {
        [self.low, self.moderate, self.severe]
    }

    pub fn get(&self, label: SeverityLabel) -> T {
        self.to_array()[label.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubredditRow {
    pub subreddit: String,
    pub counts: PerClass<usize>,
    pub total: usize,
    /// This subreddit's share of all pseudo-labels.
    pub fraction_of_all: f64,
    /// This subreddit's share of each class's pseudo-labels (0 for an empty class).
    pub class_share: PerClass<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLeader {
    pub subreddit: String,
    pub class_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub total: usize,
    pub class_totals: PerClass<usize>,
    /// Sorted by descending total, then name.
    pub subreddits: Vec<SubredditRow>,
    pub top5: Vec<String>,
    pub top5_concentration: f64,
    /// Subreddit holding the largest share of each class.
    pub class_leaders: PerClass<Option<ClassLeader>>,
}

fn fraction(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl DistributionReport {
    /// Fraction of all pseudo-labels held by the `n` largest subreddits.
    pub fn top_concentration(&self, n: usize) -> f64 {
        fraction(
            self.subreddits.iter().take(n).map(|r| r.total).sum(),
            self.total,
        )
    }
}

pub fn distribution(samples: &[PseudoLabeledSample]) -> DistributionReport {
    let mut table: BTreeMap<&str, [usize; NUM_CLASSES]> = BTreeMap::new();
    let mut class_totals = [0usize; NUM_CLASSES];
    for s in samples {
        let name = s.post.subreddit.as_deref().unwrap_or(UNKNOWN_SUBREDDIT);
        table.entry(name).or_default()[s.pseudo_label.index()] += 1;
        class_totals[s.pseudo_label.index()] += 1;
    }
    let total = samples.len();

    let mut subreddits: Vec<SubredditRow> = table
        .into_iter()
        .map(|(name, counts)| {
            let row_total = counts.iter().sum();
            let mut share = [0.0; NUM_CLASSES];
            for c in 0..NUM_CLASSES {
                share[c] = fraction(counts[c], class_totals[c]);
            }
            SubredditRow {
                subreddit: name.to_string(),
                counts: PerClass::from_array(counts),
                total: row_total,
                fraction_of_all: fraction(row_total, total),
                class_share: PerClass::from_array(share),
            }
        })
        .collect();
    subreddits.sort_by(|a, b| {
        b.total
            .cmp(&a.total)
            .then_with(|| a.subreddit.cmp(&b.subreddit))
    });

    let leaders = SeverityLabel::ALL.map(|c| {
        // first maximum in report order, so ties follow the row ordering
        let mut best: Option<&SubredditRow> = None;
        for row in &subreddits {
            if row.counts.get(c) > best.map_or(0, |b| b.counts.get(c)) {
                best = Some(row);
            }
        }
        best.map(|row| ClassLeader {
            subreddit: row.subreddit.clone(),
            class_share: row.class_share.get(c),
        })
    });
    let [low, moderate, severe] = leaders;

    let mut report = DistributionReport {
        total,
        class_totals: PerClass::from_array(class_totals),
        top5: subreddits
            .iter()
            .take(CONCENTRATION_TOP_N)
            .map(|r| r.subreddit.clone())
            .collect(),
        subreddits,
        top5_concentration: 0.0,
        class_leaders: PerClass {
            low,
            moderate,
            severe,
        },
    };
    report.top5_concentration = report.top_concentration(CONCENTRATION_TOP_N);
    report
}

/// Stacked-bar source data: three rows (one per class) for each of the
/// `top_n` largest subreddits, then three `other` rows aggregating the rest.
///
/// Columns: `subreddit,label,count,class_share,fraction_of_total`.
pub fn render_figure_data(rep: &DistributionReport, top_n: usize) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record([
            "subreddit",
            "label",
            "count",
            "class_share",
            "fraction_of_total",
        ])
        .expect("in-memory write");
    let mut write_group = |name: &str, counts: [usize; NUM_CLASSES]| {
        for c in SeverityLabel::ALL {
            let count = counts[c.index()];
            writer
                .write_record([
                    name.to_string(),
                    c.to_string(),
                    count.to_string(),
                    fraction(count, rep.class_totals.get(c)).to_string(),
                    fraction(count, rep.total).to_string(),
                ])
                .expect("in-memory write");
        }
    };
    for row in rep.subreddits.iter().take(top_n) {
        write_group(&row.subreddit, row.counts.to_array());
    }
    let mut other = [0usize; NUM_CLASSES];
    for row in rep.subreddits.iter().skip(top_n) {
        for (o, c) in other.iter_mut().zip(row.counts.to_array()) {
            *o += c;
        }
    }
    write_group(OTHER_GROUP, other);
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Post;
    use SeverityLabel::*;

    fn sample(id: &str, subreddit: Option<&str>, label: SeverityLabel) -> PseudoLabeledSample {
        let mut post = Post::new(id, "t");
        post.subreddit = subreddit.map(str::to_string);
        PseudoLabeledSample {
            post,
            pseudo_label: label,
            score: 1.0,
            teacher_probability: 0.9,
        }
    }

    fn hand_fixture() -> Vec<PseudoLabeledSample> {
        vec![
            sample("1", Some("r/a"), Severe),
            sample("2", Some("r/a"), Severe),
            sample("3", Some("r/b"), Low),
            sample("4", Some("r/c"), Moderate),
        ]
    }

    fn csv_rows(csv: &str) -> Vec<Vec<String>> {
        csv.lines()
            .skip(1)
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect()
    }

    #[test]
    fn hand_counted_fixture() {
        let rep = distribution(&hand_fixture());
        assert_eq!(rep.total, 4);
        assert_eq!(rep.class_totals.to_array(), [1, 1, 2]);
        let names: Vec<_> = rep
            .subreddits
            .iter()
            .map(|r| r.subreddit.as_str())
            .collect();
        assert_eq!(names, ["r/a", "r/b", "r/c"]);
        let a = &rep.subreddits[0];
        assert_eq!(a.counts.to_array(), [0, 0, 2]);
        assert_eq!(a.class_share.severe, 1.0);
        assert_eq!(a.fraction_of_all, 0.5);
        assert_eq!(rep.top5_concentration, 1.0);
        assert_eq!(rep.class_leaders.severe.as_ref().unwrap().subreddit, "r/a");
    }

    #[test]
    fn single_subreddit() {
        let samples = vec![
            sample("1", Some("r/x"), Low),
            sample("2", Some("r/x"), Severe),
        ];
        let rep = distribution(&samples);
        assert_eq!(rep.top5_concentration, 1.0);
        assert_eq!(rep.subreddits[0].class_share.low, 1.0);
        assert_eq!(rep.subreddits[0].class_share.severe, 1.0);
        assert_eq!(rep.subreddits[0].class_share.moderate, 0.0);
    }

    #[test]
    fn empty_input() {
        let rep = distribution(&[]);
        assert_eq!(rep.total, 0);
        assert!(rep.subreddits.is_empty());
        assert_eq!(rep.class_totals.to_array(), [0, 0, 0]);
        assert_eq!(rep.top5_concentration, 0.0);
        assert!(rep.class_leaders.low.is_none());
    }

    #[test]
    fn missing_provenance_is_unknown() {
        let rep = distribution(&[sample("1", None, Low)]);
        assert_eq!(rep.subreddits[0].subreddit, UNKNOWN_SUBREDDIT);
    }

    #[test]
    fn figure_top_two_of_hand_fixture() {
        let csv = render_figure_data(&distribution(&hand_fixture()), 2);
        let rows = csv_rows(&csv);
        let groups: Vec<_> = rows.iter().map(|r| r[0].as_str()).step_by(3).collect();
        assert_eq!(groups, ["r/a", "r/b", "other"]);
        assert_eq!(rows[2], ["r/a", "severe", "2", "1", "0.5"]);
        assert_eq!(rows[6], ["other", "low", "0", "0", "0"]);
        assert_eq!(rows[7], ["other", "moderate", "1", "1", "0.25"]);
        let sum: usize = rows.iter().map(|r| r[2].parse::<usize>().unwrap()).sum();
        assert_eq!(sum, 4);
    }

    #[test]
    fn figure_groups_top_n_plus_other() {
        let samples: Vec<_> = (0..7)
            .flat_map(|s| {
                (0..=s).map(move |i| sample(&format!("{s}-{i}"), Some(&format!("r/{s}")), Low))
            })
            .collect();
        let rep = distribution(&samples);
        assert_eq!(rep.subreddits.len(), 7);
        let rows = csv_rows(&render_figure_data(&rep, 5));
        assert_eq!(rows.len(), 18);
        let groups: Vec<_> = rows.iter().map(|r| r[0].as_str()).step_by(3).collect();
        assert_eq!(groups, ["r/6", "r/5", "r/4", "r/3", "r/2", "other"]);
        let sum: usize = rows.iter().map(|r| r[2].parse::<usize>().unwrap()).sum();
        assert_eq!(sum, samples.len());
        assert_eq!(rep.top5, ["r/6", "r/5", "r/4", "r/3", "r/2"]);
        assert!((rep.top5_concentration - 25.0 / 28.0).abs() < 1e-15);
    }

    #[test]
    fn pure_function_of_input() {
        let a = serde_json::to_string(&distribution(&hand_fixture())).unwrap();
        let b = serde_json::to_string(&distribution(&hand_fixture())).unwrap();
        assert_eq!(a, b);
    }
}
