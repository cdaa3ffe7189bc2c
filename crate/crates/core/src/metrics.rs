//! Confusion counts and accuracy / sensitivity / specificity.
//!
//! The positive class is "abnormal" (or "category present").

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

/// `prob >= threshold` predicts positive.
pub fn confusion(probs: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    if probs.len() != labels.len() {
        return Err(Error::Metrics(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y) {
            (true, 1) => c.tp += 1,
            (true, 0) => c.fp += 1,
            (false, 0) => c.tn += 1,
            (false, 1) => c.fn_ += 1,
            (_, other) => return Err(Error::Metrics(format!("label {other} is not binary"))),
        }
    }
    Ok(c)
}

/// Percentages. A ratio with a zero denominator is `None` (not applicable).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

pub fn summarize(counts: &ConfusionCounts) -> Result<Summary> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::Metrics("no examples to summarize".into()));
    }
    let pct = |num: u64, den: u64| (den > 0).then(|| 100.0 * num as f64 / den as f64);
    Ok(Summary {
        accuracy: 100.0 * (counts.tp + counts.tn) as f64 / total as f64,
        sensitivity: pct(counts.tp, counts.positives()),
        specificity: pct(counts.tn, counts.negatives()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub counts: ConfusionCounts,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub threshold: f64,
    pub tasks: Vec<TaskMetrics>,
}

impl EvalReport {
    /// `probs[i][j]` / `labels[i][j]`: example `i`, output `j` named `names[j]`.
    pub fn from_predictions(
        model: &str,
        names: &[String],
        probs: &[Vec<f64>],
        labels: &[Vec<u8>],
        threshold: f64,
    ) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::Metrics("prediction/label count mismatch".into()));
        }
        let mut tasks = Vec::with_capacity(names.len());
        for (j, name) in names.iter().enumerate() {
            let column = |rows: &[Vec<f64>]| -> Result<Vec<f64>> {
                rows.iter()
                    .map(|r| {
                        r.get(j)
                            .copied()
                            .ok_or_else(|| Error::Metrics("ragged predictions".into()))
                    })
                    .collect()
            };
            let p = column(probs)?;
            let y: Vec<u8> = labels
                .iter()
                .map(|r| r.get(j).copied().ok_or_else(|| Error::Metrics("ragged labels".into())))
                .collect::<Result<_>>()?;
            let counts = confusion(&p, &y, threshold)?;
            tasks.push(TaskMetrics {
                task: name.clone(),
                summary: summarize(&counts)?,
                counts,
            });
        }
        Ok(Self {
            model: model.to_string(),
            threshold,
            tasks,
        })
    }

    /// Mean accuracy across tasks, as a fraction in [0, 1].
    pub fn mean_accuracy(&self) -> f64 {
        self.tasks.iter().map(|t| t.summary.accuracy).sum::<f64>() / self.tasks.len().max(1) as f64 / 100.0
    }

    pub fn to_records(&self) -> Result<String> {
        let mut out = String::new();
        for t in &self.tasks {
            out.push_str(&serde_json::to_string(&serde_json::json!({
                "model": self.model,
                "threshold": self.threshold,
                "task": t.task,
                "counts": t.counts,
                "accuracy": t.summary.accuracy,
                "sensitivity": t.summary.sensitivity,
                "specificity": t.summary.specificity,
            }))?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.1}"))
}

/// Text table with one row per model and an (acc, sens, spec) column group
/// per task. All reports must cover the same tasks.
pub fn render_table(reports: &[EvalReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let name_width = reports.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = write!(out, "{:<name_width$}", "Model");
    for t in &first.tasks {
        let _ = write!(out, " | {:^20}", t.task);
    }
    out.push('\n');
    let _ = write!(out, "{:<name_width$}", "");
    for _ in &first.tasks {
        let _ = write!(out, " | {:>6} {:>6} {:>6}", "acc", "sens.", "spec.");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<name_width$}", r.model);
        for t in &r.tasks {
            let _ = write!(
                out,
                " | {:>6} {:>6} {:>6}",
                cell(Some(t.summary.accuracy)),
                cell(t.summary.sensitivity),
                cell(t.summary.specificity)
            );
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn simple_confusion() {
        let c = confusion(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 1,
                fp: 0,
                tn: 1,
                fn_: 0
            }
        );
        let c = confusion(&[0.9, 0.1, 0.0], &[1, 0, 1], 0.0).unwrap();
        assert_eq!((c.tn, c.fn_), (0, 0));
        // tie counts as positive
        assert_eq!(confusion(&[0.5], &[0], 0.5).unwrap().fp, 1);
        assert!(confusion(&[0.5], &[0, 1], 0.5).is_err());
        assert!(confusion(&[0.5], &[2], 0.5).is_err());
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&ConfusionCounts {
            tp: 109,
            fn_: 1,
            tn: 188,
            fp: 2,
        })
        .unwrap();
        assert_eq!(format!("{:.1}", s.accuracy), "99.0");
        assert_eq!(cell(s.sensitivity), "99.1");
        assert_eq!(cell(s.specificity), "98.9");
        let perfect = summarize(&ConfusionCounts {
            tp: 3,
            fn_: 0,
            tn: 4,
            fp: 0,
        })
        .unwrap();
        assert_eq!(
            (perfect.accuracy, perfect.sensitivity, perfect.specificity),
            (100.0, Some(100.0), Some(100.0))
        );
        let no_pos = summarize(&ConfusionCounts {
            tp: 0,
            fn_: 0,
            tn: 4,
            fp: 1,
        })
        .unwrap();
        assert_eq!(no_pos.sensitivity, None);
        assert!(summarize(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn table_layout() {
        let r = EvalReport::from_predictions(
            "fine-tuned",
            &["abnormal".into()],
            &[vec![0.9], vec![0.2]],
            &[vec![1], vec![0]],
            0.5,
        )
        .unwrap();
        let t = render_table(&[r.clone()]);
        assert!(t.contains("fine-tuned"));
        assert!(t.contains("100.0"));
        assert_eq!(r.to_records().unwrap().lines().count(), 1);
    }

    proptest! {
        #[test]
        fn identity_and_threshold_monotonicity(
            pairs in proptest::collection::vec((0.0f64..1.0, 0u8..2), 1..200),
            t1 in 0.0f64..1.0, t2 in 0.0f64..1.0,
        ) {
            let (probs, labels): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
            let c = confusion(&probs, &labels, t1).unwrap();
            let s = summarize(&c).unwrap();
            let (p, n) = (c.positives() as f64, c.negatives() as f64);
            let recombined = (s.sensitivity.unwrap_or(0.0) * p + s.specificity.unwrap_or(0.0) * n) / (p + n);
            prop_assert!((recombined - s.accuracy).abs() < 1e-9);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = confusion(&probs, &labels, lo).unwrap();
            let b = confusion(&probs, &labels, hi).unwrap();
            prop_assert!(b.tp <= a.tp);
            prop_assert!(b.tn >= a.tn);
            let mut rev_p = probs.clone();
            let mut rev_l = labels.clone();
            rev_p.reverse();
            rev_l.reverse();
            prop_assert_eq!(confusion(&rev_p, &rev_l, t1).unwrap(), c);
        }
    }
}
