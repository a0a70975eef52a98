//! Set-based answer metrics.

use std::collections::BTreeSet;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::kb::EntityId;

/// Prediction and gold answers for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub id: usize,
    pub predicted: BTreeSet<EntityId>,
    pub gold: BTreeSet<EntityId>,
    /// Top-ranked entity, used for accuracy.
    pub best: Option<EntityId>,
}

impl QuestionOutcome {
    pub fn hits(&self) -> usize {
        self.predicted.intersection(&self.gold).count()
    }

    pub fn f1(&self) -> f64 {
        let hits = self.hits() as f64;
        let p = ratio(hits, self.predicted.len() as f64);
        let r = ratio(hits, self.gold.len() as f64);
        harmonic(p, r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub questions: usize,
    /// Unique predicted entities summed over questions.
    pub num_predicted: usize,
    pub num_gold: usize,
    pub precision: f64,
    pub recall: f64,
    /// Fraction of questions whose top-ranked entity is gold.
    pub accuracy: f64,
    pub micro_f1: f64,
    /// Mean per-question F1.
    pub macro_f1: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

pub fn compute_metrics(outcomes: &[QuestionOutcome]) -> Metrics {
    let mut hits = 0usize;
    let mut num_predicted = 0usize;
    let mut num_gold = 0usize;
    let mut correct_top = 0usize;
    let mut f1_sum = 0.0;
    for o in outcomes {
        hits += o.hits();
        num_predicted += o.predicted.len();
        num_gold += o.gold.len();
        if o.best.is_some_and(|b| o.gold.contains(&b)) {
            correct_top += 1;
        }
        f1_sum += o.f1();
    }
    let precision = ratio(hits as f64, num_predicted as f64);
    let recall = ratio(hits as f64, num_gold as f64);
    let n = outcomes.len() as f64;
    Metrics {
        questions: outcomes.len(),
        num_predicted,
        num_gold,
        precision,
        recall,
        accuracy: ratio(correct_top as f64, n),
        micro_f1: harmonic(precision, recall),
        macro_f1: ratio(f1_sum, n),
    }
}

/// Aligned text table, one row per labelled result.
pub fn format_table(rows: &[(String, Metrics)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("Model".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<label_w$}  {:>7}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}",
        "Model", "# Ans", "Precision", "Recall", "Accuracy", "Micro-F1", "Macro-F1"
    );
    for (label, m) in rows {
        let _ = writeln!(
            out,
            "{:<label_w$}  {:>7}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}",
            label, m.num_predicted, m.precision, m.recall, m.accuracy, m.micro_f1, m.macro_f1
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(pred: &[usize], gold: &[usize], best: Option<usize>) -> QuestionOutcome {
        QuestionOutcome {
            id: 0,
            predicted: pred.iter().copied().collect(),
            gold: gold.iter().copied().collect(),
            best,
        }
    }

    #[test]
    fn two_of_three() {
        let m = compute_metrics(&[outcome(&[1, 2, 4], &[1, 2, 3], Some(1))]);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.micro_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.num_predicted, 3);
    }

    #[test]
    fn perfect_and_empty() {
        let m = compute_metrics(&[outcome(&[1], &[1], Some(1)), outcome(&[5, 6], &[5, 6], Some(6))]);
        assert_eq!((m.precision, m.recall, m.accuracy, m.micro_f1, m.macro_f1), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert_eq!(m.num_predicted, 3);
        let z = compute_metrics(&[]);
        assert_eq!(z, Metrics::default());
        let none = compute_metrics(&[outcome(&[], &[1], None)]);
        assert_eq!((none.precision, none.micro_f1, none.accuracy), (0.0, 0.0, 0.0));
    }

    #[test]
    fn table_has_all_columns() {
        let t = format_table(&[("type".into(), Metrics::default())]);
        for col in ["# Ans", "Precision", "Recall", "Accuracy", "Micro-F1", "Macro-F1"] {
            assert!(t.contains(col));
        }
        assert_eq!(t.lines().count(), 2);
    }
}
