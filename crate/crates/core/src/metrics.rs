//! Confusion matrix and the per-class IoU / precision / recall / F1 table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::contract(format!(
                "{} labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(n_classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.n_classes || pred >= self.n_classes {
            return Err(Error::contract(format!(
                "class pair ({truth}, {pred}) out of range 0..{}",
                self.n_classes
            )));
        }
        self.counts[truth * self.n_classes + pred] += 1;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    fn predicted(&self, c: usize) -> u64 {
        (0..self.n_classes).map(|t| self.get(t, c)).sum()
    }

    fn actual(&self, c: usize) -> u64 {
        (0..self.n_classes).map(|p| self.get(c, p)).sum()
    }

    pub fn metrics(&self) -> Result<Metrics> {
        if self.total() == 0 {
            return Err(Error::contract("no samples evaluated"));
        }
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut per_class = Vec::with_capacity(self.n_classes);
        for c in 0..self.n_classes {
            let tp = self.true_positives(c);
            let predicted = self.predicted(c);
            let actual = self.actual(c);
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            per_class.push(ClassMetrics {
                class: c,
                support: actual,
                iou: ratio(tp, predicted + actual - tp),
                precision,
                recall,
                f1,
            });
        }
        let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
        let mean = |f: fn(&ClassMetrics) -> f64| present.iter().map(|m| f(m)).sum::<f64>() / present.len() as f64;
        let correct: u64 = (0..self.n_classes).map(|c| self.true_positives(c)).sum();
        Ok(Metrics {
            miou: mean(|m| m.iou),
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            accuracy: correct as f64 / self.total() as f64,
            per_class,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    /// Ground-truth count.
    pub support: u64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Macro averages run over classes present in the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    pub miou: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

impl Metrics {
    /// One row per class, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,support,iou,precision,recall,f1\n");
        for m in &self.per_class {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                m.class, m.support, m.iou, m.precision, m.recall, m.f1
            );
        }
        let support: u64 = self.per_class.iter().map(|m| m.support).sum();
        let _ = writeln!(
            out,
            "mean,{},{},{},{},{}",
            support, self.miou, self.macro_precision, self.macro_recall, self.macro_f1
        );
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>6} {:>8} {:>7} {:>7} {:>7} {:>7}\n",
            "class", "support", "IoU", "P", "R", "F1"
        );
        for m in &self.per_class {
            let _ = writeln!(
                out,
                "{:>6} {:>8} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                m.class, m.support, m.iou, m.precision, m.recall, m.f1
            );
        }
        let _ = writeln!(
            out,
            "{:>6} {:>8} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            "mean", "", self.miou, self.macro_precision, self.macro_recall, self.macro_f1
        );
        let _ = writeln!(out, "accuracy {:.4}", self.accuracy);
        out
    }
}
