//! Positive-class (rumor) classification metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::LossBreakdown;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[u8], truth: &[u8]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::Shape {
                op: "confusion",
                left: vec![predicted.len()],
                right: vec![truth.len()],
            });
        }
        let mut c = Self::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 0) => c.tn += 1,
                (0, 1) => c.fn_ += 1,
                _ => {
                    return Err(Error::invalid(format!(
                        "labels must be 0 or 1, got ({p}, {t})"
                    )))
                }
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Per-epoch record kept during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the per-step breakdowns.
    pub loss: LossBreakdown,
    /// Per-step breakdowns in order.
    pub steps: Vec<LossBreakdown>,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
    pub history: Vec<EpochRecord>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_confusion(c: Confusion) -> Result<Self> {
        if c.total() == 0 {
            return Err(Error::invalid("cannot compute metrics on an empty split"));
        }
        let acc = ratio(c.tp + c.tn, c.total());
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Ok(Self {
            acc,
            precision,
            recall,
            f1,
            confusion: c,
            history: Vec::new(),
        })
    }

    pub fn from_predictions(predicted: &[u8], truth: &[u8]) -> Result<Self> {
        Self::from_confusion(Confusion::from_predictions(predicted, truth)?)
    }

    /// Plain-text report with metrics to four decimals followed by the
    /// confusion counts and one line per recorded epoch.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.confusion;
        let _ = writeln!(s, "acc = {:.4}", self.acc);
        let _ = writeln!(s, "precision = {:.4}", self.precision);
        let _ = writeln!(s, "recall = {:.4}", self.recall);
        let _ = writeln!(s, "f1 = {:.4}", self.f1);
        let _ = writeln!(s, "tp = {}", c.tp);
        let _ = writeln!(s, "fp = {}", c.fp);
        let _ = writeln!(s, "tn = {}", c.tn);
        let _ = writeln!(s, "fn = {}", c.fn_);
        for e in &self.history {
            let l = &e.loss;
            let _ = writeln!(
                s,
                "epoch {} lr={:.6} total={:.6} ce={:.6} scl={:.6} cmca={:.6} ml={:.6} af={:.6} val_acc={:.4}",
                e.epoch, e.lr, l.total, l.ce, l.scl, l.cmca, l.ml, l.af, e.val_acc
            );
        }
        s
    }
}
