//! Accuracy and class-proportion-weighted precision, recall and F1.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Binary metrics with class 1 = correct.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Metrics {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class scores use 0 for any zero division; the weighted averages use
/// the true-class proportions of `y_true`.
pub fn compute_metrics(y_true: &[u8], y_pred: &[u8]) -> Result<Metrics> {
    if y_true.is_empty() {
        return Err(Error::Empty("no labels to score".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t == 1, p == 1) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    let n = y_true.len() as f64;
    let (s0, s1) = ((tn + fp) as f64, (tp + fn_) as f64);
    let weighted = |c0: f64, c1: f64| (c0 * s0 + c1 * s1) / n;

    let (p1, r1) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
    let (p0, r0) = (ratio(tn, tn + fn_), ratio(tn, tn + fp));
    Ok(Metrics {
        accuracy: ratio(tp + tn, y_true.len()),
        weighted_precision: weighted(p0, p1),
        weighted_recall: weighted(r0, r1),
        weighted_f1: weighted(f1(p0, r0), f1(p1, r1)),
        tp,
        fp,
        tn,
        fn_,
    })
}
