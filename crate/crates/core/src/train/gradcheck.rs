//! Central finite-difference verification of the analytic gradient.

use super::backprop::{example_loss, example_loss_grad, ProbeParams};
use super::Example;
use crate::linalg::Matrix;
use crate::predictor::{Aggregator, ClassifierSpec, PROB_EPS};
use crate::selector::softmax_scores;

pub const GRAD_CHECK_EPS: f64 = 1e-5;

/// Largest relative error between the analytic gradient of the mean batch
/// loss (classifier, pooling, row weighting and softmax) and central
/// differences, over every parameter. The denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(params: &ProbeParams, classifier: &ClassifierSpec, aggregator: Aggregator, batch: &[Example]) -> f64 {
    grad_check_with_eps(params, classifier, aggregator, batch, GRAD_CHECK_EPS)
}

pub fn grad_check_with_eps(
    params: &ProbeParams,
    classifier: &ClassifierSpec,
    aggregator: Aggregator,
    batch: &[Example],
    eps: f64,
) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let n = batch.len() as f64;
    let mut analytic = params.zeros_like();
    for ex in batch {
        example_loss_grad(params, classifier, aggregator, &ex.h, ex.y, 1.0, &mut analytic, true);
    }
    analytic.scale(1.0 / n);

    let batch_loss = |p: &ProbeParams| -> f64 {
        batch
            .iter()
            .map(|ex| example_loss(p, classifier, aggregator, &ex.h, ex.y, 1.0))
            .sum::<f64>()
            / n
    };

    let analytic_slices = analytic.slices();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (t, slice) in analytic_slices.iter().enumerate() {
        for (j, &a) in slice.iter().enumerate() {
            let orig = *probe.value_mut(t, j);
            *probe.value_mut(t, j) = orig + eps;
            let plus = batch_loss(&probe);
            *probe.value_mut(t, j) = orig - eps;
            let minus = batch_loss(&probe);
            *probe.value_mut(t, j) = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// How far one input sits from a point where the loss is not
/// differentiable: a ReLU pre-activation at zero, a tie in max pooling,
/// the hinge corner, or the edge of the probability clamp. Finite
/// differences are only meaningful when this is well above the step size.
pub fn kink_distance(params: &ProbeParams, classifier: &ClassifierSpec, aggregator: Aggregator, h: &Matrix) -> f64 {
    let alpha = softmax_scores(h, &params.attention.weights);
    let mut nearest = f64::INFINITY;
    let mut z = Vec::new();
    match aggregator {
        Aggregator::Max => {
            for c in 0..h.cols() {
                let mut col: Vec<f64> = (0..h.rows()).map(|r| alpha[r] * h.row(r)[c]).collect();
                col.sort_by(|a, b| b.total_cmp(a));
                if col.len() > 1 {
                    nearest = nearest.min(col[0] - col[1]);
                }
                z.push(col[0]);
            }
        }
        _ => {
            let mut weighted = h.clone();
            for (r, a) in alpha.iter().enumerate() {
                for v in weighted.row_mut(r) {
                    *v *= a;
                }
            }
            z = crate::predictor::aggregate_rows(&weighted, aggregator, None);
        }
    }
    let layers = &params.predictor.layers;
    let mut pre = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        layer.apply(&z, &mut pre);
        if i + 1 < layers.len() {
            nearest = pre.iter().fold(nearest, |m, v| m.min(v.abs()));
            z = pre.iter().map(|v| v.max(0.0)).collect();
        }
    }
    let logit = pre[0];
    if classifier.is_margin() {
        nearest.min((1.0 - logit.abs()).abs())
    } else {
        let edge = ((1.0 - PROB_EPS) / PROB_EPS).ln();
        nearest.min((logit.abs() - edge).abs())
    }
}
