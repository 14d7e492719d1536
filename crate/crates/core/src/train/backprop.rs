//! Forward and backward pass of the joint scorer + classifier.

use serde::{Deserialize, Serialize};

use crate::linalg::{axpy, dot, Matrix};
use crate::predictor::{aggregate_rows, loss_and_grad, Aggregator, ClassifierSpec, PredictorParams};
use crate::selector::{softmax_scores, AttentionParams};

/// Every trainable parameter of a probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub attention: AttentionParams,
    pub predictor: PredictorParams,
}

impl ProbeParams {
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, v: f64) {
        for s in self.slices_mut() {
            s.fill(v);
        }
    }

    /// Parameter tensors in storage order: attention weights, attention
    /// bias, then weights and bias of each classifier layer.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.attention.weights, std::slice::from_ref(&self.attention.bias)];
        for l in &self.predictor.layers {
            out.push(&l.weights);
            out.push(&l.bias);
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            &mut self.attention.weights,
            std::slice::from_mut(&mut self.attention.bias),
        ];
        for l in &mut self.predictor.layers {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["attention.weight".to_string(), "attention.bias".to_string()];
        for i in 0..self.predictor.layers.len() {
            names.push(format!("classifier.{i}.weight"));
            names.push(format!("classifier.{i}.bias"));
        }
        names
    }

    pub fn parameter_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn value_mut(&mut self, tensor: usize, index: usize) -> &mut f64 {
        match tensor {
            0 => &mut self.attention.weights[index],
            1 => &mut self.attention.bias,
            t => {
                let layer = &mut self.predictor.layers[(t - 2) / 2];
                if t % 2 == 0 {
                    &mut layer.weights[index]
                } else {
                    &mut layer.bias[index]
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            for v in s {
                *v *= factor;
            }
        }
    }

    /// Rounds every value to the nearest f32 so the parameters survive the
    /// float32 model file bit-exactly.
    pub fn round_to_f32(&mut self) {
        for s in self.slices_mut() {
            for v in s {
                *v = f64::from(*v as f32);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Forward pass only; returns `(logit, alpha)`.
pub(crate) fn infer(params: &ProbeParams, agg: Aggregator, h: &Matrix) -> (f64, Vec<f64>) {
    let alpha = softmax_scores(h, &params.attention.weights);
    let z = pooled(h, &alpha, agg, None);
    (crate::predictor::forward_unchecked(&z, &params.predictor), alpha)
}

fn pooled(h: &Matrix, alpha: &[f64], agg: Aggregator, argmax: Option<&mut Vec<usize>>) -> Vec<f64> {
    let mut z = h.clone();
    for (r, a) in alpha.iter().enumerate() {
        for v in z.row_mut(r) {
            *v *= a;
        }
    }
    aggregate_rows(&z, agg, argmax)
}

/// Weighted loss of one example.
pub(crate) fn example_loss(
    params: &ProbeParams,
    spec: &ClassifierSpec,
    agg: Aggregator,
    h: &Matrix,
    y: u8,
    weight: f64,
) -> f64 {
    let (logit, _) = infer(params, agg, h);
    weight * loss_and_grad(logit, y, spec.is_margin()).0
}

/// Weighted loss of one example; its gradient is added into `grads`.
/// With `through_attention == false` the scorer gradient is skipped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn example_loss_grad(
    params: &ProbeParams,
    spec: &ClassifierSpec,
    agg: Aggregator,
    h: &Matrix,
    y: u8,
    weight: f64,
    grads: &mut ProbeParams,
    through_attention: bool,
) -> f64 {
    let rows = h.rows();
    let d = h.cols();
    let alpha = softmax_scores(h, &params.attention.weights);
    let mut argmax = Vec::new();
    let z = pooled(h, &alpha, agg, Some(&mut argmax));

    // classifier forward, keeping pre-activations
    let layers = &params.predictor.layers;
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    let mut pres: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    acts.push(z);
    for (i, layer) in layers.iter().enumerate() {
        let mut pre = Vec::new();
        layer.apply(&acts[i], &mut pre);
        if i + 1 < layers.len() {
            acts.push(pre.iter().map(|v| v.max(0.0)).collect());
        }
        pres.push(pre);
    }
    let logit = pres[layers.len() - 1][0];
    let (loss, dlogit) = loss_and_grad(logit, y, spec.is_margin());
    if dlogit == 0.0 {
        return weight * loss;
    }

    // classifier backward
    let mut g = vec![weight * dlogit];
    for i in (0..layers.len()).rev() {
        let layer = &layers[i];
        let gl = &mut grads.predictor.layers[i];
        let input = &acts[i];
        for (o, &go) in g.iter().enumerate() {
            if go != 0.0 {
                axpy(go, input, &mut gl.weights[o * layer.inputs..(o + 1) * layer.inputs]);
                gl.bias[o] += go;
            }
        }
        if i == 0 && !through_attention {
            return weight * loss;
        }
        let mut da = vec![0.0; layer.inputs];
        for (o, &go) in g.iter().enumerate() {
            if go != 0.0 {
                axpy(go, layer.row(o), &mut da);
            }
        }
        if i > 0 {
            for (v, p) in da.iter_mut().zip(&pres[i - 1]) {
                if *p <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        g = da;
    }
    let dz = g;

    // pooling backward, to the attention weights
    let dalpha: Vec<f64> = match agg {
        Aggregator::Concat => (0..rows).map(|r| dot(&dz[r * d..(r + 1) * d], h.row(r))).collect(),
        Aggregator::Sum => (0..rows).map(|r| dot(&dz, h.row(r))).collect(),
        Aggregator::Mean => (0..rows).map(|r| dot(&dz, h.row(r)) / rows as f64).collect(),
        Aggregator::Max => {
            let mut da = vec![0.0; rows];
            for (c, &r) in argmax.iter().enumerate() {
                da[r] += dz[c] * h.row(r)[c];
            }
            da
        }
    };

    // softmax backward; the bias gradient is identically zero
    let mean = dot(&alpha, &dalpha);
    for r in 0..rows {
        let ds = alpha[r] * (dalpha[r] - mean);
        if ds != 0.0 {
            axpy(ds, h.row(r), &mut grads.attention.weights);
        }
    }
    weight * loss
}
