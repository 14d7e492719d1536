//! Pooling of the weighted rows and the probing classifier head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, sigmoid, Matrix};
use crate::repr_store::Dataset;
use crate::train::ProbeModel;
use crate::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the
/// cross-entropy.
pub const PROB_EPS: f64 = 1e-7;

/// Reduction of the weighted rows to one vector. Config names
/// `concat|sum|mean|max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Concat,
    Sum,
    Mean,
    Max,
}

impl Aggregator {
    pub const ALL: [Aggregator; 4] = [Aggregator::Concat, Aggregator::Sum, Aggregator::Mean, Aggregator::Max];

    pub fn output_dim(self, rows: usize, hidden_dim: usize) -> usize {
        match self {
            Aggregator::Concat => rows * hidden_dim,
            _ => hidden_dim,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Concat => "concat",
            Aggregator::Sum => "sum",
            Aggregator::Mean => "mean",
            Aggregator::Max => "max",
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Aggregator::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregator '{s}'")))
    }
}

/// Classifier head with a single output logit. Config names `logreg`,
/// `mlp` (hidden sizes 128 and 64), `mlp:<h1>,<h2>,...`, `svm`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ClassifierSpec {
    LogisticRegression,
    Mlp { hidden: Vec<usize> },
    LinearSvm,
}

impl ClassifierSpec {
    pub fn default_mlp() -> Self {
        ClassifierSpec::Mlp { hidden: vec![128, 64] }
    }

    pub fn all_defaults() -> [ClassifierSpec; 3] {
        [
            ClassifierSpec::LogisticRegression,
            ClassifierSpec::default_mlp(),
            ClassifierSpec::LinearSvm,
        ]
    }

    /// Layer widths from input to the single logit.
    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        if let ClassifierSpec::Mlp { hidden } = self {
            sizes.extend_from_slice(hidden);
        }
        sizes.push(1);
        sizes
    }

    /// Hinge-loss (margin) head rather than cross-entropy.
    pub fn is_margin(&self) -> bool {
        matches!(self, ClassifierSpec::LinearSvm)
    }
}

impl fmt::Display for ClassifierSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassifierSpec::LogisticRegression => f.write_str("logreg"),
            ClassifierSpec::LinearSvm => f.write_str("svm"),
            ClassifierSpec::Mlp { hidden } if hidden == &[128, 64] => f.write_str("mlp"),
            ClassifierSpec::Mlp { hidden } => {
                let sizes: Vec<String> = hidden.iter().map(usize::to_string).collect();
                write!(f, "mlp:{}", sizes.join(","))
            }
        }
    }
}

impl FromStr for ClassifierSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logreg" | "logistic_regression" => Ok(ClassifierSpec::LogisticRegression),
            "svm" | "linear_svm" => Ok(ClassifierSpec::LinearSvm),
            "mlp" => Ok(ClassifierSpec::default_mlp()),
            _ => {
                let sizes = s
                    .strip_prefix("mlp:")
                    .ok_or_else(|| Error::Config(format!("unknown classifier '{s}'")))?;
                let hidden = sizes
                    .split(',')
                    .map(|t| match t.trim().parse::<usize>() {
                        Ok(n) if n > 0 => Ok(n),
                        _ => Err(Error::Config(format!("bad hidden size '{t}' in '{s}'"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ClassifierSpec::Mlp { hidden })
            }
        }
    }
}

impl TryFrom<String> for ClassifierSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ClassifierSpec> for String {
    fn from(c: ClassifierSpec) -> String {
        c.to_string()
    }
}

/// Fully connected layer, weights row-major `[outputs x inputs]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs);
        for w in &mut layer.weights {
            *w = rng.gen_range(-limit..=limit);
        }
        layer
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }

    pub(crate) fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.outputs).map(|o| dot(self.row(o), x) + self.bias[o]));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub layers: Vec<DenseLayer>,
}

impl PredictorParams {
    pub fn zeros(spec: &ClassifierSpec, input_dim: usize) -> Self {
        let sizes = spec.layer_sizes(input_dim);
        Self {
            layers: sizes.windows(2).map(|w| DenseLayer::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn glorot<R: Rng>(spec: &ClassifierSpec, input_dim: usize, rng: &mut R) -> Self {
        let sizes = spec.layer_sizes(input_dim);
        Self {
            layers: sizes.windows(2).map(|w| DenseLayer::glorot(w[0], w[1], rng)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn check(&self, spec: &ClassifierSpec) -> Result<()> {
        let sizes = spec.layer_sizes(self.input_dim());
        let chained = self.layers.len() + 1 == sizes.len()
            && self.layers.iter().zip(sizes.windows(2)).all(|(l, w)| {
                l.inputs == w[0] && l.outputs == w[1] && l.weights.len() == w[0] * w[1] && l.bias.len() == w[1]
            });
        if !chained {
            return Err(Error::DimensionMismatch(format!(
                "classifier parameters do not chain as {sizes:?}"
            )));
        }
        let finite = self
            .layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Invalid("non-finite classifier parameters".into()));
        }
        Ok(())
    }
}

/// Pools the rows of `z` into one vector: concat flattens row-major, sum
/// and mean reduce over rows, max takes the elementwise maximum.
pub fn aggregate(z: &Matrix, agg: Aggregator) -> Result<Vec<f64>> {
    if z.rows() == 0 {
        return Err(Error::Empty("cannot aggregate zero rows".into()));
    }
    Ok(aggregate_rows(z, agg, None))
}

/// Also records, for `max`, which row won each column (ties to the lowest
/// row index).
pub(crate) fn aggregate_rows(z: &Matrix, agg: Aggregator, argmax: Option<&mut Vec<usize>>) -> Vec<f64> {
    let d = z.cols();
    match agg {
        Aggregator::Concat => z.as_slice().to_vec(),
        Aggregator::Sum | Aggregator::Mean => {
            let mut out = vec![0.0; d];
            for row in z.iter_rows() {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            if agg == Aggregator::Mean {
                let r = z.rows() as f64;
                for o in &mut out {
                    *o /= r;
                }
            }
            out
        }
        Aggregator::Max => {
            let mut out = z.row(0).to_vec();
            let mut winner = vec![0usize; d];
            for r in 1..z.rows() {
                for (c, v) in z.row(r).iter().enumerate() {
                    if *v > out[c] {
                        out[c] = *v;
                        winner[c] = r;
                    }
                }
            }
            if let Some(a) = argmax {
                *a = winner;
            }
            out
        }
    }
}

/// Output logit (or SVM margin score) for a pooled vector.
pub fn forward(z: &[f64], params: &PredictorParams, spec: &ClassifierSpec) -> Result<f64> {
    params.check(spec)?;
    if z.len() != params.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "classifier input has {} values, expected {}",
            z.len(),
            params.input_dim()
        )));
    }
    Ok(forward_unchecked(z, params))
}

pub(crate) fn forward_unchecked(z: &[f64], params: &PredictorParams) -> f64 {
    let mut a = z.to_vec();
    let mut next = Vec::new();
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        layer.apply(&a, &mut next);
        if i < last {
            for v in &mut next {
                *v = v.max(0.0);
            }
        }
        std::mem::swap(&mut a, &mut next);
    }
    a[0]
}

/// Per-class loss weights `(negative, positive)`.
pub type ClassWeightPair = (f64, f64);

/// Cross-entropy on `sigmoid(logit)` (or hinge for SVM heads), optionally
/// weighted by class.
pub fn loss(logit: f64, y: u8, spec: &ClassifierSpec, class_weights: Option<ClassWeightPair>) -> f64 {
    let w = class_weight(y, class_weights);
    w * loss_and_grad(logit, y, spec.is_margin()).0
}

pub(crate) fn class_weight(y: u8, class_weights: Option<ClassWeightPair>) -> f64 {
    match class_weights {
        Some((neg, pos)) => {
            if y == 1 {
                pos
            } else {
                neg
            }
        }
        None => 1.0,
    }
}

/// Unweighted loss and its derivative with respect to the logit. Inside the
/// clamped region the cross-entropy is flat, so its derivative is zero.
pub(crate) fn loss_and_grad(logit: f64, y: u8, margin: bool) -> (f64, f64) {
    if margin {
        let sign = if y == 1 { 1.0 } else { -1.0 };
        let slack = 1.0 - sign * logit;
        if slack > 0.0 {
            (slack, -sign)
        } else {
            (0.0, 0.0)
        }
    } else {
        let p = sigmoid(logit);
        let clamped = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let loss = if y == 1 { -clamped.ln() } else { -(1.0 - clamped).ln() };
        let grad = if clamped == p { p - f64::from(y) } else { 0.0 };
        (loss, grad)
    }
}

/// Predicted label and probability of correctness for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: u8,
    pub probability: f64,
}

impl Prediction {
    /// Threshold 0.5; a tie goes to label 1.
    pub fn from_logit(logit: f64) -> Self {
        let probability = sigmoid(logit);
        Self {
            label: u8::from(probability >= 0.5),
            probability,
        }
    }
}

/// Runs the full pipeline for one stored sample.
pub fn predict(probe: &ProbeModel, dataset: &Dataset, sample_id: &str) -> Result<Prediction> {
    let input = probe.assemble(dataset, sample_id)?;
    let (logit, _) = probe.score(&input.h)?;
    Ok(Prediction::from_logit(logit))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_rows() -> Matrix {
        Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, -4.0]])
    }

    #[test]
    fn aggregators_by_hand() {
        let z = two_rows();
        assert_eq!(aggregate(&z, Aggregator::Max).unwrap(), vec![3.0, -2.0]);
        assert_eq!(aggregate(&z, Aggregator::Sum).unwrap(), vec![4.0, -6.0]);
        assert_eq!(aggregate(&z, Aggregator::Mean).unwrap(), vec![2.0, -3.0]);
        assert_eq!(aggregate(&z, Aggregator::Concat).unwrap(), vec![1.0, -2.0, 3.0, -4.0]);
    }

    #[test]
    fn singleton_is_identity() {
        let z = Matrix::from_rows(&[vec![0.5, -1.5, 2.0]]);
        for agg in [Aggregator::Sum, Aggregator::Mean, Aggregator::Max] {
            assert_eq!(aggregate(&z, agg).unwrap(), z.row(0));
        }
    }

    #[test]
    fn empty_aggregate_fails() {
        assert!(aggregate(&Matrix::zeros(0, 3), Aggregator::Sum).is_err());
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let spec = ClassifierSpec::default_mlp();
        let params = PredictorParams::zeros(&spec, 5);
        let logit = forward(&[1.0, 2.0, 3.0, 4.0, 5.0], &params, &spec).unwrap();
        assert_eq!(logit, 0.0);
        assert_eq!(
            Prediction::from_logit(logit),
            Prediction {
                label: 1,
                probability: 0.5
            }
        );
    }

    #[test]
    fn logreg_projection() {
        let spec = ClassifierSpec::LogisticRegression;
        let mut params = PredictorParams::zeros(&spec, 3);
        params.layers[0].weights[0] = 1.0;
        assert_eq!(forward(&[2.0, 7.0, -1.0], &params, &spec).unwrap(), 2.0);
        assert!(forward(&[2.0, 7.0], &params, &spec).is_err());
        params.layers[0].bias[0] = f64::NAN;
        assert!(forward(&[2.0, 7.0, -1.0], &params, &spec).is_err());
    }

    #[test]
    fn loss_values() {
        let bce = ClassifierSpec::LogisticRegression;
        assert!((loss(0.0, 1, &bce, None) - std::f64::consts::LN_2).abs() < 1e-12);
        let big = loss(1e6, 1, &bce, None);
        assert!(big.is_finite() && big < 1e-6);
        let worst = loss(-1e6, 1, &bce, None);
        assert!((worst - (-(PROB_EPS).ln())).abs() < 1e-9);
        assert!((loss(0.5, 0, &ClassifierSpec::LinearSvm, None) - 1.5).abs() < 1e-15);
        assert_eq!(loss(2.0, 1, &ClassifierSpec::LinearSvm, None), 0.0);
        assert!((loss(0.0, 1, &bce, Some((1.0, 3.0))) - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn classifier_names_round_trip() {
        for name in ["logreg", "mlp", "mlp:32,16", "svm"] {
            assert_eq!(name.parse::<ClassifierSpec>().unwrap().to_string(), name);
        }
        assert!("mlp:0".parse::<ClassifierSpec>().is_err());
        assert!("tree".parse::<ClassifierSpec>().is_err());
    }
}
