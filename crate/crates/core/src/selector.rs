//! Learned softmax attention over the rows of the assembled matrix.
//!
//! A single linear scorer `(W_a, b_a)` is shared by every row; the scores are
//! softmax-normalized across all rows and each row is scaled by its weight.

use serde::{Deserialize, Serialize};

use crate::linalg::{dot, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl AttentionParams {
    /// Zero scorer: uniform attention.
    pub fn zeros(hidden_dim: usize) -> Self {
        Self {
            weights: vec![0.0; hidden_dim],
            bias: 0.0,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.weights.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub alpha: Vec<f64>,
    pub z: Matrix,
}

/// `softmax(H . W_a + b_a)` over the rows of `h`.
pub fn attention_scores(h: &Matrix, params: &AttentionParams) -> Result<Vec<f64>> {
    if h.cols() != params.hidden_dim() {
        return Err(Error::DimensionMismatch(format!(
            "H has {} columns, attention expects {}",
            h.cols(),
            params.hidden_dim()
        )));
    }
    if !h.is_finite() || !params.bias.is_finite() || params.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Invalid("non-finite attention input".into()));
    }
    if h.rows() == 0 {
        return Err(Error::Empty("attention over zero rows".into()));
    }
    Ok(softmax_scores(h, &params.weights))
}

// The shared bias cancels exactly under max-subtraction, so it never enters
// the arithmetic.
pub(crate) fn softmax_scores(h: &Matrix, weights: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = h.iter_rows().map(|row| dot(row, weights)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut alpha: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = alpha.iter().sum();
    for a in &mut alpha {
        *a /= total;
    }
    alpha
}

/// `Z[r] = alpha[r] * H[r]`.
pub fn weight_representations(h: &Matrix, alpha: &[f64]) -> Result<Matrix> {
    if alpha.len() != h.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} attention weights for {} rows",
            alpha.len(),
            h.rows()
        )));
    }
    let mut z = h.clone();
    for (r, a) in alpha.iter().enumerate() {
        for v in z.row_mut(r) {
            *v *= a;
        }
    }
    Ok(z)
}

pub fn attend(h: &Matrix, params: &AttentionParams) -> Result<AttentionOutput> {
    let alpha = attention_scores(h, params)?;
    let z = weight_representations(h, &alpha)?;
    Ok(AttentionOutput { alpha, z })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scorer_is_uniform() {
        let h = Matrix::from_vec(8, 3, (0..24).map(|i| i as f64 * 0.37 - 2.0).collect());
        let alpha = attention_scores(&h, &AttentionParams::zeros(3)).unwrap();
        assert!(alpha.iter().all(|&a| a == 0.125));
    }

    #[test]
    fn two_row_softmax() {
        // logits ln1, ln3 via a one-dimensional H and unit weight
        let h = Matrix::from_vec(2, 1, vec![0.0, 3f64.ln()]);
        let p = AttentionParams {
            weights: vec![1.0],
            bias: 0.0,
        };
        let alpha = attention_scores(&h, &p).unwrap();
        assert!((alpha[0] - 0.25).abs() < 1e-15);
        assert!((alpha[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn bias_shift_leaves_weights_unchanged() {
        let h = Matrix::from_vec(3, 2, vec![0.1, -0.4, 2.0, 0.3, -1.0, 0.5]);
        let mut p = AttentionParams {
            weights: vec![0.7, -1.3],
            bias: 0.0,
        };
        let a = attention_scores(&h, &p).unwrap();
        p.bias = 123.456;
        assert_eq!(a, attention_scores(&h, &p).unwrap());
    }

    #[test]
    fn huge_logits_stay_finite() {
        let h = Matrix::from_vec(3, 1, vec![1e4, -1e4, 0.0]);
        let p = AttentionParams {
            weights: vec![1.0],
            bias: 0.0,
        };
        let a = attention_scores(&h, &p).unwrap();
        assert!(a.iter().all(|x| x.is_finite()));
        assert_eq!(a[0], 1.0);
    }

    #[test]
    fn one_hot_weighting_keeps_one_row() {
        let h = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let z = weight_representations(&h, &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(z.row(2), h.row(2));
        assert_eq!(z.row(0), &[0.0, 0.0]);
        assert_eq!(z.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn uniform_weighting_sums_to_row_mean() {
        let h = Matrix::from_vec(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let z = weight_representations(&h, &[0.25; 4]).unwrap();
        let sum: Vec<f64> = (0..2).map(|c| (0..4).map(|r| z.row(r)[c]).sum()).collect();
        assert_eq!(sum, vec![4.0, 5.0]);
    }

    #[test]
    fn mismatches_are_errors() {
        let h = Matrix::zeros(2, 3);
        assert!(attention_scores(&h, &AttentionParams::zeros(4)).is_err());
        assert!(weight_representations(&h, &[1.0]).is_err());
        let nan = Matrix::from_vec(1, 1, vec![f64::NAN]);
        assert!(attention_scores(&nan, &AttentionParams::zeros(1)).is_err());
    }
}
