use serde::{Deserialize, Serialize};

use crate::encoder::l2_normalize;
use crate::error::{BelxError, Result};
use crate::matrix::Matrix;
use crate::scalar::{norm_f64, Scalar};

use super::mining::IndexSets;
use super::similarity::{pairwise_cosine, SimilarityMatrix};

/// Multi-similarity loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsLossParams {
    /// Scale of the negative term.
    pub alpha: f64,
    /// Scale of the positive term.
    pub beta: f64,
    /// Similarity offset.
    pub epsilon: f64,
    /// Mining margin.
    pub margin: f64,
}

impl Default for MsLossParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 50.0,
            epsilon: 0.5,
            margin: 0.2,
        }
    }
}

impl MsLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(BelxError::Config("alpha and beta must be positive".into()));
        }
        if !(self.margin >= 0.0) || !self.epsilon.is_finite() {
            return Err(BelxError::Config("margin must be ≥ 0 and epsilon finite".into()));
        }
        Ok(())
    }
}

/// `ln(1 + Σ exp(a_k))` without overflow, plus the weights
/// `exp(a_k) / (1 + Σ exp(a))`.
fn log1p_sum_exp(a: &[f64]) -> (f64, Vec<f64>) {
    if a.is_empty() {
        return (0.0, Vec::new());
    }
    let m = a.iter().copied().fold(0.0f64, f64::max);
    let mut total = (-m).exp();
    for &x in a {
        total += (x - m).exp();
    }
    let lse = m + total.ln();
    let weights = a.iter().map(|&x| (x - lse).exp()).collect();
    (lse, weights)
}

/// Loss plus ∂loss/∂S_ij for every (anchor, member) pair in the sets.
fn loss_and_pair_grads<T: Scalar>(
    s: &SimilarityMatrix<T>,
    sets: &IndexSets,
    params: &MsLossParams,
) -> Result<(f64, Vec<(usize, usize, f64)>)> {
    params.validate()?;
    let n = s.n();
    if sets.len() != n || sets.negatives.len() != n {
        return Err(BelxError::DimensionMismatch {
            expected: n,
            got: sets.len(),
        });
    }
    let inv_n = 1.0 / n as f64;
    let (alpha, beta, eps) = (params.alpha, params.beta, params.epsilon);
    let mut total = 0.0f64;
    let mut pair_grads = Vec::new();
    for i in 0..n {
        let negs = &sets.negatives[i];
        let pos = &sets.positives[i];
        if negs.iter().chain(pos).any(|&j| j >= n || j == i) {
            return Err(BelxError::InvalidInput(format!("bad index set for anchor {i}")));
        }
        let neg_args: Vec<f64> = negs
            .iter()
            .map(|&j| alpha * (s.get(i, j).to_f64_lossy() - eps))
            .collect();
        let pos_args: Vec<f64> = pos
            .iter()
            .map(|&j| -beta * (s.get(i, j).to_f64_lossy() - eps))
            .collect();
        let (neg_lse, neg_w) = log1p_sum_exp(&neg_args);
        let (pos_lse, pos_w) = log1p_sum_exp(&pos_args);
        total += neg_lse / alpha + pos_lse / beta;
        for (&j, w) in negs.iter().zip(neg_w) {
            pair_grads.push((i, j, w * inv_n));
        }
        for (&j, w) in pos.iter().zip(pos_w) {
            pair_grads.push((i, j, -w * inv_n));
        }
    }
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(BelxError::Numeric("multi-similarity loss".into()));
    }
    Ok((loss, pair_grads))
}

/// Mean over anchors of
/// `(1/α)·ln(1 + Σ_{n∈N_i} e^{α(S_in − ε)}) + (1/β)·ln(1 + Σ_{p∈P_i} e^{−β(S_ip − ε)})`.
pub fn ms_loss<T: Scalar>(s: &SimilarityMatrix<T>, sets: &IndexSets, params: &MsLossParams) -> Result<f64> {
    loss_and_pair_grads(s, sets, params).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the unnormalized rows `raw`.
///
/// Rows are normalized internally; with `u = x/‖x‖` the chain rule through
/// the normalization is `∂L/∂x = (g − (g·u)u)/‖x‖` where `g = ∂L/∂u`.
pub fn ms_loss_grad<T: Scalar>(
    raw: &Matrix<T>,
    sets: &IndexSets,
    params: &MsLossParams,
) -> Result<(f64, Matrix<T>)> {
    let n = raw.rows();
    let d = raw.cols();
    let mut unit = Matrix::zeros(n, d);
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        unit.row_mut(i).copy_from_slice(&l2_normalize(raw.row(i))?);
        norms.push(norm_f64(raw.row(i)));
    }
    let s = pairwise_cosine(&unit)?;
    let (loss, pair_grads) = loss_and_pair_grads(&s, sets, params)?;

    // g = ∂L/∂u, accumulated in f64
    let mut g = vec![0.0f64; n * d];
    for (i, j, w) in pair_grads {
        for k in 0..d {
            g[i * d + k] += w * unit.get(j, k).to_f64_lossy();
            g[j * d + k] += w * unit.get(i, k).to_f64_lossy();
        }
    }
    let mut grad = Matrix::zeros(n, d);
    for i in 0..n {
        let gi = &g[i * d..(i + 1) * d];
        let proj: f64 = (0..d).map(|k| gi[k] * unit.get(i, k).to_f64_lossy()).sum();
        for k in 0..d {
            let v = (gi[k] - proj * unit.get(i, k).to_f64_lossy()) / norms[i];
            if !v.is_finite() {
                return Err(BelxError::Numeric("multi-similarity gradient".into()));
            }
            grad.set(i, k, T::of(v));
        }
    }
    Ok((loss, grad))
}
