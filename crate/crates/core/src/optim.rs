//! Training cost and updates: batch-mean cross-entropy, global-norm gradient
//! clipping, and Adam.

use crate::cells::ModelParams;
use crate::numeric::Matrix;

/// Probabilities are floored here before the log so the loss stays finite
/// even for fully saturated predictions.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean over the batch of `-ln p(label)` given per-row `[p_false, p_true]`.
pub fn cross_entropy(probs: &Matrix, labels: &[u8]) -> f64 {
    assert_eq!(probs.rows(), labels.len(), "probs/labels length mismatch");
    assert_eq!(probs.cols(), 2);
    let mut total = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        let p = probs.at(row, label as usize).max(PROB_FLOOR);
        total -= p.ln();
    }
    total / labels.len() as f64
}

/// Gradient of the batch-mean cross-entropy at the logits (softmax folded
/// in): `(p - y) / B` per row.
pub fn cross_entropy_grad(probs: &Matrix, labels: &[u8]) -> Matrix {
    assert_eq!(probs.rows(), labels.len(), "probs/labels length mismatch");
    let scale = 1.0 / labels.len() as f64;
    let mut grad = Matrix::zeros(probs.rows(), 2);
    for (row, &label) in labels.iter().enumerate() {
        for c in 0..2 {
            let y = if c == label as usize { 1.0 } else { 0.0 };
            grad.set(row, c, (probs.at(row, c) - y) * scale);
        }
    }
    grad
}

/// Scales all gradients jointly so their global Euclidean norm does not
/// exceed `max_norm`; gradients below the limit pass through untouched.
/// Returns the pre-clip norm.
pub fn clip_by_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip threshold must be positive");
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Adam optimizer state: first/second-moment accumulators shaped like the
/// parameters, plus the step counter and constants.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: ModelParams,
    v: ModelParams,
    pub t: u64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Fresh state with the standard constants (beta1=0.9, beta2=0.999,
    /// eps=1e-8).
    pub fn new(shape: &ModelParams, alpha: f64) -> AdamState {
        AdamState {
            m: shape.zeros_like(),
            v: shape.zeros_like(),
            t: 0,
            alpha,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam step: `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// bias-corrected, then `p <- p - alpha * m^ / (sqrt(v^) + eps)`.
pub fn adam_update(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState) {
    state.t += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let corr1 = 1.0 - b1.powi(state.t as i32);
    let corr2 = 1.0 - b2.powi(state.t as i32);
    let alpha = state.alpha;
    let eps = state.epsilon;

    let mut p_tensors = params.tensors_mut();
    let g_tensors = grads.tensors();
    let mut m_tensors = state.m.tensors_mut();
    let mut v_tensors = state.v.tensors_mut();
    assert_eq!(p_tensors.len(), g_tensors.len(), "parameter/gradient shape mismatch");
    for idx in 0..p_tensors.len() {
        let p = &mut p_tensors[idx];
        let g = g_tensors[idx];
        let m = &mut m_tensors[idx];
        let v = &mut v_tensors[idx];
        assert_eq!(p.len(), g.len(), "parameter/gradient shape mismatch");
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / corr1;
            let v_hat = v[k] / corr2;
            p[k] -= alpha * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
