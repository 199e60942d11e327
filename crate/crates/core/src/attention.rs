//! Multi-head intra-modality self-attention.
//!
//! `W_m = softmax_rows(W_h2 · tanh(W_h1 · U_mᵀ))` gives k distributions over
//! the L_m positions; `U_mm = W_m · U_m` holds one weighted summary per head.
//!
//! Positions are reduced in a canonical order (rows sorted by their bit
//! patterns), so `U_mm` is bitwise identical under any reordering of `U_m`.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::numeric::{softmax_rows_backward, Matrix, SeededStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfAttentionParams {
    /// r × d_m
    pub w_h1: Matrix,
    /// k × r
    pub w_h2: Matrix,
}

impl SelfAttentionParams {
    pub fn new(
        d_m: usize,
        heads: usize,
        inner: usize,
        init_std: f64,
        rng: &mut SeededStream,
    ) -> Result<Self, ModelError> {
        if heads == 0 || inner == 0 || d_m == 0 {
            return Err(ModelError::Config(format!(
                "attention dims must be positive: d_m={d_m}, k={heads}, r={inner}"
            )));
        }
        Ok(SelfAttentionParams {
            w_h1: rng.gaussian_matrix(inner, d_m, init_std),
            w_h2: rng.gaussian_matrix(heads, inner, init_std),
        })
    }

    pub fn heads(&self) -> usize {
        self.w_h2.rows()
    }

    pub fn inner_dim(&self) -> usize {
        self.w_h1.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_h1.cols()
    }
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    /// `inverse[p]` is the canonical slot of original position `p`.
    inverse: Vec<usize>,
    /// Input, hidden activations and weights in canonical order.
    input: Matrix,
    hidden: Matrix,
    sorted_weights: Matrix,
    /// `W_m` with columns in the original position order.
    pub weights: Matrix,
}

fn canonical_order(u: &Matrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..u.rows()).collect();
    order.sort_by(|&a, &b| {
        u.row(a)
            .iter()
            .zip(u.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub w_h1: Matrix,
    pub w_h2: Matrix,
    pub input: Matrix,
}

/// Returns `(W_m, U_mm)` and the cache for [`self_attention_backward`].
pub fn self_attention(
    u: &Matrix,
    params: &SelfAttentionParams,
) -> Result<(Matrix, Matrix, AttentionCache), ModelError> {
    if u.cols() != params.input_dim() {
        return Err(ModelError::Dimension {
            what: "self-attention input width".into(),
            expected: params.input_dim(),
            actual: u.cols(),
        });
    }
    let order = canonical_order(u);
    let mut inverse = vec![0; order.len()];
    for (slot, &p) in order.iter().enumerate() {
        inverse[p] = slot;
    }
    let sorted = u.permute_rows(&order);
    // r × L
    let hidden = params.w_h1.matmul_t(&sorted)?.tanh();
    let logits = params.w_h2.matmul(&hidden)?;
    let sorted_weights = logits.softmax_rows();
    let summary = sorted_weights.matmul(&sorted)?;
    let weights = sorted_weights.permute_cols(&inverse);
    let cache = AttentionCache {
        inverse,
        input: sorted,
        hidden,
        sorted_weights,
        weights: weights.clone(),
    };
    Ok((weights, summary, cache))
}

/// Backward from `∂L/∂U_mm` (k × d_m).
pub fn self_attention_backward(
    cache: &AttentionCache,
    params: &SelfAttentionParams,
    grad_summary: &Matrix,
) -> Result<AttentionGrads, ModelError> {
    let u = &cache.input;
    let grad_weights = grad_summary.matmul_t(u)?;
    let mut grad_input = cache.sorted_weights.t_matmul(grad_summary)?;
    let grad_logits = softmax_rows_backward(&cache.sorted_weights, &grad_weights);
    let w_h2 = grad_logits.matmul_t(&cache.hidden)?;
    let grad_hidden = params.w_h2.t_matmul(&grad_logits)?;
    let grad_pre = grad_hidden.hadamard(&cache.hidden.map(|h| 1.0 - h * h))?;
    let w_h1 = grad_pre.matmul(u)?;
    grad_input.add_scaled(1.0, &grad_pre.t_matmul(&params.w_h1)?)?;
    Ok(AttentionGrads {
        w_h1,
        w_h2,
        input: grad_input.permute_rows(&cache.inverse),
    })
}
