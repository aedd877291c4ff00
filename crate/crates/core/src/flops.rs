//! Shared FLOP-accounting vocabulary.
//!
//! Both the analytic cost model and the instrumented tensor engine charge
//! costs through these functions, so their totals agree exactly by
//! construction. The convention counts matmul multiply-adds as 2 FLOPs
//! and fixed per-element constants for the nonlinear ops; bias adds and
//! attention-score scaling are folded into their parent ops (charged 0).
//!
//! Conventions:
//! - linear forward, shape P→Q over n rows: `2·n·P·Q`
//! - linear backward, trained: `4·n·P·Q` (input-grad + weight-grad)
//! - linear backward, pass-through only (frozen weights): `2·n·P·Q`
//! - attention score/context products: `2·B·h·T²·(D/h)` each, forward;
//!   backward doubles each (two matmuls per product)
//! - layer norm 8 FLOPs/element, GELU 8, softmax 5, residual add 1,
//!   cross-entropy 5 per logit; each op's backward charges the same
//!   constant as its forward

/// Matrix product of an `n×p` by `p×q` operand pair.
pub fn matmul(n: usize, p: usize, q: usize) -> u64 {
    2 * n as u64 * p as u64 * q as u64
}

/// Forward through a linear layer P→Q over `n` rows.
pub fn linear_fwd(n: usize, p: usize, q: usize) -> u64 {
    matmul(n, p, q)
}

/// Backward through a linear whose weights receive gradients.
pub fn linear_bwd_trained(n: usize, p: usize, q: usize) -> u64 {
    2 * matmul(n, p, q)
}

/// Backward through a linear with frozen weights (input gradient only).
pub fn linear_bwd_frozen(n: usize, p: usize, q: usize) -> u64 {
    matmul(n, p, q)
}

/// Layer norm over `count` elements (same charge forward and backward).
pub fn layer_norm(count: usize) -> u64 {
    8 * count as u64
}

/// GELU over `count` elements (same charge forward and backward).
pub fn gelu(count: usize) -> u64 {
    8 * count as u64
}

/// Softmax over `count` elements (same charge forward and backward).
pub fn softmax(count: usize) -> u64 {
    5 * count as u64
}

/// Elementwise add of `count` elements: residual sums in the forward
/// pass, gradient-branch merges in the backward pass.
pub fn add(count: usize) -> u64 {
    count as u64
}

/// One attention product (QKᵀ or probs·V) across all heads, forward.
pub fn attn_product_fwd(batch: usize, heads: usize, t: usize, head_dim: usize) -> u64 {
    2 * batch as u64 * heads as u64 * (t as u64 * t as u64) * head_dim as u64
}

/// Backward of one attention product (two matmuls).
pub fn attn_product_bwd(batch: usize, heads: usize, t: usize, head_dim: usize) -> u64 {
    2 * attn_product_fwd(batch, heads, t, head_dim)
}

/// Cross-entropy over `n` rows of `vocab` logits (same charge forward
/// and backward).
pub fn cross_entropy(n: usize, vocab: usize) -> u64 {
    5 * n as u64 * vocab as u64
}

/// Token embedding forward: the gather is free; the learned position
/// table add costs 1 FLOP/element.
pub fn embedding_fwd(n: usize, d: usize) -> u64 {
    add(n * d)
}

/// Attention probability grid size `B·h·T²`.
pub fn probs_elems(batch: usize, heads: usize, t: usize) -> usize {
    batch * heads * t * t
}
