//! Graph builders for the layer types used by the world and navigation
//! models: dense projections, a gated recurrent cell, and scaled dot-product
//! attention with an optional additive bias.

use rand::Rng;

use super::store::{xavier, ParamStore};
use super::tape::{NodeId, Tape};
use crate::tensor::Mat;

/// Register `{prefix}.w` and `{prefix}.b` for a dense layer.
pub fn dense_init(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut impl Rng,
) {
    store.insert(&format!("{prefix}.w"), xavier(in_dim, out_dim, rng));
    store.insert(&format!("{prefix}.b"), Mat::zeros(1, out_dim));
}

/// Dense layer with all-zero weights; the layer outputs 0 until trained.
pub fn dense_init_zero(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize) {
    store.insert(&format!("{prefix}.w"), Mat::zeros(in_dim, out_dim));
    store.insert(&format!("{prefix}.b"), Mat::zeros(1, out_dim));
}

/// `x @ w + b`, broadcasting the bias over rows.
pub fn dense(tape: &mut Tape, store: &ParamStore, prefix: &str, x: NodeId) -> NodeId {
    let w = tape.param(store, &format!("{prefix}.w"));
    let b = tape.param(store, &format!("{prefix}.b"));
    let xw = tape.matmul(x, w);
    tape.add_row_vec(xw, b)
}

pub fn dense_tanh(tape: &mut Tape, store: &ParamStore, prefix: &str, x: NodeId) -> NodeId {
    let y = dense(tape, store, prefix, x);
    tape.tanh(y)
}

/// Register parameters for a GRU cell with input dim `in_dim`, hidden `h_dim`.
pub fn gru_init(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    h_dim: usize,
    rng: &mut impl Rng,
) {
    for gate in ["r", "u", "c"] {
        store.insert(&format!("{prefix}.wx_{gate}"), xavier(in_dim, h_dim, rng));
        store.insert(&format!("{prefix}.wh_{gate}"), xavier(h_dim, h_dim, rng));
        store.insert(&format!("{prefix}.b_{gate}"), Mat::zeros(1, h_dim));
    }
}

/// One GRU step. `h` and `x` are row vectors (or batches of rows).
///
/// r = sigmoid(x Wxr + h Whr + br); u = sigmoid(x Wxu + h Whu + bu);
/// c = tanh(x Wxc + (r .* h) Whc + bc); h' = (1 - u) .* h + u .* c
pub fn gru_cell(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    h: NodeId,
    x: NodeId,
) -> NodeId {
    let gate_pre = |tape: &mut Tape, gate: &str, hin: NodeId| {
        let wx = tape.param(store, &format!("{prefix}.wx_{gate}"));
        let wh = tape.param(store, &format!("{prefix}.wh_{gate}"));
        let b = tape.param(store, &format!("{prefix}.b_{gate}"));
        let xa = tape.matmul(x, wx);
        let ha = tape.matmul(hin, wh);
        let s = tape.add(xa, ha);
        tape.add_row_vec(s, b)
    };
    let r_pre = gate_pre(tape, "r", h);
    let r = tape.sigmoid(r_pre);
    let u_pre = gate_pre(tape, "u", h);
    let u = tape.sigmoid(u_pre);
    let rh = tape.mul(r, h);
    let c_pre = gate_pre(tape, "c", rh);
    let c = tape.tanh(c_pre);
    let uc = tape.mul(u, c);
    let one_minus_u = {
        let neg = tape.scale(u, -1.0);
        tape.add_const(neg, 1.0)
    };
    let keep = tape.mul(one_minus_u, h);
    tape.add(keep, uc)
}

/// Scaled dot-product attention: softmax(q k^T / sqrt(d) + bias) v.
/// `bias` must be `(n_q, n_k)` when present.
pub fn attention_nodes(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    bias: Option<NodeId>,
) -> NodeId {
    let d = tape.value(q).cols;
    let kt = tape.transpose(k);
    let qk = tape.matmul(q, kt);
    let mut scores = tape.scale(qk, 1.0 / (d as f64).sqrt());
    if let Some(b) = bias {
        scores = tape.add(scores, b);
    }
    let w = tape.softmax_rows(scores);
    tape.matmul(w, v)
}

/// Register q/k/v projections for a single-head attention block.
pub fn attention_proj_init(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    d: usize,
    rng: &mut impl Rng,
) {
    store.insert(&format!("{prefix}.wq"), xavier(in_dim, d, rng));
    store.insert(&format!("{prefix}.wk"), xavier(in_dim, d, rng));
    store.insert(&format!("{prefix}.wv"), xavier(in_dim, d, rng));
}

/// Single-head attention with learned projections over `x` (self-attention
/// when `ctx == x`), plus optional additive bias on the score matrix.
pub fn projected_attention(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    ctx: NodeId,
    bias: Option<NodeId>,
) -> NodeId {
    let wq = tape.param(store, &format!("{prefix}.wq"));
    let wk = tape.param(store, &format!("{prefix}.wk"));
    let wv = tape.param(store, &format!("{prefix}.wv"));
    let q = tape.matmul(x, wq);
    let k = tape.matmul(ctx, wk);
    let v = tape.matmul(ctx, wv);
    attention_nodes(tape, q, k, v, bias)
}

/// Diagonal-Gaussian KL divergence between per-dimension (mean, log_std)
/// rows, summed over dimensions: returns a scalar node.
pub fn gaussian_kl_nodes(
    tape: &mut Tape,
    mean_q: NodeId,
    log_std_q: NodeId,
    mean_p: NodeId,
    log_std_p: NodeId,
) -> NodeId {
    let var_q = {
        let two = tape.scale(log_std_q, 2.0);
        tape.exp(two)
    };
    let var_p = {
        let two = tape.scale(log_std_p, 2.0);
        tape.exp(two)
    };
    let diff = tape.sub(mean_q, mean_p);
    let diff2 = tape.mul(diff, diff);
    let num = tape.add(var_q, diff2);
    let two_var_p = tape.scale(var_p, 2.0);
    let ratio = tape.div(num, two_var_p);
    let ls_diff = tape.sub(log_std_p, log_std_q);
    let per_dim = tape.add(ls_diff, ratio);
    let shifted = tape.add_const(per_dim, -0.5);
    tape.sum(shifted)
}

/// Cosine similarity between two row vectors as a scalar node.
pub fn cosine_nodes(tape: &mut Tape, a: NodeId, b: NodeId) -> NodeId {
    let ab = tape.mul(a, b);
    let dot = tape.sum(ab);
    let aa = tape.mul(a, a);
    let na2 = tape.sum(aa);
    let na = tape.sqrt(na2);
    let bb = tape.mul(b, b);
    let nb2 = tape.sum(bb);
    let nb = tape.sqrt(nb2);
    let denom = tape.mul(na, nb);
    tape.div(dot, denom)
}
