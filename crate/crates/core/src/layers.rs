//! Small graph building blocks shared by the encoder, decoder and adapters.

use crate::autograd::{Graph, Var};
use crate::params::Bindings;

/// `x @ w + b` over the last axis, with `w` and `b` looked up as `{prefix}/w`, `{prefix}/b`.
pub fn linear(g: &mut Graph, p: &Bindings, prefix: &str, x: Var) -> Var {
    let w = p.var(&format!("{prefix}/w"));
    let b = p.var(&format!("{prefix}/b"));
    let y = g.matmul(x, w);
    g.add(y, b)
}

/// Regroups non-overlapping `s x s` patches of a `[B, H, W, C]` map into
/// `[B, H/s, W/s, s*s*C]`.
pub fn patchify(g: &mut Graph, x: Var, s: usize) -> Var {
    let shape = g.shape(x).to_vec();
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    if s == 1 {
        return x;
    }
    let r = g.reshape(x, &[b, h / s, s, w / s, s, c]);
    let p = g.permute(r, &[0, 1, 3, 2, 4, 5]);
    g.reshape(p, &[b, h / s, w / s, s * s * c])
}

/// Converts `[B, H, W, C]` to `[B, H*W, C]`.
pub fn flatten_tokens(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    g.reshape(x, &[s[0], s[1] * s[2], s[3]])
}

pub fn unflatten_tokens(g: &mut Graph, x: Var, h: usize, w: usize) -> Var {
    let s = g.shape(x).to_vec();
    g.reshape(x, &[s[0], h, w, s[2]])
}

/// Scaled dot-product multi-head attention on already projected `q`, `k`, `v`
/// of shape `[B, N, C]`.
pub fn multi_head_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let s = g.shape(q).to_vec();
    let (b, n, c) = (s[0], s[1], s[2]);
    let d = c / heads;
    let split = |g: &mut Graph, t: Var, axes: &[usize]| {
        let r = g.reshape(t, &[b, n, heads, d]);
        g.permute(r, axes)
    };
    let qh = split(g, q, &[0, 2, 1, 3]);
    let kt = split(g, k, &[0, 2, 3, 1]);
    let vh = split(g, v, &[0, 2, 1, 3]);
    let scores = g.bmm(qh, kt);
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(scores);
    let out = g.bmm(attn, vh);
    let out = g.permute(out, &[0, 2, 1, 3]);
    g.reshape(out, &[b, n, c])
}
