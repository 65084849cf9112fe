use super::{sinusoid, tiled_positions, Encoded, Session};
use crate::autograd::Var;
use crate::error::Result;
use crate::tensor::Array;

pub(super) fn layer_norm(s: &mut Session<'_>, prefix: &str, x: Var) -> Result<Var> {
    let g = s.param(&format!("{prefix}.g"))?;
    let b = s.param(&format!("{prefix}.b"))?;
    s.g.layer_norm(x, g, b)
}

fn linear(s: &mut Session<'_>, w: &str, b: &str, x: Var) -> Result<Var> {
    let w = s.param(w)?;
    let b = s.param(b)?;
    s.g.affine(x, w, b)
}

fn ffn(s: &mut Session<'_>, p: &str, x: Var) -> Result<Var> {
    let h = linear(s, &format!("{p}.w1"), &format!("{p}.b1"), x)?;
    let h = s.g.silu(h);
    let h = s.dropout(h)?;
    linear(s, &format!("{p}.w2"), &format!("{p}.b2"), h)
}

/// `[B, n, d] -> [B*H, n, d/H]`
fn split_heads(s: &mut Session<'_>, x: Var, heads: usize) -> Result<Var> {
    let sh = s.g.shape(x).to_vec();
    let (b, n, d) = (sh[0], sh[1], sh[2]);
    let x = s.g.reshape(x, &[b, n, heads, d / heads])?;
    let x = s.g.permute(x, &[0, 2, 1, 3])?;
    s.g.reshape(x, &[b * heads, n, d / heads])
}

/// Multi-head attention. With `relative`, scores gain a content-to-position
/// term computed against sinusoidal relative-distance encodings and aligned
/// with [`crate::autograd::Graph::rel_shift`].
#[allow(clippy::too_many_arguments)]
fn attention(
    s: &mut Session<'_>,
    p: &str,
    q_in: Var,
    kv_in: Var,
    key_valid: &[Vec<bool>],
    causal: bool,
    relative: bool,
) -> Result<Var> {
    let h = s.config().n_heads;
    let qs = s.g.shape(q_in).to_vec();
    let (b, n, d) = (qs[0], qs[1], qs[2]);
    let dh = d / h;
    let q = linear(s, &format!("{p}.q.w"), &format!("{p}.q.b"), q_in)?;
    let k = linear(s, &format!("{p}.k.w"), &format!("{p}.k.b"), kv_in)?;
    let v = linear(s, &format!("{p}.v.w"), &format!("{p}.v.b"), kv_in)?;
    let kh = split_heads(s, k, h)?;
    let vh = split_heads(s, v, h)?;
    let scores = if relative {
        let q4 = s.g.reshape(q, &[b, n, h, dh])?;
        let pos_u = s.param(&format!("{p}.pos_u"))?;
        let pos_v = s.param(&format!("{p}.pos_v"))?;
        let qu = s.g.add_bias(q4, pos_u)?;
        let qu = s.g.permute(qu, &[0, 2, 1, 3])?;
        let qu = s.g.reshape(qu, &[b * h, n, dh])?;
        let content = s.g.bmm(qu, kh, true)?;

        // relative distances n-1, ..., -(n-1)
        let rel = sinusoid((0..2 * n - 1).map(|m| (n as f64 - 1.0) - m as f64), d);
        let rel = s.g.constant(rel);
        let wpos = s.param(&format!("{p}.pos.w"))?;
        let pr = s.g.matmul(rel, wpos)?;
        let pr = s.g.reshape(pr, &[2 * n - 1, h, dh])?;
        let pr = s.g.permute(pr, &[1, 0, 2])?;
        let qv = s.g.add_bias(q4, pos_v)?;
        let qv = s.g.permute(qv, &[2, 0, 1, 3])?;
        let qv = s.g.reshape(qv, &[h, b * n, dh])?;
        let pos = s.g.bmm(qv, pr, true)?;
        let pos = s.g.reshape(pos, &[h, b, n, 2 * n - 1])?;
        let pos = s.g.permute(pos, &[1, 0, 2, 3])?;
        let pos = s.g.reshape(pos, &[b * h, n, 2 * n - 1])?;
        let pos = s.g.rel_shift(pos)?;
        s.g.add(content, pos)?
    } else {
        let qh = split_heads(s, q, h)?;
        s.g.bmm(qh, kh, true)?
    };
    let scores = s.g.scale(scores, 1.0 / (dh as f64).sqrt());
    let scores = s.g.attn_mask(scores, key_valid, causal)?;
    let attn = s.g.softmax(scores)?;
    let ctx = s.g.bmm(attn, vh, false)?;
    let ctx = s.g.reshape(ctx, &[b, h, n, dh])?;
    let ctx = s.g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = s.g.reshape(ctx, &[b, n, d])?;
    linear(s, &format!("{p}.o.w"), &format!("{p}.o.b"), ctx)
}

fn residual(s: &mut Session<'_>, x: Var, y: Var, scale: f64) -> Result<Var> {
    let y = s.dropout(y)?;
    let y = if scale != 1.0 { s.g.scale(y, scale) } else { y };
    s.g.add(x, y)
}

/// Pre-norm block: self-attention then FFN, each with a residual.
pub(super) fn transformer_block(s: &mut Session<'_>, p: &str, x: Var, key_valid: &[Vec<bool>]) -> Result<Var> {
    let h = layer_norm(s, &format!("{p}.ln_att"), x)?;
    let a = attention(s, &format!("{p}.att"), h, h, key_valid, false, false)?;
    let x = residual(s, x, a, 1.0)?;
    let h = layer_norm(s, &format!("{p}.ln_ffn"), x)?;
    let f = ffn(s, &format!("{p}.ffn"), h)?;
    residual(s, x, f, 1.0)
}

/// Half-step FFN, relative-position self-attention, convolution module,
/// half-step FFN, then a closing layer norm.
pub(super) fn conformer_block(
    s: &mut Session<'_>,
    p: &str,
    x: Var,
    key_valid: &[Vec<bool>],
    mask: &Array,
) -> Result<Var> {
    let h = layer_norm(s, &format!("{p}.ln_ffn1"), x)?;
    let f = ffn(s, &format!("{p}.ffn1"), h)?;
    let x = residual(s, x, f, 0.5)?;

    let h = layer_norm(s, &format!("{p}.ln_att"), x)?;
    let a = attention(s, &format!("{p}.att"), h, h, key_valid, false, true)?;
    let x = residual(s, x, a, 1.0)?;

    let h = layer_norm(s, &format!("{p}.ln_conv"), x)?;
    let c = conv_module(s, &format!("{p}.conv"), h, mask)?;
    let x = residual(s, x, c, 1.0)?;

    let h = layer_norm(s, &format!("{p}.ln_ffn2"), x)?;
    let f = ffn(s, &format!("{p}.ffn2"), h)?;
    let x = residual(s, x, f, 0.5)?;
    layer_norm(s, &format!("{p}.ln_out"), x)
}

/// Pointwise conv + GLU, depthwise conv, norm, SiLU, pointwise conv.
fn conv_module(s: &mut Session<'_>, p: &str, x: Var, mask: &Array) -> Result<Var> {
    let h = linear(s, &format!("{p}.pw1.w"), &format!("{p}.pw1.b"), x)?;
    let h = s.g.glu(h)?;
    // padded frames must not leak into valid ones through the kernel
    let h = s.g.mul_const(h, mask)?;
    let k = s.param(&format!("{p}.dw.k"))?;
    let h = s.g.depthwise_conv1d(h, k)?;
    let kb = s.param(&format!("{p}.dw.b"))?;
    let h = s.g.add_bias(h, kb)?;
    let h = layer_norm(s, &format!("{p}.ln"), h)?;
    let h = s.g.silu(h);
    linear(s, &format!("{p}.pw2.w"), &format!("{p}.pw2.b"), h)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn decoder(
    s: &mut Session<'_>,
    p: &str,
    embed: &str,
    blocks: usize,
    tokens: &[usize],
    n: usize,
    lens: &[usize],
    enc: &Encoded,
    causal: bool,
) -> Result<Var> {
    let b = lens.len();
    let d = s.config().d_model;
    if tokens.len() != b * n || lens.iter().any(|&l| l > n) || enc.lens.len() != b {
        return Err(crate::error::Error::shape("decoder", &[tokens.len()], &[b, n]));
    }
    let table = s.param(embed)?;
    let e = s.g.embedding(table, tokens, &[b, n])?;
    let e = s.g.scale(e, (d as f64).sqrt());
    let pe = s.g.constant(tiled_positions(b, n, d));
    let mut x = s.g.add(e, pe)?;
    x = s.dropout(x)?;
    let self_valid: Vec<Vec<bool>> = lens.iter().map(|&l| (0..n).map(|j| j < l).collect()).collect();
    let enc_valid = enc.key_valid(s);
    for i in 0..blocks {
        let bp = format!("{p}.{i}");
        let h = layer_norm(s, &format!("{bp}.ln_self"), x)?;
        let a = attention(s, &format!("{bp}.self"), h, h, &self_valid, causal, false)?;
        x = residual(s, x, a, 1.0)?;
        let h = layer_norm(s, &format!("{bp}.ln_cross"), x)?;
        let a = attention(s, &format!("{bp}.cross"), h, enc.states, &enc_valid, false, false)?;
        x = residual(s, x, a, 1.0)?;
        let h = layer_norm(s, &format!("{bp}.ln_ffn"), x)?;
        let f = ffn(s, &format!("{bp}.ffn"), h)?;
        x = residual(s, x, f, 1.0)?;
    }
    let x = layer_norm(s, &format!("{p}.ln_out"), x)?;
    linear(s, &format!("{p}.out.w"), &format!("{p}.out.b"), x)
}
