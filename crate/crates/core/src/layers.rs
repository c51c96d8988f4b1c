//! Building blocks shared by the encoders and the expert aggregation.

use miga_tensor::{Result, Tape, Var};

use crate::params::ParamVars;

/// Multi-head scaled dot-product self-attention over sequences `x: [B × L × d]`.
///
/// Returns the attended sequences `[B × L × d]` and the attention
/// probabilities `[B·heads × L × L]`. `wo`, when given, projects the
/// concatenated heads.
#[allow(clippy::too_many_arguments)]
pub fn self_attention(
    t: &mut Tape,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Option<Var>,
    heads: usize,
) -> Result<(Var, Var)> {
    let shape = t.shape(x).to_vec();
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let flat = t.reshape(x, &[b * l, d])?;
    let split_heads = |t: &mut Tape, w: Var| -> Result<Var> {
        let y = t.matmul(flat, w)?;
        let y = t.reshape(y, &[b, l, heads, dh])?;
        let y = t.permute(y, &[0, 2, 1, 3])?;
        t.reshape(y, &[b * heads, l, dh])
    };
    let q = split_heads(t, wq)?;
    let k = split_heads(t, wk)?;
    let v = split_heads(t, wv)?;
    let kt = t.transpose(k)?;
    let scores = t.bmm(q, kt)?;
    let scores = t.mul_const(scores, 1.0 / (dh as f64).sqrt());
    let attn = t.softmax(scores, 2)?;
    let mixed = t.bmm(attn, v)?;
    let mixed = t.reshape(mixed, &[b, heads, l, dh])?;
    let mixed = t.permute(mixed, &[0, 2, 1, 3])?;
    let mut out = t.reshape(mixed, &[b * l, d])?;
    if let Some(wo) = wo {
        out = t.matmul(out, wo)?;
    }
    let out = t.reshape(out, &[b, l, d])?;
    Ok((out, attn))
}

/// Layer normalisation over the last axis with learned gain and bias.
pub fn layer_norm(t: &mut Tape, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let y = t.normalize_last(x, 1e-5)?;
    let y = t.mul(y, p.get(&format!("{prefix}.g")))?;
    t.add(y, p.get(&format!("{prefix}.b")))
}
