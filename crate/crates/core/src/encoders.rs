//! Per-stock temporal encoders mapping windows `[N × T × D]` to hidden states `[N × d_h]`.
//!
//! Each encoder treats stocks independently; rows never mix.

use miga_tensor::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MigaError, Result};
use crate::layers::{layer_norm, self_attention};
use crate::params::{linear, ParamStore, ParamVars};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Conv,
    Recurrent,
    Attention,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Conv => "conv",
            EncoderKind::Recurrent => "recurrent",
            EncoderKind::Attention => "attention",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub d_h: usize,
    pub depth: usize,
    /// Attention encoder only.
    pub heads: usize,
    /// Conv encoder only.
    pub kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Conv,
            d_h: 32,
            depth: 2,
            heads: 4,
            kernel: 3,
        }
    }
}

impl EncoderConfig {
    pub fn with_kind(kind: EncoderKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn violations(&self, window: usize) -> Vec<String> {
        let mut v = Vec::new();
        if self.d_h == 0 {
            v.push("encoder.d_h must be positive".into());
        }
        if self.depth == 0 {
            v.push("encoder.depth must be positive".into());
        }
        match self.kind {
            EncoderKind::Attention => {
                if self.heads == 0 || self.d_h % self.heads != 0 {
                    v.push(format!(
                        "encoder.d_h ({}) must be divisible by encoder.heads ({})",
                        self.d_h, self.heads
                    ));
                }
            }
            EncoderKind::Conv => {
                if self.kernel == 0 || self.kernel > window {
                    v.push(format!(
                        "encoder.kernel ({}) must lie in 1..={window} (the window length)",
                        self.kernel
                    ));
                }
            }
            EncoderKind::Recurrent => {}
        }
        v
    }

    pub fn validate(&self, window: usize) -> Result<()> {
        let v = self.violations(window);
        if v.is_empty() {
            Ok(())
        } else {
            Err(MigaError::Config(v))
        }
    }

    fn ffn_width(&self) -> usize {
        2 * self.d_h
    }

    /// Creates this encoder's parameters under `encoder.*`.
    pub fn init_params(&self, n_features: usize, window: usize, rng: &mut ChaCha8Rng, store: &mut ParamStore) {
        let h = self.d_h;
        match self.kind {
            EncoderKind::Conv => {
                for l in 0..self.depth {
                    let cin = if l == 0 { n_features } else { h };
                    for tap in 0..self.kernel {
                        // fan-in spans every tap of the layer
                        let name = format!("encoder.conv.{l}.W{tap}");
                        store.init_uniform(rng, &name, &[cin, h], cin * self.kernel);
                    }
                    store.init_zeros(&format!("encoder.conv.{l}.b"), &[h]);
                    if cin != h {
                        store.init_weight(rng, &format!("encoder.conv.{l}.res"), cin, h);
                    }
                }
            }
            EncoderKind::Recurrent => {
                for l in 0..self.depth {
                    let cin = if l == 0 { n_features } else { h };
                    store.init_weight(rng, &format!("encoder.lstm.{l}.W"), cin, 4 * h);
                    store.init_weight(rng, &format!("encoder.lstm.{l}.U"), h, 4 * h);
                    store.init_zeros(&format!("encoder.lstm.{l}.b"), &[4 * h]);
                }
            }
            EncoderKind::Attention => {
                store.init_linear(rng, "encoder.attn.in", n_features, h);
                store.init_weight(rng, "encoder.attn.pos", window, h);
                for l in 0..self.depth {
                    for w in ["wq", "wk", "wv", "wo"] {
                        store.init_weight(rng, &format!("encoder.attn.{l}.{w}"), h, h);
                    }
                    for ln in ["ln1", "ln2"] {
                        store.insert(format!("encoder.attn.{l}.{ln}.g"), Tensor::full(&[h], 1.0));
                        store.init_zeros(&format!("encoder.attn.{l}.{ln}.b"), &[h]);
                    }
                    store.init_linear(rng, &format!("encoder.attn.{l}.ff1"), h, self.ffn_width());
                    store.init_linear(rng, &format!("encoder.attn.{l}.ff2"), self.ffn_width(), h);
                }
            }
        }
        store.init_linear(rng, "encoder.out", h, h);
    }

    /// Encodes `x: [N × T × D]` into `[N × d_h]`.
    pub fn encode(&self, t: &mut Tape, p: &ParamVars, x: Var) -> Result<Var> {
        let last = match self.kind {
            EncoderKind::Conv => encode_conv(self, t, p, x)?,
            EncoderKind::Recurrent => encode_recurrent(self, t, p, x)?,
            EncoderKind::Attention => encode_attention(self, t, p, x)?,
        };
        Ok(linear(t, p, "encoder.out", last)?)
    }
}

/// Causal dilated temporal convolutions with residual connections; returns the last step.
fn encode_conv(cfg: &EncoderConfig, t: &mut Tape, p: &ParamVars, x: Var) -> Result<Var> {
    let shape = t.shape(x).to_vec();
    let (n, steps) = (shape[0], shape[1]);
    if cfg.kernel > steps {
        return Err(MigaError::Config(vec![format!(
            "encoder.kernel ({}) exceeds window length {steps}",
            cfg.kernel
        )]));
    }
    let h = cfg.d_h;
    let mut cur = x;
    for l in 0..cfg.depth {
        let cin = t.shape(cur)[2];
        let dilation = 1usize << l;
        let mut acc: Option<Var> = None;
        for tap in 0..cfg.kernel {
            let shift = tap * dilation;
            if shift >= steps {
                continue;
            }
            let shifted = if shift == 0 {
                cur
            } else {
                let pad = t.constant(Tensor::zeros(&[n, shift, cin]));
                let kept = t.slice(cur, 1, 0, steps - shift)?;
                t.concat(&[pad, kept], 1)?
            };
            let flat = t.reshape(shifted, &[n * steps, cin])?;
            let y = t.matmul(flat, p.get(&format!("encoder.conv.{l}.W{tap}")))?;
            acc = Some(match acc {
                Some(a) => t.add(a, y)?,
                None => y,
            });
        }
        let conv = acc.expect("tap 0 always applies");
        let conv = t.add(conv, p.get(&format!("encoder.conv.{l}.b")))?;
        let conv = t.relu(conv);
        let flat_in = t.reshape(cur, &[n * steps, cin])?;
        let residual = if cin == h {
            flat_in
        } else {
            t.matmul(flat_in, p.get(&format!("encoder.conv.{l}.res")))?
        };
        let out = t.add(conv, residual)?;
        cur = t.reshape(out, &[n, steps, h])?;
    }
    let last = t.slice(cur, 1, steps - 1, steps)?;
    Ok(t.reshape(last, &[n, h])?)
}

/// Stacked LSTM over the window; returns the final hidden state of the top layer.
fn encode_recurrent(cfg: &EncoderConfig, t: &mut Tape, p: &ParamVars, x: Var) -> Result<Var> {
    let shape = t.shape(x).to_vec();
    let (n, steps) = (shape[0], shape[1]);
    let h = cfg.d_h;
    let mut inputs: Vec<Var> = (0..steps)
        .map(|s| {
            let xs = t.slice(x, 1, s, s + 1)?;
            t.reshape(xs, &[n, shape[2]])
        })
        .collect::<miga_tensor::Result<_>>()?;
    for l in 0..cfg.depth {
        let w = p.get(&format!("encoder.lstm.{l}.W"));
        let u = p.get(&format!("encoder.lstm.{l}.U"));
        let b = p.get(&format!("encoder.lstm.{l}.b"));
        let mut hs = t.constant(Tensor::zeros(&[n, h]));
        let mut cs = t.constant(Tensor::zeros(&[n, h]));
        let mut outputs = Vec::with_capacity(steps);
        for &xs in &inputs {
            let gx = t.matmul(xs, w)?;
            let gh = t.matmul(hs, u)?;
            let gates = t.add(gx, gh)?;
            let gates = t.add(gates, b)?;
            let i = t.slice(gates, 1, 0, h)?;
            let f = t.slice(gates, 1, h, 2 * h)?;
            let g = t.slice(gates, 1, 2 * h, 3 * h)?;
            let o = t.slice(gates, 1, 3 * h, 4 * h)?;
            let (i, f, g, o) = (t.sigmoid(i), t.sigmoid(f), t.tanh(g), t.sigmoid(o));
            let keep = t.mul(f, cs)?;
            let write = t.mul(i, g)?;
            cs = t.add(keep, write)?;
            let ct = t.tanh(cs);
            hs = t.mul(o, ct)?;
            outputs.push(hs);
        }
        inputs = outputs;
    }
    Ok(*inputs.last().expect("window has at least one step"))
}

/// Transformer encoder over time with learned positions; returns the last position.
fn encode_attention(cfg: &EncoderConfig, t: &mut Tape, p: &ParamVars, x: Var) -> Result<Var> {
    let shape = t.shape(x).to_vec();
    let (n, steps, d) = (shape[0], shape[1], shape[2]);
    let h = cfg.d_h;
    let flat = t.reshape(x, &[n * steps, d])?;
    let e = linear(t, p, "encoder.attn.in", flat)?;
    // positions: add the flattened [T·d_h] table as a row bias per stock
    let e = t.reshape(e, &[n, steps * h])?;
    let pos = t.reshape(p.get("encoder.attn.pos"), &[steps * h])?;
    let e = t.add(e, pos)?;
    let mut e = t.reshape(e, &[n * steps, h])?;
    for l in 0..cfg.depth {
        let seq = t.reshape(e, &[n, steps, h])?;
        let (att, _) = self_attention(
            t,
            seq,
            p.get(&format!("encoder.attn.{l}.wq")),
            p.get(&format!("encoder.attn.{l}.wk")),
            p.get(&format!("encoder.attn.{l}.wv")),
            Some(p.get(&format!("encoder.attn.{l}.wo"))),
            cfg.heads,
        )?;
        let att = t.reshape(att, &[n * steps, h])?;
        let res = t.add(e, att)?;
        e = layer_norm(t, p, &format!("encoder.attn.{l}.ln1"), res)?;
        let f = linear(t, p, &format!("encoder.attn.{l}.ff1"), e)?;
        let f = t.relu(f);
        let f = linear(t, p, &format!("encoder.attn.{l}.ff2"), f)?;
        let res = t.add(e, f)?;
        e = layer_norm(t, p, &format!("encoder.attn.{l}.ln2"), res)?;
    }
    let seq = t.reshape(e, &[n, steps, h])?;
    let last = t.slice(seq, 1, steps - 1, steps)?;
    Ok(t.reshape(last, &[n, h])?)
}
