//! Grouped mixture-of-experts head.
//!
//! The hidden state of each stock feeds two paths. A linear gate produces
//! `G·E` scalar logits, of which the top `k` are kept and softmax-normalised.
//! Every (group, expert) slot applies its own affine map to the same hidden
//! state, giving a `d_e`-wide output. Within each group the `E` outputs are
//! treated as a sequence and mixed by multi-head self-attention with a
//! residual connection. A shared linear readout turns each mixed vector into a
//! scalar, and the prediction is the gate-weighted sum of those scalars.

use miga_tensor::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MigaError, Result};
use crate::layers::self_attention;
use crate::params::{linear, ParamStore, ParamVars};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub groups: usize,
    pub experts_per_group: usize,
    pub top_k: usize,
    pub d_e: usize,
    pub agg_heads: usize,
    /// `false` gives the mixture of isolated experts (mixed output = raw output).
    #[serde(default = "default_true")]
    pub inner_attention: bool,
}

fn default_true() -> bool {
    true
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            groups: 7,
            experts_per_group: 9,
            top_k: 8,
            d_e: 16,
            agg_heads: 4,
            inner_attention: true,
        }
    }
}

impl MoeConfig {
    pub fn slots(&self) -> usize {
        self.groups * self.experts_per_group
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.groups == 0 || self.experts_per_group == 0 {
            v.push("moe.groups and moe.experts_per_group must be positive".into());
        }
        if self.top_k == 0 || self.top_k > self.slots() {
            v.push(format!(
                "moe.top_k ({}) must lie in 1..={} (groups × experts_per_group)",
                self.top_k,
                self.slots()
            ));
        }
        if self.d_e == 0 {
            v.push("moe.d_e must be positive".into());
        }
        if self.agg_heads == 0 || self.d_e % self.agg_heads != 0 {
            v.push(format!(
                "moe.d_e ({}) must be divisible by moe.agg_heads ({})",
                self.d_e, self.agg_heads
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(MigaError::Config(v))
        }
    }

    pub fn slot_name(&self, slot: usize) -> String {
        let (j, k) = (slot / self.experts_per_group, slot % self.experts_per_group);
        format!("moe.expert.{j}.{k}")
    }

    pub fn init_params(&self, d_h: usize, rng: &mut ChaCha8Rng, store: &mut ParamStore) {
        store.init_linear(rng, "moe.gate", d_h, self.slots());
        for slot in 0..self.slots() {
            store.init_linear(rng, &self.slot_name(slot), d_h, self.d_e);
        }
        for w in ["wq", "wk", "wv"] {
            store.init_weight(rng, &format!("moe.agg.{w}"), self.d_e, self.d_e);
        }
        store.init_linear(rng, "moe.readout", self.d_e, 1);
    }
}

/// Indices of the `k` largest values, best first; ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // `+ 0.0` folds -0.0 into 0.0 so equal logits tie
    idx.sort_by(|&a, &b| (values[b] + 0.0).total_cmp(&(values[a] + 0.0)).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Gate output for one cross-section.
#[derive(Debug, Clone)]
pub struct RoutingDecision {
    /// `[N × G·E]` logits.
    pub logits: Var,
    /// `[N × G·E]` weights, exactly zero outside the selected set.
    pub weights: Var,
    /// Per stock, the selected flat slot indices ordered best first.
    pub selected: Vec<Vec<usize>>,
}

/// Top-k routing over flattened logits `[N × M]`.
pub fn route(t: &mut Tape, logits: Var, top_k: usize) -> Result<RoutingDecision> {
    let shape = t.shape(logits).to_vec();
    let (n, m) = (shape[0], shape[1]);
    if top_k == 0 || top_k > m {
        return Err(MigaError::config(format!("top_k {top_k} outside 1..={m}")));
    }
    let data = t.value(logits).data().to_vec();
    let mut mask = vec![false; n * m];
    let mut selected = Vec::with_capacity(n);
    for i in 0..n {
        let chosen = top_k_indices(&data[i * m..(i + 1) * m], top_k);
        for &c in &chosen {
            mask[i * m + c] = true;
        }
        selected.push(chosen);
    }
    let weights = t.softmax_masked(logits, 1, &mask)?;
    Ok(RoutingDecision {
        logits,
        weights,
        selected,
    })
}

/// Gate logits `z·W + b` followed by top-k routing.
pub fn gate(t: &mut Tape, p: &ParamVars, z: Var, cfg: &MoeConfig) -> Result<RoutingDecision> {
    cfg.validate()?;
    let logits = linear(t, p, "moe.gate", z)?;
    route(t, logits, cfg.top_k)
}

/// Every slot's affine map of `z`, as `[N × G × E × d_e]`.
pub fn run_experts(t: &mut Tape, p: &ParamVars, z: Var, cfg: &MoeConfig) -> Result<Var> {
    let n = t.shape(z)[0];
    let ws: Vec<Var> = (0..cfg.slots()).map(|s| p.get(&format!("{}.W", cfg.slot_name(s)))).collect();
    let bs: Vec<Var> = (0..cfg.slots()).map(|s| p.get(&format!("{}.b", cfg.slot_name(s)))).collect();
    let w = t.concat(&ws, 1)?;
    let b = t.concat(&bs, 0)?;
    let o = t.matmul(z, w)?;
    let o = t.add(o, b)?;
    Ok(t.reshape(o, &[n, cfg.groups, cfg.experts_per_group, cfg.d_e])?)
}

/// Attention over a batch of expert sequences `[B × E × d_e]` plus residual.
fn attend(t: &mut Tape, p: &ParamVars, seqs: Var, cfg: &MoeConfig) -> Result<(Var, Var)> {
    let (att, probs) = self_attention(
        t,
        seqs,
        p.get("moe.agg.wq"),
        p.get("moe.agg.wk"),
        p.get("moe.agg.wv"),
        None,
        cfg.agg_heads,
    )?;
    Ok((t.add(seqs, att)?, probs))
}

/// Mixed outputs `[N × E × d_e]` of group `j` and its attention probabilities.
pub fn aggregate_group(t: &mut Tape, p: &ParamVars, o: Var, j: usize, cfg: &MoeConfig) -> Result<(Var, Var)> {
    let n = t.shape(o)[0];
    let g = t.slice(o, 1, j, j + 1)?;
    let g = t.reshape(g, &[n, cfg.experts_per_group, cfg.d_e])?;
    attend(t, p, g, cfg)
}

/// Mixed outputs for every group at once, `[N × G × E × d_e]`.
///
/// Identity when inner attention is disabled.
pub fn aggregate_all(t: &mut Tape, p: &ParamVars, o: Var, cfg: &MoeConfig) -> Result<Var> {
    if !cfg.inner_attention {
        return Ok(o);
    }
    let n = t.shape(o)[0];
    let seqs = t.reshape(o, &[n * cfg.groups, cfg.experts_per_group, cfg.d_e])?;
    let (mixed, _) = attend(t, p, seqs, cfg)?;
    Ok(t.reshape(mixed, &[n, cfg.groups, cfg.experts_per_group, cfg.d_e])?)
}

/// Per-slot scalar readouts `[N × G·E]` of mixed outputs `[N × G × E × d_e]`.
pub fn readout(t: &mut Tape, p: &ParamVars, mixed: Var, cfg: &MoeConfig) -> Result<Var> {
    let n = t.shape(mixed)[0];
    let flat = t.reshape(mixed, &[n * cfg.slots(), cfg.d_e])?;
    let r = linear(t, p, "moe.readout", flat)?;
    Ok(t.reshape(r, &[n, cfg.slots()])?)
}

/// `ŷ_i = Σ_slot w[i, slot] · r[i, slot]`.
pub fn combine(t: &mut Tape, weights: Var, readouts: Var) -> Result<Var> {
    let wr = t.mul(weights, readouts)?;
    Ok(t.sum_axis(wr, 1)?)
}

#[derive(Debug, Clone)]
pub struct GroupedExpertOutput {
    pub raw: Var,
    pub mixed: Var,
    pub readout: Var,
}

#[derive(Debug, Clone)]
pub struct MoeOutput {
    pub prediction: Var,
    pub routing: RoutingDecision,
    pub experts: GroupedExpertOutput,
}

/// Gate, experts, aggregation and weighted combination on hidden states `z`.
pub fn moe_head(t: &mut Tape, p: &ParamVars, z: Var, cfg: &MoeConfig) -> Result<MoeOutput> {
    let routing = gate(t, p, z, cfg)?;
    let raw = run_experts(t, p, z, cfg)?;
    let mixed = aggregate_all(t, p, raw, cfg)?;
    let r = readout(t, p, mixed, cfg)?;
    let prediction = combine(t, routing.weights, r)?;
    Ok(MoeOutput {
        prediction,
        routing,
        experts: GroupedExpertOutput {
            raw,
            mixed,
            readout: r,
        },
    })
}

/// Constant tensor helper for tests and callers that feed values directly.
pub fn constant(t: &mut Tape, shape: &[usize], data: Vec<f64>) -> Result<Var> {
    Ok(t.constant(Tensor::new(shape.to_vec(), data)?))
}
