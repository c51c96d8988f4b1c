//! Training losses: negative daily IC, router logit spread, and their weighted sum.

use miga_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{MigaError, Result};

/// Guard on the prediction variance inside the IC denominator.
pub const VAR_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    /// Average the router loss over logits instead of summing.
    #[serde(default)]
    pub router_mean: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 2e-3,
            beta: 1.0,
            router_mean: false,
        }
    }
}

impl LossWeights {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            v.push(format!("loss.alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            v.push(format!("loss.beta must be finite and > 0, got {}", self.beta));
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub expert_loss: f64,
    pub router_loss: f64,
    pub total: f64,
}

/// Labels centred and scaled to unit population variance, or `None` when
/// the day is degenerate (fewer than two stocks or constant labels).
pub fn standardize_labels(labels: &[f64]) -> Option<Vec<f64>> {
    let n = labels.len();
    if n < 2 {
        return None;
    }
    let mean = labels.iter().sum::<f64>() / n as f64;
    let var = labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n as f64;
    if var <= 0.0 || !var.is_finite() {
        return None;
    }
    let sd = var.sqrt();
    Some(labels.iter().map(|y| (y - mean) / sd).collect())
}

/// Differentiable Pearson correlation of `pred: [N]` with constant `labels`.
///
/// Returns `None` for degenerate days.
pub fn day_correlation(t: &mut Tape, pred: Var, labels: &[f64]) -> Result<Option<Var>> {
    let n = t.shape(pred).iter().product::<usize>();
    if n != labels.len() {
        return Err(MigaError::Data(format!(
            "{n} predictions but {} labels",
            labels.len()
        )));
    }
    let Some(z) = standardize_labels(labels) else {
        return Ok(None);
    };
    let pred = t.reshape(pred, &[n])?;
    let mean = t.mean(pred)?;
    let centred = t.sub(pred, mean)?;
    let y = t.constant(Tensor::vector(z));
    let prod = t.mul(centred, y)?;
    let cov = t.mean(prod)?;
    let sq = t.square(centred);
    let var = t.mean(sq)?;
    // sqrt(max(var, eps)) written with relu so it stays on the tape
    let shifted = t.add_const(var, -VAR_EPS);
    let clipped = t.relu(shifted);
    let guarded = t.add_const(clipped, VAR_EPS);
    let denom = t.sqrt(guarded);
    Ok(Some(t.div(cov, denom)?))
}

/// `−mean_t corr(ŷ_t, y_t)` over non-degenerate days, with the number of days used.
pub fn expert_loss(t: &mut Tape, preds: &[Var], labels: &[&[f64]]) -> Result<(Var, usize)> {
    if preds.len() != labels.len() {
        return Err(MigaError::Data(format!(
            "{} prediction days but {} label days",
            preds.len(),
            labels.len()
        )));
    }
    let mut terms = Vec::new();
    for (i, (&p, y)) in preds.iter().zip(labels).enumerate() {
        match day_correlation(t, p, y)? {
            Some(c) => terms.push(c),
            None => log::warn!("day {i} skipped in expert loss: fewer than two stocks or constant labels"),
        }
    }
    if terms.is_empty() {
        return Err(MigaError::Data("no day has a usable cross-section for the IC loss".into()));
    }
    let used = terms.len();
    let mut acc = terms[0];
    for &c in &terms[1..] {
        acc = t.add(acc, c)?;
    }
    Ok((t.mul_const(acc, -1.0 / used as f64), used))
}

/// Sum over days, stocks and slots of squared deviations of each logit from
/// that stock's mean logit. With `mean = true` divides by the logit count.
pub fn router_loss(t: &mut Tape, logits: &[Var], mean: bool) -> Result<Var> {
    if logits.is_empty() {
        return Err(MigaError::Data("router loss needs at least one day".into()));
    }
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for &h in logits {
        let shape = t.shape(h).to_vec();
        if shape.len() != 2 {
            return Err(MigaError::Data(format!("router logits must be [N × M], got {shape:?}")));
        }
        let m = shape[1];
        count += shape[0] * m;
        let inv = 1.0 / m as f64;
        let c: Vec<f64> = (0..m * m)
            .map(|idx| if idx / m == idx % m { 1.0 - inv } else { -inv })
            .collect();
        let c = t.constant(Tensor::new(vec![m, m], c)?);
        let centred = t.matmul(h, c)?;
        let sq = t.square(centred);
        let s = t.sum(sq);
        acc = Some(match acc {
            Some(a) => t.add(a, s)?,
            None => s,
        });
    }
    let total = acc.expect("at least one day");
    Ok(if mean {
        t.mul_const(total, 1.0 / count.max(1) as f64)
    } else {
        total
    })
}

/// `α·router + β·expert`.
pub fn total_loss(t: &mut Tape, expert: Var, router: Option<Var>, w: &LossWeights) -> Result<Var> {
    let e = t.mul_const(expert, w.beta);
    match router {
        Some(r) if w.alpha != 0.0 => {
            let r = t.mul_const(r, w.alpha);
            Ok(t.add(r, e)?)
        }
        _ => Ok(e),
    }
}

impl LossBreakdown {
    pub fn from_parts(expert_loss: f64, router_loss: f64, w: &LossWeights) -> Self {
        Self {
            expert_loss,
            router_loss,
            total: w.alpha * router_loss + w.beta * expert_loss,
        }
    }
}
