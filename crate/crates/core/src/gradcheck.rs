//! Central finite-difference validation of the full training loss.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{MigaError, Result};
use crate::model::Model;
use crate::objective::LossWeights;
use crate::panel::DayBatch;
use crate::seed::rng_for;
use crate::train::loss_and_grads;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor; 0 checks all of them.
    pub max_coords_per_group: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            max_coords_per_group: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupCheck>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn render(&self) -> String {
        let width = self.groups.iter().map(|g| g.name.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<width$}  {:>6}  {:>12}  status\n", "group", "coords", "max_rel_err");
        for g in &self.groups {
            s.push_str(&format!(
                "{:<width$}  {:>6}  {:>12.3e}  {}\n",
                g.name,
                g.coords_checked,
                g.max_rel_error,
                if g.passed { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of the training loss with central differences.
///
/// `corrupt` names a parameter group whose analytic gradient is deliberately
/// perturbed before comparison (negative control).
pub fn gradcheck(
    model: &Model,
    batches: &[&DayBatch],
    weights: &LossWeights,
    cfg: &GradcheckConfig,
    corrupt: Option<&str>,
) -> Result<GradcheckReport> {
    if let Some(name) = corrupt {
        if model.params.get(name).is_none() {
            return Err(MigaError::config(format!("unknown parameter group {name:?}")));
        }
    }
    let (_, grads) = loss_and_grads(model, batches, weights)?;
    let mut rng = rng_for(cfg.seed, "gradcheck");
    let mut probe = model.clone();
    let mut groups = Vec::new();
    for (name, grad) in &grads {
        let n = grad.numel();
        let coords: Vec<usize> = if cfg.max_coords_per_group == 0 || n <= cfg.max_coords_per_group {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords_per_group).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let mut analytic = grad.data()[i];
            if corrupt == Some(name.as_str()) {
                analytic = 1.5 * analytic + 1e-3;
            }
            let orig = model.params.get(name).expect("bound parameter").data()[i];
            probe.params.get_mut(name).expect("bound parameter").data_mut()[i] = orig + cfg.eps;
            let up = loss_and_grads(&probe, batches, weights)?.0.total;
            probe.params.get_mut(name).expect("bound parameter").data_mut()[i] = orig - cfg.eps;
            let down = loss_and_grads(&probe, batches, weights)?.0.total;
            probe.params.get_mut(name).expect("bound parameter").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.eps);
            worst = worst.max(relative_error(analytic, numeric));
        }
        groups.push(GroupCheck {
            name: name.clone(),
            coords_checked: coords.len(),
            max_rel_error: worst,
            passed: worst < cfg.tolerance,
        });
    }
    let passed = groups.iter().all(|g| g.passed);
    Ok(GradcheckReport { groups, passed })
}
