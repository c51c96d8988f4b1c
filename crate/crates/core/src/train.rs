//! Day-batched training with Adam, validation-IC early stopping and resumable state.

use std::collections::BTreeMap;
use std::time::Instant;

use miga_tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{MigaError, Result};
use crate::metrics::daily_ic;
use crate::model::Model;
use crate::objective::{expert_loss, router_loss, total_loss, LossBreakdown, LossWeights};
use crate::panel::DayBatch;
use crate::params::ParamStore;
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub batch_days: usize,
    pub seed: u64,
    #[serde(default)]
    pub loss: LossWeights,
    /// Multiplies the learning rate once per finished epoch.
    #[serde(default = "one")]
    pub lr_decay: f64,
    /// Global gradient-norm clip; off by default.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 60,
            lr: 5e-4,
            patience: 10,
            batch_days: 1,
            seed: 0,
            loss: LossWeights::default(),
            lr_decay: 1.0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.max_epochs < 1 {
            v.push("train.max_epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("train.lr must be finite and > 0, got {}", self.lr));
        }
        if self.patience < 1 {
            v.push("train.patience must be at least 1".into());
        }
        if self.batch_days < 1 {
            v.push("train.batch_days must be at least 1".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            v.push(format!("train.lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                v.push(format!("train.grad_clip must be > 0, got {c}"));
            }
        }
        v.extend(self.loss.violations());
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
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One update of every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Loss value and gradient of every parameter on `batches`.
pub fn loss_and_grads(
    model: &Model,
    batches: &[&DayBatch],
    weights: &LossWeights,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    if batches.is_empty() {
        return Err(MigaError::Data("gradient step needs at least one day".into()));
    }
    let mut t = Tape::new();
    let p = model.params.bind(&mut t);
    let mut preds = Vec::with_capacity(batches.len());
    let mut logits = Vec::new();
    for b in batches {
        let out = model.forward(&mut t, &p, b)?;
        preds.push(out.prediction);
        if let Some(m) = out.moe {
            logits.push(m.routing.logits);
        }
    }
    let labels: Vec<&[f64]> = batches.iter().map(|b| b.labels.as_slice()).collect();
    let (expert, _) = expert_loss(&mut t, &preds, &labels)?;
    let router = if logits.is_empty() {
        None
    } else {
        Some(router_loss(&mut t, &logits, weights.router_mean)?)
    };
    let total = total_loss(&mut t, expert, router, weights)?;
    let breakdown = LossBreakdown {
        expert_loss: t.value(expert).item(),
        router_loss: router.map_or(0.0, |r| t.value(r).item()),
        total: t.value(total).item(),
    };
    if !breakdown.total.is_finite() {
        let days: Vec<&str> = batches.iter().map(|b| b.day.as_str()).collect();
        return Err(MigaError::Numerical(format!(
            "non-finite loss {breakdown:?} on days {days:?}"
        )));
    }
    t.backward(total)?;
    let mut grads = BTreeMap::new();
    for (name, v) in p.iter() {
        let g = t
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape(*v)));
        if !g.all_finite() {
            return Err(MigaError::Numerical(format!("non-finite gradient for {name}")));
        }
        grads.insert(name.clone(), g);
    }
    Ok((breakdown, grads))
}

/// Forward, loss, backward and one Adam update.
pub fn step(
    model: &mut Model,
    batches: &[&DayBatch],
    adam: &mut Adam,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let (loss, mut grads) = loss_and_grads(model, batches, &cfg.loss)?;
    if let Some(clip) = cfg.grad_clip {
        let norm = grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if norm > clip {
            let s = clip / norm;
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    adam.update(&mut model.params, &grads, lr);
    Ok(loss)
}

/// Mean daily IC of the model over `batches`; undefined days are skipped.
pub fn validation_ic(model: &Model, batches: &[DayBatch]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for b in batches {
        let pred = model.predict_day(b)?;
        if let Some(ic) = daily_ic(&pred.predictions, &b.labels)? {
            sum += ic;
            n += 1;
        }
    }
    if n == 0 {
        return Err(MigaError::Data("no validation day has a defined IC".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub expert_loss: f64,
    pub router_loss: f64,
    pub val_ic: f64,
    pub wall_ms: u64,
}

/// Everything needed to resume training after the last finished epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Finished epochs.
    pub epoch: usize,
    pub best_val_ic: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_best: usize,
    pub stopped_early: bool,
    pub adam: Adam,
    pub best_params: ParamStore,
}

impl TrainState {
    pub fn fresh(model: &Model) -> Self {
        Self {
            epoch: 0,
            best_val_ic: None,
            best_epoch: None,
            epochs_since_best: 0,
            stopped_early: false,
            adam: Adam::default(),
            best_params: model.params.clone(),
        }
    }

    pub fn finished(&self, cfg: &TrainConfig) -> bool {
        self.stopped_early || self.epoch >= cfg.max_epochs
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub best: Model,
    /// Parameters after the last finished epoch.
    pub last: Model,
    pub state: TrainState,
    pub log: Vec<EpochRecord>,
}

/// Day order for one epoch, a function of the seed and the epoch number only.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &format!("shuffle/{epoch}")));
    order
}

/// Trains until patience runs out or `max_epochs` is reached.
///
/// `resume` continues from a saved state; `model` must then hold the
/// matching last-epoch parameters. `on_epoch` runs after every epoch.
pub fn train<F>(
    mut model: Model,
    train_days: &[DayBatch],
    valid_days: &[DayBatch],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord, &Model, &TrainState) -> Result<()>,
{
    cfg.validate()?;
    if train_days.is_empty() {
        return Err(MigaError::Data("training stream is empty".into()));
    }
    if valid_days.is_empty() {
        return Err(MigaError::Data("validation stream is empty".into()));
    }
    let mut state = resume.unwrap_or_else(|| TrainState::fresh(&model));
    let mut log = Vec::new();
    while !state.finished(cfg) {
        let epoch = state.epoch + 1;
        let started = Instant::now();
        let lr = cfg.lr * cfg.lr_decay.powi(state.epoch as i32);
        let order = epoch_order(cfg.seed, epoch, train_days.len());
        let (mut tot, mut exp, mut rou, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_days) {
            let days: Vec<&DayBatch> = chunk.iter().map(|&i| &train_days[i]).collect();
            let l = step(&mut model, &days, &mut state.adam, lr, cfg)?;
            tot += l.total;
            exp += l.expert_loss;
            rou += l.router_loss;
            steps += 1;
        }
        let val_ic = validation_ic(&model, valid_days)?;
        if state.best_val_ic.map_or(true, |b| val_ic > b) {
            state.best_val_ic = Some(val_ic);
            state.best_epoch = Some(epoch);
            state.epochs_since_best = 0;
            state.best_params = model.params.clone();
        } else {
            state.epochs_since_best += 1;
            if state.epochs_since_best >= cfg.patience {
                state.stopped_early = true;
            }
        }
        state.epoch = epoch;
        let k = steps as f64;
        let rec = EpochRecord {
            epoch,
            train_loss: tot / k,
            expert_loss: exp / k,
            router_loss: rou / k,
            val_ic,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} val_ic {:.6}{}",
            rec.train_loss,
            val_ic,
            if state.best_epoch == Some(epoch) { " (best)" } else { "" }
        );
        on_epoch(&rec, &model, &state)?;
        log.push(rec);
    }
    let best = Model {
        spec: model.spec.clone(),
        params: state.best_params.clone(),
    };
    Ok(TrainOutcome {
        best,
        last: model,
        state,
        log,
    })
}
