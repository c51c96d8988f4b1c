use miga_tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{MigaError, Result};
use crate::moe::{moe_head, MoeConfig, MoeOutput};
use crate::panel::DayBatch;
use crate::params::{linear, ParamStore, ParamVars};
use crate::seed::rng_for;

/// Prediction head on top of the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HeadConfig {
    /// Grouped mixture of experts.
    Moe(MoeConfig),
    /// Single linear readout (standalone encoder baseline).
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub n_features: usize,
    pub window: usize,
}

impl ModelSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.encoder.violations(self.window);
        if let HeadConfig::Moe(m) = &self.head {
            v.extend(m.violations());
        }
        if self.n_features == 0 {
            v.push("panel must have at least one feature".into());
        }
        if self.window == 0 {
            v.push("data.window must be at least 1".into());
        }
        v
    }

    pub fn moe(&self) -> Option<&MoeConfig> {
        match &self.head {
            HeadConfig::Moe(m) => Some(m),
            HeadConfig::Linear => None,
        }
    }

    pub fn describe(&self) -> String {
        match &self.head {
            HeadConfig::Moe(m) => format!(
                "miga-{} (G={}, E={}, k={}, inner_attention={})",
                self.encoder.kind.name(),
                m.groups,
                m.experts_per_group,
                m.top_k,
                m.inner_attention
            ),
            HeadConfig::Linear => format!("{}+linear", self.encoder.kind.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub hidden: Var,
    pub prediction: Var,
    pub moe: Option<MoeOutput>,
}

/// Plain values of one day's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DayPrediction {
    pub day: String,
    pub stock_ids: Vec<String>,
    pub tags: Vec<Vec<String>>,
    pub labels: Vec<f64>,
    pub predictions: Vec<f64>,
    /// `[N][G·E]` per-slot readouts (mixture head only).
    pub slot_readouts: Option<Vec<Vec<f64>>>,
    /// `[N][k]` selected slots, best first (mixture head only).
    pub selected: Option<Vec<Vec<usize>>>,
}

impl Model {
    /// Fresh parameters drawn from the `init` stream of `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let v = spec.violations();
        if !v.is_empty() {
            return Err(MigaError::Config(v));
        }
        let mut rng = rng_for(seed, "init");
        let mut params = ParamStore::new();
        spec.encoder.init_params(spec.n_features, spec.window, &mut rng, &mut params);
        match &spec.head {
            HeadConfig::Moe(m) => m.init_params(spec.encoder.d_h, &mut rng, &mut params),
            HeadConfig::Linear => params.init_linear(&mut rng, "head", spec.encoder.d_h, 1),
        }
        Ok(Self { spec, params })
    }

    /// Records the forward pass of `batch` on `t` using bound parameters `p`.
    pub fn forward(&self, t: &mut Tape, p: &ParamVars, batch: &DayBatch) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(MigaError::Data(format!("day {} has no stocks", batch.day)));
        }
        if batch.window != self.spec.window || batch.n_features != self.spec.n_features {
            return Err(MigaError::Incompatible(format!(
                "batch has window {} × {} features, model expects {} × {}",
                batch.window, batch.n_features, self.spec.window, self.spec.n_features
            )));
        }
        let x = t.constant(batch.windows_tensor());
        let hidden = self.spec.encoder.encode(t, p, x)?;
        match &self.spec.head {
            HeadConfig::Moe(cfg) => {
                let out = moe_head(t, p, hidden, cfg)?;
                Ok(ForwardOutput {
                    hidden,
                    prediction: out.prediction,
                    moe: Some(out),
                })
            }
            HeadConfig::Linear => {
                let y = linear(t, p, "head", hidden)?;
                let prediction = t.reshape(y, &[batch.len()])?;
                Ok(ForwardOutput {
                    hidden,
                    prediction,
                    moe: None,
                })
            }
        }
    }

    /// Forward pass returning plain values.
    pub fn predict_day(&self, batch: &DayBatch) -> Result<DayPrediction> {
        let mut t = Tape::new();
        let p = self.params.bind(&mut t);
        let out = self.forward(&mut t, &p, batch)?;
        let predictions = t.value(out.prediction).data().to_vec();
        let (slot_readouts, selected) = match &out.moe {
            Some(m) => {
                let slots = t.shape(m.experts.readout)[1];
                let r = t.value(m.experts.readout).data();
                (
                    Some(r.chunks(slots).map(<[f64]>::to_vec).collect()),
                    Some(m.routing.selected.clone()),
                )
            }
            None => (None, None),
        };
        Ok(DayPrediction {
            day: batch.day.clone(),
            stock_ids: batch.stock_ids.clone(),
            tags: batch.tags.clone(),
            labels: batch.labels.clone(),
            predictions,
            slot_readouts,
            selected,
        })
    }

    pub fn predict(&self, batches: &[DayBatch]) -> Result<Vec<DayPrediction>> {
        batches.iter().map(|b| self.predict_day(b)).collect()
    }
}
