//! JSON checkpoints: model spec, parameters, normalisation and optional train state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MigaError, Result};
use crate::model::{Model, ModelSpec};
use crate::panel::NormStats;
use crate::params::ParamStore;
use crate::train::{TrainConfig, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub norm: Option<NormStats>,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    #[serde(default)]
    pub train_state: Option<TrainState>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: Option<u32>,
}

fn parse_err(e: serde_json::Error) -> MigaError {
    MigaError::Parse {
        line: e.line() as u64,
        msg: format!("checkpoint: {e}"),
    }
}

impl Checkpoint {
    pub fn new(model: &Model, norm: Option<NormStats>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            spec: model.spec.clone(),
            params: model.params.clone(),
            norm,
            train_config: None,
            train_state: None,
        }
    }

    pub fn model(&self) -> Model {
        Model {
            spec: self.spec.clone(),
            params: self.params.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| MigaError::Numerical(format!("cannot serialise checkpoint: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe = serde_json::from_str(text).map_err(parse_err)?;
        match probe.version {
            Some(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(MigaError::Incompatible(format!(
                    "checkpoint version {v}, this build reads version {CHECKPOINT_VERSION}"
                )))
            }
            None => return Err(MigaError::Incompatible("checkpoint has no version field".into())),
        }
        let ck: Checkpoint = serde_json::from_str(text).map_err(parse_err)?;
        for (name, t) in ck.params.iter() {
            if t.data().len() != t.shape().iter().product::<usize>() {
                return Err(MigaError::Data(format!("parameter {name} has inconsistent shape")));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Refuses a checkpoint whose model spec differs from `expected`.
    pub fn expect_spec(&self, expected: &ModelSpec) -> Result<()> {
        if &self.spec != expected {
            return Err(MigaError::Incompatible(format!(
                "checkpoint holds {} ({} features, window {}), configuration asks for {} ({} features, window {})",
                self.spec.describe(),
                self.spec.n_features,
                self.spec.window,
                expected.describe(),
                expected.n_features,
                expected.window
            )));
        }
        Ok(())
    }

    /// Refuses a checkpoint whose normalisation differs from `expected`.
    pub fn expect_norm(&self, expected: Option<&NormStats>) -> Result<()> {
        if self.norm.as_ref() != expected {
            return Err(MigaError::Incompatible(
                "normalisation statistics in the checkpoint do not match the data".into(),
            ));
        }
        Ok(())
    }
}
