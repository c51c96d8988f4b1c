//! Run configuration: one TOML file with a section per subsystem.
//!
//! Precedence, lowest to highest: built-in defaults, the config file,
//! command-line flags.

use std::path::{Path, PathBuf};

use miga::encoders::EncoderConfig;
use miga::gradcheck::GradcheckConfig;
use miga::metrics::PortfolioMode;
use miga::moe::MoeConfig;
use miga::objective::LossWeights;
use miga::panel::{DayRange, SplitSpec};
use miga::synth::SynthConfig;
use miga::train::TrainConfig;
use miga::{HeadConfig, ModelSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Moe,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    /// Window length T in days.
    pub window: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: PathBuf::from("out/panel.csv"),
            window: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub max_epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub batch_days: usize,
    #[serde(default = "unit")]
    pub lr_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

fn unit() -> f64 {
    1.0
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            max_epochs: d.max_epochs,
            lr: d.lr,
            patience: d.patience,
            batch_days: d.batch_days,
            lr_decay: d.lr_decay,
            grad_clip: d.grad_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortfolioSection {
    pub mode: PortfolioMode,
    pub fraction: f64,
}

impl Default for PortfolioSection {
    fn default() -> Self {
        Self {
            mode: PortfolioMode::LongOnly,
            fraction: 0.05,
        }
    }
}

/// Size of the random instance used by `gradcheck`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    pub n_stocks: usize,
    pub n_features: usize,
    pub n_days: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub max_coords_per_group: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        let d = GradcheckConfig::default();
        Self {
            n_stocks: 8,
            n_features: 3,
            n_days: 2,
            eps: d.eps,
            tolerance: d.tolerance,
            max_coords_per_group: d.max_coords_per_group,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every subsystem derives its own stream from it.
    pub seed: u64,
    pub head: HeadKind,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub moe: MoeConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default = "default_split")]
    pub split: SplitSpec,
    #[serde(default)]
    pub portfolio: PortfolioSection,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
}

pub fn default_split() -> SplitSpec {
    SplitSpec {
        train: DayRange::new("D0000", "D0180"),
        valid: DayRange::new("D0180", "D0240"),
        test: DayRange::new("D0240", "D0300"),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            head: HeadKind::Moe,
            output_dir: PathBuf::from("out"),
            data: DataSection::default(),
            encoder: EncoderConfig::default(),
            moe: MoeConfig::default(),
            train: TrainSection::default(),
            loss: LossWeights::default(),
            split: default_split(),
            portfolio: PortfolioSection::default(),
            synth: SynthConfig::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<PortfolioMode>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(vec![e.to_string()]))?;
        cfg.synth.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serialises")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
            self.synth.seed = s;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        if let Some(m) = o.mode {
            self.portfolio.mode = m;
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        match self.head {
            HeadKind::Moe => HeadConfig::Moe(self.moe.clone()),
            HeadKind::Linear => HeadConfig::Linear,
        }
    }

    pub fn model_spec(&self, n_features: usize) -> ModelSpec {
        ModelSpec {
            encoder: self.encoder.clone(),
            head: self.head_config(),
            n_features,
            window: self.data.window,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.train.max_epochs,
            lr: self.train.lr,
            patience: self.train.patience,
            batch_days: self.train.batch_days,
            seed: self.seed,
            loss: self.loss,
            lr_decay: self.train.lr_decay,
            grad_clip: self.train.grad_clip,
        }
    }

    pub fn gradcheck_config(&self) -> GradcheckConfig {
        GradcheckConfig {
            eps: self.gradcheck.eps,
            tolerance: self.gradcheck.tolerance,
            max_coords_per_group: self.gradcheck.max_coords_per_group,
            seed: self.seed,
        }
    }

    /// Every violated invariant across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.data.window == 0 {
            v.push("data.window must be at least 1".into());
        }
        v.extend(self.encoder.violations(self.data.window));
        if self.head == HeadKind::Moe {
            v.extend(self.moe.violations());
        }
        v.extend(self.train_config().violations());
        v.extend(self.split.violations());
        if !(self.portfolio.fraction > 0.0 && self.portfolio.fraction <= 1.0) {
            v.push(format!("portfolio.fraction must lie in (0, 1], got {}", self.portfolio.fraction));
        }
        v.extend(self.synth.violations());
        let g = &self.gradcheck;
        if g.n_stocks < 2 {
            v.push("gradcheck.n_stocks must be at least 2".into());
        }
        if g.n_features == 0 || g.n_days == 0 {
            v.push("gradcheck.n_features and gradcheck.n_days must be positive".into());
        }
        if !(g.eps > 0.0 && g.tolerance > 0.0) {
            v.push("gradcheck.eps and gradcheck.tolerance must be positive".into());
        }
        v
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(v))
        }
    }
}
