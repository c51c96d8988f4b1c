//! Grouped mixture-of-experts stock ranking.
//!
//! A per-stock temporal encoder produces hidden states; a gate routes each
//! stock to its top-k expert slots out of `G × E`; experts inside a group
//! exchange information through self-attention before a shared readout;
//! the gate-weighted sum of readouts is the return forecast. Training
//! maximises the daily cross-sectional IC with a router spread penalty.

pub mod checkpoint;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod objective;
pub mod panel;
pub mod params;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{MigaError, Result};
pub use model::{DayPrediction, HeadConfig, Model, ModelSpec};
