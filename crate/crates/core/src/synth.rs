//! Synthetic style-regime panels with a known linear teacher per style.
//!
//! Features follow a latent factor model with AR(1) persistence. Each stock
//! belongs to a style `s`; its forward return on day `t` is
//! `return_scale · (β_s · x̄_{i,t} + ε)`, where `x̄` is the trailing mean of
//! the last `signal_window` feature vectors. Styles also shift the feature
//! mean along directions orthogonal to every `β`, so a router can identify
//! them without the shift leaking into returns.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MigaError, Result};
use crate::panel::{DayRange, SplitSpec, StockPanel};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleAssignment {
    Static,
    PerDayDrift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_stocks: usize,
    pub n_days: usize,
    pub n_features: usize,
    pub n_styles: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub style_assignment: StyleAssignment,
    #[serde(default = "defaults::signal_window")]
    pub signal_window: usize,
    #[serde(default = "defaults::n_factors")]
    pub n_factors: usize,
    /// AR(1) coefficient of factors and idiosyncratic terms.
    #[serde(default = "defaults::persistence")]
    pub persistence: f64,
    /// Norm of each style's feature-mean offset.
    #[serde(default = "defaults::style_separation")]
    pub style_separation: f64,
    /// Daily probability that a stock switches style under `per_day_drift`.
    #[serde(default = "defaults::drift_prob")]
    pub drift_prob: f64,
    /// Scale from signal units to simple returns.
    #[serde(default = "defaults::return_scale")]
    pub return_scale: f64,
}

mod defaults {
    pub fn signal_window() -> usize {
        5
    }
    pub fn n_factors() -> usize {
        2
    }
    pub fn persistence() -> f64 {
        0.9
    }
    pub fn style_separation() -> f64 {
        2.0
    }
    pub fn drift_prob() -> f64 {
        0.02
    }
    pub fn return_scale() -> f64 {
        0.01
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::teacher_student(0)
    }
}

impl SynthConfig {
    /// Single-style, low-noise panel used as a pipeline sanity target.
    pub fn teacher_student(seed: u64) -> Self {
        Self {
            n_stocks: 50,
            n_days: 300,
            n_features: 8,
            n_styles: 1,
            noise_sigma: 0.1,
            seed,
            style_assignment: StyleAssignment::Static,
            signal_window: defaults::signal_window(),
            n_factors: defaults::n_factors(),
            persistence: defaults::persistence(),
            style_separation: defaults::style_separation(),
            drift_prob: defaults::drift_prob(),
            return_scale: defaults::return_scale(),
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_stocks == 0 {
            v.push("synth.n_stocks must be positive".into());
        }
        if self.n_days < 3 {
            v.push("synth.n_days must be at least 3".into());
        }
        if self.n_features == 0 {
            v.push("synth.n_features must be positive".into());
        }
        if self.n_styles == 0 {
            v.push("synth.n_styles must be at least 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            v.push(format!("synth.noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if self.signal_window == 0 {
            v.push("synth.signal_window must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.persistence) {
            v.push(format!("synth.persistence must lie in [0, 1), got {}", self.persistence));
        }
        if !(0.0..=1.0).contains(&self.drift_prob) {
            v.push(format!("synth.drift_prob must lie in [0, 1], got {}", self.drift_prob));
        }
        if !(self.return_scale > 0.0 && self.return_scale.is_finite()) {
            v.push(format!("synth.return_scale must be finite and > 0, got {}", self.return_scale));
        }
        v
    }

    /// Splits covering the first 60%, next 20% and last 20% of days.
    pub fn default_split(&self) -> SplitSpec {
        let a = self.n_days * 3 / 5;
        let b = self.n_days * 4 / 5;
        SplitSpec {
            train: DayRange::new(day_id(0), day_id(a)),
            valid: DayRange::new(day_id(a), day_id(b)),
            test: DayRange::new(day_id(b), day_id(self.n_days)),
        }
    }
}

pub fn day_id(t: usize) -> String {
    format!("D{t:04}")
}

pub fn stock_id(i: usize) -> String {
    format!("S{i:04}")
}

pub fn style_tag(s: usize) -> String {
    format!("style{s}")
}

/// Ground truth behind a generated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub config: SynthConfig,
    /// `[K][D]` unit-norm teacher directions.
    pub betas: Vec<Vec<f64>>,
    /// `[K][D]` feature-mean offsets.
    pub style_means: Vec<Vec<f64>>,
    /// `[stock][day]` style labels.
    pub styles: Vec<Vec<usize>>,
    /// Cross-sectional signal variance over noise variance per day (`None` when noiseless).
    pub snr: Vec<Option<f64>>,
}

impl SynthTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("serialisable"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| MigaError::Parse {
            line: e.line() as u64,
            msg: format!("truth sidecar: {e}"),
        })
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random orthonormal basis of R^d (Gram-Schmidt on Gaussian draws).
fn orthonormal_basis(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn style_geometry(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (d, k) = (cfg.n_features, cfg.n_styles);
    let basis = orthonormal_basis(rng, d);
    let betas: Vec<Vec<f64>> = (0..k)
        .map(|s| if s < d { basis[s].clone() } else { unit(rng, d) })
        .collect();
    let spare = &basis[k.min(d)..];
    let means = (0..k)
        .map(|_| {
            let dir = if spare.is_empty() {
                unit(rng, d)
            } else {
                let c = unit(rng, spare.len());
                (0..d).map(|f| spare.iter().zip(&c).map(|(b, w)| w * b[f]).sum()).collect()
            };
            dir.into_iter().map(|x| x * cfg.style_separation).collect()
        })
        .collect();
    (betas, means)
}

/// Generates a panel and its ground truth; identical seeds give identical output.
pub fn generate(cfg: &SynthConfig) -> Result<(StockPanel, SynthTruth)> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(MigaError::Config(v));
    }
    let (n, days, d, k, nf) = (cfg.n_stocks, cfg.n_days, cfg.n_features, cfg.n_styles, cfg.n_factors);
    let phi = cfg.persistence;
    let innov = (1.0 - phi * phi).sqrt();

    let (betas, style_means) = style_geometry(cfg, &mut rng_for(cfg.seed, "synth/styles"));

    let mut rng = rng_for(cfg.seed, "synth/assign");
    let mut styles = vec![vec![0usize; days]; n];
    for row in styles.iter_mut() {
        let mut s = rng.gen_range(0..k);
        for cell in row.iter_mut() {
            if cfg.style_assignment == StyleAssignment::PerDayDrift && k > 1 && rng.gen::<f64>() < cfg.drift_prob {
                s = rng.gen_range(0..k);
            }
            *cell = s;
        }
    }

    let mut rng = rng_for(cfg.seed, "synth/features");
    let loadings: Vec<Vec<f64>> = (0..n).map(|_| (0..d * nf).map(|_| 0.5 * normal(&mut rng)).collect()).collect();
    let mut factors = vec![0.0; nf];
    factors.iter_mut().for_each(|f| *f = normal(&mut rng));
    let mut idio: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| normal(&mut rng)).collect()).collect();
    // x[i][t][f]
    let mut x = vec![vec![vec![0.0; d]; days]; n];
    for t in 0..days {
        if t > 0 {
            for f in factors.iter_mut() {
                *f = phi * *f + innov * normal(&mut rng);
            }
            for row in idio.iter_mut() {
                for u in row.iter_mut() {
                    *u = phi * *u + innov * normal(&mut rng);
                }
            }
        }
        for i in 0..n {
            let mu = &style_means[styles[i][t]];
            for f in 0..d {
                let common: f64 = (0..nf).map(|j| loadings[i][f * nf + j] * factors[j]).sum();
                x[i][t][f] = mu[f] + common + idio[i][f];
            }
        }
    }

    let mut rng = rng_for(cfg.seed, "synth/returns");
    let w = cfg.signal_window;
    let mut signal = vec![vec![0.0; days]; n];
    let mut noise = vec![vec![0.0; days]; n];
    for i in 0..n {
        for t in 0..days {
            let lo = (t + 1).saturating_sub(w);
            let cnt = (t + 1 - lo) as f64;
            let beta = &betas[styles[i][t]];
            signal[i][t] = (lo..=t)
                .map(|u| x[i][u].iter().zip(beta).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
                / cnt;
            noise[i][t] = cfg.noise_sigma * normal(&mut rng);
        }
    }

    let mut rng = rng_for(cfg.seed, "synth/prices");
    let mut prices = vec![vec![0.0; days]; n];
    for i in 0..n {
        prices[i][0] = 100.0 * (0.2 * normal(&mut rng)).exp();
        prices[i][1] = prices[i][0] * (1.0 + 0.01 * normal(&mut rng));
        for t in 0..days - 2 {
            let y = cfg.return_scale * (signal[i][t] + noise[i][t]);
            if 1.0 + y <= 0.0 {
                return Err(MigaError::Data(format!(
                    "return {y} on day {t} would make a price non-positive; lower return_scale"
                )));
            }
            prices[i][t + 2] = prices[i][t + 1] * (1.0 + y);
        }
    }

    let snr = (0..days)
        .map(|t| {
            let s: Vec<f64> = (0..n).map(|i| signal[i][t]).collect();
            let m = s.iter().sum::<f64>() / n as f64;
            let var = s.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            (cfg.noise_sigma > 0.0).then(|| var / (cfg.noise_sigma * cfg.noise_sigma))
        })
        .collect();

    let stocks = (0..n).map(stock_id).collect();
    let day_ids = (0..days).map(day_id).collect();
    let mut panel = StockPanel::new(stocks, day_ids, d)?;
    for i in 0..n {
        for t in 0..days {
            let feats: Vec<Option<f64>> = x[i][t].iter().map(|v| Some(*v)).collect();
            panel.set(i, t, Some(prices[i][t]), &feats, vec![style_tag(styles[i][t])]);
        }
    }
    Ok((
        panel,
        SynthTruth {
            config: cfg.clone(),
            betas,
            style_means,
            styles,
            snr,
        },
    ))
}

/// Single-style panel for the training sanity check.
pub fn teacher_student_panel(cfg: &SynthConfig) -> Result<StockPanel> {
    if cfg.n_styles != 1 {
        return Err(MigaError::config(format!(
            "teacher-student panel needs n_styles = 1, got {}",
            cfg.n_styles
        )));
    }
    Ok(generate(cfg)?.0)
}

/// IC of the Bayes predictor when the signal has cross-sectional variance `signal_var`.
pub fn bayes_ic(noise_sigma: f64, signal_var: f64) -> f64 {
    1.0 / (1.0 + noise_sigma * noise_sigma / signal_var).sqrt()
}
