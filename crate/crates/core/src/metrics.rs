//! Ranking metrics, top-fraction portfolios and the daily backtester.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MigaError, Result};
use crate::model::DayPrediction;

pub const TRADING_DAYS: f64 = 252.0;

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(MigaError::Data(format!(
            "prediction length {} does not match label length {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation; `None` for fewer than two stocks or a constant side.
pub fn daily_ic(pred: &[f64], label: &[f64]) -> Result<Option<f64>> {
    check_len(pred, label)?;
    Ok(pearson(pred, label))
}

/// Sort key that folds -0.0 into 0.0 so equal values tie.
fn tie_key(v: f64) -> f64 {
    v + 0.0
}

/// 1-based ranks; tied values share their mean rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| tie_key(xs[a]).total_cmp(&tie_key(xs[b])));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation with mean ranks for ties.
pub fn daily_rank_ic(pred: &[f64], label: &[f64]) -> Result<Option<f64>> {
    check_len(pred, label)?;
    Ok(pearson(&average_ranks(pred), &average_ranks(label)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub ic: f64,
    pub rank_ic: f64,
    /// `None` when the daily IC series has zero spread.
    pub icir: Option<f64>,
    pub rank_icir: Option<f64>,
    pub ic_series: Vec<Option<f64>>,
    pub rank_ic_series: Vec<Option<f64>>,
    /// Days excluded because a correlation was undefined.
    pub undefined_days: usize,
}

fn ratio_stats(series: &[Option<f64>]) -> Result<(f64, Option<f64>, usize)> {
    let valid: Vec<f64> = series.iter().flatten().copied().collect();
    if valid.len() < 2 {
        return Err(MigaError::Data(format!(
            "need at least 2 days with a defined correlation, found {}",
            valid.len()
        )));
    }
    let (mean, std) = mean_std(&valid);
    let ir = if std > 0.0 { Some(mean / std) } else { None };
    Ok((mean, ir, series.len() - valid.len()))
}

/// Means and mean/std ratios of daily IC and RankIC series.
pub fn aggregate_ranking(ic_series: &[Option<f64>], rank_ic_series: &[Option<f64>]) -> Result<RankingReport> {
    let (ic, icir, u1) = ratio_stats(ic_series)?;
    let (rank_ic, rank_icir, u2) = ratio_stats(rank_ic_series)?;
    Ok(RankingReport {
        ic,
        rank_ic,
        icir,
        rank_icir,
        ic_series: ic_series.to_vec(),
        rank_ic_series: rank_ic_series.to_vec(),
        undefined_days: u1.max(u2),
    })
}

/// One day's scores and realised labels, aligned by row.
#[derive(Debug, Clone, Copy)]
pub struct ScoredDay<'a> {
    pub day: &'a str,
    pub stock_ids: &'a [String],
    pub scores: &'a [f64],
    pub labels: &'a [f64],
}

impl DayPrediction {
    pub fn scored(&self) -> ScoredDay<'_> {
        ScoredDay {
            day: &self.day,
            stock_ids: &self.stock_ids,
            scores: &self.predictions,
            labels: &self.labels,
        }
    }

    /// Rows whose tags contain `tag`.
    pub fn restrict(&self, tag: &str) -> DayPrediction {
        let keep: Vec<usize> = (0..self.labels.len())
            .filter(|&i| self.tags[i].iter().any(|t| t == tag))
            .collect();
        let pick = |v: &Vec<f64>| keep.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        DayPrediction {
            day: self.day.clone(),
            stock_ids: keep.iter().map(|&i| self.stock_ids[i].clone()).collect(),
            tags: keep.iter().map(|&i| self.tags[i].clone()).collect(),
            labels: pick(&self.labels),
            predictions: pick(&self.predictions),
            slot_readouts: self
                .slot_readouts
                .as_ref()
                .map(|r| keep.iter().map(|&i| r[i].clone()).collect()),
            selected: self.selected.as_ref().map(|s| keep.iter().map(|&i| s[i].clone()).collect()),
        }
    }

    /// Copy whose predictions are slot `slot`'s readout alone.
    pub fn for_slot(&self, slot: usize) -> Option<DayPrediction> {
        let r = self.slot_readouts.as_ref()?;
        let mut out = self.clone();
        out.predictions = r.iter().map(|row| row[slot]).collect();
        Some(out)
    }
}

pub fn ranking_report(days: &[ScoredDay<'_>]) -> Result<RankingReport> {
    let mut ic = Vec::with_capacity(days.len());
    let mut ric = Vec::with_capacity(days.len());
    for d in days {
        ic.push(daily_ic(d.scores, d.labels)?);
        ric.push(daily_rank_ic(d.scores, d.labels)?);
    }
    aggregate_ranking(&ic, &ric)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortfolioMode {
    LongOnly,
    LongShort,
}

impl std::str::FromStr for PortfolioMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "long_only" => Ok(Self::LongOnly),
            "long_short" => Ok(Self::LongShort),
            other => Err(format!("unknown portfolio mode {other:?} (expected long_only or long_short)")),
        }
    }
}

/// Row positions of each leg plus the net weight per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    pub long: Vec<usize>,
    pub short: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Number of names per leg: `ceil(fraction · n)`.
pub fn leg_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).clamp(1, n)
}

/// Equal-weight top (and bottom) `ceil(fraction·N)` stocks by score; ties by stock id.
pub fn build_portfolio(scores: &[f64], stock_ids: &[String], mode: PortfolioMode, fraction: f64) -> Result<Portfolio> {
    let n = scores.len();
    if n == 0 {
        return Err(MigaError::Data("cannot build a portfolio on an empty day".into()));
    }
    if stock_ids.len() != n {
        return Err(MigaError::Data(format!("{n} scores but {} stock ids", stock_ids.len())));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MigaError::config(format!("portfolio fraction {fraction} outside (0, 1]")));
    }
    let k = leg_size(n, fraction);
    let mut desc: Vec<usize> = (0..n).collect();
    desc.sort_by(|&a, &b| tie_key(scores[b]).total_cmp(&tie_key(scores[a])).then_with(|| stock_ids[a].cmp(&stock_ids[b])));
    let long: Vec<usize> = desc[..k].to_vec();
    let mut weights = vec![0.0; n];
    for &i in &long {
        weights[i] += 1.0 / k as f64;
    }
    let short = match mode {
        PortfolioMode::LongOnly => Vec::new(),
        PortfolioMode::LongShort => {
            let mut asc: Vec<usize> = (0..n).collect();
            asc.sort_by(|&a, &b| tie_key(scores[a]).total_cmp(&tie_key(scores[b])).then_with(|| stock_ids[a].cmp(&stock_ids[b])));
            asc.truncate(k);
            for &i in &asc {
                weights[i] -= 1.0 / k as f64;
            }
            asc
        }
    };
    Ok(Portfolio { long, short, weights })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioReport {
    pub ar: f64,
    /// `None` when the excess series has zero spread.
    pub ir: Option<f64>,
    pub days: Vec<String>,
    pub daily_returns: Vec<f64>,
    pub daily_excess: Vec<f64>,
    /// `Σ|w_t − w_{t−1}|` across stock ids; the first day counts from cash.
    pub turnover: Vec<f64>,
}

/// Frictionless daily-rebalanced backtest of top-fraction portfolios.
pub fn backtest(days: &[ScoredDay<'_>], mode: PortfolioMode, fraction: f64) -> Result<PortfolioReport> {
    if days.is_empty() {
        return Err(MigaError::Data("backtest needs at least one day".into()));
    }
    let mut out = PortfolioReport {
        ar: 0.0,
        ir: None,
        days: Vec::with_capacity(days.len()),
        daily_returns: Vec::with_capacity(days.len()),
        daily_excess: Vec::with_capacity(days.len()),
        turnover: Vec::with_capacity(days.len()),
    };
    let mut prev: BTreeMap<&str, f64> = BTreeMap::new();
    for d in days {
        check_len(d.scores, d.labels)?;
        let p = build_portfolio(d.scores, d.stock_ids, mode, fraction)?;
        let ret: f64 = p.weights.iter().zip(d.labels).map(|(w, y)| w * y).sum();
        let universe = d.labels.iter().sum::<f64>() / d.labels.len() as f64;
        let mut cur: BTreeMap<&str, f64> = BTreeMap::new();
        for (i, &w) in p.weights.iter().enumerate() {
            if w != 0.0 {
                cur.insert(d.stock_ids[i].as_str(), w);
            }
        }
        let mut turn = 0.0;
        for (id, w) in &cur {
            turn += (w - prev.get(id).copied().unwrap_or(0.0)).abs();
        }
        for (id, w) in &prev {
            if !cur.contains_key(id) {
                turn += w.abs();
            }
        }
        out.days.push(d.day.to_string());
        out.daily_returns.push(ret);
        out.daily_excess.push(ret - universe);
        out.turnover.push(turn);
        prev = cur;
    }
    let (mean, std) = mean_std(&out.daily_excess);
    out.ar = mean * TRADING_DAYS;
    out.ir = if std > 0.0 {
        Some(mean * TRADING_DAYS / (std * TRADING_DAYS.sqrt()))
    } else {
        None
    };
    Ok(out)
}

/// Ranking and portfolio metrics for one universe or tag subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subset: String,
    pub ranking: RankingReport,
    pub portfolio: PortfolioReport,
}

/// Evaluates predictions, optionally restricted to rows tagged `subset`.
pub fn evaluate(preds: &[DayPrediction], subset: Option<&str>, mode: PortfolioMode, fraction: f64) -> Result<EvalReport> {
    let restricted: Vec<DayPrediction> = match subset {
        Some(tag) => preds.iter().map(|p| p.restrict(tag)).filter(|p| !p.labels.is_empty()).collect(),
        None => preds.to_vec(),
    };
    let scored: Vec<ScoredDay<'_>> = restricted.iter().map(DayPrediction::scored).collect();
    Ok(EvalReport {
        subset: subset.unwrap_or("all").to_string(),
        ranking: ranking_report(&scored)?,
        portfolio: backtest(&scored, mode, fraction)?,
    })
}

/// One cell of the per-slot specialization grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertCell {
    pub group: usize,
    pub expert: usize,
    pub slot: usize,
    /// `None` if fewer than two days had a defined IC.
    pub ic: Option<f64>,
    pub portfolio: PortfolioReport,
}

/// Backtests every slot's readout on its own, bypassing the gate.
pub fn per_expert_report(
    preds: &[DayPrediction],
    groups: usize,
    experts: usize,
    subset: Option<&str>,
    mode: PortfolioMode,
    fraction: f64,
) -> Result<Vec<ExpertCell>> {
    let restricted: Vec<DayPrediction> = match subset {
        Some(tag) => preds.iter().map(|p| p.restrict(tag)).filter(|p| !p.labels.is_empty()).collect(),
        None => preds.to_vec(),
    };
    let mut grid = Vec::with_capacity(groups * experts);
    for slot in 0..groups * experts {
        let days: Vec<DayPrediction> = restricted
            .iter()
            .map(|p| {
                p.for_slot(slot)
                    .ok_or_else(|| MigaError::Incompatible("model has no expert readouts".into()))
            })
            .collect::<Result<_>>()?;
        let scored: Vec<ScoredDay<'_>> = days.iter().map(DayPrediction::scored).collect();
        grid.push(ExpertCell {
            group: slot / experts,
            expert: slot % experts,
            slot,
            ic: ranking_report(&scored).ok().map(|r| r.ic),
            portfolio: backtest(&scored, mode, fraction)?,
        });
    }
    Ok(grid)
}

/// Plug-in mutual information (nats) between two discrete labelings.
pub fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut pa: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pb: BTreeMap<usize, f64> = BTreeMap::new();
    for i in 0..n {
        *joint.entry((a[i], b[i])).or_default() += 1.0;
        *pa.entry(a[i]).or_default() += 1.0;
        *pb.entry(b[i]).or_default() += 1.0;
    }
    let nf = n as f64;
    joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c / nf;
            pxy * (pxy / ((pa[&x] / nf) * (pb[&y] / nf))).ln()
        })
        .sum()
}
