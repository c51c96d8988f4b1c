//! Stock panels, day cross-sections and temporal splits.
//!
//! A [`StockPanel`] stores one observation per (stock, day): a price, `D`
//! feature values and optional benchmark tags. Missing values are `None`,
//! never zero. A [`DayBatch`] is the cross-section used for one loss term:
//! every stock with a fully observed window ending on the day and an
//! available forward label.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use miga_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{MigaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StockPanel {
    stocks: Vec<String>,
    days: Vec<String>,
    n_features: usize,
    prices: Vec<Option<f64>>,
    features: Vec<Option<f64>>,
    tags: Vec<Vec<String>>,
}

impl StockPanel {
    /// Empty panel; `stocks` must be unique and `days` strictly increasing.
    pub fn new(mut stocks: Vec<String>, days: Vec<String>, n_features: usize) -> Result<Self> {
        if days.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MigaError::Data("days must be strictly increasing".into()));
        }
        stocks.sort();
        if stocks.windows(2).any(|w| w[0] == w[1]) {
            return Err(MigaError::Data("duplicate stock identifiers".into()));
        }
        let cells = stocks.len() * days.len();
        Ok(Self {
            prices: vec![None; cells],
            features: vec![None; cells * n_features],
            tags: vec![Vec::new(); cells],
            stocks,
            days,
            n_features,
        })
    }

    pub fn stocks(&self) -> &[String] {
        &self.stocks
    }

    pub fn days(&self) -> &[String] {
        &self.days
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn stock_index(&self, id: &str) -> Option<usize> {
        self.stocks.binary_search_by(|s| s.as_str().cmp(id)).ok()
    }

    pub fn day_index(&self, id: &str) -> Option<usize> {
        self.days.binary_search_by(|d| d.as_str().cmp(id)).ok()
    }

    fn cell(&self, stock: usize, day: usize) -> usize {
        stock * self.days.len() + day
    }

    pub fn set(
        &mut self,
        stock: usize,
        day: usize,
        price: Option<f64>,
        features: &[Option<f64>],
        tags: Vec<String>,
    ) {
        assert_eq!(features.len(), self.n_features, "feature count");
        let c = self.cell(stock, day);
        self.prices[c] = price;
        self.features[c * self.n_features..(c + 1) * self.n_features].copy_from_slice(features);
        self.tags[c] = tags;
    }

    pub fn price(&self, stock: usize, day: usize) -> Option<f64> {
        self.prices[self.cell(stock, day)]
    }

    pub fn features(&self, stock: usize, day: usize) -> &[Option<f64>] {
        let c = self.cell(stock, day);
        &self.features[c * self.n_features..(c + 1) * self.n_features]
    }

    pub fn tags(&self, stock: usize, day: usize) -> &[String] {
        &self.tags[self.cell(stock, day)]
    }

    /// Price series of one stock across all days.
    pub fn price_series(&self, stock: usize) -> &[Option<f64>] {
        let n = self.days.len();
        &self.prices[stock * n..(stock + 1) * n]
    }

    /// Price and every feature present.
    pub fn is_complete(&self, stock: usize, day: usize) -> bool {
        self.price(stock, day).is_some() && self.features(stock, day).iter().all(Option::is_some)
    }

    fn has_any(&self, stock: usize, day: usize) -> bool {
        self.price(stock, day).is_some()
            || self.features(stock, day).iter().any(Option::is_some)
            || !self.tags(stock, day).is_empty()
    }

    pub fn observation_count(&self) -> usize {
        (0..self.stocks.len())
            .flat_map(|s| (0..self.days.len()).map(move |d| (s, d)))
            .filter(|&(s, d)| self.has_any(s, d))
            .count()
    }
}

/// Forward return `(p[t+2] - p[t+1]) / p[t+1]`.
///
/// `Ok(None)` when either forward price is missing or past the end of the
/// series; a non-positive `p[t+1]` is a data error.
pub fn compute_label(prices: &[Option<f64>], t: usize) -> Result<Option<f64>> {
    let (Some(p1), Some(p2)) = (
        prices.get(t + 1).copied().flatten(),
        prices.get(t + 2).copied().flatten(),
    ) else {
        return Ok(None);
    };
    if p1 <= 0.0 {
        return Err(MigaError::Data(format!(
            "non-positive price {p1} at day offset {}",
            t + 1
        )));
    }
    Ok(Some((p2 - p1) / p1))
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics over every observed feature value on days `[start, end)`.
    pub fn fit(panel: &StockPanel, start: &str, end: &str) -> Result<Self> {
        let d = panel.n_features();
        let mut sum = vec![0.0; d];
        let mut count = vec![0usize; d];
        let in_range: Vec<usize> = (0..panel.days().len())
            .filter(|&i| panel.days()[i].as_str() >= start && panel.days()[i].as_str() < end)
            .collect();
        for s in 0..panel.stocks().len() {
            for &t in &in_range {
                for (f, v) in panel.features(s, t).iter().enumerate() {
                    if let Some(v) = v {
                        sum[f] += v;
                        count[f] += 1;
                    }
                }
            }
        }
        if let Some(f) = count.iter().position(|&c| c == 0) {
            return Err(MigaError::Data(format!("feature f_{f} has no observations in [{start}, {end})")));
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, c)| s / *c as f64).collect();
        let mut sq = vec![0.0; d];
        for s in 0..panel.stocks().len() {
            for &t in &in_range {
                for (f, v) in panel.features(s, t).iter().enumerate() {
                    if let Some(v) = v {
                        sq[f] += (v - mean[f]) * (v - mean[f]);
                    }
                }
            }
        }
        let std = sq
            .iter()
            .zip(&count)
            .map(|(q, c)| {
                let sd = (q / *c as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }
}

/// One cross-section of the panel.
#[derive(Debug, Clone, PartialEq)]
pub struct DayBatch {
    pub day: String,
    pub day_index: usize,
    pub window: usize,
    pub n_features: usize,
    /// `[N × T × D]`, oldest day first.
    pub windows: Vec<f64>,
    pub labels: Vec<f64>,
    pub stock_ids: Vec<String>,
    pub tags: Vec<Vec<String>>,
}

impl DayBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn windows_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.window, self.n_features], self.windows.clone())
            .expect("window layout")
    }

    /// Batch restricted to the rows in `keep`, in that order.
    pub fn select(&self, keep: &[usize]) -> DayBatch {
        let w = self.window * self.n_features;
        DayBatch {
            day: self.day.clone(),
            day_index: self.day_index,
            window: self.window,
            n_features: self.n_features,
            windows: keep.iter().flat_map(|&i| self.windows[i * w..(i + 1) * w].iter().copied()).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            stock_ids: keep.iter().map(|&i| self.stock_ids[i].clone()).collect(),
            tags: keep.iter().map(|&i| self.tags[i].clone()).collect(),
        }
    }

    /// Last day index whose price the batch depends on.
    pub fn label_source_day(&self) -> usize {
        self.day_index + 2
    }
}

/// Cross-section at day index `t` with windows covering days `t-T+1 ..= t`.
///
/// Requires at least `window` days before `t`. Stocks are kept only when
/// every window day is complete and the forward label exists.
pub fn slice_day(panel: &StockPanel, t: usize, window: usize, norm: Option<&NormStats>) -> Result<DayBatch> {
    let day = panel
        .days()
        .get(t)
        .ok_or_else(|| MigaError::Data(format!("day index {t} outside panel")))?;
    if window == 0 {
        return Err(MigaError::config("window length must be at least 1"));
    }
    if t < window {
        return Err(MigaError::InsufficientHistory {
            day: day.clone(),
            needed: window,
            available: t,
        });
    }
    let d = panel.n_features();
    let mut batch = DayBatch {
        day: day.clone(),
        day_index: t,
        window,
        n_features: d,
        windows: Vec::new(),
        labels: Vec::new(),
        stock_ids: Vec::new(),
        tags: Vec::new(),
    };
    for s in 0..panel.stocks().len() {
        let first = t + 1 - window;
        if !(first..=t).all(|day| panel.is_complete(s, day)) {
            continue;
        }
        let Some(label) = compute_label(panel.price_series(s), t)? else {
            continue;
        };
        if !label.is_finite() {
            continue;
        }
        for day in first..=t {
            for (f, v) in panel.features(s, day).iter().enumerate() {
                let v = v.expect("complete observation");
                batch.windows.push(match norm {
                    Some(n) => (v - n.mean[f]) / n.std[f],
                    None => v,
                });
            }
        }
        batch.labels.push(label);
        batch.stock_ids.push(panel.stocks()[s].clone());
        batch.tags.push(panel.tags(s, t).to_vec());
    }
    Ok(batch)
}

/// Half-open day-identifier interval `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayRange {
    pub start: String,
    pub end: String,
}

impl DayRange {
    pub fn new(start: impl Into<String>, end: impl Into<String>) -> Self {
        Self {
            start: start.into(),
            end: end.into(),
        }
    }

    pub fn contains(&self, day: &str) -> bool {
        day >= self.start.as_str() && day < self.end.as_str()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: DayRange,
    pub valid: DayRange,
    pub test: DayRange,
}

impl SplitSpec {
    /// Every violation, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, r) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            if r.start >= r.end {
                out.push(format!("split.{name} interval [{}, {}) is empty", r.start, r.end));
            }
        }
        if self.train.end > self.valid.start {
            out.push("split.train must end at or before split.valid starts".into());
        }
        if self.valid.end > self.test.start {
            out.push("split.valid must end at or before split.test starts".into());
        }
        out
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

#[derive(Debug, Clone)]
pub struct SplitStreams {
    pub train: Vec<DayBatch>,
    pub valid: Vec<DayBatch>,
    pub test: Vec<DayBatch>,
}

/// Day batches of one interval whose whole label horizon stays inside it.
pub fn range_batches(
    panel: &StockPanel,
    range: &DayRange,
    window: usize,
    norm: Option<&NormStats>,
) -> Result<Vec<DayBatch>> {
    let days = panel.days();
    let mut out = Vec::new();
    for t in window..days.len() {
        if !range.contains(&days[t]) || t + 2 >= days.len() || !range.contains(&days[t + 2]) {
            continue;
        }
        let b = slice_day(panel, t, window, norm)?;
        if !b.is_empty() {
            out.push(b);
        }
    }
    Ok(out)
}

pub fn split(panel: &StockPanel, spec: &SplitSpec, window: usize, norm: Option<&NormStats>) -> Result<SplitStreams> {
    spec.validate()?;
    let mut problems = Vec::new();
    for (name, r) in [("train", &spec.train), ("valid", &spec.valid), ("test", &spec.test)] {
        if !panel.days().iter().any(|d| r.contains(d)) {
            problems.push(format!("split.{name} [{}, {}) contains no panel days", r.start, r.end));
        }
    }
    if !problems.is_empty() {
        return Err(MigaError::Config(problems));
    }
    Ok(SplitStreams {
        train: range_batches(panel, &spec.train, window, norm)?,
        valid: range_batches(panel, &spec.valid, window, norm)?,
        test: range_batches(panel, &spec.test, window, norm)?,
    })
}

// ---- CSV -------------------------------------------------------------------

fn parse_opt(field: &str, line: u64, what: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| MigaError::Parse {
            line,
            msg: format!("{what}: cannot parse {field:?} as a number"),
        })
}

/// Reads the long format `stock_id,day,price,f_0,…,f_{D-1}[,tags]`.
pub fn load_csv(path: &Path) -> Result<StockPanel> {
    let file = File::open(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let header = rdr
        .headers()
        .map_err(|e| MigaError::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 3 || names[0] != "stock_id" || names[1] != "day" || names[2] != "price" {
        return Err(MigaError::Parse {
            line: 1,
            msg: "header must start with stock_id,day,price".into(),
        });
    }
    let has_tags = names.last() == Some(&"tags");
    let n_features = names.len() - 3 - usize::from(has_tags);
    for (f, name) in names[3..3 + n_features].iter().enumerate() {
        if *name != format!("f_{f}") {
            return Err(MigaError::Parse {
                line: 1,
                msg: format!("expected column f_{f}, found {name:?}"),
            });
        }
    }

    type Row = (Option<f64>, Vec<Option<f64>>, Vec<String>);
    let mut rows: BTreeMap<(String, String), Row> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| MigaError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != names.len() {
            return Err(MigaError::Parse {
                line,
                msg: format!("expected {} fields, found {}", names.len(), rec.len()),
            });
        }
        let stock = rec[0].to_string();
        let day = rec[1].to_string();
        if stock.is_empty() || day.is_empty() {
            return Err(MigaError::Parse {
                line,
                msg: "stock_id and day are required".into(),
            });
        }
        let price = parse_opt(&rec[2], line, "price")?;
        let feats = (0..n_features)
            .map(|f| parse_opt(&rec[3 + f], line, &format!("f_{f}")))
            .collect::<Result<Vec<_>>>()?;
        let tags = if has_tags {
            rec[names.len() - 1]
                .split(';')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect()
        } else {
            Vec::new()
        };
        let key = (stock, day);
        if rows.contains_key(&key) {
            return Err(MigaError::Data(format!(
                "duplicate row for stock {} on day {} (line {line})",
                key.0, key.1
            )));
        }
        rows.insert(key, (price, feats, tags));
    }
    let stocks: BTreeSet<String> = rows.keys().map(|k| k.0.clone()).collect();
    let days: BTreeSet<String> = rows.keys().map(|k| k.1.clone()).collect();
    let mut panel = StockPanel::new(stocks.into_iter().collect(), days.into_iter().collect(), n_features)?;
    for ((stock, day), (price, feats, tags)) in rows {
        let s = panel.stock_index(&stock).expect("known stock");
        let d = panel.day_index(&day).expect("known day");
        panel.set(s, d, price, &feats, tags);
    }
    Ok(panel)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes every (stock, day) that carries any value, in stock then day order.
pub fn save_csv(panel: &StockPanel, path: &Path) -> Result<()> {
    let has_tags = (0..panel.stocks().len())
        .any(|s| (0..panel.days().len()).any(|d| !panel.tags(s, d).is_empty()));
    let mut wtr = csv::Writer::from_path(path).map_err(|e| MigaError::Io(e.into()))?;
    let mut header: Vec<String> = vec!["stock_id".into(), "day".into(), "price".into()];
    header.extend((0..panel.n_features()).map(|f| format!("f_{f}")));
    if has_tags {
        header.push("tags".into());
    }
    wtr.write_record(&header).map_err(|e| MigaError::Io(e.into()))?;
    for s in 0..panel.stocks().len() {
        for d in 0..panel.days().len() {
            if !panel.has_any(s, d) {
                continue;
            }
            let mut rec = vec![panel.stocks()[s].clone(), panel.days()[d].clone(), fmt_opt(panel.price(s, d))];
            rec.extend(panel.features(s, d).iter().map(|v| fmt_opt(*v)));
            if has_tags {
                rec.push(panel.tags(s, d).join(";"));
            }
            wtr.write_record(&rec).map_err(|e| MigaError::Io(e.into()))?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Sidecar metadata written next to a panel CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelMeta {
    pub n_features: usize,
    pub n_stocks: usize,
    pub first_day: String,
    pub last_day: String,
    pub norm: Option<NormStats>,
}

impl PanelMeta {
    pub fn describe(panel: &StockPanel, norm: Option<NormStats>) -> Self {
        Self {
            n_features: panel.n_features(),
            n_stocks: panel.stocks().len(),
            first_day: panel.days().first().cloned().unwrap_or_default(),
            last_day: panel.days().last().cloned().unwrap_or_default(),
            norm,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        f.write_all(serde_json::to_string_pretty(self).expect("serialisable").as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| MigaError::Parse {
            line: e.line() as u64,
            msg: e.to_string(),
        })
    }
}
