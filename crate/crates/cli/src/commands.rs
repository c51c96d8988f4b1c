use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use miga::checkpoint::Checkpoint;
use miga::gradcheck::{gradcheck, GradcheckReport};
use miga::metrics::{backtest, evaluate, per_expert_report, EvalReport, ExpertCell, PortfolioReport};
use miga::panel::{load_csv, save_csv, slice_day, split, NormStats, PanelMeta, SplitStreams, StockPanel};
use miga::seed::derive_seed;
use miga::synth::{generate, StyleAssignment, SynthConfig};
use miga::train::{train, EpochRecord};
use miga::{DayPrediction, HeadConfig, MigaError, Model};

use crate::config::RunConfig;
use crate::error::CliError;

pub const PANEL_FILE: &str = "panel.csv";
pub const META_FILE: &str = "panel.meta.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CURVE_FILE: &str = "curve.csv";

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.display().to_string(),
        source,
    })
}

fn json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serialises");
    s.push('\n');
    s
}

#[derive(Debug, Clone)]
pub struct GenOutput {
    pub panel: PathBuf,
    pub truth: PathBuf,
    pub meta: PathBuf,
}

/// Writes a synthetic panel, its truth sidecar and metadata to the output directory.
pub fn cmd_gen(cfg: &RunConfig) -> Result<GenOutput, CliError> {
    let v = cfg.synth.violations();
    if !v.is_empty() {
        return Err(CliError::Config(v));
    }
    ensure_dir(&cfg.output_dir)?;
    let (panel, truth) = generate(&cfg.synth)?;
    let out = GenOutput {
        panel: cfg.output_dir.join(PANEL_FILE),
        truth: cfg.output_dir.join(TRUTH_FILE),
        meta: cfg.output_dir.join(META_FILE),
    };
    save_csv(&panel, &out.panel)?;
    truth.save(&out.truth)?;
    PanelMeta::describe(&panel, None).save(&out.meta)?;
    log::info!(
        "generated {} stocks × {} days × {} features into {}",
        panel.stocks().len(),
        panel.days().len(),
        panel.n_features(),
        out.panel.display()
    );
    Ok(out)
}

/// Panel, train-split normalisation and the three day streams.
pub struct LoadedData {
    pub panel: StockPanel,
    pub norm: NormStats,
    pub streams: SplitStreams,
}

pub fn load_data(cfg: &RunConfig, window: usize) -> Result<LoadedData, CliError> {
    let panel = load_csv(&cfg.data.path)?;
    let norm = NormStats::fit(&panel, &cfg.split.train.start, &cfg.split.train.end)?;
    let streams = split(&panel, &cfg.split, window, Some(&norm))?;
    for (name, s) in [("train", &streams.train), ("valid", &streams.valid), ("test", &streams.test)] {
        if s.is_empty() {
            return Err(MigaError::Data(format!("split.{name} yields no usable days")).into());
        }
    }
    Ok(LoadedData { panel, norm, streams })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub best_val_ic: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs: usize,
    pub stopped_early: bool,
    pub best_checkpoint: PathBuf,
}

fn append_line(path: &Path, line: &str) -> Result<(), CliError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| CliError::Write {
            path: path.display().to_string(),
            source,
        })?;
    writeln!(f, "{line}").map_err(|source| CliError::Write {
        path: path.display().to_string(),
        source,
    })
}

fn curve_row(r: &EpochRecord) -> String {
    format!("{},{},{},{},{}", r.epoch, r.train_loss, r.expert_loss, r.router_loss, r.val_ic)
}

/// Trains a model; `resume` continues from a `last.ckpt`.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let data = load_data(cfg, cfg.data.window)?;
    let spec = cfg.model_spec(data.panel.n_features());
    let tcfg = cfg.train_config();
    log::info!(
        "root seed {}: init stream {:#018x}, shuffle streams shuffle/<epoch>",
        cfg.seed,
        derive_seed(cfg.seed, "init")
    );
    let (model, state) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.expect_spec(&spec)?;
            ck.expect_norm(Some(&data.norm))?;
            let state = ck
                .train_state
                .clone()
                .ok_or_else(|| MigaError::Incompatible(format!("{} has no training state", path.display())))?;
            (ck.model(), Some(state))
        }
        None => (Model::new(spec, cfg.seed)?, None),
    };
    ensure_dir(&cfg.output_dir)?;
    let log_path = cfg.output_dir.join(TRAIN_LOG);
    let curve_path = cfg.output_dir.join(CURVE_FILE);
    let last_path = cfg.output_dir.join(LAST_CKPT);
    let best_path = cfg.output_dir.join(BEST_CKPT);
    if state.is_none() {
        write_file(&log_path, "")?;
        write_file(&curve_path, "epoch,train_loss,expert_loss,router_loss,val_ic\n")?;
    }
    let norm = data.norm.clone();
    let outcome = train(
        model,
        &data.streams.train,
        &data.streams.valid,
        &tcfg,
        state,
        |rec, model, state| {
            append_line(&log_path, &serde_json::to_string(rec).expect("record serialises"))
                .map_err(|e| MigaError::Data(e.to_string()))?;
            append_line(&curve_path, &curve_row(rec)).map_err(|e| MigaError::Data(e.to_string()))?;
            let mut last = Checkpoint::new(model, Some(norm.clone()));
            last.train_config = Some(tcfg.clone());
            last.train_state = Some(state.clone());
            last.save(&last_path)
        },
    )?;
    let mut best = Checkpoint::new(&outcome.best, Some(data.norm.clone()));
    best.train_config = Some(tcfg);
    best.save(&best_path)?;
    Ok(TrainSummary {
        best_val_ic: outcome.state.best_val_ic,
        best_epoch: outcome.state.best_epoch,
        epochs: outcome.state.epoch,
        stopped_early: outcome.state.stopped_early,
        best_checkpoint: best_path,
    })
}

fn load_for_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(Model, LoadedData), CliError> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(BEST_CKPT));
    let ck = Checkpoint::load(&path)?;
    let data = load_data(cfg, ck.spec.window)?;
    ck.expect_norm(Some(&data.norm))?;
    if ck.spec.n_features != data.panel.n_features() {
        return Err(MigaError::Incompatible(format!(
            "checkpoint expects {} features, panel has {}",
            ck.spec.n_features,
            data.panel.n_features()
        ))
        .into());
    }
    Ok((ck.model(), data))
}

/// Tags present in the predictions, sorted.
fn subsets(preds: &[DayPrediction]) -> Vec<String> {
    let set: BTreeSet<&String> = preds.iter().flat_map(|p| p.tags.iter().flatten()).collect();
    set.into_iter().cloned().collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Six-column summary table, one row per subset.
pub fn render_table(reports: &[EvalReport]) -> String {
    let w = reports.iter().map(|r| r.subset.len()).max().unwrap_or(6).max(6);
    let mut s = format!(
        "{:<w$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}\n",
        "subset", "IC", "ICIR", "RankIC", "RankICIR", "AR", "IR"
    );
    for r in reports {
        s.push_str(&format!(
            "{:<w$}  {:>8.4}  {:>8}  {:>8.4}  {:>8}  {:>8.4}  {:>8}\n",
            r.subset,
            r.ranking.ic,
            fmt_opt(r.ranking.icir),
            r.ranking.rank_ic,
            fmt_opt(r.ranking.rank_icir),
            r.portfolio.ar,
            fmt_opt(r.portfolio.ir)
        ));
    }
    s
}

pub fn render_grid(grid: &[ExpertCell]) -> String {
    let mut s = format!("{:>5}  {:>6}  {:>8}  {:>8}  {:>8}\n", "group", "expert", "IC", "AR", "IR");
    for c in grid {
        s.push_str(&format!(
            "{:>5}  {:>6}  {:>8}  {:>8.4}  {:>8}\n",
            c.group,
            c.expert,
            fmt_opt(c.ic),
            c.portfolio.ar,
            fmt_opt(c.portfolio.ir)
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub reports: Vec<EvalReport>,
    /// Per subset (`all` first), the per-slot grid when requested.
    pub grids: Option<Vec<(String, Vec<ExpertCell>)>>,
    pub table: String,
}

/// Test-split ranking and portfolio metrics for the whole universe and each tag subset.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, experts: bool) -> Result<EvalOutput, CliError> {
    let (model, data) = load_for_eval(cfg, checkpoint)?;
    let preds = model.predict(&data.streams.test)?;
    let (mode, frac) = (cfg.portfolio.mode, cfg.portfolio.fraction);
    let names: Vec<Option<String>> = std::iter::once(None).chain(subsets(&preds).into_iter().map(Some)).collect();
    let mut reports = Vec::with_capacity(names.len());
    for name in &names {
        reports.push(evaluate(&preds, name.as_deref(), mode, frac)?);
    }
    let mut table = render_table(&reports);
    ensure_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("eval.json"), &json(&reports))?;
    let grids = if experts {
        let HeadConfig::Moe(moe) = &model.spec.head else {
            return Err(CliError::Usage("--experts needs a mixture-of-experts checkpoint".into()));
        };
        let mut grids = Vec::with_capacity(names.len());
        for name in &names {
            let g = per_expert_report(&preds, moe.groups, moe.experts_per_group, name.as_deref(), mode, frac)?;
            grids.push((name.clone().unwrap_or_else(|| "all".into()), g));
        }
        table.push('\n');
        table.push_str(&render_grid(&grids[0].1));
        let mut csv = String::from("subset,group,expert,slot,ic,ar,ir\n");
        for (name, g) in &grids {
            for c in g {
                csv.push_str(&format!(
                    "{name},{},{},{},{},{},{}\n",
                    c.group,
                    c.expert,
                    c.slot,
                    c.ic.map_or(String::new(), |x| x.to_string()),
                    c.portfolio.ar,
                    c.portfolio.ir.map_or(String::new(), |x| x.to_string())
                ));
            }
        }
        write_file(&cfg.output_dir.join("experts.csv"), &csv)?;
        Some(grids)
    } else {
        None
    };
    write_file(&cfg.output_dir.join("eval.txt"), &table)?;
    Ok(EvalOutput { reports, grids, table })
}

/// Daily backtest of the test split; writes the daily series as CSV.
pub fn cmd_backtest(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<PortfolioReport, CliError> {
    let (model, data) = load_for_eval(cfg, checkpoint)?;
    let preds = model.predict(&data.streams.test)?;
    let scored: Vec<_> = preds.iter().map(DayPrediction::scored).collect();
    let report = backtest(&scored, cfg.portfolio.mode, cfg.portfolio.fraction)?;
    ensure_dir(&cfg.output_dir)?;
    let mut csv = String::from("day,return,excess,turnover\n");
    for i in 0..report.days.len() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            report.days[i], report.daily_returns[i], report.daily_excess[i], report.turnover[i]
        ));
    }
    write_file(&cfg.output_dir.join("backtest.csv"), &csv)?;
    write_file(&cfg.output_dir.join("backtest.json"), &json(&report))?;
    Ok(report)
}

/// Finite-difference check of the full loss on a small random instance.
pub fn cmd_gradcheck(cfg: &RunConfig, corrupt: Option<&str>) -> Result<GradcheckReport, CliError> {
    cfg.validate()?;
    let g = &cfg.gradcheck;
    let window = cfg.data.window;
    let synth = SynthConfig {
        n_stocks: g.n_stocks,
        n_days: window + g.n_days + 2,
        n_features: g.n_features,
        n_styles: 1,
        noise_sigma: 0.5,
        seed: derive_seed(cfg.seed, "gradcheck/data"),
        style_assignment: StyleAssignment::Static,
        ..SynthConfig::default()
    };
    let (panel, _) = generate(&synth)?;
    let batches = (window..window + g.n_days)
        .map(|t| slice_day(&panel, t, window, None))
        .collect::<miga::Result<Vec<_>>>()?;
    let refs: Vec<_> = batches.iter().collect();
    let model = Model::new(cfg.model_spec(g.n_features), cfg.seed)?;
    let report = gradcheck(&model, &refs, &cfg.loss, &cfg.gradcheck_config(), corrupt)?;
    if cfg.output_dir.exists() {
        write_file(&cfg.output_dir.join("gradcheck.txt"), &report.render())?;
    }
    Ok(report)
}

/// Writes `text` to `path` after creating its directory.
pub fn write_with_dir(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let mut f = File::create(path).map_err(|source| CliError::Write {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(text.as_bytes()).map_err(|source| CliError::Write {
        path: path.display().to_string(),
        source,
    })
}
