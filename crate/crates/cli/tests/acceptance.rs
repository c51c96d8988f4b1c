//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any criterion fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use miga::encoders::{EncoderConfig, EncoderKind};
use miga::metrics::{
    aggregate_ranking, backtest, build_portfolio, daily_ic, daily_rank_ic, evaluate, mutual_information,
    per_expert_report, PortfolioMode, ScoredDay,
};
use miga::moe::{route, MoeConfig};
use miga::objective::{expert_loss, router_loss};
use miga::panel::{split, NormStats, SplitStreams};
use miga::seed::rng_for;
use miga::synth::{generate, StyleAssignment, SynthConfig};
use miga::train::{train, TrainConfig};
use miga::{DayPrediction, HeadConfig, Model, ModelSpec};
use miga_cli::commands::{cmd_eval, cmd_gen, cmd_gradcheck, cmd_train, BEST_CKPT, CURVE_FILE, LAST_CKPT};
use miga_cli::config::{HeadKind, RunConfig};
use miga_tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn criterion(id: &str, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(f));
    let secs = started.elapsed().as_secs_f64();
    let (passed, detail) = match result {
        Ok(o) => (o.passed, o.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (false, format!("panicked: {msg}"))
        }
    };
    println!(
        "{} {id:>2} {name}: {detail} [{secs:.1}s]",
        if passed { "PASS" } else { "FAIL" }
    );
    passed
}

// ---- 1 ---------------------------------------------------------------------

fn gradient_integrity() -> Outcome {
    let started = Instant::now();
    let mut notes = Vec::new();
    let mut ok = true;
    for kind in [EncoderKind::Conv, EncoderKind::Recurrent, EncoderKind::Attention] {
        let mut cfg = RunConfig::default();
        cfg.output_dir = "/nonexistent/gradcheck".into();
        cfg.encoder = EncoderConfig {
            kind,
            d_h: 16,
            depth: 1,
            heads: 4,
            kernel: 3,
        };
        cfg.moe = MoeConfig {
            groups: 3,
            experts_per_group: 3,
            top_k: 2,
            d_e: 8,
            agg_heads: 4,
            inner_attention: true,
        };
        let report = cmd_gradcheck(&cfg, None).expect("gradcheck runs");
        let worst = report.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
        ok &= report.passed && report.groups.iter().all(|g| g.max_rel_error < 1e-4);
        notes.push(format!("{} {} groups max_rel {worst:.1e}", kind.name(), report.groups.len()));
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(ok && secs < 60.0, format!("{}; {secs:.1}s < 60s", notes.join(", ")))
}

// ---- 2 ---------------------------------------------------------------------

/// Repeated argmax with a strict comparison scanning upward, so ties keep the lowest index.
fn brute_top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; row.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..row.len() {
            if !taken[i] && best.map_or(true, |b| row[i] > row[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

fn routed(logits: &[f64], n: usize, m: usize, k: usize) -> (Vec<f64>, Vec<Vec<usize>>) {
    let mut t = Tape::new();
    let v = t.constant(Tensor::new(vec![n, m], logits.to_vec()).unwrap());
    let r = route(&mut t, v, k).unwrap();
    (t.value(r.weights).data().to_vec(), r.selected)
}

fn routing_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let instances = 1200;
    let mut failures = 0;
    for _ in 0..instances {
        let g = rng.gen_range(1..=4);
        let e = rng.gen_range(1..=5);
        let m = g * e;
        let k = rng.gen_range(1..=m);
        let n = rng.gen_range(1..=4);
        let coarse = rng.gen_bool(0.3);
        let logits: Vec<f64> = (0..n * m)
            .map(|_| {
                let v: f64 = rng.gen_range(-5.0..5.0);
                if coarse {
                    (v * 2.0).round() / 2.0
                } else {
                    v
                }
            })
            .collect();
        let (w, sel) = routed(&logits, n, m, k);
        let c = rng.gen_range(-20.0..20.0);
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        let (ws, sels) = routed(&shifted, n, m, k);
        let mut ok = sel == sels;
        for i in 0..n {
            let row = &w[i * m..(i + 1) * m];
            let nz: Vec<usize> = (0..m).filter(|&j| row[j] != 0.0).collect();
            let mut want = brute_top_k(&logits[i * m..(i + 1) * m], k);
            ok &= sel[i] == want;
            want.sort_unstable();
            ok &= nz == want;
            ok &= (row.iter().sum::<f64>() - 1.0).abs() < 1e-9;
            ok &= row.iter().zip(&ws[i * m..(i + 1) * m]).all(|(a, b)| (a - b).abs() < 1e-9);
        }
        failures += usize::from(!ok);
    }
    outcome(
        failures == 0,
        format!("{instances} random instances, {failures} violations"),
    )
}

// ---- 3 ---------------------------------------------------------------------

fn expert_value(preds: &[Vec<f64>], labels: &[Vec<f64>]) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = preds.iter().map(|p| t.constant(Tensor::vector(p.clone()))).collect();
    let ls: Vec<&[f64]> = labels.iter().map(Vec::as_slice).collect();
    let (l, _) = expert_loss(&mut t, &vars, &ls).unwrap();
    t.value(l).item()
}

fn router_value(h: &[f64], n: usize, m: usize) -> f64 {
    let mut t = Tape::new();
    let v = t.constant(Tensor::new(vec![n, m], h.to_vec()).unwrap());
    let r = router_loss(&mut t, &[v], false).unwrap();
    t.value(r).item()
}

fn loss_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = Vec::new();
    let cases = 500;
    for _ in 0..cases {
        let days = rng.gen_range(1..4);
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..days {
            let n = rng.gen_range(3..15);
            preds.push((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>());
            labels.push((0..n).map(|_| rng.gen_range(-0.05..0.05)).collect::<Vec<f64>>());
        }
        let l = expert_value(&preds, &labels);
        if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&l) {
            bad.push(format!("range {l}"));
        }
        let perfect: Vec<Vec<f64>> = labels.iter().map(|d| d.iter().map(|v| 3.0 * v + 1.0).collect()).collect();
        let inverted: Vec<Vec<f64>> = labels.iter().map(|d| d.iter().map(|v| -v).collect()).collect();
        if (expert_value(&perfect, &labels) + 1.0).abs() > 1e-9 || (expert_value(&inverted, &labels) - 1.0).abs() > 1e-9 {
            bad.push("perfect/inverted".into());
        }
        let moved: Vec<Vec<f64>> = preds
            .iter()
            .map(|d| {
                let (a, b) = (rng.gen_range(0.01..100.0), rng.gen_range(-10.0..10.0));
                d.iter().map(|v| a * v + b).collect()
            })
            .collect();
        if (expert_value(&moved, &labels) - l).abs() > 1e-9 {
            bad.push("affine".into());
        }

        let (n, m) = (rng.gen_range(1..6), rng.gen_range(1..10));
        let h: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut oracle = 0.0;
        for i in 0..n {
            let mean = h[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64;
            for j in 0..m {
                oracle += (h[i * m + j] - mean).powi(2);
            }
        }
        let r = router_value(&h, n, m);
        if (r - oracle).abs() > 1e-12 * oracle.max(1.0) || (m > 1 && r <= 0.0) {
            bad.push(format!("router {r} vs {oracle}"));
        }
        let flat: Vec<f64> = (0..n).flat_map(|i| vec![h[i * m]; m]).collect();
        if router_value(&flat, n, m).abs() > 1e-12 {
            bad.push("router constant rows".into());
        }
    }
    outcome(
        bad.is_empty(),
        format!("{cases} random cases, {} violations{}", bad.len(), bad.first().map_or(String::new(), |b| format!(" ({b})"))),
    )
}

// ---- 4 ---------------------------------------------------------------------

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Quadratic average-rank oracle.
fn ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let less = x.iter().filter(|u| *u < v).count() as f64;
            let equal = x.iter().filter(|u| *u == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() < 1e-10,
        (None, None) => true,
        _ => false,
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = Vec::new();
    for case in 0..200 {
        let n = rng.gen_range(2..40);
        let x: Vec<f64> = (0..n).map(|_| (rng.gen_range(-3.0f64..3.0) * 4.0).round() / 4.0).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
        if !close(daily_ic(&x, &y).unwrap(), pearson(&x, &y)) {
            bad.push(format!("daily_ic #{case}"));
        }
        if !close(daily_rank_ic(&x, &y).unwrap(), pearson(&ranks(&x), &ranks(&y))) {
            bad.push(format!("daily_rank_ic #{case}"));
        }

        let days = rng.gen_range(2..30);
        let series: Vec<Option<f64>> = (0..days)
            .map(|_| rng.gen_bool(0.9).then(|| rng.gen_range(-0.3..0.3)))
            .collect();
        let valid: Vec<f64> = series.iter().flatten().copied().collect();
        if let Ok(r) = aggregate_ranking(&series, &series) {
            let mean = valid.iter().sum::<f64>() / valid.len() as f64;
            let sd = (valid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / valid.len() as f64).sqrt();
            if (r.ic - mean).abs() > 1e-10 || !close(r.icir, Some(mean / sd)) || r.undefined_days != days - valid.len() {
                bad.push(format!("aggregate_ranking #{case}"));
            }
        } else if valid.len() >= 2 {
            bad.push(format!("aggregate_ranking rejected #{case}"));
        }

        let ids: Vec<String> = (0..n).map(|i| format!("S{:03}", (i * 7) % 101)).collect();
        let frac = rng.gen_range(0.01..1.0);
        let p = build_portfolio(&x, &ids, PortfolioMode::LongShort, frac).unwrap();
        let k = ((frac * n as f64).ceil() as usize).clamp(1, n);
        let pick = |better: &dyn Fn(usize, usize) -> bool| {
            let mut taken = vec![false; n];
            let mut out = Vec::new();
            for _ in 0..k {
                let mut best: Option<usize> = None;
                for i in 0..n {
                    if !taken[i] && best.map_or(true, |b| better(i, b)) {
                        best = Some(i);
                    }
                }
                taken[best.unwrap()] = true;
                out.push(best.unwrap());
            }
            out
        };
        let long = pick(&|i, b| x[i] > x[b] || (x[i] == x[b] && ids[i] < ids[b]));
        let short = pick(&|i, b| x[i] < x[b] || (x[i] == x[b] && ids[i] < ids[b]));
        let mut w = vec![0.0; n];
        long.iter().for_each(|&i| w[i] += 1.0 / k as f64);
        short.iter().for_each(|&i| w[i] -= 1.0 / k as f64);
        if p.long != long || p.short != short || p.weights.iter().zip(&w).any(|(a, b)| (a - b).abs() > 1e-10) {
            bad.push(format!("build_portfolio #{case}"));
        }
    }

    let names: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
    let scores = [vec![0.3, 0.1, 0.2], vec![0.0, 0.5, 0.4], vec![0.2, 0.2, 0.1], vec![0.1, 0.2, 0.3]];
    let labels = [
        vec![0.01, -0.02, 0.03],
        vec![0.02, 0.00, -0.01],
        vec![-0.01, 0.04, 0.02],
        vec![0.00, 0.01, 0.05],
    ];
    let days: Vec<String> = (0..4).map(|d| format!("d{d}")).collect();
    let scored: Vec<ScoredDay<'_>> = (0..4)
        .map(|d| ScoredDay {
            day: &days[d],
            stock_ids: &names,
            scores: &scores[d],
            labels: &labels[d],
        })
        .collect();
    let r = backtest(&scored, PortfolioMode::LongOnly, 0.5).unwrap();
    let ret = [0.02, -0.005, 0.015, 0.03];
    let bench = [0.02 / 3.0, 0.01 / 3.0, 0.05 / 3.0, 0.06 / 3.0];
    let ledger_ok = (0..4).all(|d| {
        (r.daily_returns[d] - ret[d]).abs() < 1e-15
            && (r.daily_excess[d] - (ret[d] - bench[d])).abs() < 1e-15
            && r.turnover[d] == 1.0
    });
    if !ledger_ok {
        bad.push("hand ledger".into());
    }
    outcome(
        bad.is_empty(),
        format!(
            "200 instances each for daily_ic, daily_rank_ic, aggregate_ranking, build_portfolio; hand ledger {}; {} violations",
            if ledger_ok { "exact" } else { "mismatch" },
            bad.len()
        ),
    )
}

// ---- 5 ---------------------------------------------------------------------

fn teacher_student() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.output_dir = dir.path().to_path_buf();
    cfg.data.path = dir.path().join("panel.csv");
    cfg.train.max_epochs = 20;
    let started = Instant::now();
    cmd_gen(&cfg).unwrap();
    let s = cmd_train(&cfg, None).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let ic = s.best_val_ic.unwrap_or(f64::NAN);
    outcome(
        ic > 0.8 && secs < 300.0,
        format!("default model, {} epochs, best validation IC {ic:.4} > 0.8; {secs:.0}s < 300s", s.epochs),
    )
}

// ---- 6, 7, 8 ---------------------------------------------------------------

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn style_panel(seed: u64) -> SplitStreams {
    let cfg = SynthConfig {
        n_styles: 3,
        style_separation: 4.0,
        style_assignment: StyleAssignment::Static,
        ..SynthConfig::teacher_student(seed)
    };
    let (panel, _) = generate(&cfg).unwrap();
    let sp = cfg.default_split();
    let norm = NormStats::fit(&panel, &sp.train.start, &sp.train.end).unwrap();
    split(&panel, &sp, 5, Some(&norm)).unwrap()
}

fn narrow_encoder() -> EncoderConfig {
    EncoderConfig {
        kind: EncoderKind::Conv,
        d_h: 4,
        depth: 1,
        heads: 4,
        kernel: 3,
    }
}

fn moe(groups: usize, experts: usize, inner_attention: bool) -> HeadConfig {
    HeadConfig::Moe(MoeConfig {
        groups,
        experts_per_group: experts,
        top_k: 2,
        d_e: 8,
        agg_heads: 4,
        inner_attention,
    })
}

fn fit_and_predict(head: HeadConfig, seed: u64, data: &SplitStreams) -> Vec<DayPrediction> {
    let spec = ModelSpec {
        encoder: narrow_encoder(),
        head,
        n_features: 8,
        window: 5,
    };
    let cfg = TrainConfig {
        max_epochs: 20,
        lr: 2e-3,
        patience: 10,
        seed,
        ..TrainConfig::default()
    };
    let out = train(Model::new(spec, seed).unwrap(), &data.train, &data.valid, &cfg, None, |_, _, _| Ok(())).unwrap();
    out.best.predict(&data.test).unwrap()
}

fn test_ic(preds: &[DayPrediction]) -> f64 {
    evaluate(preds, None, PortfolioMode::LongOnly, 0.05).unwrap().ranking.ic
}

struct SeedRun {
    seed: u64,
    moe_ic: f64,
    linear_ic: f64,
    best_slots: Vec<usize>,
    mi: f64,
    mi_shuffled: f64,
}

fn style_runs() -> Vec<SeedRun> {
    SEEDS
        .iter()
        .map(|&seed| {
            let data = style_panel(seed);
            let preds = fit_and_predict(moe(3, 3, true), seed, &data);
            let linear = fit_and_predict(HeadConfig::Linear, seed, &data);
            let best_slots = (0..3)
                .map(|s| {
                    let tag = format!("style{s}");
                    let grid = per_expert_report(&preds, 3, 3, Some(&tag), PortfolioMode::LongOnly, 0.05).unwrap();
                    grid.iter().max_by(|a, b| a.portfolio.ar.total_cmp(&b.portfolio.ar)).unwrap().slot
                })
                .collect();
            let (mut style, mut gate) = (Vec::new(), Vec::new());
            for p in &preds {
                for (i, tags) in p.tags.iter().enumerate() {
                    style.push(tags[0].trim_start_matches("style").parse::<usize>().unwrap());
                    gate.push(p.selected.as_ref().unwrap()[i][0]);
                }
            }
            let mut shuffled = style.clone();
            shuffled.shuffle(&mut rng_for(seed, "acceptance/shuffle"));
            SeedRun {
                seed,
                moe_ic: test_ic(&preds),
                linear_ic: test_ic(&linear),
                best_slots,
                mi: mutual_information(&gate, &style),
                mi_shuffled: mutual_information(&gate, &shuffled),
            }
        })
        .collect()
}

fn specialization(runs: &[SeedRun]) -> Outcome {
    let mut a = 0;
    let mut b = 0;
    let mut c = 0;
    for r in runs {
        let wins = r.moe_ic > r.linear_ic;
        let s = &r.best_slots;
        let distinct = s[0] != s[1] && s[0] != s[2] && s[1] != s[2];
        let informative = r.mi > r.mi_shuffled;
        a += usize::from(wins);
        b += usize::from(distinct);
        c += usize::from(informative);
        println!(
            "        seed {}: test IC miga {:.4} vs linear {:.4}; best slot per style {:?}; MI {:.4} vs shuffled {:.4}",
            r.seed, r.moe_ic, r.linear_ic, s, r.mi, r.mi_shuffled
        );
    }
    outcome(
        a >= 4 && b >= 4 && c == 5,
        format!("(a) IC wins {a}/5, need 4; (b) distinct best slots {b}/5, need 4; (c) MI above control {c}/5, need 5"),
    )
}

fn attention_ablation(runs: &[SeedRun]) -> Outcome {
    let disabled: Vec<f64> = SEEDS
        .iter()
        .map(|&seed| test_ic(&fit_and_predict(moe(3, 3, false), seed, &style_panel(seed))))
        .collect();
    let off = disabled.iter().sum::<f64>() / disabled.len() as f64;
    let on = runs.iter().map(|r| r.moe_ic).sum::<f64>() / runs.len() as f64;
    outcome(
        off <= on,
        format!("mean test IC enabled {on:.4}, disabled {off:.4} (per seed disabled {disabled:.4?})"),
    )
}

fn expert_scaling() -> Outcome {
    let started = Instant::now();
    let data = style_panel(1);
    let mut rows = Vec::new();
    for (g, e) in [(2, 2), (3, 3), (4, 4), (6, 6), (7, 9)] {
        let preds = fit_and_predict(moe(g, e, true), 1, &data);
        let icir = evaluate(&preds, None, PortfolioMode::LongOnly, 0.05).unwrap().ranking.icir.unwrap_or(f64::NAN);
        rows.push((g * e, icir));
    }
    let secs = started.elapsed().as_secs_f64();
    let smallest = rows[0].1;
    let best = rows.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let table: Vec<String> = rows.iter().map(|(m, v)| format!("{m}:{v:.2}")).collect();
    outcome(
        best.1 >= smallest && secs < 1800.0,
        format!(
            "ICIR by total experts (k=2) {}; best {} experts {:.2} >= smallest {:.2}; {secs:.0}s < 1800s",
            table.join(" "),
            best.0,
            best.1,
            smallest
        ),
    )
}

// ---- 9, 10 -----------------------------------------------------------------

fn small_run(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 11,
        output_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.synth.seed = 11;
    cfg.synth.n_stocks = 30;
    cfg.synth.n_days = 150;
    cfg.split = cfg.synth.default_split();
    cfg.data.path = dir.join("panel.csv");
    cfg.encoder = EncoderConfig {
        d_h: 8,
        ..narrow_encoder()
    };
    cfg.moe = MoeConfig {
        groups: 3,
        experts_per_group: 3,
        top_k: 2,
        d_e: 8,
        agg_heads: 4,
        inner_attention: true,
    };
    cfg.train.max_epochs = 3;
    cfg
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut tables = Vec::new();
    for dir in [a.path(), b.path()] {
        let cfg = small_run(dir);
        cmd_gen(&cfg).unwrap();
        cmd_train(&cfg, None).unwrap();
        tables.push(cmd_eval(&cfg, None, true).unwrap().table);
    }
    let same = |name: &str| fs::read(a.path().join(name)).unwrap() == fs::read(b.path().join(name)).unwrap();
    let files = [BEST_CKPT, LAST_CKPT, CURVE_FILE, "eval.json", "experts.csv", "panel.csv"];
    let differing: Vec<&str> = files.iter().copied().filter(|f| !same(f)).collect();
    outcome(
        differing.is_empty() && tables[0] == tables[1],
        format!(
            "two identical runs: checkpoints, curve and tables {}",
            if differing.is_empty() {
                "bit-identical".to_string()
            } else {
                format!("differ in {differing:?}")
            }
        ),
    )
}

fn hyperparameters() -> Outcome {
    let cfg = RunConfig::default();
    let moe = &cfg.moe;
    let checks = [
        ("lr", cfg.train.lr == 5e-4),
        ("alpha", cfg.loss.alpha == 2e-3),
        ("beta", cfg.loss.beta == 1.0),
        ("window", cfg.data.window == 5),
        ("max_epochs", cfg.train.max_epochs == 60),
        ("top_k", moe.top_k == 8),
        ("groups", moe.groups == 7),
        ("experts_per_group", moe.experts_per_group == 9),
        ("head", cfg.head == HeadKind::Moe),
        ("inner_attention", moe.inner_attention),
    ];
    let wrong: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        wrong.is_empty(),
        format!(
            "defaults lr {} alpha {} beta {} T {} epochs {} k {} G {} E {}{}",
            cfg.train.lr,
            cfg.loss.alpha,
            cfg.loss.beta,
            cfg.data.window,
            cfg.train.max_epochs,
            moe.top_k,
            moe.groups,
            moe.experts_per_group,
            if wrong.is_empty() { String::new() } else { format!("; wrong: {wrong:?}") }
        ),
    )
}

fn main() {
    let mut ok = true;
    ok &= criterion("1", "gradient integrity", gradient_integrity);
    ok &= criterion("2", "routing invariants", routing_invariants);
    ok &= criterion("3", "loss contracts", loss_contracts);
    ok &= criterion("4", "metric oracles", metric_oracles);
    ok &= criterion("5", "teacher-student sanity", teacher_student);
    let started = Instant::now();
    let runs = panic::catch_unwind(style_runs);
    println!("        style runs finished in {:.0}s", started.elapsed().as_secs_f64());
    match &runs {
        Ok(runs) => {
            ok &= criterion("6", "specialization", || specialization(runs));
            ok &= criterion("7", "inner-group attention ablation", || attention_ablation(runs));
        }
        Err(_) => {
            ok &= criterion("6", "specialization", || outcome(false, "style runs panicked"));
            ok &= criterion("7", "inner-group attention ablation", || outcome(false, "style runs panicked"));
        }
    }
    ok &= criterion("8", "expert-count scaling", expert_scaling);
    ok &= criterion("9", "determinism", determinism);
    ok &= criterion("10", "hyperparameter fidelity", hyperparameters);
    if !ok {
        std::process::exit(1);
    }
}
