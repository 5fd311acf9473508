//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use serde_json::json;

use mantra_core::checks::{run_suite, STEP, TOLERANCE};
use mantra_core::data::{synth_drift, write_csv, write_drift_points, Dataset, DriftScript, LoadReport, Windows};
use mantra_core::model::{adaptation_freeze_mask, Mantra};
use mantra_core::stats::{compare, comparison_csv, RunSample};
use mantra_core::training::{
    adapt_to_drift, evaluate, persistence_mse, time_epoch, time_single_backbone_epoch, train, write_losses_csv, TrainConfig,
    TrainState,
};

use crate::config::{RunConfig, SynthSource};
use crate::pipeline::{
    checkpoint, load_for_checkpoint, prepare, prepare_dataset, restore, split_metrics, Prepared, SplitMetrics,
};
use crate::{Command, NumericFailure};

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { script, len, seed, out } => synth(&script, len, seed, &out),
        Command::Train { config, out, dry_run } => train_cmd(&config, out.as_deref(), dry_run),
        Command::Adapt {
            checkpoint,
            data,
            from,
            out,
            epochs,
        } => adapt(&checkpoint, &data, from, &out, epochs),
        Command::Eval {
            checkpoint,
            data,
            out,
            split,
        } => eval(&checkpoint, &data, &out, &split),
        Command::Gradcheck { draws, seed, out } => gradcheck(draws, seed, out.as_deref()),
        Command::Bench {
            config,
            sizes,
            learners,
            repeats,
            out,
        } => bench(config.as_deref(), &sizes, &learners, repeats, out.as_deref()),
        Command::Compare { ours, baseline, out } => compare_cmd(&ours, &baseline, out.as_deref()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Sidecar path for drift indices: `stream.csv` -> `stream.drift.txt`.
pub fn drift_sidecar(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}.drift.txt"))
}

fn synth(script: &Path, len: usize, seed: u64, out: &Path) -> Result<()> {
    let text = fs::read_to_string(script).with_context(|| format!("cannot read script {}", script.display()))?;
    let script: DriftScript =
        serde_json::from_str(&text).with_context(|| format!("invalid drift script {}", script.display()))?;
    let (ds, points) = synth_drift(&script, len, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_csv(&ds, out)?;
    let side = drift_sidecar(out);
    write_drift_points(&points, &side)?;
    log::info!("wrote {} rows to {} and {} drift points to {}", ds.len(), out.display(), points.len(), side.display());
    Ok(())
}

fn print_counts(model: &Mantra) {
    let c = model.param_counts();
    for (i, n) in c.fast.iter().enumerate() {
        println!("fast.{i}: {n}");
    }
    println!("slow: {}", c.slow);
    println!("urt: {}", c.urt);
    println!("total: {}", c.total());
}

fn train_cmd(config: &Path, out: Option<&Path>, dry_run: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    cfg.validate()?;
    // all input is read and checked before anything is written
    let prepared = prepare(&cfg)?;
    let mut model = Mantra::new(&prepared.model)?;
    if dry_run {
        print_counts(&model);
        return Ok(());
    }
    let out = match (out, &cfg.output.dir) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(d)) => d.clone(),
        (None, None) => bail!("no output directory: pass --out or set output.dir"),
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut resolved = cfg.clone();
    resolved.model = prepared.model.backbone.clone();
    write_json(&out.join("config.resolved.json"), &resolved)?;

    log::info!(
        "{} train / {} val / {} test windows; {} parameters",
        prepared.train.len(),
        prepared.val.len(),
        prepared.test.len(),
        model.param_counts().total()
    );
    let mut state = TrainState::new(&model, cfg.train.seed);
    let result = train(&mut model, &mut state, &prepared.train, &prepared.val, &cfg.train, &cfg.slow);
    write_losses_csv(&state.losses, &out.join("losses.csv"))?;
    let report = result?;

    let metrics = split_metrics(&model, &prepared, cfg.train.batch_size)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    write_json(
        &out.join("report.json"),
        &json!({
            "phase1": report.phase1,
            "phase2": report.phase2,
            "attention": state.attention,
            "persistence_test_mse": persistence_mse(&prepared.test),
            "params": model.param_counts(),
            "rows": prepared.load.rows,
            "dropped_rows": prepared.load.dropped,
        }),
    )?;
    if cfg.output.checkpoint {
        checkpoint(&model, &resolved, &prepared.scaler)?.save(&out.join("model.ckpt"))?;
    }
    for m in &metrics {
        println!("{}: mse {:.6} mae {:.6} ({} windows)", m.split, m.mse, m.mae, m.n_windows);
    }
    Ok(())
}

/// Restored data for a checkpoint, split with the run's ratios.
fn restored_data(run: &RunConfig, scaler: &mantra_core::data::Scaler, data: &Path, rows: Option<[usize; 2]>) -> Result<Prepared> {
    let (ds, load): (Dataset, LoadReport) = load_for_checkpoint(run, data, rows)?;
    prepare_dataset(ds, load, run, Some(scaler))
}

fn adapt(ckpt: &Path, data: &Path, from: usize, out: &Path, epochs: Option<usize>) -> Result<()> {
    let (mut model, run, scaler) = restore(ckpt)?;
    let (probe, _) = load_for_checkpoint(&run, data, None)?;
    if from >= probe.len() {
        bail!("--from {from} is past the {} rows of {}", probe.len(), data.display());
    }
    let p = restored_data(&run, &scaler, data, Some([from, probe.len()]))?;
    let tcfg = TrainConfig {
        epochs: epochs.unwrap_or(run.train.epochs),
        ..run.train.clone()
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mask = adaptation_freeze_mask(&model);
    let report = adapt_to_drift(&mut model, &p.train, &p.val, &p.test, &tcfg)?;
    let mut table = String::from("split,metric,pre,post\n");
    table.push_str(&format!("test,mse,{:e},{:e}\n", report.pre.mse, report.post.mse));
    table.push_str(&format!("test,mae,{:e},{:e}\n", report.pre.mae, report.post.mae));
    fs::write(out.join("adapt.csv"), &table)?;
    write_json(&out.join("adapt.json"), &report)?;
    checkpoint(&model, &run, &scaler)?.save(&out.join("model.ckpt"))?;
    print!("{table}");
    println!(
        "trainable fraction: {:.6} ({} of {} parameters)",
        mask.trainable_fraction(&model),
        mask.trainable_params(&model),
        model.param_counts().total()
    );
    Ok(())
}

fn prediction_rows(model: &Mantra, w: &Windows, p: &Prepared, batch_size: usize) -> Result<String> {
    let spec = w.spec();
    let names = &p.raw.feature_names;
    let mut header = vec!["window".to_string(), "start".to_string()];
    for t in 1..=spec.pred_len {
        for &c in w.out_columns() {
            if w.out_dim() == 1 {
                header.push(format!("h{t}"));
            } else {
                header.push(format!("h{t}_{}", names[c]));
            }
        }
    }
    let mut out = header.join(",") + "\n";
    for idx in w.sequential_batches(batch_size) {
        let (x, _) = w.batch(&idx);
        let pred = model.predict(&x)?.output;
        let width = spec.pred_len * w.out_dim();
        for (row, &i) in idx.iter().enumerate() {
            let mut cells = vec![i.to_string(), w.start(i).to_string()];
            for (j, v) in pred.data()[row * width..(row + 1) * width].iter().enumerate() {
                let col = w.out_columns()[j % w.out_dim()];
                cells.push(format!("{:e}", p.scaler.inverse(col, *v)));
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
    }
    Ok(out)
}

fn eval(ckpt: &Path, data: &Path, out: &Path, split: &str) -> Result<()> {
    let (model, run, scaler) = restore(ckpt)?;
    let p = restored_data(&run, &scaler, data, run.data.rows)?;
    let w = p.windows(split).context("unknown split")?;
    let m = SplitMetrics::new(split, evaluate(&model, w, run.train.batch_size, None)?);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("metrics.json"), &vec![m.clone()])?;
    fs::write(out.join("predictions.csv"), prediction_rows(&model, w, &p, run.train.batch_size)?)?;
    println!("{}: mse {:.6} mae {:.6} ({} windows)", m.split, m.mse, m.mae, m.n_windows);
    Ok(())
}

fn gradcheck(draws: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let results = run_suite(draws, seed)?;
    let mut table = String::from("check,draws,max_rel_error,passed\n");
    for r in &results {
        table.push_str(&format!("{},{},{:e},{}\n", r.name, r.draws, r.max_rel_error, r.passed));
    }
    print!("{table}");
    if let Some(path) = out {
        fs::write(path, &table)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(NumericFailure(format!(
            "gradient checks failed at tolerance {TOLERANCE} (h = {STEP}): {}",
            failed.join(", ")
        ))
        .into());
    }
    Ok(())
}

/// The built-in benchmark setup: a period-24 sine with trend, desk-scale
/// model.
pub fn bench_default_config() -> RunConfig {
    let script: DriftScript = serde_json::from_value(json!({
        "segments": [{"length": 4000, "frequency": 1.0 / 24.0, "amplitude": 1.0, "trend_slope": 0.001, "noise_std": 0.1}]
    }))
    .expect("valid script");
    let mut cfg = RunConfig::default();
    cfg.data.synth = Some(SynthSource {
        script,
        len: 4000,
        seed: 0,
    });
    cfg.data.split = [0.9, 0.05, 0.05];
    cfg
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// First `n` training windows of `p`.
fn first_windows(p: &Prepared, n: usize) -> Result<Windows> {
    let spec = *p.train.spec();
    let rows = (n - 1) * spec.stride + spec.input_len + spec.pred_len;
    if n == 0 || rows > p.splits.train.len() {
        bail!("{n} training windows requested, {} available", p.train.len());
    }
    Ok(Windows::new(&p.splits.train.slice(0, rows), spec, Default::default())?)
}

pub fn bench_table(cfg: &RunConfig, sizes: &[usize], learners: &[usize], repeats: usize) -> Result<String> {
    if sizes.is_empty() || learners.is_empty() || repeats == 0 {
        bail!("bench needs at least one size, one learner count and one repeat");
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        bail!("sizes must be ascending");
    }
    let p = prepare(cfg)?;
    let val = first_windows(&p, 1)?;
    let tcfg = TrainConfig {
        patience: usize::MAX,
        ..cfg.train.clone()
    };
    let time = |model: &mantra_core::model::ModelConfig, w: &Windows| -> Result<f64> {
        let mut runs = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            runs.push(time_epoch(model, w, &val, &tcfg, &cfg.slow)?.total());
        }
        Ok(median(runs))
    };
    let mut out = String::from("kind,n,learners,seconds,ratio\n");
    let m0 = p.model.ensemble.learners;
    let mut prev: Option<f64> = None;
    for &n in sizes {
        let w = first_windows(&p, n)?;
        let s = time(&p.model, &w)?;
        let ratio = prev.map(|q| format!("{:.4}", s / q)).unwrap_or_default();
        out.push_str(&format!("size,{n},{m0},{s:.6},{ratio}\n"));
        prev = Some(s);
    }
    let n = *sizes.last().expect("non-empty");
    let w = first_windows(&p, n)?;
    let mut prev: Option<f64> = None;
    let mut at_m0 = None;
    for &m in learners {
        let mut mc = p.model.clone();
        mc.ensemble.learners = m;
        mc.ensemble.seeds = None;
        let s = time(&mc, &w)?;
        let ratio = prev.map(|q| format!("{:.4}", s / q)).unwrap_or_default();
        out.push_str(&format!("learners,{n},{m},{s:.6},{ratio}\n"));
        prev = Some(s);
        if m == m0 {
            at_m0 = Some(s);
        }
    }
    let ensemble = match at_m0 {
        Some(s) => s,
        None => time(&p.model, &w)?,
    };
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        runs.push(time_single_backbone_epoch(&p.model, &w, &tcfg)?);
    }
    let single = median(runs);
    out.push_str(&format!("single_backbone,{n},1,{single:.6},{:.4}\n", ensemble / single));
    Ok(out)
}

fn bench(config: Option<&Path>, sizes: &[usize], learners: &[usize], repeats: usize, out: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(c) => RunConfig::load(c)?,
        None => bench_default_config(),
    };
    cfg.validate()?;
    let table = bench_table(&cfg, sizes, learners, repeats)?;
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("bench.csv"), &table)?;
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ResultFile {
    Value(f64),
    Values(Vec<f64>),
    Sample(RunSample),
    Samples(Vec<RunSample>),
}

impl ResultFile {
    fn samples(self) -> Vec<RunSample> {
        let bare = |values| RunSample {
            dataset: String::new(),
            horizon: None,
            metric: "mse".into(),
            values,
        };
        match self {
            ResultFile::Value(v) => vec![bare(vec![v])],
            ResultFile::Values(v) => vec![bare(v)],
            ResultFile::Sample(s) => vec![s],
            ResultFile::Samples(s) => s,
        }
    }
}

fn read_results(path: &Path) -> Result<Vec<RunSample>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let f: ResultFile = serde_json::from_str(&text).with_context(|| {
        format!(
            "{}: expected a number, an array of numbers, or run samples {{dataset, horizon, metric, values}}",
            path.display()
        )
    })?;
    Ok(f.samples())
}

fn compare_cmd(ours: &Path, baseline: &Path, out: Option<&Path>) -> Result<()> {
    let rows = compare(&read_results(ours)?, &read_results(baseline)?)?;
    if rows.is_empty() {
        bail!("no (dataset, horizon, metric) entries in common");
    }
    let csv = comparison_csv(&rows);
    print!("{csv}");
    if let Some(p) = out {
        let mut f = fs::File::create(p)?;
        f.write_all(csv.as_bytes())?;
    }
    Ok(())
}
