//! Data preparation, training runs and checkpoint metadata shared by the
//! commands.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use mantra_core::checkpoint::Checkpoint;
use mantra_core::data::{chrono_split, load_csv, synth_drift, Dataset, LoadReport, Scaler, Splits, WindowSpec, Windows};
use mantra_core::model::{Mantra, ModelConfig};
use mantra_core::training::{evaluate, EvalMetrics};

use crate::config::{DataConfig, RunConfig};

/// Raw rows from the configured source, with the target column set and the
/// row range applied.
pub fn load_source(data: &DataConfig) -> Result<(Dataset, LoadReport)> {
    let (mut ds, report) = match (&data.path, &data.synth) {
        (Some(path), _) => load_csv(path).with_context(|| format!("loading {}", path.display()))?,
        (None, Some(s)) => {
            let (ds, _) = synth_drift(&s.script, s.len, s.seed)?;
            let rows = ds.len();
            (ds, LoadReport { rows, dropped: 0 })
        }
        (None, None) => bail!("data needs either a path or a synth section"),
    };
    if report.dropped > 0 {
        log::warn!("dropped {} rows with missing values", report.dropped);
    }
    if let Some(t) = &data.target {
        ds.set_target(t)?;
    }
    if let Some([a, b]) = data.rows {
        if b > ds.len() {
            bail!("data.rows end {b} exceeds the {} available rows", ds.len());
        }
        ds = ds.slice(a, b);
    }
    Ok((ds, report))
}

/// Standardised splits, their windows and the model geometry they imply.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub raw: Dataset,
    pub load: LoadReport,
    pub splits: Splits,
    pub scaler: Scaler,
    pub train: Windows,
    pub val: Windows,
    pub test: Windows,
    pub model: ModelConfig,
}

impl Prepared {
    pub fn windows(&self, split: &str) -> Option<&Windows> {
        match split {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Splits `ds` chronologically and standardises with `scaler`, or with
/// statistics of the train split when none is given.
pub fn prepare_dataset(ds: Dataset, load: LoadReport, cfg: &RunConfig, scaler: Option<&Scaler>) -> Result<Prepared> {
    let spec = WindowSpec {
        input_len: cfg.model.input_len,
        pred_len: cfg.model.pred_len,
        stride: cfg.data.stride,
    };
    spec.validate()?;
    let raw_splits = chrono_split(&ds, cfg.data.split, spec.input_len + spec.pred_len)?;
    let scaler = match scaler {
        Some(s) => s.clone(),
        None => Scaler::fit(&raw_splits.train)?,
    };
    let splits = Splits {
        train: scaler.transform(&raw_splits.train)?,
        val: scaler.transform(&raw_splits.val)?,
        test: scaler.transform(&raw_splits.test)?,
        boundaries: raw_splits.boundaries,
    };
    let mode = cfg.data.features;
    let train = Windows::new(&splits.train, spec, mode)?;
    let val = Windows::new(&splits.val, spec, mode)?;
    let test = Windows::new(&splits.test, spec, mode)?;
    let target_index = match mode {
        mantra_core::data::FeatureMode::S => 0,
        _ => ds.target_index,
    };
    let model = cfg.model_config(train.in_dim(), train.out_dim(), target_index);
    model.validate()?;
    Ok(Prepared {
        raw: ds,
        load,
        splits,
        scaler,
        train,
        val,
        test,
        model,
    })
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (ds, load) = load_source(&cfg.data)?;
    prepare_dataset(ds, load, cfg, None)
}

/// One entry of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub mse: f64,
    pub mae: f64,
    pub n_windows: usize,
}

impl SplitMetrics {
    pub fn new(split: &str, m: EvalMetrics) -> Self {
        SplitMetrics {
            split: split.into(),
            mse: m.mse,
            mae: m.mae,
            n_windows: m.n_windows,
        }
    }
}

pub fn split_metrics(model: &Mantra, p: &Prepared, batch_size: usize) -> Result<Vec<SplitMetrics>> {
    ["train", "val", "test"]
        .iter()
        .map(|s| {
            let w = p.windows(s).expect("known split");
            Ok(SplitMetrics::new(s, evaluate(model, w, batch_size, None)?))
        })
        .collect()
}

/// Checkpoint carrying the resolved run config and the scaler next to the
/// model config.
pub fn checkpoint(model: &Mantra, cfg: &RunConfig, scaler: &Scaler) -> Result<Checkpoint> {
    Ok(model.to_checkpoint(json!({
        "run": serde_json::to_value(cfg)?,
        "scaler": serde_json::to_value(scaler)?,
    }))?)
}

/// Model, run config and scaler back from a checkpoint file.
pub fn restore(path: &Path) -> Result<(Mantra, RunConfig, Scaler)> {
    let ck = Checkpoint::load(path)?;
    let model = Mantra::from_checkpoint(&ck)?;
    let run: RunConfig = serde_json::from_value(ck.meta.get("run").cloned().context("checkpoint has no run config")?)
        .context("checkpoint run config")?;
    let scaler: Scaler = serde_json::from_value(ck.meta.get("scaler").cloned().context("checkpoint has no scaler")?)
        .context("checkpoint scaler")?;
    Ok((model, run, scaler))
}

/// Loads a CSV for a restored model: the run's data options apply, the
/// path and row range are replaced.
pub fn load_for_checkpoint(run: &RunConfig, path: &Path, rows: Option<[usize; 2]>) -> Result<(Dataset, LoadReport)> {
    let data = DataConfig {
        path: Some(path.to_path_buf()),
        synth: None,
        rows,
        ..run.data.clone()
    };
    load_source(&data)
}
