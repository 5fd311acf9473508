//! Two-phase training loop, evaluation, drift adaptation and epoch timing.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Backbone, HeadKind, SlowFeatures};
use crate::data::{mse_mae, Windows};
use crate::ensemble::{half_mse, half_mse_value};
use crate::model::{adaptation_freeze_mask, FreezeMask, Mantra, ModelConfig};
use crate::optim::{decayed_lr, Adam};
use crate::slow::{importance_profile, select_mask, slow_losses, SlowConfig};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::urt::{orthogonality_penalty, AttentionRecord};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Each fast learner minimises its own forecast loss.
    #[default]
    Independent,
    /// Fast learners are trained through the (frozen) URT output.
    ThroughUrt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Phase-1 epoch budget.
    pub epochs: usize,
    /// Phase-2 epoch budget; defaults to `epochs`.
    pub urt_epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-epoch learning-rate factor.
    pub lr_decay: f64,
    pub patience: usize,
    pub seed: u64,
    pub phase1_aggregation: Aggregation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            urt_epochs: None,
            batch_size: 32,
            lr: 1e-2,
            lr_decay: 0.5,
            patience: 3,
            seed: 0,
            phase1_aggregation: Aggregation::Independent,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Invalid(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(TrainError::Invalid(format!("lr_decay {} outside (0, 1]", self.lr_decay)));
        }
        if self.patience == 0 || self.batch_size == 0 {
            return Err(TrainError::Invalid("patience and batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn phase2_epochs(&self) -> usize {
        self.urt_epochs.unwrap_or(self.epochs)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite value in phase {phase}, epoch {epoch}, batch {batch} ({op})")]
    NonFinite {
        phase: u8,
        epoch: usize,
        batch: usize,
        op: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub phase: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub fn write_losses_csv(records: &[LossRecord], path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,phase,split,metric,value")?;
    for r in records {
        writeln!(f, "{},{},{},{},{:e}", r.epoch, r.phase, r.split, r.metric, r.value)?;
    }
    f.flush()
}

/// Running check of the attention partition of unity.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionStats {
    pub batches: usize,
    /// Largest `|Σ_i α_i − 1|` seen.
    pub max_sum_error: f64,
    pub min_alpha: f64,
}

impl Default for AttentionStats {
    fn default() -> Self {
        AttentionStats {
            batches: 0,
            max_sum_error: 0.0,
            min_alpha: f64::INFINITY,
        }
    }
}

impl AttentionStats {
    pub fn observe(&mut self, records: &[AttentionRecord]) {
        self.batches += 1;
        for r in records {
            let s: f64 = r.alpha.iter().sum();
            self.max_sum_error = self.max_sum_error.max((s - 1.0).abs());
            self.min_alpha = r.alpha.iter().copied().fold(self.min_alpha, f64::min);
        }
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.max_sum_error <= tol && self.min_alpha >= 0.0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PhaseReport {
    pub epochs_run: usize,
    /// Epoch whose parameters were kept (0 = the starting point).
    pub best_epoch: usize,
    pub best_val: f64,
    /// Validation MSE after each epoch, starting with the initial value.
    pub val_history: Vec<f64>,
    /// Wall-clock of the update loop per epoch, validation excluded.
    pub epoch_seconds: Vec<f64>,
    /// One-off work before the first epoch (prediction caching).
    pub setup_seconds: f64,
    pub stopped_early: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub mse: f64,
    pub mae: f64,
    pub n_windows: usize,
}

/// Optimiser state and bookkeeping shared by the training phases.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub fast_opt: Vec<Adam>,
    pub slow_opt: Option<Adam>,
    pub urt_opt: Adam,
    pub mask: FreezeMask,
    pub rng: ChaCha8Rng,
    pub losses: Vec<LossRecord>,
    pub attention: AttentionStats,
}

impl TrainState {
    pub fn new(model: &Mantra, seed: u64) -> Self {
        TrainState {
            fast_opt: model.fast.iter().map(|f| Adam::new(f.params())).collect(),
            slow_opt: model.slow.as_ref().map(|g| Adam::new(g.params())),
            urt_opt: Adam::new(model.urt.params()),
            mask: FreezeMask::all(model),
            rng: ChaCha8Rng::seed_from_u64(seed),
            losses: Vec::new(),
            attention: AttentionStats::default(),
        }
    }

    fn log(&mut self, epoch: usize, phase: &str, split: &str, metric: &str, value: f64) {
        self.losses.push(LossRecord {
            epoch,
            phase: phase.into(),
            split: split.into(),
            metric: metric.into(),
            value,
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub phase1: PhaseReport,
    pub phase2: PhaseReport,
}

fn locate(phase: u8, epoch: usize, batch: usize) -> impl Fn(TensorError) -> TrainError {
    move |e| match e {
        TensorError::NonFinite { op } => TrainError::NonFinite {
            phase,
            epoch,
            batch,
            op: op.to_string(),
        },
        other => TrainError::Tensor(other),
    }
}

fn finite(v: f64, phase: u8, epoch: usize, batch: usize, op: &str) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFinite {
            phase,
            epoch,
            batch,
            op: op.into(),
        })
    }
}

/// Forecast MSE / MAE of the full model over `windows`, in sequential
/// batches of `batch_size`.
pub fn evaluate(
    model: &Mantra,
    windows: &Windows,
    batch_size: usize,
    mut attention: Option<&mut AttentionStats>,
) -> Result<EvalMetrics, TensorError> {
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for idx in windows.sequential_batches(batch_size) {
        let (x, y) = windows.batch(&idx);
        let p = model.predict(&x)?;
        if let Some(a) = attention.as_deref_mut() {
            a.observe(&p.attention);
        }
        let (mse, mae) = mse_mae(&p.output, &y)?;
        se += mse * y.numel() as f64;
        ae += mae * y.numel() as f64;
        n += y.numel();
    }
    Ok(EvalMetrics {
        mse: se / n as f64,
        mae: ae / n as f64,
        n_windows: windows.len(),
    })
}

/// MSE of the persistence forecast.
pub fn persistence_mse(windows: &Windows) -> f64 {
    let all: Vec<usize> = (0..windows.len()).collect();
    let (_, y) = windows.batch(&all);
    mse_mae(&windows.persistence(&all), &y).expect("matching shapes").0
}

struct BatchLosses {
    fast: f64,
    masked: f64,
    unmasked: f64,
    slow: f64,
}

fn fast_update(
    model: &mut Mantra,
    state: &mut TrainState,
    x: &Tensor,
    y: &Tensor,
    slow: Option<&SlowFeatures>,
    aggregation: Aggregation,
    lr: f64,
) -> Result<f64, TensorError> {
    match aggregation {
        Aggregation::Independent => {
            let mut total = 0.0;
            for i in 0..model.fast.len() {
                let mut tape = Tape::new();
                let learner = &model.fast[i];
                let p = learner.params().bind(&mut tape, state.mask.fast[i])?;
                let f = learner.forward(&mut tape, &p, x, slow)?;
                let loss = half_mse(&mut tape, f.prediction, y)?;
                total += tape.value(loss).item();
                if state.mask.fast[i] {
                    let g = tape.backward(loss)?;
                    state.fast_opt[i].step(model.fast[i].params_mut(), &p.grads(&g), lr)?;
                }
            }
            Ok(total / model.fast.len() as f64)
        }
        Aggregation::ThroughUrt => {
            let mut tape = Tape::new();
            let mut bound = Vec::with_capacity(model.fast.len());
            let mut preds = Vec::with_capacity(model.fast.len());
            for (i, learner) in model.fast.iter().enumerate() {
                let p = learner.params().bind(&mut tape, state.mask.fast[i])?;
                preds.push(learner.forward(&mut tape, &p, x, slow)?.prediction);
                bound.push(p);
            }
            let up = model.urt.params().bind(&mut tape, false)?;
            let out = model.urt.forward(&mut tape, &up, &preds)?;
            state.attention.observe(&out.records);
            let loss = half_mse(&mut tape, out.output, y)?;
            let g = tape.backward(loss)?;
            for (i, p) in bound.iter().enumerate() {
                if state.mask.fast[i] {
                    state.fast_opt[i].step(model.fast[i].params_mut(), &p.grads(&g), lr)?;
                }
            }
            Ok(tape.value(loss).item())
        }
    }
}

fn phase1_batch(
    model: &mut Mantra,
    state: &mut TrainState,
    x: &Tensor,
    y: &Tensor,
    tcfg: &TrainConfig,
    scfg: &SlowConfig,
    lr: f64,
) -> Result<BatchLosses, TensorError> {
    let slow = model.slow_pass(x)?;
    let features = slow.as_ref().map(|s| &s.0);
    let agg = tcfg.phase1_aggregation;

    let fast = fast_update(model, state, x, y, features, agg, lr)?;

    let (mut masked, mut unmasked, mut slow_loss) = (0.0, 0.0, 0.0);
    if let (Some((_, delays)), Some(g)) = (&slow, model.slow.as_mut()) {
        let importance = importance_profile(delays, x.series_dims().1);
        let plan = select_mask(x, &importance, scfg.rho, scfg.epsilon, &mut state.rng)?;
        let mut tape = Tape::new();
        let p = g.params().bind(&mut tape, state.mask.slow)?;
        let recon = g.reconstruct(&mut tape, &p, &plan.masked_input)?;
        let (loss, report) = slow_losses(&mut tape, recon, x, &plan, scfg.lambda)?;
        if state.mask.slow {
            let grads = p.grads(&tape.backward(loss)?);
            state.slow_opt.as_mut().expect("slow optimiser").step(g.params_mut(), &grads, lr)?;
        }
        masked = report.loss_masked;
        unmasked = report.loss_unmasked;
        slow_loss = report.loss_total;
    }

    // L_S carries no gradient into the fast learners, so the joint update
    // reduces to a second forecast-loss step
    fast_update(model, state, x, y, features, agg, lr)?;

    Ok(BatchLosses {
        fast,
        masked,
        unmasked,
        slow: slow_loss,
    })
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Fast- and slow-learner training with early stopping on validation
/// forecast MSE; the best parameters are restored at the end.
pub fn train_phase1(
    model: &mut Mantra,
    state: &mut TrainState,
    train: &Windows,
    val: &Windows,
    tcfg: &TrainConfig,
    scfg: &SlowConfig,
) -> Result<PhaseReport, TrainError> {
    tcfg.validate()?;
    scfg.validate()?;
    state.mask = FreezeMask {
        urt: false,
        ..FreezeMask::all(model)
    };
    let initial = evaluate(model, val, tcfg.batch_size, Some(&mut state.attention)).map_err(locate(1, 0, 0))?;
    state.log(0, "1", "val", "mse", initial.mse);
    let mut report = PhaseReport {
        best_val: initial.mse,
        val_history: vec![initial.mse],
        ..PhaseReport::default()
    };
    let mut best = (model.fast.clone(), model.slow.clone());
    let mut since_best = 0;
    for epoch in 1..=tcfg.epochs {
        let lr = decayed_lr(tcfg.lr, tcfg.lr_decay, epoch - 1);
        let started = Instant::now();
        let order = shuffled(train.len(), &mut state.rng);
        let mut sums = [0.0; 4];
        let batches: Vec<&[usize]> = order.chunks(tcfg.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            let (x, y) = train.batch(idx);
            let l = phase1_batch(model, state, &x, &y, tcfg, scfg, lr).map_err(locate(1, epoch, b))?;
            finite(l.fast, 1, epoch, b, "forecast loss")?;
            finite(l.slow, 1, epoch, b, "reconstruction loss")?;
            sums[0] += l.fast;
            sums[1] += l.masked;
            sums[2] += l.unmasked;
            sums[3] += l.slow;
        }
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        let nb = batches.len().max(1) as f64;
        for (metric, s) in ["l_mse", "l_m", "l_um", "l_s"].iter().zip(sums) {
            state.log(epoch, "1", "train", metric, s / nb);
        }
        let v = evaluate(model, val, tcfg.batch_size, Some(&mut state.attention)).map_err(locate(1, epoch, 0))?;
        let v = finite(v.mse, 1, epoch, 0, "validation")?;
        state.log(epoch, "1", "val", "mse", v);
        log::info!("phase 1 epoch {epoch}: train {:.5}, val {v:.5}", sums[0] / nb);
        report.val_history.push(v);
        report.epochs_run = epoch;
        if v < report.best_val {
            report.best_val = v;
            report.best_epoch = epoch;
            best = (model.fast.clone(), model.slow.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tcfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    (model.fast, model.slow) = best;
    Ok(report)
}

/// Per-window learner predictions, flattened, computed once with frozen
/// backbones.
struct PredictionCache {
    learners: Vec<Vec<f64>>,
    targets: Vec<f64>,
    width: usize,
    shape: [usize; 2],
}

impl PredictionCache {
    fn build(model: &Mantra, windows: &Windows, batch_size: usize) -> Result<Self, TensorError> {
        let m = model.fast.len();
        let mut learners = vec![Vec::new(); m];
        let mut targets = Vec::new();
        for idx in windows.sequential_batches(batch_size) {
            let (x, y) = windows.batch(&idx);
            let slow = model.slow_pass(&x)?;
            let preds = model.learner_predictions(&x, slow.as_ref().map(|s| &s.0))?;
            for (dst, p) in learners.iter_mut().zip(preds) {
                dst.extend_from_slice(p.data());
            }
            targets.extend_from_slice(y.data());
        }
        let spec = windows.spec();
        Ok(PredictionCache {
            learners,
            targets,
            width: spec.pred_len * windows.out_dim(),
            shape: [spec.pred_len, windows.out_dim()],
        })
    }

    fn gather(&self, src: &[f64], idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.width);
        for &i in idx {
            data.extend_from_slice(&src[i * self.width..(i + 1) * self.width]);
        }
        Tensor::new(vec![idx.len(), self.shape[0], self.shape[1]], data).expect("cached values are finite")
    }

    fn batch(&self, idx: &[usize]) -> (Vec<Tensor>, Tensor) {
        (self.learners.iter().map(|l| self.gather(l, idx)).collect(), self.gather(&self.targets, idx))
    }

    fn len(&self) -> usize {
        self.targets.len() / self.width
    }

    fn evaluate(&self, model: &Mantra, batch_size: usize, attention: &mut AttentionStats) -> Result<f64, TensorError> {
        let all: Vec<usize> = (0..self.len()).collect();
        let mut se = 0.0;
        for idx in all.chunks(batch_size) {
            let (preds, y) = self.batch(idx);
            let (out, rec) = model.urt.predict(&preds)?;
            attention.observe(&rec);
            se += mse_mae(&out, &y)?.0 * y.numel() as f64;
        }
        Ok(se / self.targets.len() as f64)
    }
}

fn urt_phase(
    model: &mut Mantra,
    state: &mut TrainState,
    train: &Windows,
    val: &Windows,
    tcfg: &TrainConfig,
    epochs: usize,
    phase_name: &str,
) -> Result<PhaseReport, TrainError> {
    tcfg.validate()?;
    let setup = Instant::now();
    let train_cache = PredictionCache::build(model, train, tcfg.batch_size).map_err(locate(2, 0, 0))?;
    let val_cache = PredictionCache::build(model, val, tcfg.batch_size).map_err(locate(2, 0, 0))?;
    let initial = val_cache
        .evaluate(model, tcfg.batch_size, &mut state.attention)
        .map_err(locate(2, 0, 0))?;
    state.log(0, phase_name, "val", "mse", initial);
    let mut report = PhaseReport {
        best_val: initial,
        val_history: vec![initial],
        setup_seconds: setup.elapsed().as_secs_f64(),
        ..PhaseReport::default()
    };
    let omega = model.urt.config().omega;
    let mut best = model.urt.clone();
    let mut since_best = 0;
    for epoch in 1..=epochs {
        let lr = decayed_lr(tcfg.lr, tcfg.lr_decay, epoch - 1);
        let started = Instant::now();
        let order = shuffled(train_cache.len(), &mut state.rng);
        let (mut lsum, mut osum, mut nb) = (0.0, 0.0, 0usize);
        for (b, idx) in order.chunks(tcfg.batch_size).enumerate() {
            let (preds, y) = train_cache.batch(idx);
            let step = |model: &mut Mantra, state: &mut TrainState| -> Result<(f64, f64), TensorError> {
                let mut tape = Tape::new();
                let p = model.urt.params().bind(&mut tape, state.mask.urt)?;
                let vars = preds.iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>, _>>()?;
                let out = model.urt.forward(&mut tape, &p, &vars)?;
                state.attention.observe(&out.records);
                let mse = half_mse(&mut tape, out.output, &y)?;
                let om = orthogonality_penalty(&mut tape, out.alpha)?;
                let om_w = tape.scale(om, omega)?;
                let total = tape.add(mse, om_w)?;
                if state.mask.urt {
                    let grads = p.grads(&tape.backward(total)?);
                    state.urt_opt.step(model.urt.params_mut(), &grads, lr)?;
                }
                Ok((tape.value(mse).item(), tape.value(om).item()))
            };
            let (l, o) = step(model, state).map_err(locate(2, epoch, b))?;
            lsum += finite(l, 2, epoch, b, "forecast loss")?;
            osum += o;
            nb += 1;
        }
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        let nb = nb.max(1) as f64;
        state.log(epoch, phase_name, "train", "l_mse", lsum / nb);
        state.log(epoch, phase_name, "train", "omega", osum / nb);
        let v = val_cache
            .evaluate(model, tcfg.batch_size, &mut state.attention)
            .map_err(locate(2, epoch, 0))?;
        let v = finite(v, 2, epoch, 0, "validation")?;
        state.log(epoch, phase_name, "val", "mse", v);
        log::info!("phase {phase_name} epoch {epoch}: train {:.5}, val {v:.5}", lsum / nb);
        report.val_history.push(v);
        report.epochs_run = epoch;
        if v < report.best_val {
            report.best_val = v;
            report.best_epoch = epoch;
            best = model.urt.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tcfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    model.urt = best;
    Ok(report)
}

/// URT-only training on frozen backbone predictions, minimising the
/// forecast loss plus `omega · Ω`.
pub fn train_phase2_urt(
    model: &mut Mantra,
    state: &mut TrainState,
    train: &Windows,
    val: &Windows,
    tcfg: &TrainConfig,
) -> Result<PhaseReport, TrainError> {
    state.mask = FreezeMask::urt_only(model);
    urt_phase(model, state, train, val, tcfg, tcfg.phase2_epochs(), "2")
}

/// Both phases in order.
pub fn train(
    model: &mut Mantra,
    state: &mut TrainState,
    train: &Windows,
    val: &Windows,
    tcfg: &TrainConfig,
    scfg: &SlowConfig,
) -> Result<TrainReport, TrainError> {
    let phase1 = train_phase1(model, state, train, val, tcfg, scfg)?;
    let phase2 = train_phase2_urt(model, state, train, val, tcfg)?;
    Ok(TrainReport { phase1, phase2 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdaptReport {
    pub trainable_fraction: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub pre: EvalMetrics,
    pub post: EvalMetrics,
    pub phase: PhaseReport,
}

/// Retrains only the URT layer on post-drift windows and reports test
/// metrics before and after.
pub fn adapt_to_drift(
    model: &mut Mantra,
    train: &Windows,
    val: &Windows,
    test: &Windows,
    tcfg: &TrainConfig,
) -> Result<AdaptReport, TrainError> {
    let mut state = TrainState::new(model, tcfg.seed);
    state.mask = adaptation_freeze_mask(model);
    let pre = evaluate(model, test, tcfg.batch_size, None)?;
    let phase = urt_phase(model, &mut state, train, val, tcfg, tcfg.epochs, "adapt")?;
    let post = evaluate(model, test, tcfg.batch_size, None)?;
    Ok(AdaptReport {
        trainable_fraction: state.mask.trainable_fraction(model),
        trainable_params: state.mask.trainable_params(model),
        total_params: model.param_counts().total(),
        pre,
        post,
        phase,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochTiming {
    pub phase1: f64,
    pub phase2_setup: f64,
    pub phase2: f64,
}

impl EpochTiming {
    pub fn total(&self) -> f64 {
        self.phase1 + self.phase2_setup + self.phase2
    }
}

/// Wall-clock of one phase-1 and one phase-2 epoch of a fresh model.
pub fn time_epoch(
    cfg: &ModelConfig,
    train: &Windows,
    val: &Windows,
    tcfg: &TrainConfig,
    scfg: &SlowConfig,
) -> Result<EpochTiming, TrainError> {
    let mut model = Mantra::new(cfg)?;
    let one = TrainConfig {
        epochs: 1,
        urt_epochs: Some(1),
        ..tcfg.clone()
    };
    let mut state = TrainState::new(&model, tcfg.seed);
    let p1 = train_phase1(&mut model, &mut state, train, val, &one, scfg)?;
    let p2 = train_phase2_urt(&mut model, &mut state, train, val, &one)?;
    Ok(EpochTiming {
        phase1: p1.epoch_seconds[0],
        phase2_setup: p2.setup_seconds,
        phase2: p2.epoch_seconds[0],
    })
}

/// Wall-clock of one epoch of a single plain backbone: one forecast-loss
/// step per batch.
pub fn time_single_backbone_epoch(cfg: &ModelConfig, train: &Windows, tcfg: &TrainConfig) -> Result<f64, TrainError> {
    let mut b = Backbone::new(&cfg.backbone, HeadKind::Plain, false, cfg.seed.wrapping_add(1))?;
    let mut opt = Adam::new(b.params());
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let started = Instant::now();
    let order = shuffled(train.len(), &mut rng);
    for (i, idx) in order.chunks(tcfg.batch_size).enumerate() {
        let (x, y) = train.batch(idx);
        let mut tape = Tape::new();
        let p = b.params().bind(&mut tape, true).map_err(locate(1, 1, i))?;
        let f = b.forward(&mut tape, &p, &x, None).map_err(locate(1, 1, i))?;
        let loss = half_mse(&mut tape, f.prediction, &y).map_err(locate(1, 1, i))?;
        let grads = p.grads(&tape.backward(loss)?);
        opt.step(b.params_mut(), &grads, tcfg.lr)?;
    }
    Ok(started.elapsed().as_secs_f64())
}

/// Half-MSE of each learner and of their plain mean on `windows`.
pub fn learner_metrics(model: &Mantra, windows: &Windows, batch_size: usize) -> Result<(Vec<f64>, f64), TensorError> {
    let m = model.fast.len();
    let mut se = vec![0.0; m];
    let mut mean_se = 0.0;
    let mut n = 0usize;
    for idx in windows.sequential_batches(batch_size) {
        let (x, y) = windows.batch(&idx);
        let slow = model.slow_pass(&x)?;
        let preds = model.learner_predictions(&x, slow.as_ref().map(|s| &s.0))?;
        let mut mean = Tensor::zeros(y.shape());
        for (i, p) in preds.iter().enumerate() {
            se[i] += 2.0 * half_mse_value(p, &y)? * y.numel() as f64;
            for (a, v) in mean.data_mut().iter_mut().zip(p.data()) {
                *a += v / m as f64;
            }
        }
        mean_se += mse_mae(&mean, &y)?.0 * y.numel() as f64;
        n += y.numel();
    }
    Ok((se.iter().map(|s| s / n as f64).collect(), mean_se / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::{Dataset, FeatureMode, WindowSpec};
    use crate::ensemble::EnsembleConfig;
    use crate::urt::UrtConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_len: 8,
                pred_len: 4,
                d_model: 8,
                d_ff: 8,
                enc_layers: 1,
                dec_layers: 1,
                heads: 2,
                kernel: 3,
                c: 1.0,
                in_dim: 1,
                out_dim: 1,
                target_index: 0,
            },
            ensemble: EnsembleConfig {
                learners: 2,
                ..EnsembleConfig::default()
            },
            urt: UrtConfig::default(),
            seed: 3,
        }
    }

    fn windows(len: usize, phase: f64) -> Windows {
        let v: Vec<f64> = (0..len).map(|t| (t as f64 * 0.5 + phase).sin()).collect();
        let ds = Dataset::new(v, vec!["value".into()], None).unwrap();
        let spec = WindowSpec {
            input_len: 8,
            pred_len: 4,
            stride: 1,
        };
        Windows::new(&ds, spec, FeatureMode::S).unwrap()
    }

    fn tcfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            patience: 10,
            ..TrainConfig::default()
        }
    }

    fn run(t: &TrainConfig) -> (Mantra, TrainReport, TrainState) {
        let mut m = Mantra::new(&cfg()).unwrap();
        let mut st = TrainState::new(&m, t.seed);
        let r = train(&mut m, &mut st, &windows(40, 0.0), &windows(24, 1.0), t, &SlowConfig::default()).unwrap();
        (m, r, st)
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let t = TrainConfig { lr: 0.0, ..tcfg(2) };
        let (m, _, _) = run(&t);
        assert_eq!(m, Mantra::new(&cfg()).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let (a, ra, sa) = run(&tcfg(2));
        let (b, rb, sb) = run(&tcfg(2));
        assert_eq!(a, b);
        assert_eq!(ra.phase1.val_history, rb.phase1.val_history);
        assert_eq!(ra.phase2.val_history, rb.phase2.val_history);
        let strip = |s: &TrainState| s.losses.iter().map(|l| (l.metric.clone(), l.value)).collect::<Vec<_>>();
        assert_eq!(strip(&sa), strip(&sb));
    }

    #[test]
    fn phases_respect_freezing() {
        let mut m = Mantra::new(&cfg()).unwrap();
        let urt0 = m.urt.clone();
        let mut st = TrainState::new(&m, 0);
        let (tr, va) = (windows(40, 0.0), windows(24, 1.0));
        train_phase1(&mut m, &mut st, &tr, &va, &tcfg(1), &SlowConfig::default()).unwrap();
        assert_eq!(m.urt, urt0);
        let fresh = Mantra::new(&cfg()).unwrap();
        assert_ne!(m.fast, fresh.fast);
        assert_ne!(m.slow, fresh.slow);
        let (fast1, slow1) = (m.fast.clone(), m.slow.clone());
        train_phase2_urt(&mut m, &mut st, &tr, &va, &tcfg(2)).unwrap();
        assert_eq!(m.fast, fast1);
        assert_eq!(m.slow, slow1);
    }

    #[test]
    fn phase2_starts_from_phase1_best() {
        let (_, r, _) = run(&tcfg(2));
        assert!((r.phase2.val_history[0] - r.phase1.best_val).abs() < 1e-12);
        assert!(r.phase2.best_val <= r.phase2.val_history[0]);
    }

    #[test]
    fn early_stopping_waits_for_patience() {
        let t = TrainConfig {
            lr: 0.0,
            patience: 2,
            ..tcfg(6)
        };
        let (_, r, _) = run(&t);
        assert!(r.phase1.stopped_early);
        assert_eq!(r.phase1.epochs_run, 2);
        assert_eq!(r.phase1.best_epoch, 0);
    }

    #[test]
    fn zero_epoch_adaptation_is_identity() {
        let (mut m, _, _) = run(&tcfg(1));
        let before = m.clone();
        let w = windows(30, 2.0);
        let r = adapt_to_drift(&mut m, &w, &w, &w, &tcfg(0)).unwrap();
        assert_eq!(m, before);
        assert_eq!(r.pre, r.post);
        assert_eq!(r.trainable_params, m.param_counts().urt);
    }

    #[test]
    fn adaptation_touches_only_the_urt() {
        let (mut m, _, _) = run(&tcfg(1));
        let before = m.clone();
        let w = windows(30, 2.0);
        let t = TrainConfig { patience: 5, ..tcfg(2) };
        adapt_to_drift(&mut m, &w, &w, &w, &t).unwrap();
        assert_eq!(m.fast, before.fast);
        assert_eq!(m.slow, before.slow);
    }

    #[test]
    fn attention_rows_stay_convex() {
        let (_, _, st) = run(&tcfg(2));
        assert!(st.attention.batches > 0);
        assert!(st.attention.holds(1e-9), "{:?}", st.attention);
    }

    #[test]
    fn through_urt_mode_trains() {
        let t = TrainConfig {
            phase1_aggregation: Aggregation::ThroughUrt,
            ..tcfg(1)
        };
        let (m, r, _) = run(&t);
        assert!(r.phase1.val_history.iter().all(|v| v.is_finite()));
        assert_ne!(m.fast, Mantra::new(&cfg()).unwrap().fast);
    }

    #[test]
    fn divergence_is_reported_with_location() {
        let t = TrainConfig {
            lr: 1e300,
            lr_decay: 1.0,
            ..tcfg(3)
        };
        let mut m = Mantra::new(&cfg()).unwrap();
        let mut st = TrainState::new(&m, 0);
        let err = train(&mut m, &mut st, &windows(40, 0.0), &windows(24, 1.0), &t, &SlowConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { .. }), "{err}");
    }

    #[test]
    fn loss_log_has_header_and_rows() {
        let (_, _, st) = run(&tcfg(1));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("losses.csv");
        write_losses_csv(&st.losses, &p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.starts_with("epoch,phase,split,metric,value\n"));
        for m in ["l_mse", "l_m", "l_um", "l_s", "omega"] {
            assert!(text.contains(&format!(",train,{m},")), "{m}");
        }
    }

    #[test]
    fn bad_config_rejected() {
        assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
