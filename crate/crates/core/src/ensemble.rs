//! Fast-learner array, slow-feature fusion and the supervised loss.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, HeadKind, SlowFeatures};
use crate::tensor::{invalid, shape_err, Bound, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Number of fast learners `M`.
    pub learners: usize,
    /// Explicit initialisation seeds, one per fast learner.
    pub seeds: Option<Vec<u64>>,
    /// Concatenate slow-learner features into each fast head.
    pub fuse_slow: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            learners: 3,
            seeds: None,
            fuse_slow: true,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.learners == 0 {
            return Err(invalid("ensemble", "need at least one fast learner"));
        }
        if let Some(seeds) = &self.seeds {
            if seeds.len() != self.learners {
                return Err(invalid("ensemble", format!("{} seeds for {} learners", seeds.len(), self.learners)));
            }
            let mut sorted = seeds.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != seeds.len() {
                return Err(invalid("ensemble", "fast-learner seeds must be distinct"));
            }
        }
        Ok(())
    }

    /// Explicit seeds, or `base + 1 ..= base + M`.
    pub fn learner_seeds(&self, base: u64) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (1..=self.learners as u64).map(|i| base.wrapping_add(i)).collect(),
        }
    }

    pub fn head_kind(&self) -> HeadKind {
        if self.fuse_slow {
            HeadKind::Fused
        } else {
            HeadKind::Plain
        }
    }
}

/// `mean(½ (pred − target)²)` over batch, horizon and channels.
pub fn half_mse(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var, TensorError> {
    if tape.shape(pred) != target.shape() {
        return Err(shape_err("half_mse", format!("{:?} vs {:?}", tape.shape(pred), target.shape())));
    }
    let y = tape.constant(target.clone())?;
    let d = tape.sub(pred, y)?;
    let sq = tape.mul(d, d)?;
    let m = tape.mean(sq)?;
    tape.scale(m, 0.5)
}

pub fn half_mse_value(pred: &Tensor, target: &Tensor) -> Result<f64, TensorError> {
    if pred.shape() != target.shape() {
        return Err(shape_err("half_mse", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(0.5 * s / pred.numel() as f64)
}

/// Runs the slow learner (when given) and feeds its features, cut off from
/// the tape, into the fast learner's head.
pub fn fuse_and_predict(
    tape: &mut Tape,
    fast: &Backbone,
    fast_params: &Bound,
    slow: Option<(&Backbone, &Bound)>,
    x: &Tensor,
) -> Result<Var, TensorError> {
    let features = match slow {
        Some((g, gp)) => {
            let (fc, gc) = (fast.config(), g.config());
            if fc.input_len != gc.input_len || fc.pred_len != gc.pred_len || fc.out_dim != gc.out_dim {
                return Err(shape_err("fuse_and_predict", "fast and slow learners differ in time geometry"));
            }
            let f = g.forward(tape, gp, x, None)?;
            Some(SlowFeatures {
                seasonal: tape.value(f.seasonal).clone(),
                trend: tape.value(f.trend).clone(),
            })
        }
        None => None,
    };
    Ok(fast.forward(tape, fast_params, x, features.as_ref())?.prediction)
}
