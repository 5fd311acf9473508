//! Period-based dependency discovery and time-delay aggregation.
//!
//! Scores are circular cross-correlations `R(τ) = (1/d) Σ_c Σ_t q[t+τ, c] k[t, c]`
//! for `τ ∈ 1..=L` (lag `L` is lag 0). The forward pass computes them with an
//! FFT; the backward pass uses the bilinear form directly, touching only the
//! selected delays. The number of delays kept is `max(1, ⌊c·ln L⌋)`, the usual
//! Autoformer rule.

use std::cell::RefCell;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::tensor::{invalid, shape_err, Bound, CustomOp, Linear, ParamStore, Tape, Tensor, TensorError, Var};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(len: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(len), p.plan_fft_inverse(len))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoCorrConfig {
    /// Top-k factor.
    pub c: f64,
    pub heads: usize,
    pub d_model: usize,
}

impl AutoCorrConfig {
    pub fn d_keys(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(invalid(
                "auto_correlation",
                format!("d_model {} not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        if !(self.c > 0.0) {
            return Err(invalid("auto_correlation", "factor c must be positive"));
        }
        if !(1.0..=3.0).contains(&self.c) {
            log::warn!("auto-correlation factor c={} outside the usual [1, 3] range", self.c);
        }
        Ok(())
    }
}

/// Selected delays and their softmax weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DelaySet {
    pub delays: Vec<usize>,
    pub weights: Vec<f64>,
}

/// `max(1, ⌊c·ln L⌋)`, capped at `L`.
pub fn top_k_count(len: usize, c: f64) -> usize {
    let k = (c * (len as f64).ln()).floor();
    (if k < 1.0 { 1 } else { k as usize }).min(len.max(1))
}

/// Scores for every delay `τ = 1..=L` (index `τ - 1`), averaged over the
/// channels `[start, start + width)` of `[L, feat]` row-major blocks.
fn scores_fft(q: &[f64], k: &[f64], len: usize, feat: usize, start: usize, width: usize) -> Vec<f64> {
    let (fwd, inv) = plans(len);
    let mut acc = vec![Complex::new(0.0, 0.0); len];
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for c in start..start + width {
        for t in 0..len {
            buf[t] = Complex::new(q[t * feat + c], k[t * feat + c]);
        }
        fwd.process(&mut buf);
        // unpack two real transforms from one complex transform
        for f in 0..len {
            let z = buf[f];
            let zr = buf[(len - f) % len].conj();
            let qf = (z + zr) * 0.5;
            let kf = (z - zr) * Complex::new(0.0, -0.5);
            acc[f] += qf * kf.conj();
        }
    }
    inv.process(&mut acc);
    let norm = 1.0 / (len as f64 * width as f64);
    (1..=len).map(|tau| acc[tau % len].re * norm).collect()
}

/// Circular correlation scores between two `[L, d]` series, one per delay
/// `τ = 1..=L`.
pub fn autocorrelation_scores(q: &Tensor, k: &Tensor) -> Result<Vec<f64>, TensorError> {
    if q.shape() != k.shape() {
        return Err(shape_err("autocorrelation_scores", format!("{:?} vs {:?}", q.shape(), k.shape())));
    }
    let (outer, len, feat) = q.series_dims();
    if outer != 1 {
        return Err(shape_err("autocorrelation_scores", "expected a single series"));
    }
    Ok(scores_fft(q.data(), k.data(), len, feat, 0, feat))
}

/// Relative gap below which two scores count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Keeps the `max(1, ⌊c·ln L⌋)` highest-scoring delays and softmaxes their
/// raw scores. Scores within [`TIE_TOLERANCE`] of the best remaining one are
/// tied and go to the shorter delay, so rounding noise on mathematically
/// equal lags cannot flip the selection.
pub fn top_k_delays(scores: &[f64], len: usize, c: f64) -> DelaySet {
    let k = top_k_count(len, c).min(scores.len());
    let scale = scores.iter().fold(1.0f64, |m, s| m.max(s.abs()));
    let tol = TIE_TOLERANCE * scale;
    let mut taken = vec![false; scores.len()];
    let mut order = Vec::with_capacity(k);
    for _ in 0..k {
        let best = (0..scores.len())
            .filter(|&i| !taken[i])
            .map(|i| scores[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let pick = (0..scores.len())
            .find(|&i| !taken[i] && scores[i] >= best - tol)
            .expect("k never exceeds the number of scores");
        taken[pick] = true;
        order.push(pick);
    }
    let mut weights: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    crate::tensor::softmax_in_place(&mut weights);
    DelaySet {
        delays: order.iter().map(|&i| i + 1).collect(),
        weights,
    }
}

struct AutoCorrOp {
    outer: usize,
    len: usize,
    feat: usize,
    heads: usize,
    picks: Vec<DelaySet>,
}

impl CustomOp for AutoCorrOp {
    fn name(&self) -> &'static str {
        "auto_correlation"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let (len, feat) = (self.len, self.feat);
        let dk = feat / self.heads;
        let n = q.len();
        let (mut gq, mut gk, mut gv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for o in 0..self.outer {
            let base = o * len * feat;
            for h in 0..self.heads {
                let pick = &self.picks[o * self.heads + h];
                let ch = h * dk..(h + 1) * dk;
                // d loss / d weight_i, then through the softmax
                let mut gw = vec![0.0; pick.delays.len()];
                for (i, (&tau, &w)) in pick.delays.iter().zip(&pick.weights).enumerate() {
                    for t in 0..len {
                        let src = base + ((t + tau) % len) * feat;
                        let dst = base + t * feat;
                        for c in ch.clone() {
                            gw[i] += g[dst + c] * v[src + c];
                            gv[src + c] += w * g[dst + c];
                        }
                    }
                }
                let dot: f64 = gw.iter().zip(&pick.weights).map(|(a, b)| a * b).sum();
                let inv = 1.0 / dk as f64;
                for (i, &tau) in pick.delays.iter().enumerate() {
                    let gr = pick.weights[i] * (gw[i] - dot) * inv;
                    for t in 0..len {
                        let shifted = base + ((t + tau) % len) * feat;
                        let at = base + t * feat;
                        for c in ch.clone() {
                            gq[shifted + c] += gr * k[at + c];
                            gk[at + c] += gr * q[shifted + c];
                        }
                    }
                }
            }
        }
        vec![Some(gq), Some(gk), Some(gv)]
    }
}

/// Multi-head delay aggregation on a tape. `k` and `v` are truncated or
/// zero-padded in time to `q`'s length; channels are split evenly across
/// `heads`. Returns the output (shape of `q`) and one [`DelaySet`] per
/// (series, head), series-major.
pub fn auto_correlation(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    c: f64,
) -> Result<(Var, Vec<DelaySet>), TensorError> {
    let qshape = tape.shape(q).to_vec();
    let (outer, len, feat) = tape.value(q).series_dims();
    let k = tape.fit_time(k, len)?;
    let v = tape.fit_time(v, len)?;
    if tape.shape(k) != qshape.as_slice() || tape.shape(v) != qshape.as_slice() {
        return Err(shape_err(
            "auto_correlation",
            format!("q {:?}, k {:?}, v {:?}", qshape, tape.shape(k), tape.shape(v)),
        ));
    }
    if heads == 0 || feat % heads != 0 {
        return Err(invalid("auto_correlation", format!("{feat} channels over {heads} heads")));
    }
    let dk = feat / heads;
    let (qd, kd, vd) = (tape.value(q).data(), tape.value(k).data(), tape.value(v).data());
    let mut out = vec![0.0; qd.len()];
    let mut picks = Vec::with_capacity(outer * heads);
    for o in 0..outer {
        let base = o * len * feat;
        let block = base..base + len * feat;
        for h in 0..heads {
            let scores = scores_fft(&qd[block.clone()], &kd[block.clone()], len, feat, h * dk, dk);
            let pick = top_k_delays(&scores, len, c);
            for (&tau, &w) in pick.delays.iter().zip(&pick.weights) {
                for t in 0..len {
                    let src = base + ((t + tau) % len) * feat;
                    let dst = base + t * feat;
                    for ch in h * dk..(h + 1) * dk {
                        out[dst + ch] += w * vd[src + ch];
                    }
                }
            }
            picks.push(pick);
        }
    }
    let op = AutoCorrOp {
        outer,
        len,
        feat,
        heads,
        picks: picks.clone(),
    };
    let y = tape.custom(&[q, k, v], Tensor::new(qshape, out)?, Box::new(op))?;
    Ok((y, picks))
}

/// Single-head block on plain tensors: `Σ_i roll(v, τ_i) · w_i`.
pub fn autocorrelation_block(q: &Tensor, k: &Tensor, v: &Tensor, c: f64) -> Result<(Tensor, DelaySet), TensorError> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone())?, tape.constant(k.clone())?, tape.constant(v.clone())?);
    let (y, mut picks) = auto_correlation(&mut tape, qv, kv, vv, 1, c)?;
    Ok((tape.value(y).clone(), picks.swap_remove(0)))
}

/// Projections around [`auto_correlation`]: per-head Q/K/V maps, delay
/// aggregation, concatenated heads, output map back to `d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoCorrelationLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub c: f64,
}

impl AutoCorrelationLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &AutoCorrConfig, rng: &mut R) -> Result<Self, TensorError> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(AutoCorrelationLayer {
            query: Linear::new(store, &format!("{name}.query"), d, d, true, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, true, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, true, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, true, rng),
            heads: cfg.heads,
            c: cfg.c,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        xq: Var,
        xk: Var,
        xv: Var,
    ) -> Result<(Var, Vec<DelaySet>), TensorError> {
        let q = self.query.forward(tape, p, xq)?;
        let k = self.key.forward(tape, p, xk)?;
        let v = self.value.forward(tape, p, xv)?;
        let (agg, picks) = auto_correlation(tape, q, k, v, self.heads, self.c)?;
        Ok((self.out.forward(tape, p, agg)?, picks))
    }

    pub fn num_params(&self) -> usize {
        self.query.num_params() + self.key.num_params() + self.value.num_params() + self.out.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(len: usize, period: f64) -> Tensor {
        Tensor::column(&(0..len).map(|t| (2.0 * PI * t as f64 / period).sin()).collect::<Vec<_>>())
    }

    #[test]
    fn k_rule() {
        assert_eq!(top_k_count(96, 2.0), 9);
        assert_eq!(top_k_count(2, 1.0), 1);
        assert_eq!(top_k_count(16, 1.0), 2);
    }

    #[test]
    fn period_eight_peaks_at_eight_and_sixteen() {
        let x = sine(16, 8.0);
        let r = autocorrelation_scores(&x, &x).unwrap();
        let pick = top_k_delays(&r, 16, 1.0);
        let mut d = pick.delays.clone();
        d.sort();
        assert_eq!(d, vec![8, 16]);
        assert!((pick.weights[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn constant_series_scores_equal() {
        let x = Tensor::column(&[2.0; 10]);
        let r = autocorrelation_scores(&x, &x).unwrap();
        for v in &r {
            assert!((v - r[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_and_tie_weights() {
        let mut r = vec![0.0; 8];
        r[4] = 3.0;
        let pick = top_k_delays(&r, 2, 1.0);
        assert_eq!(pick.delays, vec![5]);
        assert_eq!(pick.weights, vec![1.0]);
        let tie = top_k_delays(&[1.0, 0.2, 1.0, 0.1], 8, 1.0);
        assert_eq!(tie.delays, vec![1, 3]);
        assert_eq!(tie.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn constant_value_is_a_fixed_point() {
        let q = sine(12, 5.0);
        let v = Tensor::column(&[3.0; 12]);
        let (out, _) = autocorrelation_block(&q, &q, &v, 2.0).unwrap();
        for x in out.data() {
            assert!((x - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn period_eight_sinusoid_block_is_identity() {
        let x = sine(16, 8.0);
        let (out, _) = autocorrelation_block(&x, &x, &x, 1.0).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_shapes_error() {
        let a = Tensor::zeros(&[4, 2]);
        let b = Tensor::zeros(&[4, 3]);
        assert!(autocorrelation_scores(&a, &b).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = AutoCorrConfig { c: 1.0, heads: 3, d_model: 8 };
        assert!(cfg.validate().is_err());
    }
}
