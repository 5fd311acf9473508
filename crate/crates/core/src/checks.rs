//! Finite-difference gradient suite over every tape operation and the full
//! model forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autocorrelation::auto_correlation;
use crate::backbone::BackboneConfig;
use crate::decomposition::decompose;
use crate::ensemble::{half_mse, EnsembleConfig};
use crate::model::{Mantra, ModelConfig};
use crate::slow::{select_mask, slow_losses};
use crate::tensor::{grad_check, grad_check_sampled, Tape, Tensor, TensorError, Var};
use crate::urt::{orthogonality_penalty, UrtConfig};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub draws: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// The tiny configuration used for the whole-model check.
pub fn tiny_model_config(seed: u64) -> ModelConfig {
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
        seed,
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("finite")
}

/// `Σ w ⊙ y` with fixed random weights, so every output element matters.
fn probe(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var, TensorError> {
    let wv = tape.constant(w.clone())?;
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

type Case = fn(&mut ChaCha8Rng) -> Result<f64, TensorError>;

macro_rules! unary {
    ($rng:ident, $shape:expr, |$tape:ident, $x:ident| $body:expr) => {{
        let shape: Vec<usize> = $shape;
        let x0 = randn($rng, &shape);
        let probe_w = std::cell::RefCell::new(None::<Tensor>);
        let r = grad_check(
            |$tape: &mut Tape, $x: Var| {
                let y: Var = $body?;
                let mut w = probe_w.borrow_mut();
                let w = w.get_or_insert_with(|| {
                    let n: usize = $tape.shape(y).iter().product();
                    let mut r = ChaCha8Rng::seed_from_u64(n as u64);
                    randn(&mut r, $tape.shape(y))
                });
                probe($tape, y, w)
            },
            &x0,
            STEP,
        )?;
        Ok(r.max_rel_error)
    }};
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn case_add(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let s = vec![dims(rng, 1, 4), dims(rng, 1, 4)];
    let other = randn(rng, &s);
    unary!(rng, s, |t, x| {
        let o = t.constant(other.clone())?;
        let a = t.add(x, o)?;
        let b = t.sub(a, x)?;
        let c = t.sub(b, x)?;
        t.add(c, a)
    })
}

fn case_mul_scale(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let s = vec![dims(rng, 1, 4), dims(rng, 1, 4)];
    let f = rng.gen_range(-2.0..2.0);
    unary!(rng, s, |t, x| {
        let sq = t.mul(x, x)?;
        t.scale(sq, f)
    })
}

fn case_matmul(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let (n, k, m) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
    let b = randn(rng, &[k, m]);
    unary!(rng, vec![n, k], |t, x| {
        let bv = t.constant(b.clone())?;
        let y = t.matmul(x, bv)?;
        let xt = t.transpose(x)?;
        let g = t.matmul(xt, x)?;
        let s = t.sum(g)?;
        let y2 = t.mul(y, y)?;
        let ys = t.sum(y2)?;
        let a = t.add(s, ys)?;
        t.reshape(a, &[1])
    })
}

fn case_linear(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let (n, l, i, o) = (dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
    let w = randn(rng, &[i, o]);
    let b = randn(rng, &[o]);
    unary!(rng, vec![n, l, i], |t, x| {
        let wv = t.param(w.clone())?;
        let bv = t.param(b.clone())?;
        let y = t.linear(x, wv, Some(bv))?;
        t.gelu(y)
    })
}

fn case_shape_ops(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let (n, l, d) = (dims(rng, 1, 3), dims(rng, 3, 6), dims(rng, 1, 3));
    let start = rng.gen_range(0..l - 1);
    let len = rng.gen_range(1..=l - start);
    let target = dims(rng, 1, 2 * l);
    unary!(rng, vec![n, l, d], |t, x| {
        let c = t.concat(&[x, x], 2)?;
        let s = t.slice(c, 2, 1, d)?;
        let st = t.slice_time(s, start, len)?;
        let f = t.fit_time(st, target)?;
        let r = t.reshape(f, &[n * target * d])?;
        let ma = t.mean_axis(x, 1)?;
        let mr = t.reshape(ma, &[n * d])?;
        t.concat(&[r, mr], 0)
    })
}

fn case_softmax(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let s = vec![dims(rng, 1, 3), dims(rng, 2, 6)];
    unary!(rng, s, |t, x| t.softmax(x))
}

fn case_pool_roll(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let (n, l, d) = (dims(rng, 1, 2), dims(rng, 4, 10), dims(rng, 1, 3));
    let kernel = 2 * rng.gen_range(0..=(l - 1) / 2) + 1;
    let tau = rng.gen_range(0..l);
    unary!(rng, vec![n, l, d], |t, x| {
        let p = t.avg_pool_1d(x, kernel)?;
        t.roll(p, tau)
    })
}

fn case_decompose(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let (n, l, d) = (dims(rng, 1, 2), dims(rng, 4, 12), dims(rng, 1, 3));
    let kernel = 2 * rng.gen_range(0..=(l - 1) / 2) + 1;
    unary!(rng, vec![n, l, d], |t, x| {
        let (s, c) = decompose(t, x, kernel)?;
        let sc = t.mul(s, c)?;
        t.add(sc, s)
    })
}

fn case_auto_correlation(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let (n, l, heads) = (dims(rng, 1, 2), dims(rng, 4, 12), dims(rng, 1, 2));
    let d = heads * dims(rng, 1, 2);
    // q, k and v packed side by side along the feature axis
    unary!(rng, vec![n, l, 3 * d], |t, x| {
        let q = t.slice(x, 2, 0, d)?;
        let k = t.slice(x, 2, d, d)?;
        let v = t.slice(x, 2, 2 * d, d)?;
        Ok::<Var, TensorError>(auto_correlation(t, q, k, v, heads, 1.0)?.0)
    })
}

fn case_losses(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let (n, l) = (dims(rng, 1, 3), dims(rng, 4, 10));
    let target = randn(rng, &[n, l, 1]);
    let x_true = randn(rng, &[n, l, 1]);
    let scores: Vec<f64> = (0..l).map(|_| rng.gen()).collect();
    let plan = select_mask(&x_true, &scores, 0.3, 0.3, rng)?;
    let lambda = rng.gen_range(0.0..=1.0);
    let x0 = randn(rng, &[n, l, 1]);
    let r = grad_check(
        |t, x| {
            let a = half_mse(t, x, &target)?;
            let (b, _) = slow_losses(t, x, &x_true, &plan, lambda)?;
            t.add(a, b)
        },
        &x0,
        STEP,
    )?;
    Ok(r.max_rel_error)
}

fn case_orthogonality(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let (s, m) = (dims(rng, 1, 4), dims(rng, 2, 4));
    let x0 = randn(rng, &[s, m]);
    let r = grad_check(
        |t, x| {
            let a = t.softmax(x)?;
            orthogonality_penalty(t, a)
        },
        &x0,
        STEP,
    )?;
    Ok(r.max_rel_error)
}

const SAMPLED: usize = 48;

/// Loss of the whole forward pass (fast learners with fused slow features,
/// URT, `L_MSE + ω·Ω`) against a flat vector of all trainable parameters.
fn case_model(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let cfg = tiny_model_config(rng.gen());
    let model = Mantra::new(&cfg)?;
    let n = dims(rng, 1, 3);
    let x = randn(rng, &[n, 8, 1]);
    let y = randn(rng, &[n, 4, 1]);
    let slow = model.slow_pass(&x)?.map(|s| s.0);
    let mut stores: Vec<_> = model.fast.iter().map(|f| f.params()).collect();
    stores.push(model.urt.params());
    let sizes: Vec<usize> = stores.iter().map(|s| s.num_scalars()).collect();
    let flat: Vec<f64> = stores.iter().flat_map(|s| s.flatten().into_data()).collect();
    let total = flat.len();
    let theta = Tensor::new(vec![total], flat)?;
    let picks: Vec<usize> = rand::seq::index::sample(rng, total, SAMPLED.min(total)).into_vec();
    let omega = cfg.urt.omega;
    let r = grad_check_sampled(
        |t, th| {
            let mut off = 0;
            let mut bound = Vec::new();
            for (s, &len) in stores.iter().zip(&sizes) {
                let part = t.slice(th, 0, off, len)?;
                bound.push(s.bind_flat(t, part)?);
                off += len;
            }
            let mut preds = Vec::new();
            for (i, f) in model.fast.iter().enumerate() {
                preds.push(f.forward(t, &bound[i], &x, slow.as_ref())?.prediction);
            }
            let out = model.urt.forward(t, bound.last().expect("urt"), &preds)?;
            let l = half_mse(t, out.output, &y)?;
            let om = orthogonality_penalty(t, out.alpha)?;
            let om = t.scale(om, omega)?;
            t.add(l, om)
        },
        &theta,
        STEP,
        &picks,
    )?;
    Ok(r.max_rel_error)
}

/// Reconstruction loss of the slow learner against its own parameters.
fn case_slow_learner(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let cfg = tiny_model_config(rng.gen());
    let model = Mantra::new(&cfg)?;
    let g = model.slow.as_ref().expect("fusion enabled");
    let n = dims(rng, 1, 2);
    let x = randn(rng, &[n, 8, 1]);
    let scores: Vec<f64> = (0..8).map(|_| rng.gen()).collect();
    let plan = select_mask(&x, &scores, 0.25, 0.3, rng)?;
    let theta = g.params().flatten();
    let picks: Vec<usize> = rand::seq::index::sample(rng, theta.numel(), SAMPLED.min(theta.numel())).into_vec();
    let r = grad_check_sampled(
        |t, th| {
            let p = g.params().bind_flat(t, th)?;
            let out = g.reconstruct(t, &p, &plan.masked_input)?;
            Ok::<Var, TensorError>(slow_losses(t, out, &x, &plan, 0.5)?.0)
        },
        &theta,
        STEP,
        &picks,
    )?;
    Ok(r.max_rel_error)
}

pub const CASES: &[(&str, Case)] = &[
    ("add_sub", case_add),
    ("mul_scale", case_mul_scale),
    ("matmul_transpose", case_matmul),
    ("linear_gelu", case_linear),
    ("concat_slice_reshape_mean", case_shape_ops),
    ("softmax", case_softmax),
    ("avg_pool_roll", case_pool_roll),
    ("decompose", case_decompose),
    ("auto_correlation", case_auto_correlation),
    ("half_mse_slow_loss", case_losses),
    ("orthogonality", case_orthogonality),
    ("slow_learner", case_slow_learner),
    ("full_model", case_model),
];

/// Runs every case `draws` times with fresh random inputs.
pub fn run_suite(draws: usize, seed: u64) -> Result<Vec<CheckResult>, TensorError> {
    let mut out = Vec::new();
    for (i, (name, case)) in CASES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64 * 7919));
        let mut worst: f64 = 0.0;
        for _ in 0..draws {
            worst = worst.max(case(&mut rng)?);
        }
        out.push(CheckResult {
            name: (*name).into(),
            draws,
            max_rel_error: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(out)
}
