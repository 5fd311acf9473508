//! Controlled masked reconstruction for the slow learner.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autocorrelation::DelaySet;
use crate::tensor::{invalid, shape_err, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlowConfig {
    /// Masked fraction of the lookback window.
    pub rho: f64,
    /// Per-slot probability of swapping an important timestep for a random one.
    pub epsilon: f64,
    /// Weight of the masked-position loss.
    pub lambda: f64,
}

impl Default for SlowConfig {
    fn default() -> Self {
        SlowConfig {
            rho: 0.15,
            epsilon: 0.3,
            lambda: 0.5,
        }
    }
}

impl SlowConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(invalid("slow", format!("rho {} outside (0, 1)", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(invalid("slow", format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid("slow", format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Per-timestep importance from selected delays: the weight of delay `τ`
/// lands on timestep `τ mod len`. Averaged over the given delay sets.
pub fn importance_profile(sets: &[DelaySet], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    if sets.is_empty() || len == 0 {
        return out;
    }
    for set in sets {
        for (&tau, &w) in set.delays.iter().zip(&set.weights) {
            out[tau % len] += w;
        }
    }
    let inv = 1.0 / sets.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// `true` where the timestep is masked.
    pub mask: Vec<bool>,
    /// Input with masked timesteps zeroed (all series, all channels).
    pub masked_input: Tensor,
    pub rho: f64,
    pub epsilon: f64,
}

impl MaskPlan {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Builds a plan from an explicit mask.
    pub fn from_mask(x: &Tensor, mask: Vec<bool>, rho: f64, epsilon: f64) -> Result<Self, TensorError> {
        let (outer, len, feat) = x.series_dims();
        if mask.len() != len {
            return Err(shape_err("mask", format!("mask of {} for {len} steps", mask.len())));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 || count == len {
            return Err(invalid("mask", format!("{count} of {len} masked; both parts must be nonempty")));
        }
        let mut data = x.data().to_vec();
        for o in 0..outer {
            for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                let s = (o * len + t) * feat;
                data[s..s + feat].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(MaskPlan {
            mask,
            masked_input: Tensor::new(x.shape().to_vec(), data)?,
            rho,
            epsilon,
        })
    }
}

/// `round(rho * len)`, rejected when it leaves either part empty.
pub fn mask_count(len: usize, rho: f64) -> Result<usize, TensorError> {
    let n = (rho * len as f64).round();
    if !(n >= 1.0 && n <= len as f64 - 1.0) {
        return Err(invalid(
            "select_mask",
            format!("rho {rho} on {len} steps masks {n}; need between 1 and {}", len.saturating_sub(1)),
        ));
    }
    Ok(n as usize)
}

/// Masks the `round(rho·T)` most important timesteps (ties broken at
/// random). Each slot is independently, with probability `epsilon`,
/// redrawn uniformly from the timesteps not otherwise kept.
pub fn select_mask<R: Rng>(
    x: &Tensor,
    scores: &[f64],
    rho: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<MaskPlan, TensorError> {
    let (_, len, _) = x.series_dims();
    if scores.len() != len {
        return Err(shape_err("select_mask", format!("{} scores for {len} steps", scores.len())));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(invalid("select_mask", format!("epsilon {epsilon} outside [0, 1]")));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(invalid("select_mask", format!("rho {rho} outside (0, 1)")));
    }
    let count = mask_count(len, rho)?;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut mask = vec![false; len];
    let mut redraw = 0;
    for &t in &order[..count] {
        if rng.gen_bool(epsilon) {
            redraw += 1;
        } else {
            mask[t] = true;
        }
    }
    if redraw > 0 {
        let pool: Vec<usize> = (0..len).filter(|&t| !mask[t]).collect();
        for i in index::sample(rng, pool.len(), redraw) {
            mask[pool[i]] = true;
        }
    }
    MaskPlan::from_mask(x, mask, rho, epsilon)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlowLossReport {
    pub loss_masked: f64,
    pub loss_unmasked: f64,
    pub loss_total: f64,
    pub lambda: f64,
}

fn check_pair(g_shape: &[usize], x: &Tensor, plan: &MaskPlan, lambda: f64) -> Result<(), TensorError> {
    if g_shape != x.shape() {
        return Err(shape_err("slow_losses", format!("{g_shape:?} vs {:?}", x.shape())));
    }
    if plan.mask.len() != x.series_dims().1 {
        return Err(shape_err("slow_losses", "mask length differs from series length"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid("slow_losses", format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// Masked / unmasked reconstruction MSE, each averaged over its own
/// positions, channels and batch.
pub fn slow_loss_report(g_out: &Tensor, x: &Tensor, plan: &MaskPlan, lambda: f64) -> Result<SlowLossReport, TensorError> {
    check_pair(g_out.shape(), x, plan, lambda)?;
    let (outer, len, feat) = x.series_dims();
    let (mut sm, mut su) = (0.0, 0.0);
    for o in 0..outer {
        for t in 0..len {
            let s = (o * len + t) * feat;
            let e: f64 = (s..s + feat).map(|i| (g_out.data()[i] - x.data()[i]).powi(2)).sum();
            if plan.mask[t] {
                sm += e;
            } else {
                su += e;
            }
        }
    }
    let cnt = plan.count();
    let lm = sm / (outer * feat * cnt) as f64;
    let lum = su / (outer * feat * (len - cnt)) as f64;
    Ok(SlowLossReport {
        loss_masked: lm,
        loss_unmasked: lum,
        loss_total: lambda * lm + (1.0 - lambda) * lum,
        lambda,
    })
}

/// Differentiable `L_S` on a tape together with its report.
pub fn slow_losses(
    tape: &mut Tape,
    g_out: Var,
    x: &Tensor,
    plan: &MaskPlan,
    lambda: f64,
) -> Result<(Var, SlowLossReport), TensorError> {
    let report = slow_loss_report(tape.value(g_out), x, plan, lambda)?;
    let (outer, len, feat) = x.series_dims();
    let cnt = plan.count();
    let wm = lambda / (outer * feat * cnt) as f64;
    let wu = (1.0 - lambda) / (outer * feat * (len - cnt)) as f64;
    let mut w = vec![0.0; x.numel()];
    for o in 0..outer {
        for t in 0..len {
            let s = (o * len + t) * feat;
            let v = if plan.mask[t] { wm } else { wu };
            w[s..s + feat].iter_mut().for_each(|x| *x = v);
        }
    }
    let xv = tape.constant(x.clone())?;
    let wv = tape.constant(Tensor::new(x.shape().to_vec(), w)?)?;
    let d = tape.sub(g_out, xv)?;
    let sq = tape.mul(d, d)?;
    let weighted = tape.mul(sq, wv)?;
    Ok((tape.sum(weighted)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(len: usize, feat: usize) -> Tensor {
        Tensor::new(vec![len, feat], (0..len * feat).map(|i| i as f64 + 1.0).collect()).unwrap()
    }

    #[test]
    fn hand_example() {
        let x = Tensor::column(&[1.0, 1.0]);
        let plan = MaskPlan::from_mask(&x, vec![true, false], 0.5, 0.0).unwrap();
        let g = Tensor::column(&[0.5, 0.7]);
        let r = slow_loss_report(&g, &x, &plan, 0.5).unwrap();
        assert!((r.loss_masked - 0.25).abs() < 1e-12);
        assert!((r.loss_unmasked - 0.09).abs() < 1e-12);
        assert!((r.loss_total - 0.17).abs() < 1e-12);
    }

    #[test]
    fn perfect_reconstruction_is_zero() {
        let x = ramp(6, 2);
        let plan = MaskPlan::from_mask(&x, vec![true, false, false, true, false, false], 0.3, 0.0).unwrap();
        let r = slow_loss_report(&x, &x, &plan, 0.4).unwrap();
        assert_eq!((r.loss_masked, r.loss_unmasked, r.loss_total), (0.0, 0.0, 0.0));
    }

    #[test]
    fn masked_input_zeroes_masked_rows_only() {
        let x = ramp(4, 2);
        let plan = MaskPlan::from_mask(&x, vec![false, true, false, false], 0.25, 0.0).unwrap();
        assert_eq!(plan.masked_input.data(), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn epsilon_zero_picks_top_scores() {
        let x = ramp(10, 1);
        let scores: Vec<f64> = (0..10).map(|t| 10.0 - t as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = select_mask(&x, &scores, 0.2, 0.0, &mut rng).unwrap();
        assert_eq!(plan.count(), 2);
        assert!(plan.mask[0] && plan.mask[1]);
    }

    #[test]
    fn epsilon_one_is_uniform() {
        let x = ramp(5, 1);
        let scores = [9.0, 0.0, 0.0, 0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut hits = [0usize; 5];
        let draws = 20_000;
        for _ in 0..draws {
            let plan = select_mask(&x, &scores, 0.4, 1.0, &mut rng).unwrap();
            assert_eq!(plan.count(), 2);
            for (t, &m) in plan.mask.iter().enumerate() {
                hits[t] += m as usize;
            }
        }
        for h in hits {
            let p = h as f64 / draws as f64;
            assert!((p - 0.4).abs() < 0.02, "{hits:?}");
        }
    }

    #[test]
    fn randomisation_changes_masks_often() {
        let x = ramp(48, 1);
        let scores: Vec<f64> = (0..48).map(|t| (48 - t) as f64).collect();
        let top: Vec<bool> = (0..48).map(|t| t < 7).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let differ = (0..1000)
            .filter(|_| select_mask(&x, &scores, 0.15, 0.3, &mut rng).unwrap().mask != top)
            .count();
        assert!(differ >= 200, "{differ}");
    }

    #[test]
    fn degenerate_counts_rejected() {
        let x = ramp(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(select_mask(&x, &[0.0; 4], 0.1, 0.0, &mut rng).is_err());
        assert!(select_mask(&x, &[0.0; 4], 0.9, 0.0, &mut rng).is_err());
        assert!(MaskPlan::from_mask(&x, vec![true; 4], 1.0, 0.0).is_err());
    }

    #[test]
    fn importance_from_delays() {
        let sets = vec![
            DelaySet { delays: vec![8, 16], weights: vec![0.5, 0.5] },
            DelaySet { delays: vec![8, 3], weights: vec![0.75, 0.25] },
        ];
        let imp = importance_profile(&sets, 16);
        assert_eq!(imp[8], 0.625);
        assert_eq!(imp[0], 0.25);
        assert_eq!(imp[3], 0.125);
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_endpoints_zero_gradients() {
        let x = ramp(5, 2);
        let plan = MaskPlan::from_mask(&x, vec![false, true, false, true, false], 0.4, 0.0).unwrap();
        let g0 = Tensor::new(vec![5, 2], (0..10).map(|i| (i as f64).cos()).collect()).unwrap();
        for lambda in [0.0, 1.0] {
            let mut tape = Tape::new();
            let g = tape.param(g0.clone()).unwrap();
            let (l, r) = slow_losses(&mut tape, g, &x, &plan, lambda).unwrap();
            let want = if lambda == 1.0 { r.loss_masked } else { r.loss_unmasked };
            assert_eq!(r.loss_total, want);
            assert!((tape.value(l).item() - want).abs() < 1e-12);
            let grad = tape.backward(l).unwrap().wrt(g);
            for t in 0..5 {
                let silent = plan.mask[t] == (lambda == 0.0);
                if silent {
                    assert!(grad.data()[t * 2..t * 2 + 2].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn total_is_convex_combination(
            len in 2usize..40,
            feat in 1usize..4,
            lambda in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![len, feat], (0..len * feat).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
            let g = Tensor::new(vec![len, feat], (0..len * feat).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
            let rho = rng.gen_range(0.5 / len as f64..1.0 - 0.5 / len as f64);
            let scores: Vec<f64> = (0..len).map(|_| rng.gen()).collect();
            if let Ok(plan) = select_mask(&x, &scores, rho, rng.gen(), &mut rng) {
                let cnt = plan.count();
                prop_assert!(cnt >= 1 && cnt < len);
                prop_assert_eq!(cnt, mask_count(len, rho).unwrap());
                let r = slow_loss_report(&g, &x, &plan, lambda).unwrap();
                prop_assert!((r.loss_total - (lambda * r.loss_masked + (1.0 - lambda) * r.loss_unmasked)).abs() <= 1e-12);
                prop_assert!(r.loss_masked >= 0.0 && r.loss_unmasked >= 0.0);
            }
        }

        #[test]
        fn joint_permutation_invariance(len in 3usize..20, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let g: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut mask: Vec<bool> = (0..len).map(|t| t == 0).collect();
            mask[len - 1] = true;
            let mut perm: Vec<usize> = (0..len).collect();
            perm.shuffle(&mut rng);
            let xt = Tensor::column(&x);
            let plan = MaskPlan::from_mask(&xt, mask.clone(), 0.3, 0.0).unwrap();
            let a = slow_loss_report(&Tensor::column(&g), &xt, &plan, 0.3).unwrap();
            let xp = Tensor::column(&perm.iter().map(|&i| x[i]).collect::<Vec<_>>());
            let gp = Tensor::column(&perm.iter().map(|&i| g[i]).collect::<Vec<_>>());
            let mp: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
            let plan_p = MaskPlan::from_mask(&xp, mp, 0.3, 0.0).unwrap();
            let b = slow_loss_report(&gp, &xp, &plan_p, 0.3).unwrap();
            prop_assert!((a.loss_total - b.loss_total).abs() <= 1e-12 * a.loss_total.max(1.0));
        }
    }
}
