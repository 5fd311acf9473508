//! Universal Representation Transformer: batch-level attention over the
//! predictions of the fast learners.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{invalid, shape_err, Bound, Linear, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UrtConfig {
    /// Number of attention heads `S`.
    pub heads: usize,
    /// Query/key width `l`.
    pub key_dim: usize,
    /// Per-head final linear map; always on when `heads > 1`.
    pub final_map: bool,
    /// Weight of the orthogonality regulariser.
    pub omega: f64,
}

impl Default for UrtConfig {
    fn default() -> Self {
        UrtConfig {
            heads: 1,
            key_dim: 8,
            final_map: false,
            omega: 0.1,
        }
    }
}

impl UrtConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.heads == 0 || self.key_dim == 0 {
            return Err(invalid("urt", "heads and key_dim must be positive"));
        }
        if !(self.omega >= 0.0) {
            return Err(invalid("urt", "omega must be non-negative"));
        }
        Ok(())
    }

    pub fn uses_final_map(&self) -> bool {
        self.final_map || self.heads > 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UrtHead {
    pub query: Linear,
    pub key: Linear,
}

/// Raw scores and softmax weights of one head for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct UrtOutput {
    /// Same shape as each learner prediction.
    pub output: Var,
    /// `[S, M]`, row `j` holding head `j`'s weights.
    pub alpha: Var,
    pub records: Vec<AttentionRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UrtLayer {
    cfg: UrtConfig,
    learners: usize,
    width: usize,
    params: ParamStore,
    heads: Vec<UrtHead>,
    finals: Vec<Linear>,
}

impl UrtLayer {
    /// `learners` predictions of `width = O·out_dim` values each.
    pub fn new(cfg: &UrtConfig, learners: usize, width: usize, seed: u64) -> Result<Self, TensorError> {
        cfg.validate()?;
        if learners == 0 || width == 0 {
            return Err(invalid("urt", "needs at least one learner and a nonempty prediction"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l = cfg.key_dim;
        let heads = (0..cfg.heads)
            .map(|j| UrtHead {
                query: Linear::new(&mut store, &format!("urt.{j}.query"), learners * width, l, true, &mut rng),
                key: Linear::new(&mut store, &format!("urt.{j}.key"), width, l, true, &mut rng),
            })
            .collect();
        let mut finals = Vec::new();
        if cfg.uses_final_map() {
            let scale = 1.0 / cfg.heads as f64;
            for j in 0..cfg.heads {
                let f = Linear::new(&mut store, &format!("urt.{j}.final"), width, width, true, &mut rng);
                let w = store.get_mut(f.weight).data_mut();
                w.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..width {
                    w[i * width + i] = scale;
                }
                if let Some(b) = f.bias {
                    store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
                finals.push(f);
            }
        }
        Ok(UrtLayer {
            cfg: cfg.clone(),
            learners,
            width,
            params: store,
            heads,
            finals,
        })
    }

    pub fn config(&self) -> &UrtConfig {
        &self.cfg
    }

    pub fn learners(&self) -> usize {
        self.learners
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn heads(&self) -> &[UrtHead] {
        &self.heads
    }

    pub fn finals(&self) -> &[Linear] {
        &self.finals
    }

    fn flatten_preds(&self, tape: &mut Tape, preds: &[Var]) -> Result<(Vec<Var>, usize), TensorError> {
        if preds.len() != self.learners {
            return Err(invalid("urt", format!("{} predictions for {} learners", preds.len(), self.learners)));
        }
        let shape = tape.shape(preds[0]).to_vec();
        let numel: usize = shape.iter().product();
        if numel == 0 || numel % self.width != 0 {
            return Err(shape_err("urt", format!("prediction {shape:?} for width {}", self.width)));
        }
        let n = numel / self.width;
        let mut flat = Vec::with_capacity(preds.len());
        for &p in preds {
            if tape.shape(p) != shape.as_slice() {
                return Err(shape_err("urt", format!("{:?} vs {shape:?}", tape.shape(p))));
            }
            flat.push(tape.reshape(p, &[n, self.width])?);
        }
        Ok((flat, n))
    }

    /// Softmax attention of every head over the batch means. Returns `[S, M]`.
    pub fn attention(&self, tape: &mut Tape, p: &Bound, preds: &[Var]) -> Result<(Var, Vec<AttentionRecord>), TensorError> {
        let (flat, _) = self.flatten_preds(tape, preds)?;
        let joined = tape.concat(&flat, 1)?;
        let phi = tape.mean_axis(joined, 0)?;
        let mut means = Vec::with_capacity(flat.len());
        for &f in &flat {
            means.push(tape.mean_axis(f, 0)?);
        }
        let keys_in = tape.concat(&means, 0)?;
        let inv_sqrt_l = 1.0 / (self.cfg.key_dim as f64).sqrt();
        let mut rows = Vec::with_capacity(self.heads.len());
        let mut records = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = head.query.forward(tape, p, phi)?;
            let k = head.key.forward(tape, p, keys_in)?;
            let kt = tape.transpose(k)?;
            let qk = tape.matmul(q, kt)?;
            let beta = tape.scale(qk, inv_sqrt_l)?;
            let alpha = tape.softmax(beta)?;
            let rec = AttentionRecord {
                beta: tape.value(beta).data().to_vec(),
                alpha: tape.value(alpha).data().to_vec(),
            };
            debug_assert!(rec.alpha.iter().all(|&a| a >= 0.0));
            debug_assert!((rec.alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            records.push(rec);
            rows.push(alpha);
        }
        Ok((tape.concat(&rows, 0)?, records))
    }

    /// `Σ_j (Σ_i α_i^j f_i) W_f^j + b_f^j`, or the plain convex
    /// combination without a final map. `alpha` is `[S, M]`.
    pub fn combine(&self, tape: &mut Tape, p: &Bound, alpha: Var, preds: &[Var]) -> Result<Var, TensorError> {
        let (flat, n) = self.flatten_preds(tape, preds)?;
        let shape = tape.shape(preds[0]).to_vec();
        let s = self.cfg.heads;
        if tape.shape(alpha) != [s, self.learners] {
            return Err(shape_err("urt", format!("alpha {:?}, want [{s}, {}]", tape.shape(alpha), self.learners)));
        }
        let mut rows = Vec::with_capacity(flat.len());
        for &f in &flat {
            rows.push(tape.reshape(f, &[1, n * self.width])?);
        }
        let stacked = tape.concat(&rows, 0)?;
        let mixed = tape.matmul(alpha, stacked)?;
        let out = if self.finals.is_empty() {
            mixed
        } else {
            let mut acc: Option<Var> = None;
            for (j, fin) in self.finals.iter().enumerate() {
                let row = tape.slice(mixed, 0, j, 1)?;
                let row = tape.reshape(row, &[n, self.width])?;
                let y = fin.forward(tape, p, row)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, y)?,
                    None => y,
                });
            }
            acc.expect("at least one head")
        };
        tape.reshape(out, &shape)
    }

    /// Attention followed by combination.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, preds: &[Var]) -> Result<UrtOutput, TensorError> {
        let (alpha, records) = self.attention(tape, p, preds)?;
        let output = self.combine(tape, p, alpha, preds)?;
        Ok(UrtOutput { output, alpha, records })
    }

    /// Frozen forward on plain tensors.
    pub fn predict(&self, preds: &[Tensor]) -> Result<(Tensor, Vec<AttentionRecord>), TensorError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let vars = preds.iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>, _>>()?;
        let out = self.forward(&mut tape, &p, &vars)?;
        Ok((tape.value(out.output).clone(), out.records))
    }
}

/// `‖A Aᵀ − I‖_F²` for attention rows `A: [S, M]`.
pub fn orthogonality_penalty(tape: &mut Tape, alpha: Var) -> Result<Var, TensorError> {
    let s = tape.shape(alpha)[0];
    let at = tape.transpose(alpha)?;
    let gram = tape.matmul(alpha, at)?;
    let mut eye = Tensor::zeros(&[s, s]);
    for i in 0..s {
        eye.data_mut()[i * s + i] = 1.0;
    }
    let eye = tape.constant(eye)?;
    let d = tape.sub(gram, eye)?;
    let sq = tape.mul(d, d)?;
    tape.sum(sq)
}

/// Attention records as `head,learner,alpha` rows.
pub fn attention_table(records: &[AttentionRecord]) -> String {
    let mut out = String::from("head,learner,alpha\n");
    for (j, r) in records.iter().enumerate() {
        for (i, a) in r.alpha.iter().enumerate() {
            out.push_str(&format!("{j},{i},{a}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn preds(m: usize, n: usize, w: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| Tensor::new(vec![n, w, 1], (0..n * w).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap())
            .collect()
    }

    fn set(layer: &mut UrtLayer, name: &str, values: &[f64]) {
        let id = layer.params().find(name).unwrap();
        layer.params_mut().get_mut(id).data_mut().copy_from_slice(values);
    }

    #[test]
    fn single_learner_gets_all_weight() {
        let layer = UrtLayer::new(&UrtConfig::default(), 1, 3, 0).unwrap();
        let p = preds(1, 4, 3, 1);
        let (out, rec) = layer.predict(&p).unwrap();
        assert_eq!(rec[0].alpha, vec![1.0]);
        assert_eq!(out, p[0]);
    }

    #[test]
    fn equal_means_split_evenly() {
        let layer = UrtLayer::new(&UrtConfig::default(), 2, 2, 5).unwrap();
        let a = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2, 1], vec![3.0, 4.0, 1.0, 2.0]).unwrap();
        let (_, rec) = layer.predict(&[a, b]).unwrap();
        assert!((rec[0].alpha[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hand_scores() {
        // width 1, M=2, l=4: query reads the first learner, keys copy the mean
        let cfg = UrtConfig { key_dim: 4, ..UrtConfig::default() };
        let mut layer = UrtLayer::new(&cfg, 2, 1, 0).unwrap();
        set(&mut layer, "urt.0.query.weight", &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        set(&mut layer, "urt.0.query.bias", &[0.0; 4]);
        set(&mut layer, "urt.0.key.weight", &[1.0, 0.0, 0.0, 0.0]);
        set(&mut layer, "urt.0.key.bias", &[0.0; 4]);
        // f̄ = (√2, 0) -> q = k_1 = [√2,0,0,0], k_2 = 0, β = [2/√4, 0]
        let f1 = Tensor::new(vec![1, 1, 1], vec![2.0_f64.sqrt()]).unwrap();
        let f2 = Tensor::new(vec![1, 1, 1], vec![0.0]).unwrap();
        let (_, rec) = layer.predict(&[f1, f2]).unwrap();
        assert!((rec[0].beta[0] - 1.0).abs() < 1e-12);
        assert!(rec[0].beta[1].abs() < 1e-12);
        let e = std::f64::consts::E;
        assert!((rec[0].alpha[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((rec[0].alpha[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn batch_mean_concat_hand() {
        // two samples, M=2, O=1: φ̄ = (mean f1, mean f2)
        let mut tape = Tape::new();
        let layer = UrtLayer::new(&UrtConfig::default(), 2, 1, 0).unwrap();
        let f1 = tape.constant(Tensor::new(vec![2, 1, 1], vec![1.0, 3.0]).unwrap()).unwrap();
        let f2 = tape.constant(Tensor::new(vec![2, 1, 1], vec![-1.0, -3.0]).unwrap()).unwrap();
        let (flat, n) = layer.flatten_preds(&mut tape, &[f1, f2]).unwrap();
        assert_eq!(n, 2);
        let joined = tape.concat(&flat, 1).unwrap();
        let phi = tape.mean_axis(joined, 0).unwrap();
        assert_eq!(tape.value(phi).data(), &[2.0, -2.0]);
    }

    #[test]
    fn one_hot_attention_selects_learner() {
        let layer = UrtLayer::new(&UrtConfig::default(), 3, 2, 1).unwrap();
        let ps = preds(3, 2, 2, 9);
        let mut tape = Tape::new();
        let p = layer.params().bind(&mut tape, false).unwrap();
        let vars: Vec<Var> = ps.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
        let alpha = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
        let out = layer.combine(&mut tape, &p, alpha, &vars).unwrap();
        assert_eq!(tape.value(out), &ps[0]);
    }

    #[test]
    fn two_heads_with_final_maps_hand() {
        let cfg = UrtConfig { heads: 2, ..UrtConfig::default() };
        let mut layer = UrtLayer::new(&cfg, 2, 1, 0).unwrap();
        set(&mut layer, "urt.0.final.weight", &[2.0]);
        set(&mut layer, "urt.0.final.bias", &[0.5]);
        set(&mut layer, "urt.1.final.weight", &[-1.0]);
        set(&mut layer, "urt.1.final.bias", &[1.0]);
        let mut tape = Tape::new();
        let p = layer.params().bind(&mut tape, false).unwrap();
        let f1 = tape.constant(Tensor::new(vec![1, 1, 1], vec![4.0]).unwrap()).unwrap();
        let f2 = tape.constant(Tensor::new(vec![1, 1, 1], vec![8.0]).unwrap()).unwrap();
        let alpha = tape.constant(Tensor::new(vec![2, 2], vec![0.25, 0.75, 0.5, 0.5]).unwrap()).unwrap();
        let out = layer.combine(&mut tape, &p, alpha, &[f1, f2]).unwrap();
        // head 0: 7 * 2 + 0.5 = 14.5; head 1: 6 * -1 + 1 = -5
        assert_eq!(tape.value(out).data(), &[9.5]);
    }

    #[test]
    fn final_map_starts_as_average() {
        let cfg = UrtConfig { heads: 2, ..UrtConfig::default() };
        let layer = UrtLayer::new(&cfg, 3, 4, 2).unwrap();
        let ps = preds(3, 2, 4, 4);
        let (out, rec) = layer.predict(&ps).unwrap();
        for i in 0..out.numel() {
            let want: f64 = (0..2)
                .map(|j| 0.5 * (0..3).map(|m| rec[j].alpha[m] * ps[m].data()[i]).sum::<f64>())
                .sum();
            assert!((out.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_examples() {
        let mut tape = Tape::new();
        let dup = tape.constant(Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap()).unwrap();
        let om = orthogonality_penalty(&mut tape, dup).unwrap();
        assert_eq!(tape.value(om).item(), 1.0);
        let ortho = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let om = orthogonality_penalty(&mut tape, ortho).unwrap();
        assert_eq!(tape.value(om).item(), 0.0);
        let one = tape.constant(Tensor::new(vec![1, 3], vec![0.2, 0.3, 0.5]).unwrap()).unwrap();
        let om = orthogonality_penalty(&mut tape, one).unwrap();
        let s2: f64 = 0.04 + 0.09 + 0.25;
        assert!((tape.value(om).item() - (s2 - 1.0).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn table_rows() {
        let rec = vec![AttentionRecord { beta: vec![0.0, 0.0], alpha: vec![0.5, 0.5] }];
        assert_eq!(attention_table(&rec), "head,learner,alpha\n0,0,0.5\n0,1,0.5\n");
    }

    #[test]
    fn gradient_of_full_layer() {
        let cfg = UrtConfig { heads: 2, key_dim: 3, ..UrtConfig::default() };
        let layer = UrtLayer::new(&cfg, 3, 2, 11).unwrap();
        let ps = preds(3, 3, 2, 12);
        let y = preds(1, 3, 2, 13).remove(0);
        let report = grad_check(
            |tape, theta| {
                let p = layer.params().bind_flat(tape, theta)?;
                let vars = ps.iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>, _>>()?;
                let out = layer.forward(tape, &p, &vars)?;
                let yv = tape.constant(y.clone())?;
                let d = tape.sub(out.output, yv)?;
                let sq = tape.mul(d, d)?;
                let mse = tape.mean(sq)?;
                let om = orthogonality_penalty(tape, out.alpha)?;
                let om = tape.scale(om, 0.1)?;
                tape.add(mse, om)
            },
            &layer.params().flatten(),
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    proptest! {
        #[test]
        fn convex_envelope_and_partition(m in 1usize..5, n in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
            let layer = UrtLayer::new(&UrtConfig::default(), m, w, seed).unwrap();
            let ps = preds(m, n, w, seed ^ 0x5555);
            let (out, rec) = layer.predict(&ps).unwrap();
            let sum: f64 = rec[0].alpha.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert!(rec[0].alpha.iter().all(|&a| a >= 0.0));
            for i in 0..out.numel() {
                let lo = ps.iter().map(|t| t.data()[i]).fold(f64::INFINITY, f64::min);
                let hi = ps.iter().map(|t| t.data()[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.data()[i] >= lo - 1e-12 && out.data()[i] <= hi + 1e-12);
            }
        }

        #[test]
        fn permutation_equivariance(m in 2usize..5, seed in any::<u64>()) {
            let layer = UrtLayer::new(&UrtConfig::default(), m, 2, seed).unwrap();
            let ps = preds(m, 3, 2, seed.wrapping_add(1));
            let mut tape = Tape::new();
            let p = layer.params().bind(&mut tape, false).unwrap();
            let vars: Vec<Var> = ps.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let alpha: Vec<f64> = {
                let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            };
            let a = tape.constant(Tensor::new(vec![1, m], alpha.clone()).unwrap()).unwrap();
            let out = layer.combine(&mut tape, &p, a, &vars).unwrap();
            let perm: Vec<usize> = (0..m).rev().collect();
            let pv: Vec<Var> = perm.iter().map(|&i| vars[i]).collect();
            let pa = tape.constant(Tensor::new(vec![1, m], perm.iter().map(|&i| alpha[i]).collect()).unwrap()).unwrap();
            let out2 = layer.combine(&mut tape, &p, pa, &pv).unwrap();
            for (x, y) in tape.value(out).data().iter().zip(tape.value(out2).data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn scaling_scores_keeps_argmax(beta in proptest::collection::vec(-5.0f64..5.0, 2..6), c in 0.1f64..10.0) {
            let mut a = beta.clone();
            let mut b: Vec<f64> = beta.iter().map(|v| v * c).collect();
            crate::tensor::softmax_in_place(&mut a);
            crate::tensor::softmax_in_place(&mut b);
            let arg = |v: &[f64]| v.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0;
            prop_assert_eq!(arg(&a), arg(&b));
        }
    }
}
