//! Adam with bias correction.

use crate::tensor::{invalid, shape_err, ParamStore, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// State for every tensor of `store`, with the usual 0.9 / 0.999 / 1e-8.
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `store` with learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<(), TensorError> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(invalid("adam", format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        if !(lr >= 0.0) {
            return Err(invalid("adam", "learning rate must be non-negative"));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFinite { op: "adam" });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.values_mut().iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(shape_err("adam", format!("gradient {:?} for {:?}", g.shape(), p.shape())));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `lr · decay^epoch`.
pub fn decayed_lr(lr: f64, decay: f64, epoch: usize) -> f64 {
    lr * decay.powi(epoch as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_reference_updates() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let mut adam = Adam::new(&store);
        // independent re-derivation of three steps on f(w) = Σ w_i²
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let mut w = [0.5f64, -1.0, 2.0];
        let mut m = [0.0f64; 3];
        let mut v = [0.0f64; 3];
        for t in 1..=3 {
            let g: Vec<f64> = store.values()[0].data().iter().map(|x| 2.0 * x).collect();
            adam.step(&mut store, &[Tensor::new(vec![3], g).unwrap()], lr).unwrap();
            for i in 0..3 {
                let gi = 2.0 * w[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                w[i] -= lr * mh / (vh.sqrt() + eps);
                assert!((store.values()[0].data()[i] - w[i]).abs() < 1e-12);
            }
        }
        assert_eq!(adam.steps(), 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[Tensor::new(vec![2], vec![3.0, -0.2]).unwrap()], 0.01).unwrap();
        let d = store.values()[0].data();
        assert!((d[0] - 0.99).abs() < 1e-9 && (d[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![2], vec![0.3, 0.7]).unwrap());
        let before = store.clone();
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()], 0.0).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn rejects_bad_input() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2]));
        let mut adam = Adam::new(&store);
        assert!(adam.step(&mut store, &[], 0.1).is_err());
        assert!(adam.step(&mut store, &[Tensor::zeros(&[3])], 0.1).is_err());
        assert!(adam.step(&mut store, &[Tensor::zeros(&[2])], -1.0).is_err());
    }

    #[test]
    fn decay_halves() {
        assert_eq!(decayed_lr(0.01, 0.5, 0), 0.01);
        assert_eq!(decayed_lr(0.01, 0.5, 2), 0.0025);
    }
}
