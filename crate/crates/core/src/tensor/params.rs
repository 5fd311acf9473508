use rand::Rng;

use super::{Gradients, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered parameter tensors owned by one model component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Records every tensor on `tape`, as differentiable leaves when
    /// `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound, TensorError> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Bound { vars })
    }

    /// Rebinds from a flat differentiable vector laid out in store order.
    /// Used by gradient checks over a whole component.
    pub fn bind_flat(&self, tape: &mut Tape, flat: Var) -> Result<Bound, TensorError> {
        let mut vars = Vec::with_capacity(self.values.len());
        let mut offset = 0;
        for v in &self.values {
            let s = tape.slice(flat, 0, offset, v.numel())?;
            vars.push(tape.reshape(s, v.shape())?);
            offset += v.numel();
        }
        Ok(Bound { vars })
    }

    /// All values concatenated in store order.
    pub fn flatten(&self) -> Tensor {
        let data: Vec<f64> = self.values.iter().flat_map(|v| v.data().iter().copied()).collect();
        let n = data.len();
        Tensor::from_parts(vec![n], data)
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for v in &mut self.values {
            let n = v.numel();
            v.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// One gradient tensor per parameter (zeros where nothing flowed).
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| g.wrt(v)).collect()
    }
}

/// Affine map over the last axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers `{name}.weight` (`[fan_in, fan_out]`) and optionally
    /// `{name}.bias`, uniform in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::from_parts(vec![fan_in, fan_out], w),
        );
        let bias = bias.then(|| {
            let b = (0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
            store.add(format!("{name}.bias"), Tensor::from_parts(vec![fan_out], b))
        });
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        tape.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }

    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + if self.bias.is_some() { self.fan_out } else { 0 }
    }
}
