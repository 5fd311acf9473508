//! Dense row-major `f64` arrays and a tape-based reverse-mode autodiff engine.
//!
//! Series are stored with time on the second-to-last axis and features on the
//! last axis: `[T, D]` for a single series, `[N, T, D]` for a batch. A rank-1
//! tensor is treated as a single-feature series.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use params::{Bound, Linear, ParamId, ParamStore};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub(crate) use tape::softmax_in_place;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("variable does not belong to this tape")]
    NotOnTape,
    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        detail: detail.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` matches the data length and that
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(shape_err("new", format!("zero-sized dim in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A `[len, 1]` series from a slice of values.
    pub fn column(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len(), 1],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// `(outer, time, features)` view of a series-shaped tensor.
    pub fn series_dims(&self) -> (usize, usize, usize) {
        series_dims(&self.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor, TensorError> {
        let first = items
            .first()
            .ok_or_else(|| invalid("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(shape_err(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Splits along the leading axis.
    pub fn unstack(&self) -> Vec<Tensor> {
        let n = self.shape[0];
        let inner: Vec<usize> = self.shape[1..].to_vec();
        let step = self.data.len() / n.max(1);
        (0..n)
            .map(|i| Tensor {
                shape: inner.clone(),
                data: self.data[i * step..(i + 1) * step].to_vec(),
            })
            .collect()
    }
}

pub(crate) fn series_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, shape[0], 1),
        r => (
            shape[..r - 2].iter().product(),
            shape[r - 2],
            shape[r - 1],
        ),
    }
}

/// Replication-padded moving average along the time axis. Output has the
/// input's shape.
pub fn avg_pool_1d(x: &Tensor, kernel: usize) -> Result<Tensor, TensorError> {
    let (outer, len, feat) = x.series_dims();
    check_pool_kernel(kernel, len)?;
    let mut out = vec![0.0; x.numel()];
    moving_average(&x.data, &mut out, outer, len, feat, kernel);
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

pub(crate) fn check_pool_kernel(kernel: usize, len: usize) -> Result<(), TensorError> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(invalid("avg_pool_1d", format!("kernel {kernel} must be odd")));
    }
    if len == 0 || kernel > 2 * len - 1 {
        return Err(invalid(
            "avg_pool_1d",
            format!("kernel {kernel} exceeds 2L-1 for L={len}"),
        ));
    }
    Ok(())
}

pub(crate) fn moving_average(
    src: &[f64],
    dst: &mut [f64],
    outer: usize,
    len: usize,
    feat: usize,
    kernel: usize,
) {
    let pad = (kernel - 1) / 2;
    let inv = 1.0 / kernel as f64;
    let clamp = |i: isize| i.clamp(0, len as isize - 1) as usize;
    for o in 0..outer {
        let base = o * len * feat;
        for c in 0..feat {
            let at = |t: usize| src[base + t * feat + c];
            let mut acc = 0.0;
            for j in -(pad as isize)..=(pad as isize) {
                acc += at(clamp(j));
            }
            dst[base + c] = acc * inv;
            for t in 1..len {
                acc += at(clamp(t as isize + pad as isize));
                acc -= at(clamp(t as isize - 1 - pad as isize));
                dst[base + t * feat + c] = acc * inv;
            }
        }
    }
}

/// `out[t] = x[(t + tau) mod L]` along the time axis.
pub fn roll(x: &Tensor, tau: usize) -> Result<Tensor, TensorError> {
    let (outer, len, feat) = x.series_dims();
    if tau > len {
        return Err(invalid("roll", format!("delay {tau} outside [0, {len}]")));
    }
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        let base = o * len * feat;
        for t in 0..len {
            let src = base + ((t + tau) % len) * feat;
            let dst = base + t * feat;
            out[dst..dst + feat].copy_from_slice(&x.data[src..src + feat]);
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}
