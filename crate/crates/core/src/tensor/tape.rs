use std::sync::atomic::{AtomicU64, Ordering};

use super::{check_pool_kernel, invalid, moving_average, series_dims, shape_err, Tensor, TensorError};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `backward` receives the forward inputs, the forward output and the
/// upstream gradient, and returns one gradient buffer per input (or `None`
/// when the input receives nothing).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Transpose(usize),
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Sum(usize),
    Mean(usize),
    MeanAxis {
        x: usize,
        axis: usize,
    },
    Softmax(usize),
    Gelu(usize),
    AvgPool {
        x: usize,
        kernel: usize,
    },
    Roll {
        x: usize,
        tau: usize,
    },
    FitTime(usize),
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation. Single owner; build a
/// fresh tape per batch.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads[v.idx]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.idx].clone(), g.clone()))
    }

    /// Gradient for `v`, zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.idx]))
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
fn gemm_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * k + p] += acc;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
fn gemm_at(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `(outer, axis_len, inner)` split around `axis`.
fn axis_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn time_axis(shape: &[usize]) -> usize {
    shape.len().saturating_sub(2)
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::NotOnTape);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A constant input: no gradient is accumulated for it.
    pub fn constant(&mut self, t: Tensor) -> Result<Var, TensorError> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// A differentiable input.
    pub fn param(&mut self, t: Tensor) -> Result<Var, TensorError> {
        self.push(t, Op::Leaf, true, "param")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.idx].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[ia, ib]);
        self.push(out, op(ia, ib), rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| v * s);
        let rg = self.rg(&[ia]);
        self.push(out, Op::Scale(ia, s), rg, "scale")
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[ia, ib]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(ia, ib), rg, "matmul")
    }

    /// `x[..., in] · w[in, out] + b[out]` applied over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let ix = self.check(x)?;
        let iw = self.check(w)?;
        let ibias = b.map(|b| self.check(b)).transpose()?;
        let (tx, tw) = (&self.nodes[ix].value, &self.nodes[iw].value);
        let fan_in = *tx.shape().last().unwrap_or(&0);
        if tw.rank() != 2 || tw.shape()[0] != fan_in {
            return Err(shape_err("linear", format!("{:?} x {:?}", tx.shape(), tw.shape())));
        }
        let n_out = tw.shape()[1];
        let rows = tx.numel() / fan_in.max(1);
        let mut out = vec![0.0; rows * n_out];
        if let Some(ib) = ibias {
            let tb = &self.nodes[ib].value;
            if tb.numel() != n_out {
                return Err(shape_err("linear", format!("bias {:?} for {n_out} outputs", tb.shape())));
            }
            for r in 0..rows {
                out[r * n_out..(r + 1) * n_out].copy_from_slice(tb.data());
            }
        }
        gemm(tx.data(), tw.data(), &mut out, rows, fan_in, n_out);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n_out;
        let mut deps = vec![ix, iw];
        deps.extend(ibias);
        let rg = self.rg(&deps);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Linear { x: ix, w: iw, b: ibias },
            rg,
            "linear",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let ta = &self.nodes[ia].value;
        if ta.rank() != 2 {
            return Err(shape_err("transpose", format!("rank {}", ta.rank())));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data()[i * n + j];
            }
        }
        let rg = self.rg(&[ia]);
        self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(ia), rg, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.reshape(shape)?;
        let rg = self.rg(&[ia]);
        self.push(out, Op::Reshape(ia), rg, "reshape")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let idx: Vec<usize> = parts.iter().map(|&v| self.check(v)).collect::<Result<_, _>>()?;
        let first = idx
            .first()
            .map(|&i| self.nodes[i].value.shape().to_vec())
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            let same_rest = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same_rest {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_dims(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &i in &idx {
                let t = &self.nodes[i].value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(&idx);
        self.push(Tensor::from_parts(shape, out), Op::Concat { inputs: idx, axis }, rg, "concat")
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let ta = &self.nodes[ia].value;
        if axis >= ta.rank() || start + len > ta.shape()[axis] || len == 0 {
            return Err(invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, ta.shape()),
            ));
        }
        let (outer, alen, inner) = axis_dims(ta.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            out.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[ia]);
        self.push(Tensor::from_parts(shape, out), Op::Slice { x: ia, axis, start }, rg, "slice")
    }

    /// Slice along the time axis.
    pub fn slice_time(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let axis = time_axis(self.shape(a));
        self.slice(a, axis, start, len)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let s: f64 = self.nodes[ia].value.data().iter().sum();
        let rg = self.rg(&[ia]);
        self.push(Tensor::scalar(s), Op::Sum(ia), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[ia]);
        self.push(Tensor::scalar(s), Op::Mean(ia), rg, "mean")
    }

    /// Mean over `axis`, keeping it with size one.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if axis >= t.rank() {
            return Err(invalid("mean_axis", format!("axis {axis} for rank {}", t.rank())));
        }
        let (outer, alen, inner) = axis_dims(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..alen {
                let src = &t.data()[(o * alen + j) * inner..(o * alen + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / alen as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let rg = self.rg(&[ia]);
        self.push(Tensor::from_parts(shape, out), Op::MeanAxis { x: ia, axis }, rg, "mean_axis")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let n = *t.shape().last().ok_or_else(|| invalid("softmax", "rank 0"))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[ia]);
        self.push(Tensor::from_parts(t.shape().to_vec(), out), Op::Softmax(ia), rg, "softmax")
    }

    /// Tanh-approximated Gaussian error linear unit.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(gelu);
        let rg = self.rg(&[ia]);
        self.push(out, Op::Gelu(ia), rg, "gelu")
    }

    /// Replication-padded moving average along the time axis.
    pub fn avg_pool_1d(&mut self, a: Var, kernel: usize) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let (outer, len, feat) = series_dims(t.shape());
        check_pool_kernel(kernel, len)?;
        let mut out = vec![0.0; t.numel()];
        moving_average(t.data(), &mut out, outer, len, feat, kernel);
        let rg = self.rg(&[ia]);
        self.push(
            Tensor::from_parts(t.shape().to_vec(), out),
            Op::AvgPool { x: ia, kernel },
            rg,
            "avg_pool_1d",
        )
    }

    pub fn roll(&mut self, a: Var, tau: usize) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = super::roll(&self.nodes[ia].value, tau)?;
        let rg = self.rg(&[ia]);
        self.push(out, Op::Roll { x: ia, tau }, rg, "roll")
    }

    /// Truncates or zero-pads along the time axis to `len` steps.
    pub fn fit_time(&mut self, a: Var, len: usize) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let (outer, src_len, feat) = series_dims(t.shape());
        if src_len == len {
            return Ok(a);
        }
        let keep = src_len.min(len);
        let mut out = vec![0.0; outer * len * feat];
        for o in 0..outer {
            let s = o * src_len * feat;
            let d = o * len * feat;
            out[d..d + keep * feat].copy_from_slice(&t.data()[s..s + keep * feat]);
        }
        let mut shape = t.shape().to_vec();
        let ax = time_axis(&shape);
        shape[ax] = len;
        let rg = self.rg(&[ia]);
        self.push(Tensor::from_parts(shape, out), Op::FitTime(ia), rg, "fit_time")
    }

    /// Records an externally computed value with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var, TensorError> {
        let idx: Vec<usize> = inputs.iter().map(|&v| self.check(v)).collect::<Result<_, _>>()?;
        let rg = self.rg(&idx);
        let name = op.name();
        self.push(output, Op::Custom { inputs: idx, op }, rg, name)
    }

    /// Reverse pass seeded with ones at `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let r = self.check(root)?;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[r] = Some(vec![1.0; self.nodes[r].value.numel()]);
        for i in (0..=r).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<(), TensorError> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let wants = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.to_vec());
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.to_vec());
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let gb = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[*a], gb);
                }
                if wants(*b) {
                    let ga = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[*b], ga);
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.iter().map(|v| v * s).collect());
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_bt(g, tb.data(), &mut ga, m, n, k);
                    accumulate(&mut grads[*a], ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_at(ta.data(), g, &mut gb, m, k, n);
                    accumulate(&mut grads[*b], gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (fan_in, n_out) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.numel() / fan_in.max(1);
                if wants(*x) {
                    let mut gx = vec![0.0; rows * fan_in];
                    gemm_bt(g, tw.data(), &mut gx, rows, n_out, fan_in);
                    accumulate(&mut grads[*x], gx);
                }
                if wants(*w) {
                    let mut gw = vec![0.0; fan_in * n_out];
                    gemm_at(tx.data(), g, &mut gw, rows, fan_in, n_out);
                    accumulate(&mut grads[*w], gw);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let mut gb = vec![0.0; n_out];
                        for row in g.chunks(n_out) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        accumulate(&mut grads[*b], gb);
                    }
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let ta = val(*a);
                    let (m, n) = (ta.shape()[0], ta.shape()[1]);
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = g[j * m + i];
                        }
                    }
                    accumulate(&mut grads[*a], ga);
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.to_vec());
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_dims(node.value.shape(), *axis);
                let mut offset = 0;
                let total = node.value.shape()[*axis] * inner;
                for &j in inputs {
                    let chunk = val(j).shape()[*axis] * inner;
                    if wants(j) {
                        let mut gj = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let s = o * total + offset;
                            gj.extend_from_slice(&g[s..s + chunk]);
                        }
                        accumulate(&mut grads[j], gj);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                if wants(*x) {
                    let tx = val(*x);
                    let (outer, alen, inner) = axis_dims(tx.shape(), *axis);
                    let len = node.value.shape()[*axis];
                    let mut gx = vec![0.0; tx.numel()];
                    for o in 0..outer {
                        let d = o * alen * inner + start * inner;
                        let s = o * len * inner;
                        gx[d..d + len * inner].copy_from_slice(&g[s..s + len * inner]);
                    }
                    accumulate(&mut grads[*x], gx);
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], vec![g[0]; val(*a).numel()]);
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let n = val(*a).numel();
                    accumulate(&mut grads[*a], vec![g[0] / n as f64; n]);
                }
            }
            Op::MeanAxis { x, axis } => {
                if wants(*x) {
                    let tx = val(*x);
                    let (outer, alen, inner) = axis_dims(tx.shape(), *axis);
                    let inv = 1.0 / alen as f64;
                    let mut gx = vec![0.0; tx.numel()];
                    for o in 0..outer {
                        for j in 0..alen {
                            let d = (o * alen + j) * inner;
                            for q in 0..inner {
                                gx[d + q] = g[o * inner + q] * inv;
                            }
                        }
                    }
                    accumulate(&mut grads[*x], gx);
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap();
                    let mut ga = vec![0.0; y.len()];
                    for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o = yi * (gi - dot);
                        }
                    }
                    accumulate(&mut grads[*a], ga);
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let ga = g.iter().zip(val(*a).data()).map(|(gi, &x)| gi * gelu_grad(x)).collect();
                    accumulate(&mut grads[*a], ga);
                }
            }
            Op::AvgPool { x, kernel } => {
                if wants(*x) {
                    let (outer, len, feat) = series_dims(val(*x).shape());
                    let pad = (*kernel - 1) / 2;
                    let inv = 1.0 / *kernel as f64;
                    let mut gx = vec![0.0; g.len()];
                    for o in 0..outer {
                        let base = o * len * feat;
                        for t in 0..len {
                            for j in -(pad as isize)..=(pad as isize) {
                                let src = (t as isize + j).clamp(0, len as isize - 1) as usize;
                                for c in 0..feat {
                                    gx[base + src * feat + c] += g[base + t * feat + c] * inv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[*x], gx);
                }
            }
            Op::Roll { x, tau } => {
                if wants(*x) {
                    let (outer, len, feat) = series_dims(val(*x).shape());
                    let mut gx = vec![0.0; g.len()];
                    for o in 0..outer {
                        let base = o * len * feat;
                        for t in 0..len {
                            let d = base + ((t + tau) % len) * feat;
                            let s = base + t * feat;
                            gx[d..d + feat].copy_from_slice(&g[s..s + feat]);
                        }
                    }
                    accumulate(&mut grads[*x], gx);
                }
            }
            Op::FitTime(x) => {
                if wants(*x) {
                    let tx = val(*x);
                    let (outer, src_len, feat) = series_dims(tx.shape());
                    let len = series_dims(node.value.shape()).1;
                    let keep = src_len.min(len);
                    let mut gx = vec![0.0; tx.numel()];
                    for o in 0..outer {
                        let s = o * len * feat;
                        let d = o * src_len * feat;
                        gx[d..d + keep * feat].copy_from_slice(&g[s..s + keep * feat]);
                    }
                    accumulate(&mut grads[*x], gx);
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&j| val(j)).collect();
                let gs = op.backward(&ins, &node.value, g);
                if gs.len() != inputs.len() {
                    return Err(invalid(op.name(), "backward returned wrong arity"));
                }
                for (&j, gj) in inputs.iter().zip(gs) {
                    if let (true, Some(gj)) = (wants(j), gj) {
                        if gj.len() != val(j).numel() {
                            return Err(shape_err(op.name(), "gradient length mismatch"));
                        }
                        accumulate(&mut grads[j], gj);
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
