use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{self, Conv1dGeom, Conv2dGeom};
use super::{shape_err, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// A differentiable operation defined outside the built-in primitive set.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradient for each input given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

/// Primitive set understood by [`Tape::apply`].
#[derive(Clone)]
pub enum Primitive {
    /// `x[.., in] · w[in, out] + b[out]`; bias input optional.
    Dense,
    /// `x[B, Cin, T]`, `w[Cout, Cin, K]`, optional `b[Cout]`.
    Conv1d { stride: usize, pad: usize },
    /// `x[B, Cin, H, W]`, `w[Cout, Cin, KH, KW]`, optional `b[Cout]`.
    Conv2d { stride: usize, pad: usize },
    /// Nearest-neighbour x2 along the last axis of `[B, C, T]`.
    Upsample1d,
    /// Nearest-neighbour x2 along both spatial axes of `[B, C, H, W]`.
    Upsample2d,
    MaxReduce { axis: usize },
    Relu,
    Silu,
    /// Softmax over the last axis.
    Softmax,
    Add,
    Sub,
    Mul,
    Concat { axis: usize },
    /// Bilinear lookup of `grid[B, C, H, W]` at `coords[B, N, 2]` given as
    /// `(col, row)` in pixel units with cell centers on integers. Queries are
    /// clamped to the border. Output `[B, N, C]`.
    GridSample,
    Slice { axis: usize, start: usize, end: usize },
    Reshape { shape: Vec<usize> },
    Transpose { a: usize, b: usize },
    Sum,
    SumAxis { axis: usize },
    Scale(f64),
    Shift(f64),
    Exp,
    Sqrt,
    Square,
    Sin,
    Cos,
    /// Rows of axis 0 selected by index (repeats allowed).
    Gather { indices: Vec<usize> },
    StopGrad,
    Custom(Arc<dyn CustomOp>),
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::Dense => "dense",
            Primitive::Conv1d { .. } => "conv1d",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Upsample1d => "upsample1d",
            Primitive::Upsample2d => "upsample2d",
            Primitive::MaxReduce { .. } => "max_reduce",
            Primitive::Relu => "relu",
            Primitive::Silu => "silu",
            Primitive::Softmax => "softmax",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Concat { .. } => "concat",
            Primitive::GridSample => "grid_sample",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Transpose { .. } => "transpose",
            Primitive::Sum => "sum",
            Primitive::SumAxis { .. } => "sum_axis",
            Primitive::Scale(_) => "scale",
            Primitive::Shift(_) => "shift",
            Primitive::Exp => "exp",
            Primitive::Sqrt => "sqrt",
            Primitive::Square => "square",
            Primitive::Sin => "sin",
            Primitive::Cos => "cos",
            Primitive::Gather { .. } => "gather",
            Primitive::StopGrad => "stop_grad",
            Primitive::Custom(op) => op.name(),
        }
    }
}

impl fmt::Debug for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Saved {
    None,
    Indices(Vec<usize>),
}

struct Record {
    prim: Primitive,
    inputs: Vec<usize>,
    saved: Saved,
}

struct Node {
    value: Tensor,
    tracked: bool,
    record: Option<Record>,
}

/// Ordered record of primitive applications. Inputs always precede outputs.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, tracked: bool, record: Option<Record>) -> Var {
        self.nodes.push(Node {
            value,
            tracked,
            record,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Leaf node; `requires_grad` decides whether gradients flow to it.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        v.tape == self.id && self.nodes[v.index].tracked
    }

    /// Applies `prim` to `inputs` and records it.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let vals: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let (value, saved) = forward(&prim, &vals)?;
        let tracked = !matches!(prim, Primitive::StopGrad) && idx.iter().any(|&i| self.nodes[i].tracked);
        let record = Record {
            prim,
            inputs: idx,
            saved,
        };
        Ok(self.push(value, tracked, Some(record)))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let i = self.check(output)?;
        let shape = self.nodes[i].value.shape();
        if self.nodes[i].value.len() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        self.backward_with(output, Tensor::full(shape, 1.0))
    }

    /// Reverse pass seeded with an explicit upstream gradient.
    pub fn backward_with(&self, output: Var, upstream: Tensor) -> Result<Gradients> {
        let out = self.check(output)?;
        if upstream.shape() != self.nodes[out].value.shape() {
            return Err(shape_err(
                "backward",
                &[upstream.shape(), self.nodes[out].value.shape()],
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out + 1];
        grads[out] = Some(upstream.into_data());
        for n in (0..=out).rev() {
            let Some(g) = grads[n].take() else { continue };
            let node = &self.nodes[n];
            if let Some(rec) = &node.record {
                if node.tracked {
                    let ins: Vec<&Tensor> = rec.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                    let want: Vec<bool> = rec.inputs.iter().map(|&j| self.nodes[j].tracked).collect();
                    let input_grads = backward_prim(rec, &ins, &want, &node.value, &g);
                    for ((&j, ig), w) in rec.inputs.iter().zip(input_grads).zip(want) {
                        let Some(ig) = ig else { continue };
                        if !w {
                            continue;
                        }
                        match &mut grads[j] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
            grads[n] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(n, g)| {
                g.filter(|_| self.nodes[n].tracked).map(|g| Tensor {
                    shape: self.nodes[n].value.shape().to_vec(),
                    data: g,
                })
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    // Convenience wrappers.

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => self.apply(Primitive::Dense, &[x, w, b]),
            None => self.apply(Primitive::Dense, &[x, w]),
        }
    }
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let p = Primitive::Conv1d { stride, pad };
        match b {
            Some(b) => self.apply(p, &[x, w, b]),
            None => self.apply(p, &[x, w]),
        }
    }
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let p = Primitive::Conv2d { stride, pad };
        match b {
            Some(b) => self.apply(p, &[x, w, b]),
            None => self.apply(p, &[x, w]),
        }
    }
    pub fn upsample1d(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Upsample1d, &[x])
    }
    pub fn upsample2d(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Upsample2d, &[x])
    }
    pub fn max_reduce(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::MaxReduce { axis }, &[x])
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Silu, &[x])
    }
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[x])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, xs)
    }
    pub fn grid_sample(&mut self, grid: Var, coords: Var) -> Result<Var> {
        self.apply(Primitive::GridSample, &[grid, coords])
    }
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, end }, &[x])
    }
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape { shape: shape.to_vec() }, &[x])
    }
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        self.apply(Primitive::Transpose { a, b }, &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::SumAxis { axis }, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[x])
    }
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Shift(c), &[x])
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sqrt, &[x])
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Square, &[x])
    }
    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sin, &[x])
    }
    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Cos, &[x])
    }
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Gather { indices }, &[x])
    }
    pub fn stop_grad(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::StopGrad, &[x])
    }
    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        self.apply(Primitive::Custom(op), inputs)
    }

    /// Euclidean norm over the last axis.
    pub fn norm_last(&mut self, x: Var) -> Result<Var> {
        let sq = self.square(x)?;
        let axis = self.shape(sq).len() - 1;
        let s = self.sum_axis(sq, axis)?;
        self.sqrt(s)
    }
}

fn ensure(cond: bool, op: &'static str, shapes: &[&[usize]]) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(shape_err(op, shapes))
    }
}

fn arity(prim: &Primitive, n: usize, allowed: &[usize]) -> Result<()> {
    if allowed.contains(&n) {
        Ok(())
    } else {
        Err(TensorError::Invalid {
            op: prim.name(),
            msg: format!("expected {allowed:?} inputs, got {n}"),
        })
    }
}

fn conv1d_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Conv1dGeom> {
    ensure(
        x.len() == 3 && w.len() == 3 && x[1] == w[1] && stride > 0 && x[2] + 2 * pad >= w[2],
        "conv1d",
        &[x, w],
    )?;
    Ok(Conv1dGeom {
        batch: x[0],
        cin: x[1],
        len: x[2],
        kernel: w[2],
        stride,
        pad,
        out_len: (x[2] + 2 * pad - w[2]) / stride + 1,
    })
}

fn conv2d_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Conv2dGeom> {
    ensure(
        x.len() == 4
            && w.len() == 4
            && x[1] == w[1]
            && stride > 0
            && x[2] + 2 * pad >= w[2]
            && x[3] + 2 * pad >= w[3],
        "conv2d",
        &[x, w],
    )?;
    Ok(Conv2dGeom {
        batch: x[0],
        cin: x[1],
        h: x[2],
        w: x[3],
        kh: w[2],
        kw: w[3],
        stride,
        pad,
        out_h: (x[2] + 2 * pad - w[2]) / stride + 1,
        out_w: (x[3] + 2 * pad - w[3]) / stride + 1,
    })
}

fn check_bias(op: &'static str, b: Option<&&Tensor>, n: usize) -> Result<()> {
    if let Some(b) = b {
        ensure(b.shape() == [n], op, &[b.shape(), &[n]])?;
    }
    Ok(())
}

/// Position of the four bilinear taps and their weights for one query.
struct Bilinear {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    clamped_x: bool,
    clamped_y: bool,
}

fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> Bilinear {
    let axis = |v: f64, n: usize| -> (usize, usize, f64, bool) {
        let hi = (n - 1) as f64;
        let clamped = !(0.0..=hi).contains(&v);
        let v = v.clamp(0.0, hi);
        if n == 1 {
            return (0, 0, 0.0, true);
        }
        let mut i0 = v.floor() as usize;
        if i0 >= n - 1 {
            i0 = n - 2;
        }
        (i0, i0 + 1, v - i0 as f64, clamped)
    };
    let (x0, x1, fx, clamped_x) = axis(x, w);
    let (y0, y1, fy, clamped_y) = axis(y, h);
    Bilinear {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        clamped_x,
        clamped_y,
    }
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    x.map(f)
}

fn binary_broadcast(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let shape = kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| shape_err(op, &[a.shape(), b.shape()]))?;
    let ma = kernels::broadcast_index_map(a.shape(), &shape);
    let mb = kernels::broadcast_index_map(b.shape(), &shape);
    let data = ma
        .iter()
        .zip(&mb)
        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
        .collect();
    Tensor::new(shape, data)
}

/// Reduces a gradient of the broadcast output back to an input shape.
fn unbroadcast(g: &[f64], src: &[usize], out: &[usize], scale: impl Fn(usize) -> f64) -> Vec<f64> {
    let n: usize = src.iter().product();
    let mut acc = vec![0.0; n];
    if src == out {
        for (i, (a, &gv)) in acc.iter_mut().zip(g).enumerate() {
            *a = gv * scale(i);
        }
        return acc;
    }
    let map = kernels::broadcast_index_map(src, out);
    for (i, (&j, &gv)) in map.iter().zip(g).enumerate() {
        acc[j] += gv * scale(i);
    }
    acc
}

fn permute_map(shape: &[usize], a: usize, b: usize) -> (Vec<usize>, Vec<usize>) {
    // returns (out shape, out flat -> in flat)
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let in_strides = kernels::strides(shape);
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(a, b);
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            flat += perm_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= perm_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

fn forward(prim: &Primitive, x: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let name = prim.name();
    let one = |n: usize| arity(prim, x.len(), &[n]);
    let out = match prim {
        Primitive::Dense => {
            arity(prim, x.len(), &[2, 3])?;
            let (xs, ws) = (x[0].shape(), x[1].shape());
            ensure(!xs.is_empty() && ws.len() == 2 && xs[xs.len() - 1] == ws[0], name, &[xs, ws])?;
            let (din, dout) = (ws[0], ws[1]);
            check_bias(name, x.get(2), dout)?;
            let m = x[0].len() / din;
            let mut out = vec![0.0; m * dout];
            if let Some(b) = x.get(2) {
                for row in out.chunks_mut(dout) {
                    row.copy_from_slice(b.data());
                }
            }
            kernels::matmul_acc(x[0].data(), x[1].data(), &mut out, m, din, dout);
            let mut shape = xs.to_vec();
            *shape.last_mut().unwrap() = dout;
            Tensor::new(shape, out)?
        }
        Primitive::Conv1d { stride, pad } => {
            arity(prim, x.len(), &[2, 3])?;
            let g = conv1d_geom(x[0].shape(), x[1].shape(), *stride, *pad)?;
            let cout = x[1].shape()[0];
            check_bias(name, x.get(2), cout)?;
            let cols = kernels::im2col_1d(x[0].data(), &g);
            let wt = kernels::transpose2d(x[1].data(), cout, g.cols());
            let mut rows = vec![0.0; g.rows() * cout];
            kernels::matmul_acc(&cols, &wt, &mut rows, g.rows(), g.cols(), cout);
            let mut out = vec![0.0; g.batch * cout * g.out_len];
            for b in 0..g.batch {
                for t in 0..g.out_len {
                    let r = &rows[(b * g.out_len + t) * cout..(b * g.out_len + t + 1) * cout];
                    for (co, &v) in r.iter().enumerate() {
                        let bias = x.get(2).map_or(0.0, |bb| bb.data()[co]);
                        out[(b * cout + co) * g.out_len + t] = v + bias;
                    }
                }
            }
            Tensor::new(vec![g.batch, cout, g.out_len], out)?
        }
        Primitive::Conv2d { stride, pad } => {
            arity(prim, x.len(), &[2, 3])?;
            let g = conv2d_geom(x[0].shape(), x[1].shape(), *stride, *pad)?;
            let cout = x[1].shape()[0];
            check_bias(name, x.get(2), cout)?;
            let cols = kernels::im2col_2d(x[0].data(), &g);
            let wt = kernels::transpose2d(x[1].data(), cout, g.cols());
            let mut rows = vec![0.0; g.rows() * cout];
            kernels::matmul_acc(&cols, &wt, &mut rows, g.rows(), g.cols(), cout);
            let plane = g.out_h * g.out_w;
            let mut out = vec![0.0; g.batch * cout * plane];
            for b in 0..g.batch {
                for p in 0..plane {
                    let r = &rows[(b * plane + p) * cout..(b * plane + p + 1) * cout];
                    for (co, &v) in r.iter().enumerate() {
                        let bias = x.get(2).map_or(0.0, |bb| bb.data()[co]);
                        out[(b * cout + co) * plane + p] = v + bias;
                    }
                }
            }
            Tensor::new(vec![g.batch, cout, g.out_h, g.out_w], out)?
        }
        Primitive::Upsample1d => {
            one(1)?;
            let s = x[0].shape();
            ensure(s.len() == 3, name, &[s])?;
            let mut out = Vec::with_capacity(x[0].len() * 2);
            for &v in x[0].data() {
                out.push(v);
                out.push(v);
            }
            Tensor::new(vec![s[0], s[1], s[2] * 2], out)?
        }
        Primitive::Upsample2d => {
            one(1)?;
            let s = x[0].shape();
            ensure(s.len() == 4, name, &[s])?;
            let (h, w) = (s[2], s[3]);
            let mut out = vec![0.0; x[0].len() * 4];
            for (p, plane) in x[0].data().chunks(h * w).enumerate() {
                let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
                for r in 0..2 * h {
                    for c in 0..2 * w {
                        dst[r * 2 * w + c] = plane[(r / 2) * w + c / 2];
                    }
                }
            }
            Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?
        }
        Primitive::MaxReduce { axis } => {
            one(1)?;
            let s = x[0].shape();
            ensure(*axis < s.len() && s[*axis] > 0, name, &[s])?;
            let (outer, n, inner) = split_axis(s, *axis);
            let mut out = vec![f64::NEG_INFINITY; outer * inner];
            let mut arg = vec![0usize; outer * inner];
            let d = x[0].data();
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        let src = (o * n + k) * inner + i;
                        let dst = o * inner + i;
                        if k == 0 || d[src] > out[dst] {
                            out[dst] = d[src];
                            arg[dst] = src;
                        }
                    }
                }
            }
            let mut shape = s.to_vec();
            shape.remove(*axis);
            return Ok((Tensor::new(shape, out)?, Saved::Indices(arg)));
        }
        Primitive::Relu => {
            one(1)?;
            unary(x[0], |v| v.max(0.0))
        }
        Primitive::Silu => {
            one(1)?;
            unary(x[0], |v| v * sigmoid(v))
        }
        Primitive::Softmax => {
            one(1)?;
            let s = x[0].shape();
            ensure(!s.is_empty() && s[s.len() - 1] > 0, name, &[s])?;
            let n = s[s.len() - 1];
            let mut out = x[0].data().to_vec();
            for row in out.chunks_mut(n) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            Tensor::new(s.to_vec(), out)?
        }
        Primitive::Add => {
            one(2)?;
            binary_broadcast(name, x[0], x[1], |a, b| a + b)?
        }
        Primitive::Sub => {
            one(2)?;
            binary_broadcast(name, x[0], x[1], |a, b| a - b)?
        }
        Primitive::Mul => {
            one(2)?;
            binary_broadcast(name, x[0], x[1], |a, b| a * b)?
        }
        Primitive::Concat { axis } => {
            if x.is_empty() {
                return Err(TensorError::Invalid {
                    op: name,
                    msg: "no inputs".into(),
                });
            }
            let s0 = x[0].shape();
            ensure(*axis < s0.len(), name, &[s0])?;
            for t in x.iter().skip(1) {
                let s = t.shape();
                let ok = s.len() == s0.len() && s.iter().zip(s0).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                ensure(ok, name, &[s0, s])?;
            }
            let (outer, _, inner) = split_axis(s0, *axis);
            let total: usize = x.iter().map(|t| t.shape()[*axis]).sum();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in x {
                    let n = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
                }
            }
            let mut shape = s0.to_vec();
            shape[*axis] = total;
            Tensor::new(shape, out)?
        }
        Primitive::GridSample => {
            one(2)?;
            let (gs, cs) = (x[0].shape(), x[1].shape());
            ensure(
                gs.len() == 4 && cs.len() == 3 && cs[0] == gs[0] && cs[2] == 2 && gs[2] > 0 && gs[3] > 0,
                name,
                &[gs, cs],
            )?;
            let (b, c, h, w) = (gs[0], gs[1], gs[2], gs[3]);
            let n = cs[1];
            let mut out = vec![0.0; b * n * c];
            let g = x[0].data();
            let q = x[1].data();
            for bi in 0..b {
                for ni in 0..n {
                    let qi = (bi * n + ni) * 2;
                    let t = bilinear_taps(q[qi], q[qi + 1], h, w);
                    for ci in 0..c {
                        let base = (bi * c + ci) * h * w;
                        let v00 = g[base + t.y0 * w + t.x0];
                        let v01 = g[base + t.y0 * w + t.x1];
                        let v10 = g[base + t.y1 * w + t.x0];
                        let v11 = g[base + t.y1 * w + t.x1];
                        out[(bi * n + ni) * c + ci] = (1.0 - t.fy) * ((1.0 - t.fx) * v00 + t.fx * v01)
                            + t.fy * ((1.0 - t.fx) * v10 + t.fx * v11);
                    }
                }
            }
            Tensor::new(vec![b, n, c], out)?
        }
        Primitive::Slice { axis, start, end } => {
            one(1)?;
            let s = x[0].shape();
            ensure(*axis < s.len() && start < end && *end <= s[*axis], name, &[s])?;
            let (outer, n, inner) = split_axis(s, *axis);
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                out.extend_from_slice(&x[0].data()[(o * n + start) * inner..(o * n + end) * inner]);
            }
            let mut shape = s.to_vec();
            shape[*axis] = end - start;
            Tensor::new(shape, out)?
        }
        Primitive::Reshape { shape } => {
            one(1)?;
            x[0].clone().reshaped(shape)?
        }
        Primitive::Transpose { a, b } => {
            one(1)?;
            let s = x[0].shape();
            ensure(*a < s.len() && *b < s.len(), name, &[s])?;
            let (shape, map) = permute_map(s, *a, *b);
            let d = x[0].data();
            Tensor::new(shape, map.iter().map(|&i| d[i]).collect())?
        }
        Primitive::Sum => {
            one(1)?;
            Tensor::scalar(x[0].data().iter().sum())
        }
        Primitive::SumAxis { axis } => {
            one(1)?;
            let s = x[0].shape();
            ensure(*axis < s.len(), name, &[s])?;
            let (outer, n, inner) = split_axis(s, *axis);
            let mut out = vec![0.0; outer * inner];
            let d = x[0].data();
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        out[o * inner + i] += d[(o * n + k) * inner + i];
                    }
                }
            }
            let mut shape = s.to_vec();
            shape.remove(*axis);
            Tensor::new(shape, out)?
        }
        Primitive::Scale(c) => {
            one(1)?;
            unary(x[0], |v| v * c)
        }
        Primitive::Shift(c) => {
            one(1)?;
            unary(x[0], |v| v + c)
        }
        Primitive::Exp => {
            one(1)?;
            unary(x[0], f64::exp)
        }
        Primitive::Sqrt => {
            one(1)?;
            if x[0].data().iter().any(|&v| v < 0.0) {
                return Err(TensorError::Invalid {
                    op: name,
                    msg: "negative input".into(),
                });
            }
            unary(x[0], f64::sqrt)
        }
        Primitive::Square => {
            one(1)?;
            unary(x[0], |v| v * v)
        }
        Primitive::Sin => {
            one(1)?;
            unary(x[0], f64::sin)
        }
        Primitive::Cos => {
            one(1)?;
            unary(x[0], f64::cos)
        }
        Primitive::Gather { indices } => {
            one(1)?;
            let s = x[0].shape();
            ensure(!s.is_empty() && indices.iter().all(|&i| i < s[0]), name, &[s])?;
            let row: usize = s[1..].iter().product();
            let mut out = Vec::with_capacity(indices.len() * row);
            for &i in indices {
                out.extend_from_slice(&x[0].data()[i * row..(i + 1) * row]);
            }
            let mut shape = s.to_vec();
            shape[0] = indices.len();
            Tensor::new(shape, out)?
        }
        Primitive::StopGrad => {
            one(1)?;
            x[0].clone()
        }
        Primitive::Custom(op) => op.forward(x)?,
    };
    Ok((out, Saved::None))
}

fn backward_prim(rec: &Record, x: &[&Tensor], want: &[bool], y: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let want_any = |i: usize| want.get(i).copied().unwrap_or(false);
    match &rec.prim {
        Primitive::Dense => {
            let ws = x[1].shape();
            let (din, dout) = (ws[0], ws[1]);
            let m = x[0].len() / din;
            let dx = want_any(0).then(|| {
                let wt = kernels::transpose2d(x[1].data(), din, dout);
                let mut dx = vec![0.0; m * din];
                kernels::matmul_acc(g, &wt, &mut dx, m, dout, din);
                dx
            });
            let dw = want_any(1).then(|| {
                let mut dw = vec![0.0; din * dout];
                kernels::matmul_at_b_acc(x[0].data(), g, &mut dw, m, din, dout);
                dw
            });
            let mut out = vec![dx, dw];
            if x.len() == 3 {
                out.push(want_any(2).then(|| {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    db
                }));
            }
            out
        }
        Primitive::Conv1d { stride, pad } => {
            let gm = conv1d_geom(x[0].shape(), x[1].shape(), *stride, *pad).expect("checked in forward");
            let cout = x[1].shape()[0];
            let mut rows = vec![0.0; gm.rows() * cout];
            for b in 0..gm.batch {
                for co in 0..cout {
                    for t in 0..gm.out_len {
                        rows[(b * gm.out_len + t) * cout + co] = g[(b * cout + co) * gm.out_len + t];
                    }
                }
            }
            let dx = want_any(0).then(|| {
                let mut dcols = vec![0.0; gm.rows() * gm.cols()];
                kernels::matmul_acc(&rows, x[1].data(), &mut dcols, gm.rows(), cout, gm.cols());
                let mut dx = vec![0.0; x[0].len()];
                kernels::col2im_1d(&dcols, &gm, &mut dx);
                dx
            });
            let dw = want_any(1).then(|| {
                let cols = kernels::im2col_1d(x[0].data(), &gm);
                let mut dwt = vec![0.0; gm.cols() * cout];
                kernels::matmul_at_b_acc(&cols, &rows, &mut dwt, gm.rows(), gm.cols(), cout);
                kernels::transpose2d(&dwt, gm.cols(), cout)
            });
            let mut out = vec![dx, dw];
            if x.len() == 3 {
                out.push(want_any(2).then(|| {
                    let mut db = vec![0.0; cout];
                    for r in rows.chunks(cout) {
                        db.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                    }
                    db
                }));
            }
            out
        }
        Primitive::Conv2d { stride, pad } => {
            let gm = conv2d_geom(x[0].shape(), x[1].shape(), *stride, *pad).expect("checked in forward");
            let cout = x[1].shape()[0];
            let plane = gm.out_h * gm.out_w;
            let mut rows = vec![0.0; gm.rows() * cout];
            for b in 0..gm.batch {
                for co in 0..cout {
                    for p in 0..plane {
                        rows[(b * plane + p) * cout + co] = g[(b * cout + co) * plane + p];
                    }
                }
            }
            let dx = want_any(0).then(|| {
                let mut dcols = vec![0.0; gm.rows() * gm.cols()];
                kernels::matmul_acc(&rows, x[1].data(), &mut dcols, gm.rows(), cout, gm.cols());
                let mut dx = vec![0.0; x[0].len()];
                kernels::col2im_2d(&dcols, &gm, &mut dx);
                dx
            });
            let dw = want_any(1).then(|| {
                let cols = kernels::im2col_2d(x[0].data(), &gm);
                let mut dwt = vec![0.0; gm.cols() * cout];
                kernels::matmul_at_b_acc(&cols, &rows, &mut dwt, gm.rows(), gm.cols(), cout);
                kernels::transpose2d(&dwt, gm.cols(), cout)
            });
            let mut out = vec![dx, dw];
            if x.len() == 3 {
                out.push(want_any(2).then(|| {
                    let mut db = vec![0.0; cout];
                    for r in rows.chunks(cout) {
                        db.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                    }
                    db
                }));
            }
            out
        }
        Primitive::Upsample1d => {
            vec![Some(g.chunks(2).map(|p| p[0] + p[1]).collect())]
        }
        Primitive::Upsample2d => {
            let s = x[0].shape();
            let (h, w) = (s[2], s[3]);
            let mut dx = vec![0.0; x[0].len()];
            for (p, plane) in g.chunks(4 * h * w).enumerate() {
                for r in 0..2 * h {
                    for c in 0..2 * w {
                        dx[p * h * w + (r / 2) * w + c / 2] += plane[r * 2 * w + c];
                    }
                }
            }
            vec![Some(dx)]
        }
        Primitive::MaxReduce { .. } => {
            let Saved::Indices(arg) = &rec.saved else {
                unreachable!("max_reduce saves argmax")
            };
            let mut dx = vec![0.0; x[0].len()];
            for (&src, &gv) in arg.iter().zip(g) {
                dx[src] += gv;
            }
            vec![Some(dx)]
        }
        Primitive::Relu => vec![Some(
            x[0].data()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                .collect(),
        )],
        Primitive::Silu => vec![Some(
            x[0].data()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| {
                    let s = sigmoid(v);
                    gv * s * (1.0 + v * (1.0 - s))
                })
                .collect(),
        )],
        Primitive::Softmax => {
            let n = *y.shape().last().unwrap();
            let mut dx = vec![0.0; y.len()];
            for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.data().chunks(n)).zip(g.chunks(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(dx)]
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let out = y.shape();
            let (sa, sb) = (x[0].shape(), x[1].shape());
            match rec.prim {
                Primitive::Add => vec![
                    want_any(0).then(|| unbroadcast(g, sa, out, |_| 1.0)),
                    want_any(1).then(|| unbroadcast(g, sb, out, |_| 1.0)),
                ],
                Primitive::Sub => vec![
                    want_any(0).then(|| unbroadcast(g, sa, out, |_| 1.0)),
                    want_any(1).then(|| unbroadcast(g, sb, out, |_| -1.0)),
                ],
                _ => {
                    let other = |t: &Tensor| -> Vec<f64> {
                        if t.shape() == out {
                            t.data().to_vec()
                        } else {
                            kernels::broadcast_index_map(t.shape(), out)
                                .iter()
                                .map(|&i| t.data()[i])
                                .collect()
                        }
                    };
                    vec![
                        want_any(0).then(|| {
                            let bb = other(x[1]);
                            unbroadcast(g, sa, out, |i| bb[i])
                        }),
                        want_any(1).then(|| {
                            let aa = other(x[0]);
                            unbroadcast(g, sb, out, |i| aa[i])
                        }),
                    ]
                }
            }
        }
        Primitive::Concat { axis } => {
            let s0 = x[0].shape();
            let (outer, _, inner) = split_axis(s0, *axis);
            let total: usize = x.iter().map(|t| t.shape()[*axis]).sum();
            let mut grads: Vec<Vec<f64>> = x.iter().map(|t| Vec::with_capacity(t.len())).collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (k, t) in x.iter().enumerate() {
                    let n = t.shape()[*axis] * inner;
                    grads[k].extend_from_slice(&g[off..off + n]);
                    off += n;
                }
            }
            grads
                .into_iter()
                .enumerate()
                .map(|(k, gk)| want_any(k).then_some(gk))
                .collect()
        }
        Primitive::GridSample => {
            let gs = x[0].shape();
            let (b, c, h, w) = (gs[0], gs[1], gs[2], gs[3]);
            let n = x[1].shape()[1];
            let grid = x[0].data();
            let q = x[1].data();
            let mut dgrid = vec![0.0; x[0].len()];
            let mut dq = vec![0.0; x[1].len()];
            for bi in 0..b {
                for ni in 0..n {
                    let qi = (bi * n + ni) * 2;
                    let t = bilinear_taps(q[qi], q[qi + 1], h, w);
                    for ci in 0..c {
                        let gv = g[(bi * n + ni) * c + ci];
                        if gv == 0.0 {
                            continue;
                        }
                        let base = (bi * c + ci) * h * w;
                        let (i00, i01, i10, i11) = (
                            base + t.y0 * w + t.x0,
                            base + t.y0 * w + t.x1,
                            base + t.y1 * w + t.x0,
                            base + t.y1 * w + t.x1,
                        );
                        dgrid[i00] += gv * (1.0 - t.fx) * (1.0 - t.fy);
                        dgrid[i01] += gv * t.fx * (1.0 - t.fy);
                        dgrid[i10] += gv * (1.0 - t.fx) * t.fy;
                        dgrid[i11] += gv * t.fx * t.fy;
                        let (v00, v01, v10, v11) = (grid[i00], grid[i01], grid[i10], grid[i11]);
                        if !t.clamped_x && w > 1 {
                            dq[qi] += gv * ((1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                        }
                        if !t.clamped_y && h > 1 {
                            dq[qi + 1] += gv * ((1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                        }
                    }
                }
            }
            vec![want_any(0).then_some(dgrid), want_any(1).then_some(dq)]
        }
        Primitive::Slice { axis, start, end } => {
            let s = x[0].shape();
            let (outer, n, inner) = split_axis(s, *axis);
            let mut dx = vec![0.0; x[0].len()];
            let len = (end - start) * inner;
            for o in 0..outer {
                dx[(o * n + start) * inner..(o * n + end) * inner].copy_from_slice(&g[o * len..(o + 1) * len]);
            }
            vec![Some(dx)]
        }
        Primitive::Reshape { .. } | Primitive::StopGrad => vec![Some(g.to_vec())],
        Primitive::Transpose { a, b } => {
            let (_, map) = permute_map(x[0].shape(), *a, *b);
            let mut dx = vec![0.0; x[0].len()];
            for (&i, &gv) in map.iter().zip(g) {
                dx[i] = gv;
            }
            vec![Some(dx)]
        }
        Primitive::Sum => vec![Some(vec![g[0]; x[0].len()])],
        Primitive::SumAxis { axis } => {
            let (outer, n, inner) = split_axis(x[0].shape(), *axis);
            let mut dx = vec![0.0; x[0].len()];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        dx[(o * n + k) * inner + i] = g[o * inner + i];
                    }
                }
            }
            vec![Some(dx)]
        }
        Primitive::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
        Primitive::Shift(_) => vec![Some(g.to_vec())],
        Primitive::Exp => vec![Some(y.data().iter().zip(g).map(|(a, b)| a * b).collect())],
        Primitive::Sqrt => vec![Some(
            y.data()
                .iter()
                .zip(g)
                .map(|(&yv, &gv)| if yv > 0.0 { gv / (2.0 * yv) } else { 0.0 })
                .collect(),
        )],
        Primitive::Square => vec![Some(x[0].data().iter().zip(g).map(|(a, b)| 2.0 * a * b).collect())],
        Primitive::Sin => vec![Some(x[0].data().iter().zip(g).map(|(a, b)| a.cos() * b).collect())],
        Primitive::Cos => vec![Some(x[0].data().iter().zip(g).map(|(a, b)| -a.sin() * b).collect())],
        Primitive::Gather { indices } => {
            let row: usize = x[0].shape()[1..].iter().product();
            let mut dx = vec![0.0; x[0].len()];
            for (k, &i) in indices.iter().enumerate() {
                dx[i * row..(i + 1) * row]
                    .iter_mut()
                    .zip(&g[k * row..(k + 1) * row])
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(dx)]
        }
        Primitive::Custom(op) => op.backward(x, y, g),
    }
}
