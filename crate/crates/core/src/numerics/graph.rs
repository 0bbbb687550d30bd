//! Dynamically recorded computation graph with reverse-mode gradients.
//!
//! Every op appends a node holding its forward value; nodes are created in
//! topological order, so the backward sweep simply walks the node list in
//! reverse. A graph belongs to one training step and is dropped afterwards.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::gemm;
use crate::numerics::tensor::{broadcast_shape, broadcast_strides, for_each_offset, reduce_to, strides};
use crate::numerics::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Take(Var, Vec<usize>),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    BatchNorm(Var, Vec<f32>),
    Gelu(Var),
    Relu(Var),
    Sqrt(Var, f32),
    Sum(Var),
    Mean(Var),
    PairwiseSqDist(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Concat(..) => "concat",
            Op::Narrow(..) => "narrow",
            Op::Take(..) => "take",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm(..) => "batch_norm",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::PairwiseSqDist(..) => "pairwise_sqdist",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, used by the
/// caller to update running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance.
    pub var: Vec<f32>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
    first_non_finite: Cell<Option<usize>>,
    transparent_detach: bool,
}

pub const LN_EPS: f32 = 1e-5;
pub const BN_EPS: f32 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `detach` is the identity, so backward differentiates
    /// the computed value exactly. Used for finite-difference checks of
    /// losses with stop-gradients.
    pub fn with_transparent_detach() -> Self {
        Self {
            transparent_detach: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.any_requires_grad(&op),
        };
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.first_non_finite.get().is_none() && !value.is_finite() {
            self.first_non_finite.set(Some(id));
        }
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(id)
    }

    fn any_requires_grad(&self, op: &Op) -> bool {
        let nodes = self.nodes.borrow();
        let rg = |v: &Var| nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => rg(a) || rg(b),
            Op::PairwiseSqDist(a, b) => rg(a) || rg(b),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::BroadcastTo(a)
            | Op::Narrow(a, ..)
            | Op::Take(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::BatchNorm(a, _)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Sqrt(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => rg(a),
            Op::Concat(vs, _) => vs.iter().any(rg),
            Op::LayerNorm { x, gain, bias, .. } => rg(x) || rg(gain) || rg(bias),
        }
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A free input whose gradient is tracked.
    pub fn input(&self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes.borrow_mut()[v.0].requires_grad = true;
        v
    }

    /// Binds a stored parameter into this graph; repeated calls return the
    /// same node so gradients from every use accumulate in one place.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf);
        self.nodes.borrow_mut()[v.0].requires_grad = p.trainable;
        self.params.borrow_mut().insert(id, v);
        v
    }

    /// Cuts the gradient path: same value, new constant node.
    pub fn detach(&self, v: Var) -> Var {
        if self.transparent_detach {
            return v;
        }
        let t = self.value(v);
        self.push((*t).clone(), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Index and op name of the first node whose value was NaN or infinite.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.first_non_finite
            .get()
            .map(|i| (i, self.nodes.borrow()[i].op.name()))
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        let out = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::Shape {
            op,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let sa = broadcast_strides(ta.shape(), &out);
        let sb = broadcast_strides(tb.shape(), &out);
        let n: usize = out.iter().product();
        let mut data = vec![0.0; n];
        let (da, db) = (ta.data(), tb.data());
        for_each_offset(&out, [&sa, &sb], |lin, [oa, ob]| data[lin] = f(da[oa], db[ob]));
        Tensor::new(out, data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&self, a: Var, s: f32) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: f32) -> Var {
        let t = self.value(a).map(|x| x + s);
        self.push(t, Op::AddScalar(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    pub fn gelu(&self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        self.push(t, Op::Gelu(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    /// `sqrt(max(x, floor))`; no gradient flows where `x` is at or below the floor.
    pub fn sqrt_clamped(&self, a: Var, floor: f32) -> Var {
        let t = self.value(a).map(|x| x.max(floor).sqrt());
        self.push(t, Op::Sqrt(a, floor))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().map(|&x| x as f64).sum();
        let m = s / t.numel().max(1) as f64;
        self.push(Tensor::scalar(m as f32), Op::Mean(a))
    }

    // ---- linear algebra ----------------------------------------------------

    /// Batched matrix product `[..., m, k] x [..., k, n]` with broadcast
    /// batch dimensions.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        let plan = MatMulPlan::new(ta.shape(), tb.shape())?;
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        plan.forward(ta.data(), tb.data(), &mut out);
        let t = Tensor::new(plan.out_shape.clone(), out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `[n, d] x [m, d] -> [n, m]` squared Euclidean distances.
    pub fn pairwise_sqdist(&self, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(Error::Shape {
                op: "pairwise_sqdist",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (n, m) = (ta.shape()[0], tb.shape()[0]);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ai = ta.row(i);
            for j in 0..m {
                let bj = tb.row(j);
                out.push(ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::PairwiseSqDist(a, b)))
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.value(a)).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let t = permute_tensor(&ta, perm)?;
        Ok(self.push(t, Op::Permute(a, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(Error::Dim {
                op: "transpose",
                msg: format!("rank {r} tensor"),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }

    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        match broadcast_shape(ta.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::Shape {
                    op: "broadcast_to",
                    lhs: ta.shape().to_vec(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let st = broadcast_strides(ta.shape(), shape);
        let mut data = vec![0.0; shape.iter().product()];
        let src = ta.data();
        for_each_offset(shape, [&st], |lin, [o]| data[lin] = src[o]);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::BroadcastTo(a)))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&v| self.value(v)).collect();
        let first = values.first().ok_or_else(|| Error::Dim {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Dim {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = 0;
        for v in &values {
            let ok = v.rank() == rank
                && (0..rank).all(|d| d == axis || v.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            out_shape[axis] += v.shape()[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis)))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() || start + len > ta.shape()[axis] {
            return Err(Error::Dim {
                op: "narrow",
                msg: format!("[{start}, {}) on axis {axis} of {:?}", start + len, ta.shape()),
            });
        }
        let outer: usize = ta.shape()[..axis].iter().product();
        let inner: usize = ta.shape()[axis + 1..].iter().product();
        let full = ta.shape()[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Narrow(a, axis, start)))
    }

    /// Gathers flat elements of `a` into a tensor of `shape`.
    pub fn take(&self, a: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= ta.numel()) {
            return Err(Error::Dim {
                op: "take",
                msg: format!("index {bad} out of range for {} elements", ta.numel()),
            });
        }
        let data = indices.iter().map(|&i| ta.data()[i]).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t, Op::Take(a, indices)))
    }

    /// Rows of a `[rows, width]` table.
    pub fn gather_rows(&self, table: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::Dim {
                op: "gather_rows",
                msg: format!("table must be rank 2, got {shape:?}"),
            });
        }
        let width = shape[1];
        let mut idx = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= shape[0] {
                return Err(Error::Dim {
                    op: "gather_rows",
                    msg: format!("row {r} out of range for {} rows", shape[0]),
                });
            }
            idx.extend(r * width..(r + 1) * width);
        }
        self.take(table, idx, &[rows.len(), width])
    }

    // ---- normalization -----------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let t = softmax_last(&self.value(a));
        self.push(t, Op::Softmax(a))
    }

    pub fn log_softmax(&self, a: Var) -> Var {
        let ta = self.value(a);
        let w = *ta.shape().last().unwrap_or(&1);
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(w.max(1)) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f32>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::LogSoftmax(a))
    }

    /// Layer normalization over the last axis followed by a per-channel affine map.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let tg = self.value(gain);
        let tb = self.value(bias);
        let c = *tx.shape().last().unwrap_or(&0);
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.numel() / c;
        let mut out = vec![0.0; tx.numel()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (r, (src, dst)) in tx.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let mean = src.iter().sum::<f32>() / c as f32;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for i in 0..c {
                dst[i] = (src[i] - mean) * rstd * tg.data()[i] + tb.data()[i];
            }
            means.push(mean);
            rstds.push(rstd);
            debug_assert_eq!(means.len(), r + 1);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Training-mode batch normalization of `[batch, features]` without affine
    /// terms. Returns the normalized value and the batch statistics.
    pub fn batch_norm(&self, x: Var) -> Result<(Var, BatchStats)> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::Dim {
                op: "batch_norm",
                msg: format!("expected [batch, features], got {:?}", tx.shape()),
            });
        }
        let (b, f) = (tx.shape()[0], tx.shape()[1]);
        if b < 2 {
            return Err(Error::Batch(
                "batch norm in training mode needs at least 2 samples".into(),
            ));
        }
        let mut mean = vec![0.0f32; f];
        for r in 0..b {
            for (m, v) in mean.iter_mut().zip(tx.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f32);
        let mut var = vec![0.0f32; f];
        for r in 0..b {
            for ((s, v), m) in var.iter_mut().zip(tx.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let rstd: Vec<f32> = var.iter().map(|s| 1.0 / (s / b as f32 + BN_EPS).sqrt()).collect();
        let mut out = vec![0.0; b * f];
        for r in 0..b {
            for i in 0..f {
                out[r * f + i] = (tx.data()[r * f + i] - mean[i]) * rstd[i];
            }
        }
        let unbiased = var.iter().map(|s| s / (b - 1) as f32).collect();
        let t = Tensor::new(vec![b, f], out)?;
        let v = self.push(t, Op::BatchNorm(x, rstd));
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if let Some((i, name)) = self.first_non_finite() {
            return Err(Error::NonFinite(format!("node {i} ({name})")));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::Dim {
                op: "backward",
                msg: format!("loss must be scalar, got {:?}", nodes[loss.0].value.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .params
            .borrow()
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Gradients of one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }

    /// Adds every parameter gradient into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in self.param_grads() {
            store.get_mut(id).grad.add_assign(g);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    debug_assert_eq!(g.shape(), nodes[v.0].value.shape(), "{}", nodes[v.0].op.name());
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: Var| nodes[v.0].value.clone();
    let rg = |v: Var| nodes[v.0].requires_grad;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (sa, sb) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
            accumulate(grads, nodes, *a, reduce_to(g, &sa));
            accumulate(grads, nodes, *b, reduce_to(g, &sb));
        }
        Op::Sub(a, b) => {
            let (sa, sb) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
            accumulate(grads, nodes, *a, reduce_to(g, &sa));
            accumulate(grads, nodes, *b, reduce_to(&g.map(|x| -x), &sb));
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if rg(*a) {
                let ga = elementwise_broadcast(g, &tb, |x, y| x * y);
                accumulate(grads, nodes, *a, reduce_to(&ga, ta.shape()));
            }
            if rg(*b) {
                let gb = elementwise_broadcast(g, &ta, |x, y| x * y);
                accumulate(grads, nodes, *b, reduce_to(&gb, tb.shape()));
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.map(|x| x * s)),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let plan = MatMulPlan::new(ta.shape(), tb.shape()).expect("checked in forward");
            let mut ga = rg(*a).then(|| vec![0.0; ta.numel()]);
            let mut gb = rg(*b).then(|| vec![0.0; tb.numel()]);
            plan.backward(
                ta.data(),
                tb.data(),
                g.data(),
                ga.as_deref_mut(),
                gb.as_deref_mut(),
            );
            if let Some(ga) = ga {
                accumulate(grads, nodes, *a, Tensor::new(ta.shape().to_vec(), ga).unwrap());
            }
            if let Some(gb) = gb {
                accumulate(grads, nodes, *b, Tensor::new(tb.shape().to_vec(), gb).unwrap());
            }
        }
        Op::PairwiseSqDist(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (n, m, d) = (ta.shape()[0], tb.shape()[0], ta.shape()[1]);
            let mut ga = vec![0.0; n * d];
            let mut gb = vec![0.0; m * d];
            for i in 0..n {
                for j in 0..m {
                    let w = 2.0 * g.data()[i * m + j];
                    if w == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        let diff = ta.data()[i * d + k] - tb.data()[j * d + k];
                        ga[i * d + k] += w * diff;
                        gb[j * d + k] -= w * diff;
                    }
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(vec![n, d], ga).unwrap());
            accumulate(grads, nodes, *b, Tensor::new(vec![m, d], gb).unwrap());
        }
        Op::Reshape(a) => {
            let s = val(*a).shape().to_vec();
            accumulate(grads, nodes, *a, g.clone().reshape(s).unwrap());
        }
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            accumulate(grads, nodes, *a, permute_tensor(g, &inv).unwrap());
        }
        Op::BroadcastTo(a) => {
            let s = val(*a).shape().to_vec();
            accumulate(grads, nodes, *a, reduce_to(g, &s));
        }
        Op::Concat(parts, axis) => {
            let shape = g.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let ps = val(p).shape().to_vec();
                let chunk = ps[*axis] * inner;
                if rg(p) {
                    let mut data = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * total + offset;
                        data.extend_from_slice(&g.data()[base..base + chunk]);
                    }
                    accumulate(grads, nodes, p, Tensor::new(ps, data).unwrap());
                }
                offset += chunk;
            }
        }
        Op::Narrow(a, axis, start) => {
            let ta = val(*a);
            let shape = ta.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let full = shape[*axis] * inner;
            let len = g.shape()[*axis] * inner;
            let mut data = vec![0.0; ta.numel()];
            for o in 0..outer {
                let dst = o * full + start * inner;
                data[dst..dst + len].copy_from_slice(&g.data()[o * len..(o + 1) * len]);
            }
            accumulate(grads, nodes, *a, Tensor::new(shape.to_vec(), data).unwrap());
        }
        Op::Take(a, idx) => {
            let ta = val(*a);
            let mut data = vec![0.0; ta.numel()];
            for (gi, &i) in g.data().iter().zip(idx) {
                data[i] += gi;
            }
            accumulate(grads, nodes, *a, Tensor::new(ta.shape().to_vec(), data).unwrap());
        }
        Op::Softmax(a) => {
            let w = *out.shape().last().unwrap();
            let mut data = vec![0.0; out.numel()];
            for ((y, dy), dx) in out
                .data()
                .chunks(w)
                .zip(g.data().chunks(w))
                .zip(data.chunks_mut(w))
            {
                let dot: f32 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                for i in 0..w {
                    dx[i] = y[i] * (dy[i] - dot);
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(out.shape().to_vec(), data).unwrap());
        }
        Op::LogSoftmax(a) => {
            let w = *out.shape().last().unwrap();
            let mut data = vec![0.0; out.numel()];
            for ((y, dy), dx) in out
                .data()
                .chunks(w)
                .zip(g.data().chunks(w))
                .zip(data.chunks_mut(w))
            {
                let s: f32 = dy.iter().sum();
                for i in 0..w {
                    dx[i] = dy[i] - y[i].exp() * s;
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(out.shape().to_vec(), data).unwrap());
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let tx = val(*x);
            let tg = val(*gain);
            let c = tg.numel();
            let mut dx = vec![0.0; tx.numel()];
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            let mut xhat = vec![0.0; c];
            let mut dxhat = vec![0.0; c];
            for r in 0..tx.numel() / c {
                let src = &tx.data()[r * c..(r + 1) * c];
                let dy = &g.data()[r * c..(r + 1) * c];
                for i in 0..c {
                    xhat[i] = (src[i] - mean[r]) * rstd[r];
                    dxhat[i] = dy[i] * tg.data()[i];
                    dg[i] += dy[i] * xhat[i];
                    db[i] += dy[i];
                }
                let m1 = dxhat.iter().sum::<f32>() / c as f32;
                let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / c as f32;
                for i in 0..c {
                    dx[r * c + i] = rstd[r] * (dxhat[i] - m1 - xhat[i] * m2);
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(tx.shape().to_vec(), dx).unwrap());
            accumulate(grads, nodes, *gain, Tensor::new(vec![c], dg).unwrap());
            accumulate(grads, nodes, *bias, Tensor::new(vec![c], db).unwrap());
        }
        Op::BatchNorm(x, rstd) => {
            let (b, f) = (out.shape()[0], out.shape()[1]);
            let mut s1 = vec![0.0f32; f];
            let mut s2 = vec![0.0f32; f];
            for r in 0..b {
                for i in 0..f {
                    let dy = g.data()[r * f + i];
                    s1[i] += dy;
                    s2[i] += dy * out.data()[r * f + i];
                }
            }
            let mut dx = vec![0.0; b * f];
            for r in 0..b {
                for i in 0..f {
                    let k = r * f + i;
                    dx[k] = rstd[i] / b as f32
                        * (b as f32 * g.data()[k] - s1[i] - out.data()[k] * s2[i]);
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(vec![b, f], dx).unwrap());
        }
        Op::Gelu(a) => {
            let ta = val(*a);
            let data = ta.data().iter().zip(g.data()).map(|(&x, &dy)| dy * gelu_grad(x)).collect();
            accumulate(grads, nodes, *a, Tensor::new(ta.shape().to_vec(), data).unwrap());
        }
        Op::Sqrt(a, floor) => {
            let ta = val(*a);
            let data = ta
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &dy)| if x > *floor { 0.5 * dy / x.sqrt() } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, Tensor::new(ta.shape().to_vec(), data).unwrap());
        }
        Op::Relu(a) => {
            let ta = val(*a);
            let data = ta
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &dy)| if x > 0.0 { dy } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, Tensor::new(ta.shape().to_vec(), data).unwrap());
        }
        Op::Sum(a) => {
            let s = val(*a).shape().to_vec();
            accumulate(grads, nodes, *a, Tensor::full(s, g.item()));
        }
        Op::Mean(a) => {
            let ta = val(*a);
            let n = ta.numel().max(1) as f32;
            accumulate(grads, nodes, *a, Tensor::full(ta.shape().to_vec(), g.item() / n));
        }
    }
}

fn elementwise_broadcast(g: &Tensor, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    if g.shape() == other.shape() {
        let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        return Tensor::new(g.shape().to_vec(), data).unwrap();
    }
    let st = broadcast_strides(other.shape(), g.shape());
    let mut data = vec![0.0; g.numel()];
    let (dg, doth) = (g.data(), other.data());
    for_each_offset(g.shape(), [&st], |lin, [o]| data[lin] = f(dg[lin], doth[o]));
    Tensor::new(g.shape().to_vec(), data).unwrap()
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let r = t.rank();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Dim {
            op: "permute",
            msg: format!("{perm:?} is not a permutation of rank {r}"),
        });
    }
    let src_strides = strides(t.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let st: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut data = vec![0.0; t.numel()];
    let src = t.data();
    for_each_offset(&out_shape, [&st], |lin, [o]| data[lin] = src[o]);
    Tensor::new(out_shape, data)
}

pub(crate) fn softmax_last(t: &Tensor) -> Tensor {
    let w = *t.shape().last().unwrap_or(&1);
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(w.max(1)) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        row.iter_mut().for_each(|x| *x /= s);
    }
    Tensor::new(t.shape().to_vec(), out).unwrap()
}

const GELU_K: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_C: f32 = 0.044_715;

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Batch layout of a broadcast matrix product.
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// Per output batch: (a matrix offset, b matrix offset).
    batches: Vec<(usize, usize)>,
}

impl MatMulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = broadcast_shape(ba, bb).ok_or_else(err)?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);

        let mut batches = Vec::new();
        if bb.iter().product::<usize>() == 1 {
            // fold the batch of `a` into its rows
            let rows = batch.iter().product::<usize>() * m;
            return Ok(Self {
                m: rows,
                k,
                n,
                out_shape,
                batches: vec![(0, 0)],
            });
        }
        let stride_a: Vec<usize> = broadcast_strides(ba, &batch).iter().map(|s| s * m * k).collect();
        let stride_b: Vec<usize> = broadcast_strides(bb, &batch).iter().map(|s| s * k * n).collect();
        for_each_offset(&batch, [&stride_a, &stride_b], |_, [oa, ob]| batches.push((oa, ob)));
        Ok(Self {
            m,
            k,
            n,
            out_shape,
            batches,
        })
    }

    fn forward(&self, a: &[f32], b: &[f32], out: &mut [f32]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for (i, &(oa, ob)) in self.batches.iter().enumerate() {
            gemm::gemm(
                m,
                k,
                n,
                gemm::View::row_major(&a[oa..], k),
                gemm::View::row_major(&b[ob..], n),
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
    }

    fn backward(&self, a: &[f32], b: &[f32], g: &[f32], ga: Option<&mut [f32]>, gb: Option<&mut [f32]>) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(ga) = ga {
            // dA = dC · Bᵀ
            for (i, &(oa, ob)) in self.batches.iter().enumerate() {
                gemm::gemm(
                    m,
                    n,
                    k,
                    gemm::View::row_major(&g[i * m * n..], n),
                    gemm::View::transposed(&b[ob..], n),
                    &mut ga[oa..oa + m * k],
                    true,
                );
            }
        }
        if let Some(gb) = gb {
            // dB = Aᵀ · dC
            for (i, &(oa, ob)) in self.batches.iter().enumerate() {
                gemm::gemm(
                    k,
                    m,
                    n,
                    gemm::View::transposed(&a[oa..], k),
                    gemm::View::row_major(&g[i * m * n..], n),
                    &mut gb[ob..ob + k * n],
                    true,
                );
            }
        }
    }
}
