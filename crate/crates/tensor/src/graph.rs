//! Tape-based reverse-mode autodiff.
//!
//! Every op evaluates eagerly and appends a node to the tape. Nodes whose
//! inputs do not require gradients are stored as plain leaves, so frozen
//! sub-networks cost nothing at backward time.

use std::collections::HashMap;

use crate::broadcast::{binary_backward, binary_forward, broadcast_shape, BinOp};
use crate::params::{ParamId, ParamStore};
use crate::{conv, norm, sample, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Abs,
    Sqr,
    Sqrt,
    Sigmoid,
    Tanh,
    Relu,
    Gelu,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let u = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_K) * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Unary {
    fn forward<T: Real>(self, x: T) -> T {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Sqr => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            // `max` would turn NaN into 0 and hide numeric failures
            Unary::Relu => {
                if x < T::zero() {
                    T::zero()
                } else {
                    x
                }
            }
            Unary::Gelu => gelu(x),
        }
    }

    /// d out / d in, given input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Unary::Neg => -T::one(),
            Unary::Exp => y,
            Unary::Log => T::one() / x,
            Unary::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Sqr => T::lit(2.0) * x,
            Unary::Sqrt => T::lit(0.5) / y,
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Tanh => T::one() - y * y,
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Gelu => gelu_grad(x),
        }
    }
}

enum Op<T> {
    Leaf,
    Binary(BinOp, Var, Var),
    Unary(Unary, Var),
    Scale(Var, T),
    Shift(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Depthwise {
        x: Var,
        k: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Resize(Var),
    Warp {
        x: Var,
        flow: Tensor<T>,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Reshape(Var),
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    ChannelL2 {
        x: Var,
        norms: Vec<T>,
    },
    GlobalAvgPool(Var),
    Softmax(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Batch statistics returned by [`Graph::batch_norm`], for running averages.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<(u64, ParamId), Var>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> (usize, usize, usize, usize) {
    assert!(a.len() == 3 && b.len() == 3, "matmul expects (B, rows, cols) operands");
    assert_eq!(a[0], b[0], "matmul batch mismatch");
    let (m, k) = if ta { (a[2], a[1]) } else { (a[1], a[2]) };
    let (k2, p) = if tb { (b[2], b[1]) } else { (b[1], b[2]) };
    assert_eq!(k, k2, "matmul inner dimension mismatch: {a:?} x {b:?}");
    (a[0], m, k, p)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input, no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Free leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Bind a stored parameter. Repeated binds of the same parameter return
    /// the same node, so weights shared across time steps accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.store_id(), id);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), store.is_trainable(id));
        self.bound.insert(key, v);
        v
    }

    /// Gradients of every trainable parameter of `store` bound on this graph.
    pub fn param_grads(&self, grads: &Grads<T>, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        store
            .ids()
            .map(|id| {
                self.bound
                    .get(&(store.store_id(), id))
                    .and_then(|&v| grads.get(v))
                    .cloned()
            })
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Var {
        let y = binary_forward(self.value(a), self.value(b), op);
        self.push(y, Op::Binary(op, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Div, a, b)
    }

    fn unary(&mut self, op: Unary, x: Var) -> Var {
        let y = self.value(x).map(|v| op.forward(v));
        self.push(y, Op::Unary(op, x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn sqr(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqr, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).map(|v| v * s);
        self.push(y, Op::Scale(x, s), &[x])
    }

    pub fn shift(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).map(|v| v + s);
        self.push(y, Op::Shift(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).mean());
        self.push(y, Op::Mean(x), &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let y = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(y, Op::Conv2d { x, w, b, stride, pad }, &parents)
    }

    /// Per-sample depthwise filtering with kernels `(N, C, k, k)`.
    pub fn depthwise(&mut self, x: Var, k: Var) -> Var {
        let y = conv::depthwise_forward(self.value(x), self.value(k));
        self.push(y, Op::Depthwise { x, k }, &[x, k])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.shape(parts[0]).to_vec();
        let mut shape = first.clone();
        shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for d in 0..s.len() {
                assert!(d == axis || s[d] == first[d], "concat shape mismatch {:?} vs {:?}", s, first);
            }
            shape[axis] += s[axis];
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let y = Tensor::from_vec(&shape, data);
        self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let src = self.value(x);
        let mut shape = src.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let full = shape[axis];
        shape[axis] = len;
        let (outer, inner) = outer_inner(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src.data()[base..base + len * inner]);
        }
        let y = Tensor::from_vec(&shape, data);
        self.push(y, Op::Narrow { x, axis, start }, &[x])
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let y = sample::resize_forward(self.value(x), h, w);
        self.push(y, Op::Resize(x), &[x])
    }

    /// Bilinear 2x upsampling with half-pixel centers.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (_, _, h, w) = self.value(x).dims4();
        self.resize(x, 2 * h, 2 * w)
    }

    /// Backward warp by a constant flow (gradient flows to `x` only).
    pub fn warp(&mut self, x: Var, flow: &Tensor<T>) -> Var {
        let y = sample::warp_forward(self.value(x), flow);
        self.push(y, Op::Warp { x, flow: flow.clone() }, &[x])
    }

    /// Batched `op(a) @ op(b)` over `(B, rows, cols)` operands.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (bs, m, k, p) = matmul_dims(self.shape(a), self.shape(b), ta, tb);
        let mut out = Tensor::zeros(&[bs, m, p]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for s in 0..bs {
                crate::real::gemm(
                    ta,
                    tb,
                    m,
                    p,
                    k,
                    T::one(),
                    &av[s * m * k..(s + 1) * m * k],
                    &bv[s * k * p..(s + 1) * k * p],
                    T::zero(),
                    &mut out.data_mut()[s * m * p..(s + 1) * m * p],
                );
            }
        }
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self.value(x).clone().reshape(shape);
        self.push(y, Op::Reshape(x), &[x])
    }

    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let out = norm::instance_norm_forward(self.value(x), eps);
        self.push(out.y, Op::InstanceNorm { x, inv_std: out.inv_std }, &[x])
    }

    /// Normalization with batch statistics over `(N, H, W)` per channel.
    pub fn batch_norm(&mut self, x: Var, eps: T) -> (Var, BatchStats<T>) {
        let (out, mean, var) = norm::batch_norm_forward(self.value(x), eps);
        let v = self.push(out.y, Op::BatchNorm { x, inv_std: out.inv_std }, &[x]);
        (v, BatchStats { mean, var })
    }

    /// Unit-normalize the channel vector at every spatial position.
    pub fn channel_l2_normalize(&mut self, x: Var, eps: T) -> Var {
        let (y, norms) = norm::channel_l2_forward(self.value(x), eps);
        self.push(y, Op::ChannelL2 { x, norms }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let inv = T::one() / T::lit((h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let y = Tensor::from_vec(&[n, c, 1, 1], data);
        self.push(y, Op::GlobalAvgPool(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = norm::softmax_forward(self.value(x));
        self.push(y, Op::Softmax(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Binary(op, a, b) => {
                let (da, db) = binary_backward(self.value(a), self.value(b), op, g, (self.rg(a), self.rg(b)));
                if let Some(da) = da {
                    self.acc(grads, a, da);
                }
                if let Some(db) = db {
                    self.acc(grads, b, db);
                }
            }
            &Op::Unary(op, x) => {
                let xv = self.value(x);
                let mut dx = Tensor::zeros(xv.shape());
                for (((o, &gv), &xi), &yi) in dx
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(xv.data())
                    .zip(node.value.data())
                {
                    *o = gv * op.derivative(xi, yi);
                }
                self.acc(grads, x, dx);
            }
            &Op::Scale(x, s) => self.acc(grads, x, g.map(|v| v * s)),
            &Op::Shift(x) => self.acc(grads, x, g.clone()),
            &Op::Sum(x) => {
                let gv = g.item();
                self.acc(grads, x, Tensor::full(self.shape(x), gv));
            }
            &Op::Mean(x) => {
                let n = T::lit(self.value(x).numel() as f64);
                self.acc(grads, x, Tensor::full(self.shape(x), g.item() / n));
            }
            &Op::Conv2d { x, w, b, stride, pad } => {
                let need = (self.rg(x), self.rg(w), b.map(|b| self.rg(b)).unwrap_or(false));
                let out = conv::conv2d_backward(self.value(x), self.value(w), g, stride, pad, need);
                if let Some(dx) = out.dx {
                    self.acc(grads, x, dx);
                }
                if let Some(dw) = out.dw {
                    self.acc(grads, w, dw);
                }
                if let (Some(b), Some(db)) = (b, out.db) {
                    self.acc(grads, b, db);
                }
            }
            &Op::Depthwise { x, k } => {
                let (dx, dk) = conv::depthwise_backward(self.value(x), self.value(k), g);
                self.acc(grads, x, dx);
                self.acc(grads, k, dk);
            }
            Op::Concat { parts, axis } => {
                let (outer, inner) = outer_inner(g.shape(), *axis);
                let total = g.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let chunk = shape[*axis] * inner;
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            data.extend_from_slice(&g.data()[base..base + chunk]);
                        }
                        self.acc(grads, p, Tensor::from_vec(&shape, data));
                    }
                    offset += chunk;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let shape = self.shape(x).to_vec();
                let len = g.shape()[axis];
                let (outer, inner) = outer_inner(&shape, axis);
                let mut dx = Tensor::zeros(&shape);
                for o in 0..outer {
                    let dst = (o * shape[axis] + start) * inner;
                    let src = o * len * inner;
                    dx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.acc(grads, x, dx);
            }
            &Op::Resize(x) => {
                let dx = sample::resize_backward(self.shape(x), g);
                self.acc(grads, x, dx);
            }
            Op::Warp { x, flow } => {
                let dx = sample::warp_backward(self.shape(*x), flow, g);
                self.acc(grads, *x, dx);
            }
            &Op::MatMul { a, b, ta, tb } => {
                let (bs, m, k, p) = matmul_dims(self.shape(a), self.shape(b), ta, tb);
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.rg(a) {
                    let mut da = Tensor::zeros(self.shape(a));
                    for s in 0..bs {
                        let gs = &g.data()[s * m * p..(s + 1) * m * p];
                        let bsl = &bv[s * k * p..(s + 1) * k * p];
                        let out = &mut da.data_mut()[s * m * k..(s + 1) * m * k];
                        if ta {
                            crate::real::gemm(tb, true, k, m, p, T::one(), bsl, gs, T::zero(), out);
                        } else {
                            crate::real::gemm(false, !tb, m, k, p, T::one(), gs, bsl, T::zero(), out);
                        }
                    }
                    self.acc(grads, a, da);
                }
                if self.rg(b) {
                    let mut db = Tensor::zeros(self.shape(b));
                    for s in 0..bs {
                        let gs = &g.data()[s * m * p..(s + 1) * m * p];
                        let asl = &av[s * m * k..(s + 1) * m * k];
                        let out = &mut db.data_mut()[s * k * p..(s + 1) * k * p];
                        if tb {
                            crate::real::gemm(true, ta, p, k, m, T::one(), gs, asl, T::zero(), out);
                        } else {
                            crate::real::gemm(!ta, false, k, p, m, T::one(), asl, gs, T::zero(), out);
                        }
                    }
                    self.acc(grads, b, db);
                }
            }
            &Op::Reshape(x) => {
                let dx = g.clone().reshape(self.shape(x));
                self.acc(grads, x, dx);
            }
            Op::InstanceNorm { x, inv_std } => {
                let dx = norm::instance_norm_backward(&node.value, inv_std, g);
                self.acc(grads, *x, dx);
            }
            Op::BatchNorm { x, inv_std } => {
                let dx = norm::batch_norm_backward(&node.value, inv_std, g);
                self.acc(grads, *x, dx);
            }
            Op::ChannelL2 { x, norms } => {
                let dx = norm::channel_l2_backward(&node.value, norms, g);
                self.acc(grads, *x, dx);
            }
            &Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(x).dims4();
                let inv = T::one() / T::lit((h * w) as f64);
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for (plane, &gv) in dx.data_mut().chunks_mut(h * w).zip(g.data()) {
                    plane.fill(gv * inv);
                }
                self.acc(grads, x, dx);
            }
            &Op::Softmax(x) => {
                let dx = norm::softmax_backward(&node.value, g);
                self.acc(grads, x, dx);
            }
        }
    }
}

/// Output shape of a broadcasting binary op, exposed for shape checks.
pub fn broadcast_result_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    broadcast_shape(a, b)
}
