//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and what its backward
//! rule needs. Nodes are created in dependency order, so walking the tape
//! backwards from the root is a valid topological traversal. A fresh tape is
//! used per training step; dropping it releases the whole graph.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::norm::{self, BnSaved, GnSaved};
use crate::kernels::{shape as shp, softmax};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    /// Left operand has a single element.
    Left,
    /// Right operand has a single element.
    Right,
}

enum Op<T> {
    Leaf,
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Silu(usize),
    Sqrt(usize),
    Exp(usize),
    Tanh(usize),
    Sum(usize),
    Mean(usize),
    Matmul { a: usize, b: usize, batch: usize, a_batched: bool, b_batched: bool, m: usize, k: usize, n: usize },
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Softmax { a: usize, outer: usize, axis: usize, inner: usize },
    Conv { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    PartialConv { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, mask: Arc<Vec<T>>, ratio: Vec<T>, xm: Vec<T> },
    BatchNorm { x: usize, gamma: usize, beta: usize, shape: [usize; 4], mask: Option<Arc<Vec<T>>>, saved: BnSaved<T>, eval: bool },
    GroupNorm { x: usize, gamma: usize, beta: usize, shape: [usize; 4], groups: usize, saved: GnSaved<T> },
    ChannelBias { x: usize, b: usize, n: usize, c: usize, hw: usize, per_sample: bool },
    Concat { parts: Vec<usize>, sizes: Vec<usize>, outer: usize, inner: usize },
    Narrow { a: usize, outer: usize, axis: usize, inner: usize, start: usize, len: usize },
    Upsample2x { a: usize, shape: [usize; 4] },
    Gather { table: usize, rows: Vec<usize>, dim: usize },
    StraightThrough(usize),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording context for one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    visited: usize,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads[v.id]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.id].clone(), g.clone()).expect("gradient shape"))
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = !matches!(op, Op::Leaf) && inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node { value: Arc::new(value), requires_grad, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn value(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Run the backward pass from a single-element root.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape().to_vec();
        if numel(&root_shape) != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut visited = 0;
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(vec![T::one()]);
        }
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !matches!(node.op, Op::Leaf) {
                visited += 1;
                for (input, gi) in backward_rule(&nodes, node, &g) {
                    if !nodes[input].requires_grad {
                        continue;
                    }
                    match &mut grads[input] {
                        Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a = *a + *b),
                        slot @ None => *slot = Some(gi),
                    }
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { grads, shapes, visited })
    }
}

fn bc_sum<T: Scalar>(g: &[T]) -> Vec<T> {
    vec![g.iter().copied().sum()]
}

fn backward_rule<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T]) -> Vec<(usize, Vec<T>)> {
    let val = |i: usize| nodes[i].value.data();
    let need = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b, bc) => {
            let ga = if *bc == Broadcast::Left { bc_sum(g) } else { g.to_vec() };
            let gb = if *bc == Broadcast::Right { bc_sum(g) } else { g.to_vec() };
            vec![(*a, ga), (*b, gb)]
        }
        Op::Sub(a, b, bc) => {
            let ga = if *bc == Broadcast::Left { bc_sum(g) } else { g.to_vec() };
            let neg: Vec<T> = g.iter().map(|v| -*v).collect();
            let gb = if *bc == Broadcast::Right { bc_sum(&neg) } else { neg };
            vec![(*a, ga), (*b, gb)]
        }
        Op::Mul(a, b, bc) => {
            let (av, bv) = (val(*a), val(*b));
            let at = |i: usize| if *bc == Broadcast::Left { av[0] } else { av[i] };
            let bt = |i: usize| if *bc == Broadcast::Right { bv[0] } else { bv[i] };
            let mut out = Vec::new();
            if need(*a) {
                let ga: Vec<T> = g.iter().enumerate().map(|(i, v)| *v * bt(i)).collect();
                out.push((*a, if *bc == Broadcast::Left { bc_sum(&ga) } else { ga }));
            }
            if need(*b) {
                let gb: Vec<T> = g.iter().enumerate().map(|(i, v)| *v * at(i)).collect();
                out.push((*b, if *bc == Broadcast::Right { bc_sum(&gb) } else { gb }));
            }
            out
        }
        Op::Scale(a, s) => vec![(*a, g.iter().map(|v| *v * *s).collect())],
        Op::AddScalar(a) => vec![(*a, g.to_vec())],
        Op::Relu(a) => {
            let x = val(*a);
            vec![(*a, g.iter().zip(x).map(|(g, x)| if *x > T::zero() { *g } else { T::zero() }).collect())]
        }
        Op::Silu(a) => {
            let x = val(*a);
            let gi = g
                .iter()
                .zip(x)
                .map(|(g, x)| {
                    let s = T::one() / (T::one() + (-*x).exp());
                    *g * s * (T::one() + *x * (T::one() - s))
                })
                .collect();
            vec![(*a, gi)]
        }
        Op::Sqrt(a) => {
            let y = node.value.data();
            vec![(*a, g.iter().zip(y).map(|(g, y)| *g / (T::of(2.0) * *y)).collect())]
        }
        Op::Exp(a) => {
            let y = node.value.data();
            vec![(*a, g.iter().zip(y).map(|(g, y)| *g * *y).collect())]
        }
        Op::Tanh(a) => {
            let y = node.value.data();
            vec![(*a, g.iter().zip(y).map(|(g, y)| *g * (T::one() - *y * *y)).collect())]
        }
        Op::Sum(a) => vec![(*a, vec![g[0]; nodes[*a].value.numel()])],
        Op::Mean(a) => {
            let n = nodes[*a].value.numel();
            vec![(*a, vec![g[0] / T::of(n as f64); n])]
        }
        Op::Matmul { a, b, batch, a_batched, b_batched, m, k, n } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (*m, *k, *n);
            let mut out = Vec::new();
            if need(*a) {
                let mut ga = vec![T::zero(); av.len()];
                for i in 0..*batch {
                    let ao = if *a_batched { i * m * k } else { 0 };
                    let bo = if *b_batched { i * k * n } else { 0 };
                    let beta = if *a_batched || i == 0 { T::zero() } else { T::one() };
                    T::gemm(m, n, k, T::one(), &g[i * m * n..], false, &bv[bo..], true, beta, &mut ga[ao..]);
                }
                out.push((*a, ga));
            }
            if need(*b) {
                let mut gb = vec![T::zero(); bv.len()];
                for i in 0..*batch {
                    let ao = if *a_batched { i * m * k } else { 0 };
                    let bo = if *b_batched { i * k * n } else { 0 };
                    let beta = if *b_batched || i == 0 { T::zero() } else { T::one() };
                    T::gemm(k, m, n, T::one(), &av[ao..], true, &g[i * m * n..], false, beta, &mut gb[bo..]);
                }
                out.push((*b, gb));
            }
            out
        }
        Op::Permute(a, axes) => {
            let shape = node.value.shape();
            vec![(*a, shp::permute(g, shape, &shp::inverse_axes(axes)))]
        }
        Op::Reshape(a) | Op::StraightThrough(a) => vec![(*a, g.to_vec())],
        Op::Softmax { a, outer, axis, inner } => {
            vec![(*a, softmax::softmax_backward(node.value.data(), g, *outer, *axis, *inner))]
        }
        Op::Conv { x, w, b, geom } => {
            let grads = conv::conv2d_backward(
                geom,
                val(*x),
                val(*w),
                g,
                need(*x),
                need(*w),
                b.is_some_and(need),
            );
            let mut out = Vec::new();
            if let Some(dx) = grads.dx {
                out.push((*x, dx));
            }
            if let Some(dw) = grads.dw {
                out.push((*w, dw));
            }
            if let (Some(b), Some(db)) = (b, grads.db) {
                out.push((*b, db));
            }
            out
        }
        Op::PartialConv { x, w, b, geom, mask, ratio, xm } => {
            let p = geom.plane_out();
            // upstream through the renormalisation; ratio is 0 on invalid windows
            let mut d_raw = g.to_vec();
            for nn in 0..geom.n {
                for co in 0..geom.c_out {
                    let off = (nn * geom.c_out + co) * p;
                    for j in 0..p {
                        d_raw[off + j] = d_raw[off + j] * ratio[nn * p + j];
                    }
                }
            }
            let grads = conv::conv2d_backward(geom, xm, val(*w), &d_raw, need(*x), need(*w), false);
            let mut out = Vec::new();
            if let Some(mut dx) = grads.dx {
                let hw = geom.h * geom.w;
                for nn in 0..geom.n {
                    for ci in 0..geom.c_in {
                        let off = (nn * geom.c_in + ci) * hw;
                        for j in 0..hw {
                            dx[off + j] = dx[off + j] * mask[nn * hw + j];
                        }
                    }
                }
                out.push((*x, dx));
            }
            if let Some(dw) = grads.dw {
                out.push((*w, dw));
            }
            if let Some(b) = b.filter(|&b| need(b)) {
                let mut db = vec![T::zero(); geom.c_out];
                for nn in 0..geom.n {
                    for (co, dbv) in db.iter_mut().enumerate() {
                        let off = (nn * geom.c_out + co) * p;
                        for j in 0..p {
                            if ratio[nn * p + j] > T::zero() {
                                *dbv = *dbv + g[off + j];
                            }
                        }
                    }
                }
                out.push((b, db));
            }
            out
        }
        Op::BatchNorm { x, gamma, beta, shape, mask, saved, eval } => {
            let grads = norm::batch_norm_backward(*shape, g, val(*gamma), mask.as_deref().map(|m| &m[..]), saved, *eval);
            vec![(*x, grads.dx), (*gamma, grads.dgamma), (*beta, grads.dbeta)]
        }
        Op::GroupNorm { x, gamma, beta, shape, groups, saved } => {
            let grads = norm::group_norm_backward(*shape, *groups, g, val(*gamma), saved);
            vec![(*x, grads.dx), (*gamma, grads.dgamma), (*beta, grads.dbeta)]
        }
        Op::ChannelBias { x, b, n, c, hw, per_sample } => {
            let mut db = vec![T::zero(); if *per_sample { n * c } else { *c }];
            for nn in 0..*n {
                for cc in 0..*c {
                    let s: T = g[(nn * c + cc) * hw..(nn * c + cc + 1) * hw].iter().copied().sum();
                    let slot = if *per_sample { nn * c + cc } else { cc };
                    db[slot] = db[slot] + s;
                }
            }
            vec![(*x, g.to_vec()), (*b, db)]
        }
        Op::Concat { parts, sizes, outer, inner } => {
            let total: usize = sizes.iter().sum();
            let mut out = Vec::with_capacity(parts.len());
            let mut offset = 0;
            for (&p, &sz) in parts.iter().zip(sizes) {
                let mut gp = Vec::with_capacity(outer * sz * inner);
                for o in 0..*outer {
                    let start = (o * total + offset) * inner;
                    gp.extend_from_slice(&g[start..start + sz * inner]);
                }
                out.push((p, gp));
                offset += sz;
            }
            out
        }
        Op::Narrow { a, outer, axis, inner, start, len } => {
            let mut ga = vec![T::zero(); outer * axis * inner];
            for o in 0..*outer {
                let dst = (o * axis + start) * inner;
                ga[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*a, ga)]
        }
        Op::Upsample2x { a, shape } => {
            let [n, c, h, w] = *shape;
            let mut ga = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let src = p * 4 * h * w + y * 2 * w + x;
                        let dst = p * h * w + (y / 2) * w + x / 2;
                        ga[dst] = ga[dst] + g[src];
                    }
                }
            }
            vec![(*a, ga)]
        }
        Op::Gather { table, rows, dim } => {
            let mut gt = vec![T::zero(); nodes[*table].value.numel()];
            for (i, &r) in rows.iter().enumerate() {
                for d in 0..*dim {
                    gt[r * dim + d] = gt[r * dim + d] + g[i * dim + d];
                }
            }
            vec![(*table, gt)]
        }
    }
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::None)
    } else if numel(b) == 1 {
        Ok(Broadcast::Right)
    } else if numel(a) == 1 {
        Ok(Broadcast::Left)
    } else {
        Err(TensorError::shapes(op, a, b))
    }
}

/// Options for [`Var::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalise with batch statistics.
    Train,
    /// Normalise with the given running mean and variance.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Batch statistics a training-mode batch norm observed.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let v = self.value().map(f);
        self.tape.push(v, op, &[self.id])
    }

    fn binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        make: fn(usize, usize, Broadcast) -> Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let bc = broadcast_kind(name, a.shape(), b.shape())?;
        let out = match bc {
            Broadcast::None => {
                Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect())?
            }
            Broadcast::Right => a.map(|x| f(x, b.item())),
            Broadcast::Left => b.map(|y| f(a.item(), y)),
        };
        Ok(self.tape.push(out, make(self.id, other.id, bc), &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn scale(self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn silu(self) -> Var<'t, T> {
        self.unary(Op::Silu(self.id), |x| x / (T::one() + (-x).exp()))
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(Op::Sqrt(self.id), |x| x.sqrt())
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(Op::Exp(self.id), |x| x.exp())
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(Op::Tanh(self.id), |x| x.tanh())
    }

    pub fn square(self) -> Var<'t, T> {
        self.mul(self).expect("same shape")
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t, T> {
        let m = self.value().mean();
        self.tape.push(Tensor::scalar(m), Op::Mean(self.id), &[self.id])
    }

    /// Mean squared difference to `other`.
    pub fn mse(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.sub(other)?.square().mean())
    }

    /// Value with gradient flow cut.
    pub fn detach(self) -> Var<'t, T> {
        self.tape.leaf_shared(self.value(), false)
    }

    /// Matrix product. Operands are `M x K` / `K x N` matrices or batches of
    /// them (`B x M x K`); a 2-d operand is shared across the batch.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let bad = || TensorError::shapes("matmul", sa, sb);
        if !(2..=3).contains(&sa.len()) || !(2..=3).contains(&sb.len()) {
            return Err(bad());
        }
        let (a_batched, b_batched) = (sa.len() == 3, sb.len() == 3);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(bad());
        }
        let batch = match (a_batched, b_batched) {
            (true, true) if sa[0] != sb[0] => return Err(bad()),
            (true, _) => sa[0],
            (false, true) => sb[0],
            (false, false) => 1,
        };
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let ao = if a_batched { i * m * k } else { 0 };
            let bo = if b_batched { i * k * n } else { 0 };
            T::gemm(m, k, n, T::one(), &a.data()[ao..], false, &b.data()[bo..], false, T::zero(), &mut out[i * m * n..]);
        }
        let shape = if a_batched || b_batched { vec![batch, m, n] } else { vec![m, n] };
        let op = Op::Matmul { a: self.id, b: other.id, batch, a_batched, b_batched, m, k, n };
        Ok(self.tape.push(Tensor::new(shape, out)?, op, &[self.id, other.id]))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        let mut seen = vec![false; a.ndim()];
        if axes.len() != a.ndim() || axes.iter().any(|&x| x >= a.ndim() || std::mem::replace(&mut seen[x], true)) {
            return Err(TensorError::dim("permute", format!("invalid axes {axes:?} for shape {:?}", a.shape())));
        }
        let data = shp::permute(a.data(), a.shape(), axes);
        let out = Tensor::new(shp::permuted_shape(a.shape(), axes), data)?;
        Ok(self.tape.push(out, Op::Permute(self.id, axes.to_vec()), &[self.id]))
    }

    /// Swap the last two axes.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(TensorError::dim("transpose", "need at least 2 axes"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id), &[self.id]))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        if axis >= a.ndim() {
            return Err(TensorError::dim("softmax", format!("axis {axis} out of range for {:?}", a.shape())));
        }
        let (outer, ax, inner) = shp::split_at_axis(a.shape(), axis);
        let y = softmax::softmax_forward(a.data(), outer, ax, inner);
        let out = Tensor::new(a.shape(), y)?;
        Ok(self.tape.push(out, Op::Softmax { a: self.id, outer, axis: ax, inner }, &[self.id]))
    }

    /// 2-d cross-correlation of an `N x C_in x H x W` batch.
    pub fn conv2d(self, w: Var<'t, T>, b: Option<Var<'t, T>>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        let geom = ConvGeom::new(x.shape(), wv.shape(), stride, pad)?;
        let bv = b.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.numel() != geom.c_out {
                return Err(TensorError::shapes("conv2d", wv.shape(), bv.shape()));
            }
        }
        let out = conv::conv2d_forward(&geom, x.data(), wv.data(), bv.as_ref().map(|b| b.data()));
        let mut inputs = vec![self.id, w.id];
        inputs.extend(b.map(|b| b.id));
        let op = Op::Conv { x: self.id, w: w.id, b: b.map(|b| b.id), geom };
        Ok(self.tape.push(Tensor::new(geom.out_shape(), out)?, op, &inputs))
    }

    /// Partial convolution with a single-channel binary mask shared across
    /// input channels (`mask` is `N x 1 x H x W`).
    ///
    /// For a window with `v > 0` valid taps out of `n` in-bounds taps the
    /// output is `W^T (x * m) * n / v + b`; windows without valid taps give
    /// exactly 0. Returns the output and the updated mask (1 iff `v > 0`).
    pub fn partial_conv2d(
        self,
        w: Var<'t, T>,
        b: Option<Var<'t, T>>,
        mask: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<(Var<'t, T>, Tensor<T>)> {
        let (x, wv) = (self.value(), w.value());
        let geom = ConvGeom::new(x.shape(), wv.shape(), stride, pad)?;
        let ms = mask.shape();
        if ms != [geom.n, 1, geom.h, geom.w] {
            return Err(TensorError::shapes("partial_conv2d", x.shape(), ms));
        }
        if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(TensorError::Contract { op: "partial_conv2d", detail: "mask is not binary".into() });
        }
        let bv = b.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.numel() != geom.c_out {
                return Err(TensorError::shapes("partial_conv2d", wv.shape(), bv.shape()));
            }
        }
        let hw = geom.h * geom.w;
        let mut xm = x.data().to_vec();
        for nn in 0..geom.n {
            let m = &mask.data()[nn * hw..(nn + 1) * hw];
            for ci in 0..geom.c_in {
                let plane = &mut xm[(nn * geom.c_in + ci) * hw..(nn * geom.c_in + ci + 1) * hw];
                for (v, mv) in plane.iter_mut().zip(m) {
                    *v = *v * *mv;
                }
            }
        }
        let windows = conv::mask_windows(&geom, mask.data());
        let p = geom.plane_out();
        let ratio: Vec<T> = windows
            .valid_count
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > 0 { T::of(windows.in_bounds[i % p] as f64) / T::of(v as f64) } else { T::zero() })
            .collect();
        let raw = conv::conv2d_raw(&geom, &xm, wv.data());
        let mut out = vec![T::zero(); geom.n * geom.c_out * p];
        for co in 0..geom.c_out {
            let bias = bv.as_ref().map_or(T::zero(), |b| b.data()[co]);
            for nn in 0..geom.n {
                for j in 0..p {
                    let r = ratio[nn * p + j];
                    if r > T::zero() {
                        out[(nn * geom.c_out + co) * p + j] = raw[(nn * geom.c_out + co) * p + j] * r + bias;
                    }
                }
            }
        }
        let new_mask = Tensor::new(
            [geom.n, 1, geom.h_out, geom.w_out],
            windows.valid_count.iter().map(|&v| if v > 0 { T::one() } else { T::zero() }).collect(),
        )?;
        let mut inputs = vec![self.id, w.id];
        inputs.extend(b.map(|b| b.id));
        let op = Op::PartialConv {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
            geom,
            mask: Arc::new(mask.data().to_vec()),
            ratio,
            xm,
        };
        let var = self.tape.push(Tensor::new(geom.out_shape(), out)?, op, &inputs);
        Ok((var, new_mask))
    }

    /// Batch normalisation over `N x C x H x W`. With a mask (`N x 1 x H x W`),
    /// statistics use only valid positions and masked outputs are exactly 0.
    pub fn batch_norm(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        mask: Option<&Tensor<T>>,
        mode: BnMode<'_, T>,
    ) -> Result<(Var<'t, T>, Option<BnStats<T>>)> {
        let x = self.value();
        let shape: [usize; 4] = x
            .shape()
            .try_into()
            .map_err(|_| TensorError::dim("batch_norm", format!("expected 4-d input, got {:?}", x.shape())))?;
        let c = shape[1];
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.numel() != c || bv.numel() != c {
            return Err(TensorError::shapes("batch_norm", x.shape(), gv.shape()));
        }
        if let Some(m) = mask {
            if m.shape() != [shape[0], 1, shape[2], shape[3]] {
                return Err(TensorError::shapes("batch_norm", x.shape(), m.shape()));
            }
        }
        let running = match mode {
            BnMode::Train => None,
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::dim("batch_norm", "running statistics length mismatch"));
                }
                Some((mean, var))
            }
        };
        let mask_data = mask.map(|m| m.data());
        let (y, saved) = norm::batch_norm_forward(shape, x.data(), gv.data(), bv.data(), mask_data, running);
        let stats = running.is_none().then(|| BnStats {
            mean: saved.batch_mean.clone(),
            var_unbiased: saved.batch_var_unbiased.clone(),
        });
        let op = Op::BatchNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            shape,
            mask: mask.map(|m| Arc::new(m.data().to_vec())),
            saved,
            eval: running.is_some(),
        };
        let var = self.tape.push(Tensor::new(shape, y)?, op, &[self.id, gamma.id, beta.id]);
        Ok((var, stats))
    }

    pub fn group_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, groups: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape: [usize; 4] = x
            .shape()
            .try_into()
            .map_err(|_| TensorError::dim("group_norm", format!("expected 4-d input, got {:?}", x.shape())))?;
        if groups == 0 || shape[1] % groups != 0 {
            return Err(TensorError::dim("group_norm", format!("{} channels not divisible by {groups} groups", shape[1])));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.numel() != shape[1] || bv.numel() != shape[1] {
            return Err(TensorError::shapes("group_norm", x.shape(), gv.shape()));
        }
        let (y, saved) = norm::group_norm_forward(shape, groups, x.data(), gv.data(), bv.data());
        let op = Op::GroupNorm { x: self.id, gamma: gamma.id, beta: beta.id, shape, groups, saved };
        Ok(self.tape.push(Tensor::new(shape, y)?, op, &[self.id, gamma.id, beta.id]))
    }

    /// Add a per-channel bias to an `N x C x ...` tensor. `b` is either `C`
    /// elements shared across the batch or `N x C`.
    pub fn add_channel_bias(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, bv) = (self.value(), b.value());
        if x.ndim() < 2 {
            return Err(TensorError::shapes("add_channel_bias", x.shape(), bv.shape()));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let hw = numel(&x.shape()[2..]);
        let per_sample = if bv.numel() == n * c && (bv.ndim() == 2 || n == 1) {
            true
        } else if bv.numel() == c && bv.ndim() == 1 {
            false
        } else {
            return Err(TensorError::shapes("add_channel_bias", x.shape(), bv.shape()));
        };
        let mut out = x.data().to_vec();
        for nn in 0..n {
            for cc in 0..c {
                let bias = bv.data()[if per_sample { nn * c + cc } else { cc }];
                for v in &mut out[(nn * c + cc) * hw..(nn * c + cc + 1) * hw] {
                    *v = *v + bias;
                }
            }
        }
        let op = Op::ChannelBias { x: self.id, b: b.id, n, c, hw, per_sample };
        Ok(self.tape.push(Tensor::new(x.shape(), out)?, op, &[self.id, b.id]))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| TensorError::dim("concat", "no inputs"))?;
        let tape = first.tape;
        let values: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p);
            let s = v.shape();
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(TensorError::shapes("concat", &base, s));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = shp::split_at_axis(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &sz) in values.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let op = Op::Concat { parts: ids.clone(), sizes, outer, inner };
        Ok(tape.push(Tensor::new(shape, data)?, op, &ids))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        if axis >= a.ndim() || start + len > a.shape()[axis] {
            return Err(TensorError::dim("narrow", format!("{start}+{len} on axis {axis} of {:?}", a.shape())));
        }
        let (outer, ax, inner) = shp::split_at_axis(a.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * ax + start) * inner;
            data.extend_from_slice(&a.data()[s..s + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let op = Op::Narrow { a: self.id, outer, axis: ax, inner, start, len };
        Ok(self.tape.push(Tensor::new(shape, data)?, op, &[self.id]))
    }

    /// Nearest-neighbour 2x upsampling of `N x C x H x W`.
    pub fn upsample2x(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let shape: [usize; 4] = a
            .shape()
            .try_into()
            .map_err(|_| TensorError::dim("upsample2x", format!("expected 4-d input, got {:?}", a.shape())))?;
        let [n, c, h, w] = shape;
        let mut data = vec![T::zero(); n * c * 4 * h * w];
        for p in 0..n * c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    data[p * 4 * h * w + y * 2 * w + x] = a.data()[p * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        let op = Op::Upsample2x { a: self.id, shape };
        Ok(self.tape.push(Tensor::new([n, c, 2 * h, 2 * w], data)?, op, &[self.id]))
    }

    /// Forward value replaced by `value`, gradient passed to `self` unchanged
    /// (straight-through estimator).
    pub fn straight_through(self, value: Tensor<T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if value.shape() != shape.as_slice() {
            return Err(TensorError::shapes("straight_through", &shape, value.shape()));
        }
        Ok(self.tape.push(value, Op::StraightThrough(self.id), &[self.id]))
    }

    /// Rows of a `K x D` table.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t, T>> {
        let t = self.value();
        if t.ndim() != 2 {
            return Err(TensorError::dim("gather_rows", format!("expected 2-d table, got {:?}", t.shape())));
        }
        let (k, dim) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            if r >= k {
                return Err(TensorError::dim("gather_rows", format!("row {r} out of range for {k} rows")));
            }
            data.extend_from_slice(&t.data()[r * dim..(r + 1) * dim]);
        }
        let op = Op::Gather { table: self.id, rows: rows.to_vec(), dim };
        Ok(self.tape.push(Tensor::new([rows.len(), dim], data)?, op, &[self.id]))
    }
}
