//! Minimal reverse-mode differentiation engine over dense N-dimensional
//! f64 tensors.
//!
//! Every operation records its parents on the result node; [`backward`]
//! walks the graph in reverse topological order and accumulates
//! vector-Jacobian products into the `grad` buffer of every tensor that
//! requires gradients. Graphs are confined to one thread (`Rc`-based);
//! distinct graphs run independently.

pub mod checkpoint;
mod conv;
pub mod gradcheck;
mod norm;
pub mod optim;

pub use conv::conv3d;
pub use norm::{batchnorm3d, Mode, RunningStats};

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// True while a [`no_grad`] scope is active on this thread.
pub fn no_grad_active() -> bool {
    NO_GRAD.with(|c| c.get())
}

/// Run `f` without recording any graph structure; forward values are
/// unchanged, memory stays bounded by live tensors.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let previous = NO_GRAD.with(|c| c.replace(true));
    let result = f();
    NO_GRAD.with(|c| c.set(previous));
    result
}

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    Sqrt(Tensor),
    Matmul(Tensor, Tensor),
    SumOver(Tensor, Vec<bool>),
    MeanOver(Tensor, Vec<bool>, usize),
    MaxOver(Tensor, Vec<usize>),
    Reshape(Tensor),
    Concat(Tensor, Tensor, usize),
    Conv3d(conv::SavedConv),
    BatchNorm(norm::SavedNorm),
}

struct NodeInner {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    needs_grad: bool,
    op: RefCell<Option<Op>>,
    freed: Cell<bool>,
}

/// A dense tensor participating in a differentiation graph. Cloning is cheap
/// (reference-counted); clones alias the same storage and gradient.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<NodeInner>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn fmt_shape(shape: &[usize]) -> String {
    format!("{:?}", shape)
}

impl Tensor {
    fn leaf(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            node: Rc::new(NodeInner {
                id: fresh_id(),
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                needs_grad: requires_grad,
                op: RefCell::new(None),
                freed: Cell::new(false),
            }),
        }
    }

    fn result(shape: Vec<usize>, values: Vec<f64>, op: Op, parents_need: bool) -> Tensor {
        let track = parents_need && !no_grad_active();
        Tensor {
            node: Rc::new(NodeInner {
                id: fresh_id(),
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad: Cell::new(track),
                needs_grad: track,
                op: RefCell::new(if track { Some(op) } else { None }),
                freed: Cell::new(false),
            }),
        }
    }

    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        if numel_of(&shape) != values.len() {
            return Err(Error::shape(
                format!(
                    "{} values for shape {}",
                    numel_of(&shape),
                    fmt_shape(&shape)
                ),
                format!("{} values", values.len()),
            ));
        }
        Ok(Tensor::leaf(shape, values, false))
    }

    /// Leaf tensor with `requires_grad` set: a trainable parameter.
    pub fn param(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, values)?;
        t.node.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel_of(&shape);
        Tensor::leaf(shape, vec![0.0; n], false)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let n = numel_of(&shape);
        Tensor::leaf(shape, vec![value; n], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![1], vec![value], false)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.get()
    }

    /// Mark a leaf as trainable. Must be called before the tensor is used in
    /// ops, otherwise already-built graph edges keep their old tracking.
    pub fn set_requires_grad(&self, requires: bool) {
        self.node.requires_grad.set(requires);
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.node.needs_grad || self.node.requires_grad.get()
    }

    pub fn values(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.node.values.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.values.borrow().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.node.values.borrow()[0]
    }

    /// Overwrite values in place (parameter updates, finite differences).
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::shape(
                format!("{} values", self.numel()),
                format!("{} values", values.len()),
            ));
        }
        self.node.values.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub(crate) fn take_grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow_mut().take()
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    // ---- elementwise and broadcast binary ops ----

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary_broadcast(self, other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary_broadcast(self, other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary_broadcast(self, other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary_broadcast(self, other, BinaryKind::Div)
    }

    pub fn neg(&self) -> Tensor {
        let values = self.values().iter().map(|v| -v).collect();
        Tensor::result(
            self.shape().to_vec(),
            values,
            Op::Neg(self.clone()),
            self.needs_grad(),
        )
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let values = self.values().iter().map(|v| v * factor).collect();
        Tensor::result(
            self.shape().to_vec(),
            values,
            Op::Scale(self.clone(), factor),
            self.needs_grad(),
        )
    }

    pub fn add_scalar(&self, constant: f64) -> Tensor {
        let values = self.values().iter().map(|v| v + constant).collect();
        Tensor::result(
            self.shape().to_vec(),
            values,
            Op::AddScalar(self.clone()),
            self.needs_grad(),
        )
    }

    pub fn relu(&self) -> Tensor {
        let values = self.values().iter().map(|v| v.max(0.0)).collect();
        Tensor::result(
            self.shape().to_vec(),
            values,
            Op::Relu(self.clone()),
            self.needs_grad(),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let values = self
            .values()
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        Tensor::result(
            self.shape().to_vec(),
            values,
            Op::Sigmoid(self.clone()),
            self.needs_grad(),
        )
    }

    /// Elementwise square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&self) -> Tensor {
        let values = self.values().iter().map(|v| v.sqrt()).collect();
        Tensor::result(
            self.shape().to_vec(),
            values,
            Op::Sqrt(self.clone()),
            self.needs_grad(),
        )
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(Error::shape(
                "[m, k] x [k, n] matrices".to_string(),
                format!("{} x {}", fmt_shape(a_shape), fmt_shape(b_shape)),
            ));
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let values = crate::linalg::matmul(&self.values(), &other.values(), m, k, n);
        Ok(Tensor::result(
            vec![m, n],
            values,
            Op::Matmul(self.clone(), other.clone()),
            self.needs_grad() || other.needs_grad(),
        ))
    }

    // ---- reductions (reduced axes kept as extent 1) ----

    pub fn sum_over(&self, axes: &[usize]) -> Result<Tensor> {
        let mask = axes_mask(self.shape(), axes)?;
        let out_shape = reduced_shape(self.shape(), &mask);
        let mut values = vec![0.0; numel_of(&out_shape)];
        {
            let input = self.values();
            for_each_reduce(self.shape(), &mask, |in_idx, out_idx| {
                values[out_idx] += input[in_idx];
            });
        }
        Ok(Tensor::result(
            out_shape,
            values,
            Op::SumOver(self.clone(), mask),
            self.needs_grad(),
        ))
    }

    pub fn mean_over(&self, axes: &[usize]) -> Result<Tensor> {
        let mask = axes_mask(self.shape(), axes)?;
        let count: usize = self
            .shape()
            .iter()
            .zip(&mask)
            .filter_map(|(&e, &m)| if m { Some(e) } else { None })
            .product();
        let out_shape = reduced_shape(self.shape(), &mask);
        let mut values = vec![0.0; numel_of(&out_shape)];
        {
            let input = self.values();
            for_each_reduce(self.shape(), &mask, |in_idx, out_idx| {
                values[out_idx] += input[in_idx];
            });
        }
        for v in &mut values {
            *v /= count as f64;
        }
        Ok(Tensor::result(
            out_shape,
            values,
            Op::MeanOver(self.clone(), mask, count),
            self.needs_grad(),
        ))
    }

    /// Maximum over the given axes; on ties the gradient routes to the first
    /// maximal element in row-major scan order.
    pub fn max_over(&self, axes: &[usize]) -> Result<Tensor> {
        let mask = axes_mask(self.shape(), axes)?;
        let out_shape = reduced_shape(self.shape(), &mask);
        let out_n = numel_of(&out_shape);
        let mut values = vec![f64::NEG_INFINITY; out_n];
        let mut argmax = vec![usize::MAX; out_n];
        {
            let input = self.values();
            for_each_reduce(self.shape(), &mask, |in_idx, out_idx| {
                if input[in_idx] > values[out_idx] {
                    values[out_idx] = input[in_idx];
                    argmax[out_idx] = in_idx;
                }
            });
        }
        Ok(Tensor::result(
            out_shape,
            values,
            Op::MaxOver(self.clone(), argmax),
            self.needs_grad(),
        ))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let all: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_over(&all)?.reshape(vec![1])
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        self.sum_all().map(|s| s.scale(1.0 / self.numel() as f64))
    }

    pub fn reshape(&self, new_shape: Vec<usize>) -> Result<Tensor> {
        if numel_of(&new_shape) != self.numel() {
            return Err(Error::shape(
                format!("{} elements for {}", self.numel(), fmt_shape(self.shape())),
                format!(
                    "{} elements for {}",
                    numel_of(&new_shape),
                    fmt_shape(&new_shape)
                ),
            ));
        }
        Ok(Tensor::result(
            new_shape,
            self.to_vec(),
            Op::Reshape(self.clone()),
            self.needs_grad(),
        ))
    }

    pub fn concat(&self, other: &Tensor, axis: usize) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        let conforms = a.len() == b.len()
            && axis < a.len()
            && a.iter()
                .zip(b)
                .enumerate()
                .all(|(ax, (x, y))| ax == axis || x == y);
        if !conforms {
            return Err(Error::shape(
                format!("shapes equal except axis {}", axis),
                format!("{} vs {}", fmt_shape(a), fmt_shape(b)),
            ));
        }
        let mut out_shape = a.to_vec();
        out_shape[axis] += b[axis];
        let outer: usize = a[..axis].iter().product();
        let inner: usize = a[axis + 1..].iter().product();
        let a_block = a[axis] * inner;
        let b_block = b[axis] * inner;
        let mut values = Vec::with_capacity(numel_of(&out_shape));
        {
            let (av, bv) = (self.values(), other.values());
            for o in 0..outer {
                values.extend_from_slice(&av[o * a_block..(o + 1) * a_block]);
                values.extend_from_slice(&bv[o * b_block..(o + 1) * b_block]);
            }
        }
        Ok(Tensor::result(
            out_shape,
            values,
            Op::Concat(self.clone(), other.clone(), axis),
            self.needs_grad() || other.needs_grad(),
        ))
    }

    /// Forward identity that contributes zero gradient to its argument: the
    /// result is a detached leaf sharing no graph edge with `self`.
    pub fn stop_gradient(&self) -> Tensor {
        Tensor::leaf(self.shape().to_vec(), self.to_vec(), false)
    }

    /// Drop the recorded operations reachable from this tensor. A subsequent
    /// [`backward`] through any freed node reports a lifecycle error.
    pub fn release_graph(&self) {
        let mut stack = vec![self.node.clone()];
        while let Some(node) = stack.pop() {
            if let Some(op) = node.op.borrow_mut().take() {
                node.freed.set(true);
                collect_parents(&op, &mut stack);
            }
        }
    }
}

fn collect_parents(op: &Op, out: &mut Vec<Rc<NodeInner>>) {
    let mut push = |t: &Tensor| out.push(t.node.clone());
    match op {
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::Matmul(a, b)
        | Op::Concat(a, b, _) => {
            push(a);
            push(b);
        }
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Sqrt(a)
        | Op::SumOver(a, _)
        | Op::MeanOver(a, _, _)
        | Op::MaxOver(a, _)
        | Op::Reshape(a) => push(a),
        Op::Conv3d(saved) => {
            push(&saved.input);
            push(&saved.kernel);
        }
        Op::BatchNorm(saved) => {
            push(&saved.input);
            push(&saved.gamma);
            push(&saved.beta);
        }
    }
}

// ---- broadcasting machinery ----

enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ae = if i >= rank - a.len() {
            a[i - (rank - a.len())]
        } else {
            1
        };
        let be = if i >= rank - b.len() {
            b[i - (rank - b.len())]
        } else {
            1
        };
        if ae != be && ae != 1 && be != 1 {
            return Err(Error::shape(
                "broadcast-compatible shapes".to_string(),
                format!("{} vs {}", fmt_shape(a), fmt_shape(b)),
            ));
        }
        out[i] = ae.max(be);
    }
    Ok(out)
}

/// Row-major strides of `shape` left-padded to `rank`, with 0 on axes of
/// extent 1 so those axes broadcast.
fn padded_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut padded = vec![1usize; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for ax in (0..rank).rev() {
        strides[ax] = if padded[ax] == 1 { 0 } else { acc };
        acc *= padded[ax];
    }
    strides
}

fn for_each_pair(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let a_strides = padded_strides(a_shape, rank);
    let b_strides = padded_strides(b_shape, rank);
    let total = numel_of(out_shape);
    let mut idx = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for oi in 0..total {
        f(oi, ai, bi);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ai += a_strides[ax];
            bi += b_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            ai -= a_strides[ax] * out_shape[ax];
            bi -= b_strides[ax] * out_shape[ax];
        }
    }
}

fn binary_broadcast(a: &Tensor, b: &Tensor, kind: BinaryKind) -> Result<Tensor> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let mut values = vec![0.0; numel_of(&out_shape)];
    {
        let (av, bv) = (a.values(), b.values());
        for_each_pair(&out_shape, a.shape(), b.shape(), |oi, ai, bi| {
            values[oi] = match kind {
                BinaryKind::Add => av[ai] + bv[bi],
                BinaryKind::Sub => av[ai] - bv[bi],
                BinaryKind::Mul => av[ai] * bv[bi],
                BinaryKind::Div => av[ai] / bv[bi],
            };
        });
    }
    let op = match kind {
        BinaryKind::Add => Op::Add(a.clone(), b.clone()),
        BinaryKind::Sub => Op::Sub(a.clone(), b.clone()),
        BinaryKind::Mul => Op::Mul(a.clone(), b.clone()),
        BinaryKind::Div => Op::Div(a.clone(), b.clone()),
    };
    Ok(Tensor::result(
        out_shape,
        values,
        op,
        a.needs_grad() || b.needs_grad(),
    ))
}

// ---- reductions ----

fn axes_mask(shape: &[usize], axes: &[usize]) -> Result<Vec<bool>> {
    let mut mask = vec![false; shape.len()];
    for &ax in axes {
        if ax >= shape.len() {
            return Err(Error::shape(
                format!("axis < {}", shape.len()),
                format!("axis {}", ax),
            ));
        }
        mask[ax] = true;
    }
    Ok(mask)
}

fn reduced_shape(shape: &[usize], mask: &[bool]) -> Vec<usize> {
    shape
        .iter()
        .zip(mask)
        .map(|(&e, &m)| if m { 1 } else { e })
        .collect()
}

/// Visit every input index together with the index it reduces into.
fn for_each_reduce(in_shape: &[usize], mask: &[bool], mut f: impl FnMut(usize, usize)) {
    let rank = in_shape.len();
    let out_shape = reduced_shape(in_shape, mask);
    let out_strides = padded_strides(&out_shape, rank);
    let total = numel_of(in_shape);
    let mut idx = vec![0usize; rank];
    let mut out_idx = 0usize;
    for in_idx in 0..total {
        f(in_idx, out_idx);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            out_idx += out_strides[ax];
            if idx[ax] < in_shape[ax] {
                break;
            }
            idx[ax] = 0;
            out_idx -= out_strides[ax] * in_shape[ax];
        }
    }
}

// ---- composite vector ops ----

/// v / (||v||_2 + eps) over all elements of `v`.
pub fn l2_normalize(v: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = v.mul(v)?.sum_all()?.sqrt();
    v.div(&norm.add_scalar(eps))
}

/// Cosine similarity of two same-shape tensors viewed as flat vectors,
/// with eps guarding zero norms. The result is a one-element tensor in
/// [-1, 1], differentiable in both arguments.
pub fn cosine_similarity(p: &Tensor, z: &Tensor, eps: f64) -> Result<Tensor> {
    if p.shape() != z.shape() || p.numel() == 0 {
        return Err(Error::shape(fmt_shape(p.shape()), fmt_shape(z.shape())));
    }
    l2_normalize(p, eps)?.mul(&l2_normalize(z, eps)?)?.sum_all()
}

// ---- backward ----

/// Populate `grad` of every tensor requiring gradients with dLoss/dTensor.
/// Repeated calls accumulate until gradients are zeroed.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::shape(
            "scalar loss".to_string(),
            fmt_shape(loss.shape()),
        ));
    }
    // Topological order: parents before consumers (iterative DFS postorder).
    let mut topo: Vec<Rc<NodeInner>> = Vec::new();
    let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
    let mut stack: Vec<(Rc<NodeInner>, bool)> = vec![(loss.node.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            topo.push(node);
            continue;
        }
        if !visited.insert(node.id) {
            continue;
        }
        if node.freed.get() {
            return Err(Error::GraphFreed);
        }
        stack.push((node.clone(), true));
        if let Some(op) = node.op.borrow().as_ref() {
            let mut parents = Vec::new();
            collect_parents(op, &mut parents);
            for parent in parents {
                if parent.needs_grad || parent.requires_grad.get() {
                    stack.push((parent, false));
                }
            }
        }
    }

    let mut flowing: HashMap<u64, Vec<f64>> = HashMap::new();
    flowing.insert(loss.node.id, vec![1.0]);

    for node in topo.iter().rev() {
        let Some(g) = flowing.remove(&node.id) else {
            continue;
        };
        if node.requires_grad.get() || node.needs_grad {
            let tensor = Tensor { node: node.clone() };
            tensor.accumulate_grad(&g);
        }
        let op_ref = node.op.borrow();
        let Some(op) = op_ref.as_ref() else { continue };
        let out_values = node.values.borrow();
        op_backward(op, &node.shape, &out_values, &g, &mut flowing);
    }
    Ok(())
}

fn flow_into<'m>(
    flowing: &'m mut HashMap<u64, Vec<f64>>,
    parent: &Tensor,
) -> Option<&'m mut Vec<f64>> {
    if !parent.needs_grad() {
        return None;
    }
    Some(
        flowing
            .entry(parent.node.id)
            .or_insert_with(|| vec![0.0; parent.numel()]),
    )
}

fn op_backward(
    op: &Op,
    out_shape: &[usize],
    out_values: &[f64],
    g: &[f64],
    flowing: &mut HashMap<u64, Vec<f64>>,
) {
    match op {
        Op::Add(a, b) => {
            if let Some(buf) = flow_into(flowing, a) {
                for_each_pair(out_shape, a.shape(), b.shape(), |oi, ai, _| {
                    buf[ai] += g[oi]
                });
            }
            if let Some(buf) = flow_into(flowing, b) {
                for_each_pair(out_shape, a.shape(), b.shape(), |oi, _, bi| {
                    buf[bi] += g[oi]
                });
            }
        }
        Op::Sub(a, b) => {
            if let Some(buf) = flow_into(flowing, a) {
                for_each_pair(out_shape, a.shape(), b.shape(), |oi, ai, _| {
                    buf[ai] += g[oi]
                });
            }
            if let Some(buf) = flow_into(flowing, b) {
                for_each_pair(out_shape, a.shape(), b.shape(), |oi, _, bi| {
                    buf[bi] -= g[oi]
                });
            }
        }
        Op::Mul(a, b) => {
            if a.needs_grad() {
                let bv = b.values();
                let buf = flowing
                    .entry(a.node.id)
                    .or_insert_with(|| vec![0.0; a.numel()]);
                for_each_pair(out_shape, a.shape(), b.shape(), |oi, ai, bi| {
                    buf[ai] += g[oi] * bv[bi];
                });
            }
            if b.needs_grad() {
                let av = a.values();
                let buf = flowing
                    .entry(b.node.id)
                    .or_insert_with(|| vec![0.0; b.numel()]);
                for_each_pair(out_shape, a.shape(), b.shape(), |oi, ai, bi| {
                    buf[bi] += g[oi] * av[ai];
                });
            }
        }
        Op::Div(a, b) => {
            if a.needs_grad() {
                let bv = b.values();
                let buf = flowing
                    .entry(a.node.id)
                    .or_insert_with(|| vec![0.0; a.numel()]);
                for_each_pair(out_shape, a.shape(), b.shape(), |oi, ai, bi| {
                    buf[ai] += g[oi] / bv[bi];
                });
            }
            if b.needs_grad() {
                let av = a.values();
                let bv = b.values();
                let buf = flowing
                    .entry(b.node.id)
                    .or_insert_with(|| vec![0.0; b.numel()]);
                for_each_pair(out_shape, a.shape(), b.shape(), |oi, ai, bi| {
                    buf[bi] -= g[oi] * av[ai] / (bv[bi] * bv[bi]);
                });
            }
        }
        Op::Neg(a) => {
            if let Some(buf) = flow_into(flowing, a) {
                for (slot, gi) in buf.iter_mut().zip(g) {
                    *slot -= gi;
                }
            }
        }
        Op::Scale(a, factor) => {
            if let Some(buf) = flow_into(flowing, a) {
                for (slot, gi) in buf.iter_mut().zip(g) {
                    *slot += gi * factor;
                }
            }
        }
        Op::AddScalar(a) => {
            if let Some(buf) = flow_into(flowing, a) {
                for (slot, gi) in buf.iter_mut().zip(g) {
                    *slot += gi;
                }
            }
        }
        Op::Relu(a) => {
            if a.needs_grad() {
                let av = a.values();
                let buf = flowing
                    .entry(a.node.id)
                    .or_insert_with(|| vec![0.0; a.numel()]);
                for i in 0..g.len() {
                    // Subgradient at exactly 0 is 0.
                    if av[i] > 0.0 {
                        buf[i] += g[i];
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(buf) = flow_into(flowing, a) {
                for i in 0..g.len() {
                    let s = out_values[i];
                    buf[i] += g[i] * s * (1.0 - s);
                }
            }
        }
        Op::Sqrt(a) => {
            if let Some(buf) = flow_into(flowing, a) {
                for i in 0..g.len() {
                    if out_values[i] > 0.0 {
                        buf[i] += g[i] * 0.5 / out_values[i];
                    }
                }
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.needs_grad() {
                // dA = G * B^T
                let bt = crate::linalg::transpose(&b.values(), k, n);
                let da = crate::linalg::matmul(g, &bt, m, n, k);
                let buf = flowing
                    .entry(a.node.id)
                    .or_insert_with(|| vec![0.0; a.numel()]);
                for (slot, v) in buf.iter_mut().zip(&da) {
                    *slot += v;
                }
            }
            if b.needs_grad() {
                // dB = A^T * G
                let at = crate::linalg::transpose(&a.values(), m, k);
                let db = crate::linalg::matmul(&at, g, k, m, n);
                let buf = flowing
                    .entry(b.node.id)
                    .or_insert_with(|| vec![0.0; b.numel()]);
                for (slot, v) in buf.iter_mut().zip(&db) {
                    *slot += v;
                }
            }
        }
        Op::SumOver(a, mask) => {
            if let Some(buf) = flow_into(flowing, a) {
                for_each_reduce(a.shape(), mask, |in_idx, out_idx| {
                    buf[in_idx] += g[out_idx];
                });
            }
        }
        Op::MeanOver(a, mask, count) => {
            if let Some(buf) = flow_into(flowing, a) {
                let scale = 1.0 / *count as f64;
                for_each_reduce(a.shape(), mask, |in_idx, out_idx| {
                    buf[in_idx] += g[out_idx] * scale;
                });
            }
        }
        Op::MaxOver(a, argmax) => {
            if let Some(buf) = flow_into(flowing, a) {
                for (out_idx, &in_idx) in argmax.iter().enumerate() {
                    buf[in_idx] += g[out_idx];
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(buf) = flow_into(flowing, a) {
                for (slot, gi) in buf.iter_mut().zip(g) {
                    *slot += gi;
                }
            }
        }
        Op::Concat(a, b, axis) => {
            let outer: usize = a.shape()[..*axis].iter().product();
            let inner: usize = a.shape()[*axis + 1..].iter().product();
            let a_block = a.shape()[*axis] * inner;
            let b_block = b.shape()[*axis] * inner;
            let out_block = a_block + b_block;
            if let Some(buf) = flow_into(flowing, a) {
                for o in 0..outer {
                    for i in 0..a_block {
                        buf[o * a_block + i] += g[o * out_block + i];
                    }
                }
            }
            if let Some(buf) = flow_into(flowing, b) {
                for o in 0..outer {
                    for i in 0..b_block {
                        buf[o * b_block + i] += g[o * out_block + a_block + i];
                    }
                }
            }
        }
        Op::Conv3d(saved) => conv::conv_backward(saved, g, flowing),
        Op::BatchNorm(saved) => norm::norm_backward(saved, g, flowing),
    }
}

// Internal hooks used by the conv/norm submodules.
pub(crate) fn make_result(
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
    parents_need: bool,
) -> Tensor {
    Tensor::result(shape, values, op, parents_need)
}

pub(crate) fn flow_buffer<'m>(
    flowing: &'m mut HashMap<u64, Vec<f64>>,
    parent: &Tensor,
) -> Option<&'m mut Vec<f64>> {
    flow_into(flowing, parent)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!((a - e).abs() < tol, "index {}: {} vs {}", i, a, e);
        }
    }

    #[test]
    fn relu_values() {
        let t = Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(t.relu().to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let v = Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap();
        let n = l2_normalize(&v, 1e-12).unwrap();
        assert_close(&n.to_vec(), &[0.6, 0.8], 1e-9);
    }

    #[test]
    fn cosine_self_antipodal_orthogonal() {
        let v = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let w = v.neg();
        assert!((cosine_similarity(&v, &v, 1e-12).unwrap().item() - 1.0).abs() < 1e-9);
        assert!((cosine_similarity(&v, &w, 1e-12).unwrap().item() + 1.0).abs() < 1e-9);
        let e1 = Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::from_vec(vec![2], vec![0.0, 1.0]).unwrap();
        assert!(cosine_similarity(&e1, &e2, 1e-12).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let t = Tensor::param(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let loss = t.sum_all().unwrap();
        backward(&loss).unwrap();
        assert_eq!(t.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let t = Tensor::param(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let loss = t.mul(&t).unwrap().sum_all().unwrap();
        backward(&loss).unwrap();
        assert_close(&t.grad().unwrap(), &[2.0, -4.0, 1.0], 1e-12);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let t = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let loss = t.sum_all().unwrap();
        backward(&loss).unwrap();
        backward(&loss).unwrap();
        assert_eq!(t.grad().unwrap(), vec![2.0, 2.0]);
        t.zero_grad();
        backward(&loss).unwrap();
        assert_eq!(t.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let t = Tensor::param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = t.stop_gradient().sum_all().unwrap();
        backward(&loss).unwrap();
        assert!(t.grad().is_none(), "no gradient may reach t");
    }

    #[test]
    fn stop_gradient_detaches_one_branch() {
        // loss = sum(t * sg(t)) has gradient t, not 2t.
        let t = Tensor::param(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let loss = t.mul(&t.stop_gradient()).unwrap().sum_all().unwrap();
        backward(&loss).unwrap();
        assert_close(&t.grad().unwrap(), &t.to_vec(), 1e-12);
    }

    #[test]
    fn stop_gradient_forward_identity() {
        let t = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.stop_gradient().to_vec(), t.to_vec());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let t = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(backward(&t), Err(Error::Shape { .. })));
    }

    #[test]
    fn freed_graph_is_rejected() {
        let t = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let loss = t.sum_all().unwrap();
        loss.release_graph();
        assert!(matches!(backward(&loss), Err(Error::GraphFreed)));
    }

    #[test]
    fn broadcasting_add_and_backward() {
        let a = Tensor::param(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::param(vec![3], vec![10.0, 20.0, 30.0]).unwrap();
        let sum = a.add(&b).unwrap();
        assert_eq!(sum.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let loss = sum.sum_all().unwrap();
        backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
        // b's gradient sums over the broadcast rows.
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 4]);
        assert!(matches!(a.add(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn mean_and_max_over_axes() {
        let t = Tensor::param(vec![2, 2], vec![1.0, 5.0, 3.0, 3.0]).unwrap();
        let mean = t.mean_over(&[0]).unwrap();
        assert_eq!(mean.shape(), &[1, 2]);
        assert_close(&mean.to_vec(), &[2.0, 4.0], 1e-12);
        let max = t.max_over(&[1]).unwrap();
        assert_eq!(max.shape(), &[2, 1]);
        assert_close(&max.to_vec(), &[5.0, 3.0], 1e-12);
        let loss = max.sum_all().unwrap();
        backward(&loss).unwrap();
        // Tie in the second row routes to the first maximal element.
        assert_eq!(t.grad().unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::Rng::new(17);
        let a_vals: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let b_vals: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let a = Tensor::from_vec(vec![3, 4], a_vals.clone()).unwrap();
        let b = Tensor::from_vec(vec![4, 2], b_vals.clone()).unwrap();
        let c = a.matmul(&b).unwrap();
        let mut oracle = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    oracle[i * 2 + j] += a_vals[i * 4 + k] * b_vals[k * 2 + j];
                }
            }
        }
        assert_close(&c.to_vec(), &oracle, 1e-12);
    }

    #[test]
    fn no_grad_skips_recording() {
        let t = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let loss = no_grad(|| t.mul(&t).unwrap().sum_all().unwrap());
        backward(&loss).unwrap();
        assert!(t.grad().is_none());
    }

    #[test]
    fn concat_axis1_splits_gradient() {
        let a = Tensor::param(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::param(vec![2, 1, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let cat = a.concat(&b, 1).unwrap();
        assert_eq!(cat.shape(), &[2, 2, 2]);
        assert_eq!(cat.to_vec(), vec![1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        let loss = cat.mul(&cat).unwrap().sum_all().unwrap();
        backward(&loss).unwrap();
        assert_close(&a.grad().unwrap(), &[2.0, 4.0, 6.0, 8.0], 1e-12);
        assert_close(&b.grad().unwrap(), &[10.0, 12.0, 14.0, 16.0], 1e-12);
    }
}
