use std::cell::{Ref, RefCell};

use super::broadcast::{self, Index, Plan};
use super::conv::{self, ConvGeom};
use super::gemm::gemm;
use super::tensor::{numel, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Define-by-run tape.
///
/// Nodes are appended in evaluation order, so node ids are already a
/// topological order and `backward` walks them in reverse exactly once.
/// A graph is single-threaded; independent graphs may be built on different
/// threads against shared, immutable parameter snapshots.
#[derive(Default)]
pub struct Graph {
    inner: RefCell<Inner>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    status: Status,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
enum Status {
    #[default]
    Live,
    Consumed,
    Cleared,
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Relu,
    Softplus,
    Sigmoid,
    Exp,
    Log,
    Sin,
    Cos,
    Abs,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    /// Result of ops with no tracked input; parents are not retained.
    Constant,
    Unary(Unary, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
        plan: Plan,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `x·w + b` with `b` a row vector.
    Affine {
        x: usize,
        w: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Sum(usize),
    Mean(usize),
    SumAxis {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(usize),
    BroadcastTo {
        a: usize,
        index: Index,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
        inner: usize,
        total: usize,
    },
    Slice {
        a: usize,
        outer: usize,
        len_in: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    CumsumExclusive {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaxN {
        parts: Vec<usize>,
        argmax: Vec<u32>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
    },
    Upsample2x {
        a: usize,
        planes: usize,
        h: usize,
        w: usize,
    },
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a tracked leaf, if it was reached.
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Vec<f64>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }

    /// Gradient for `v`, or zeros of `len` when the loss does not depend on it.
    pub fn take_or_zeros(&mut self, v: Var<'_>, len: usize) -> Vec<f64> {
        self.take(v).unwrap_or_else(|| vec![0.0; len])
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Abs => x.abs(),
            Unary::Neg => -x,
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Neg => -1.0,
        }
    }
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline(always)]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub(crate) fn grad_slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn live(&self) -> Result<Ref<'_, Inner>> {
        let inner = self.inner.borrow();
        match inner.status {
            Status::Live => Ok(inner),
            Status::Consumed => Err(AutodiffError::Consumed),
            Status::Cleared => Err(AutodiffError::Cleared),
        }
    }

    fn owns(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.graph) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVar)
        }
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let op = if tracked || matches!(op, Op::Leaf) {
            op
        } else {
            Op::Constant
        };
        inner.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var {
            graph: self,
            id: inner.nodes.len() - 1,
        }
    }

    /// Registers a tensor as a leaf; it receives a gradient iff it is tracked.
    pub fn leaf(&self, t: &Tensor) -> Result<Var<'_>> {
        self.live()?;
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.is_tracked()))
    }

    /// Tracked leaf regardless of the tensor's own flag.
    pub fn param(&self, t: &Tensor) -> Result<Var<'_>> {
        self.live()?;
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true))
    }

    /// Untracked leaf built from raw parts.
    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        self.live()?;
        if numel(shape) != data.len() || shape.contains(&0) {
            return Err(AutodiffError::BadShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'g>(&'g self, vars: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = *vars.first().ok_or(AutodiffError::Empty("concat"))?;
        for v in vars {
            self.owns(*v)?;
        }
        let (shape, value, parts, outer, inner_len, total, tracked) = {
            let inner = self.live()?;
            let base = &inner.nodes[first.id].shape;
            if axis >= base.len() {
                return Err(AutodiffError::BadAxis {
                    op: "concat",
                    axis,
                    shape: base.clone(),
                });
            }
            let mut total = 0;
            let mut parts = Vec::with_capacity(vars.len());
            for v in vars {
                let s = &inner.nodes[v.id].shape;
                let compatible =
                    s.len() == base.len() && s.iter().zip(base).enumerate().all(|(k, (x, y))| k == axis || x == y);
                if !compatible {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.clone(),
                    });
                }
                parts.push((v.id, s[axis]));
                total += s[axis];
            }
            let (outer, _, inner_len) = axis_extents(base, axis);
            let mut shape = base.clone();
            shape[axis] = total;
            let mut value = Vec::with_capacity(outer * total * inner_len);
            for o in 0..outer {
                for &(id, len) in &parts {
                    let src = &inner.nodes[id].value;
                    value.extend_from_slice(&src[o * len * inner_len..(o + 1) * len * inner_len]);
                }
            }
            let tracked = vars.iter().any(|v| inner.nodes[v.id].tracked);
            (shape, value, parts, outer, inner_len, total, tracked)
        };
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                parts,
                outer,
                inner: inner_len,
                total,
            },
            tracked,
        ))
    }

    /// Elementwise maximum over same-shape operands.
    pub fn max_n<'g>(&'g self, vars: &[Var<'g>]) -> Result<Var<'g>> {
        let first = *vars.first().ok_or(AutodiffError::Empty("max_n"))?;
        for v in vars {
            self.owns(*v)?;
        }
        let (shape, value, argmax, tracked) = {
            let inner = self.live()?;
            let shape = inner.nodes[first.id].shape.clone();
            for v in vars {
                if inner.nodes[v.id].shape != shape {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "max_n",
                        lhs: shape,
                        rhs: inner.nodes[v.id].shape.clone(),
                    });
                }
            }
            let mut value = inner.nodes[first.id].value.clone();
            let mut argmax = vec![0u32; value.len()];
            for (k, v) in vars.iter().enumerate().skip(1) {
                for (i, &x) in inner.nodes[v.id].value.iter().enumerate() {
                    if x > value[i] {
                        value[i] = x;
                        argmax[i] = k as u32;
                    }
                }
            }
            let tracked = vars.iter().any(|v| inner.nodes[v.id].tracked);
            (shape, value, argmax, tracked)
        };
        Ok(self.push(
            shape,
            value,
            Op::MaxN {
                parts: vars.iter().map(|v| v.id).collect(),
                argmax,
            },
            tracked,
        ))
    }

    /// Drops every node. Later use of this graph's variables is an error.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes = Vec::new();
        inner.status = Status::Cleared;
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients accumulate additively over every use of a node. The sweep
    /// consumes the graph: intermediate values are released and a second
    /// call returns [`AutodiffError::Consumed`].
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.owns(loss)?;
        let mut grads: Vec<Option<Vec<f64>>> = {
            let inner = self.live()?;
            let node = &inner.nodes[loss.id];
            if node.value.len() != 1 {
                return Err(AutodiffError::NotScalar(node.shape.clone()));
            }
            if !node.tracked {
                return Err(AutodiffError::Untracked);
            }
            let mut grads = vec![None; loss.id + 1];
            grads[loss.id] = Some(vec![1.0]);
            grads
        };
        {
            let inner = self.inner.borrow();
            for id in (0..=loss.id).rev() {
                let node = &inner.nodes[id];
                if matches!(node.op, Op::Leaf | Op::Constant) {
                    continue;
                }
                let Some(g) = grads[id].take() else { continue };
                backprop_node(&inner.nodes, node, &g, &mut grads);
            }
        }
        let mut inner = self.inner.borrow_mut();
        for (id, node) in inner.nodes.iter_mut().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                node.value = Vec::new();
                if id < grads.len() {
                    grads[id] = None;
                }
            }
        }
        for (id, g) in grads.iter_mut().enumerate() {
            if !inner.nodes[id].tracked {
                *g = None;
            }
        }
        inner.status = Status::Consumed;
        Ok(Gradients { grads })
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let tracked = |id: usize| nodes[id].tracked;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Unary(kind, a) => {
            let x = &nodes[*a].value;
            let y = &node.value;
            let ga = grad_slot(grads, *a, x.len());
            for i in 0..g.len() {
                ga[i] += g[i] * kind.derivative(x[i], y[i]);
            }
        }
        Op::Scale(a, c) => {
            let ga = grad_slot(grads, *a, g.len());
            ga.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
        }
        Op::AddScalar(a) => {
            let ga = grad_slot(grads, *a, g.len());
            ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
        }
        Op::Clamp { a, lo, hi } => {
            let x = &nodes[*a].value;
            let ga = grad_slot(grads, *a, g.len());
            for i in 0..g.len() {
                if x[i] >= *lo && x[i] <= *hi {
                    ga[i] += g[i];
                }
            }
        }
        Op::Binary { kind, a, b, plan } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if tracked(*a) {
                let ga = grad_slot(grads, *a, av.len());
                match kind {
                    Binary::Add | Binary::Sub => {
                        if let Index::Same = plan.a {
                            ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                        } else {
                            for (i, s) in g.iter().enumerate() {
                                ga[plan.a.at(i)] += s;
                            }
                        }
                    }
                    Binary::Mul => {
                        for (i, s) in g.iter().enumerate() {
                            ga[plan.a.at(i)] += s * bv[plan.b.at(i)];
                        }
                    }
                    Binary::Div => {
                        for (i, s) in g.iter().enumerate() {
                            ga[plan.a.at(i)] += s / bv[plan.b.at(i)];
                        }
                    }
                }
            }
            if tracked(*b) {
                let gb = grad_slot(grads, *b, bv.len());
                match kind {
                    Binary::Add => {
                        for (i, s) in g.iter().enumerate() {
                            gb[plan.b.at(i)] += s;
                        }
                    }
                    Binary::Sub => {
                        for (i, s) in g.iter().enumerate() {
                            gb[plan.b.at(i)] -= s;
                        }
                    }
                    Binary::Mul => {
                        for (i, s) in g.iter().enumerate() {
                            gb[plan.b.at(i)] += s * av[plan.a.at(i)];
                        }
                    }
                    Binary::Div => {
                        for (i, s) in g.iter().enumerate() {
                            let bi = plan.b.at(i);
                            gb[bi] -= s * av[plan.a.at(i)] / (bv[bi] * bv[bi]);
                        }
                    }
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if tracked(*a) {
                let bv = &nodes[*b].value;
                let ga = grad_slot(grads, *a, m * k);
                // dA = dC · Bᵀ
                gemm(m, n, k, g, n, 1, bv, 1, n, ga, k, 1);
            }
            if tracked(*b) {
                let av = &nodes[*a].value;
                let gb = grad_slot(grads, *b, k * n);
                // dB = Aᵀ · dC
                gemm(k, m, n, av, 1, k, g, n, 1, gb, n, 1);
            }
        }
        Op::Affine { x, w, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if tracked(*x) {
                let gx = grad_slot(grads, *x, m * k);
                gemm(m, n, k, g, n, 1, &nodes[*w].value, 1, n, gx, k, 1);
            }
            if tracked(*w) {
                let gw = grad_slot(grads, *w, k * n);
                gemm(k, m, n, &nodes[*x].value, 1, k, g, n, 1, gw, n, 1);
            }
            if tracked(*b) {
                let gb = grad_slot(grads, *b, n);
                for row in g.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Sum(a) => {
            let len = nodes[*a].value.len();
            let ga = grad_slot(grads, *a, len);
            ga.iter_mut().for_each(|d| *d += g[0]);
        }
        Op::Mean(a) => {
            let len = nodes[*a].value.len();
            let s = g[0] / len as f64;
            let ga = grad_slot(grads, *a, len);
            ga.iter_mut().for_each(|d| *d += s);
        }
        Op::SumAxis { a, outer, len, inner } => {
            let ga = grad_slot(grads, *a, outer * len * inner);
            for o in 0..*outer {
                for l in 0..*len {
                    let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                    let src = &g[o * inner..(o + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Reshape(a) => {
            let ga = grad_slot(grads, *a, g.len());
            ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
        }
        Op::BroadcastTo { a, index } => {
            let len = nodes[*a].value.len();
            let ga = grad_slot(grads, *a, len);
            for (i, s) in g.iter().enumerate() {
                ga[index.at(i)] += s;
            }
        }
        Op::Concat {
            parts,
            outer,
            inner,
            total,
        } => {
            let mut offset = 0;
            for &(id, len) in parts {
                if tracked(id) {
                    let gp = grad_slot(grads, id, outer * len * inner);
                    for o in 0..*outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                offset += len;
            }
        }
        Op::Slice {
            a,
            outer,
            len_in,
            start,
            len,
            inner,
        } => {
            let ga = grad_slot(grads, *a, outer * len_in * inner);
            for o in 0..*outer {
                let dst = &mut ga[(o * len_in + start) * inner..(o * len_in + start + len) * inner];
                let src = &g[o * len * inner..(o + 1) * len * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        Op::CumsumExclusive { a, outer, len, inner } => {
            let ga = grad_slot(grads, *a, outer * len * inner);
            // out[j] = Σ_{k<j} in[k]  ⇒  d in[k] = Σ_{j>k} d out[j]
            for o in 0..*outer {
                for i in 0..*inner {
                    let mut run = 0.0;
                    for l in (0..*len).rev() {
                        let idx = (o * len + l) * inner + i;
                        ga[idx] += run;
                        run += g[idx];
                    }
                }
            }
        }
        Op::MaxN { parts, argmax } => {
            for (k, &id) in parts.iter().enumerate() {
                if !tracked(id) {
                    continue;
                }
                let gp = grad_slot(grads, id, g.len());
                for (i, s) in g.iter().enumerate() {
                    if argmax[i] as usize == k {
                        gp[i] += s;
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            conv::backward(
                geom,
                &nodes[*x].value,
                &nodes[*w].value,
                g,
                grads,
                (*x, tracked(*x)),
                (*w, tracked(*w)),
                (*b, tracked(*b)),
            );
        }
        Op::Upsample2x { a, planes, h, w } => {
            let ga = grad_slot(grads, *a, planes * h * w);
            let (h2, w2) = (2 * h, 2 * w);
            for p in 0..*planes {
                for y in 0..h2 {
                    for x in 0..w2 {
                        ga[(p * h + y / 2) * w + x / 2] += g[(p * h2 + y) * w2 + x];
                    }
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Result<Vec<usize>> {
        Ok(self.graph.live()?.nodes[self.id].shape.clone())
    }

    pub fn numel(&self) -> Result<usize> {
        Ok(self.graph.live()?.nodes[self.id].value.len())
    }

    pub fn is_tracked(&self) -> Result<bool> {
        Ok(self.graph.live()?.nodes[self.id].tracked)
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Result<Vec<f64>> {
        Ok(self.graph.live()?.nodes[self.id].value.clone())
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> Result<R> {
        Ok(f(&self.graph.live()?.nodes[self.id].value))
    }

    pub fn item(&self) -> Result<f64> {
        let inner = self.graph.live()?;
        let node = &inner.nodes[self.id];
        if node.value.len() != 1 {
            return Err(AutodiffError::NotScalar(node.shape.clone()));
        }
        Ok(node.value[0])
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let inner = self.graph.live()?;
        let node = &inner.nodes[self.id];
        Tensor::new(&node.shape, node.value.clone())
    }

    fn unary(self, kind: Unary) -> Result<Var<'g>> {
        let (shape, value, tracked) = {
            let inner = self.graph.live()?;
            let n = &inner.nodes[self.id];
            let v = n.value.iter().map(|&x| kind.apply(x)).collect();
            (n.shape.clone(), v, n.tracked)
        };
        Ok(self.graph.push(shape, value, Op::Unary(kind, self.id), tracked))
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.unary(Unary::Relu)
    }
    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(self) -> Result<Var<'g>> {
        self.unary(Unary::Softplus)
    }
    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary(Unary::Sigmoid)
    }
    pub fn exp(self) -> Result<Var<'g>> {
        self.unary(Unary::Exp)
    }
    pub fn log(self) -> Result<Var<'g>> {
        self.unary(Unary::Log)
    }
    pub fn sin(self) -> Result<Var<'g>> {
        self.unary(Unary::Sin)
    }
    pub fn cos(self) -> Result<Var<'g>> {
        self.unary(Unary::Cos)
    }
    pub fn abs(self) -> Result<Var<'g>> {
        self.unary(Unary::Abs)
    }
    pub fn neg(self) -> Result<Var<'g>> {
        self.unary(Unary::Neg)
    }

    pub fn scale(self, c: f64) -> Result<Var<'g>> {
        let (shape, value, tracked) = {
            let inner = self.graph.live()?;
            let n = &inner.nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|x| c * x).collect(), n.tracked)
        };
        Ok(self.graph.push(shape, value, Op::Scale(self.id, c), tracked))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>> {
        let (shape, value, tracked) = {
            let inner = self.graph.live()?;
            let n = &inner.nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|x| x + c).collect(), n.tracked)
        };
        Ok(self.graph.push(shape, value, Op::AddScalar(self.id), tracked))
    }

    /// Clamps into `[lo, hi]`; gradient passes where the input is inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'g>> {
        let (shape, value, tracked) = {
            let inner = self.graph.live()?;
            let n = &inner.nodes[self.id];
            (
                n.shape.clone(),
                n.value.iter().map(|x| x.clamp(lo, hi)).collect(),
                n.tracked,
            )
        };
        Ok(self.graph.push(shape, value, Op::Clamp { a: self.id, lo, hi }, tracked))
    }

    fn binary(self, other: Var<'g>, kind: Binary) -> Result<Var<'g>> {
        self.graph.owns(other)?;
        let (plan, value, tracked) = {
            let inner = self.graph.live()?;
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            let plan = broadcast::plan(kind.name(), &a.shape, &b.shape)?;
            let value: Vec<f64> = match (&plan.a, &plan.b) {
                (Index::Same, Index::Same) => a.value.iter().zip(&b.value).map(|(&x, &y)| kind.apply(x, y)).collect(),
                (ia, ib) => (0..plan.out_len)
                    .map(|i| kind.apply(a.value[ia.at(i)], b.value[ib.at(i)]))
                    .collect(),
            };
            (plan, value, a.tracked || b.tracked)
        };
        Ok(self.graph.push(
            plan.out_shape.clone(),
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                plan,
            },
            tracked,
        ))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Add)
    }
    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Sub)
    }
    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Mul)
    }
    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Div)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.owns(other)?;
        let (m, k, n, value, tracked) = {
            let inner = self.graph.live()?;
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &a.value, k, 1, &b.value, n, 1, &mut c, n, 1);
            (m, k, n, c, a.tracked || b.tracked)
        };
        Ok(self.graph.push(
            vec![m, n],
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            tracked,
        ))
    }

    /// `self·w + b` for `self: [m, k]`, `w: [k, n]` and `b: [n]` or `[1, n]`.
    pub fn affine(self, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        self.graph.owns(w)?;
        self.graph.owns(b)?;
        let (m, k, n, value, tracked) = {
            let inner = self.graph.live()?;
            let xn = &inner.nodes[self.id];
            let wn = &inner.nodes[w.id];
            let bn = &inner.nodes[b.id];
            if xn.shape.len() != 2 || wn.shape.len() != 2 || xn.shape[1] != wn.shape[0] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "affine",
                    lhs: xn.shape.clone(),
                    rhs: wn.shape.clone(),
                });
            }
            let (m, k, n) = (xn.shape[0], xn.shape[1], wn.shape[1]);
            let row_ok = match bn.shape.as_slice() {
                [len] => *len == n,
                [1, len] => *len == n,
                _ => false,
            };
            if !row_ok {
                return Err(AutodiffError::ShapeMismatch {
                    op: "affine",
                    lhs: vec![m, n],
                    rhs: bn.shape.clone(),
                });
            }
            let mut c = Vec::with_capacity(m * n);
            for _ in 0..m {
                c.extend_from_slice(&bn.value);
            }
            gemm(m, k, n, &xn.value, k, 1, &wn.value, n, 1, &mut c, n, 1);
            (m, k, n, c, xn.tracked || wn.tracked || bn.tracked)
        };
        Ok(self.graph.push(
            vec![m, n],
            value,
            Op::Affine {
                x: self.id,
                w: w.id,
                b: b.id,
                m,
                k,
                n,
            },
            tracked,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<Var<'g>> {
        let (value, tracked) = {
            let inner = self.graph.live()?;
            let n = &inner.nodes[self.id];
            (n.value.iter().sum::<f64>(), n.tracked)
        };
        Ok(self.graph.push(Vec::new(), vec![value], Op::Sum(self.id), tracked))
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let (value, tracked) = {
            let inner = self.graph.live()?;
            let n = &inner.nodes[self.id];
            (n.value.iter().sum::<f64>() / n.value.len() as f64, n.tracked)
        };
        Ok(self.graph.push(Vec::new(), vec![value], Op::Mean(self.id), tracked))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        let (shape, value, outer, len, inner_len, tracked) = {
            let inner = self.graph.live()?;
            let n = &inner.nodes[self.id];
            if axis >= n.shape.len() {
                return Err(AutodiffError::BadAxis {
                    op: "sum_axis",
                    axis,
                    shape: n.shape.clone(),
                });
            }
            let (outer, len, inner_len) = axis_extents(&n.shape, axis);
            let mut value = vec![0.0; outer * inner_len];
            for o in 0..outer {
                let dst = &mut value[o * inner_len..(o + 1) * inner_len];
                for l in 0..len {
                    let src = &n.value[(o * len + l) * inner_len..(o * len + l + 1) * inner_len];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            let mut shape = n.shape.clone();
            shape.remove(axis);
            (shape, value, outer, len, inner_len, n.tracked)
        };
        Ok(self.graph.push(
            shape,
            value,
            Op::SumAxis {
                a: self.id,
                outer,
                len,
                inner: inner_len,
            },
            tracked,
        ))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        let len = self.shape()?.get(axis).copied().ok_or_else(|| AutodiffError::BadAxis {
            op: "mean_axis",
            axis,
            shape: self.shape().unwrap_or_default(),
        })?;
        self.sum_axis(axis)?.scale(1.0 / len as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let (value, tracked) = {
            let inner = self.graph.live()?;
            let n = &inner.nodes[self.id];
            if numel(shape) != n.value.len() || shape.contains(&0) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "reshape",
                    lhs: n.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            (n.value.clone(), n.tracked)
        };
        Ok(self.graph.push(shape.to_vec(), value, Op::Reshape(self.id), tracked))
    }

    /// Explicit broadcast to `shape` under the usual right-aligned rules.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g>> {
        let (index, value, tracked) = {
            let inner = self.graph.live()?;
            let n = &inner.nodes[self.id];
            let out = broadcast::broadcast_shape("broadcast", &n.shape, shape)?;
            if out != shape {
                return Err(AutodiffError::ShapeMismatch {
                    op: "broadcast",
                    lhs: n.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            let index = broadcast::index_for(&n.shape, shape);
            let value = (0..numel(shape)).map(|i| n.value[index.at(i)]).collect();
            (index, value, n.tracked)
        };
        Ok(self
            .graph
            .push(shape.to_vec(), value, Op::BroadcastTo { a: self.id, index }, tracked))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let (shape, value, outer, len_in, inner_len, tracked) = {
            let inner = self.graph.live()?;
            let n = &inner.nodes[self.id];
            if axis >= n.shape.len() {
                return Err(AutodiffError::BadAxis {
                    op: "slice",
                    axis,
                    shape: n.shape.clone(),
                });
            }
            if len == 0 || start + len > n.shape[axis] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "slice",
                    lhs: n.shape.clone(),
                    rhs: vec![start, len],
                });
            }
            let (outer, len_in, inner_len) = axis_extents(&n.shape, axis);
            let mut value = Vec::with_capacity(outer * len * inner_len);
            for o in 0..outer {
                value.extend_from_slice(
                    &n.value[(o * len_in + start) * inner_len..(o * len_in + start + len) * inner_len],
                );
            }
            let mut shape = n.shape.clone();
            shape[axis] = len;
            (shape, value, outer, len_in, inner_len, n.tracked)
        };
        Ok(self.graph.push(
            shape,
            value,
            Op::Slice {
                a: self.id,
                outer,
                len_in,
                start,
                len,
                inner: inner_len,
            },
            tracked,
        ))
    }

    /// Exclusive prefix sum along `axis`: `out[j] = Σ_{k<j} in[k]`.
    pub fn cumsum_exclusive(self, axis: usize) -> Result<Var<'g>> {
        let (shape, value, outer, len, inner_len, tracked) = {
            let inner = self.graph.live()?;
            let n = &inner.nodes[self.id];
            if axis >= n.shape.len() {
                return Err(AutodiffError::BadAxis {
                    op: "cumsum_exclusive",
                    axis,
                    shape: n.shape.clone(),
                });
            }
            let (outer, len, inner_len) = axis_extents(&n.shape, axis);
            let mut value = vec![0.0; n.value.len()];
            for o in 0..outer {
                for i in 0..inner_len {
                    let mut run = 0.0;
                    for l in 0..len {
                        let idx = (o * len + l) * inner_len + i;
                        value[idx] = run;
                        run += n.value[idx];
                    }
                }
            }
            (n.shape.clone(), value, outer, len, inner_len, n.tracked)
        };
        Ok(self.graph.push(
            shape,
            value,
            Op::CumsumExclusive {
                a: self.id,
                outer,
                len,
                inner: inner_len,
            },
            tracked,
        ))
    }

    /// 2-D convolution of `[N, C, H, W]` by `[O, C, KH, KW]` plus bias `[O]`.
    pub fn conv2d(self, weight: Var<'g>, bias: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        self.graph.owns(weight)?;
        self.graph.owns(bias)?;
        let (geom, value, tracked) = {
            let inner = self.graph.live()?;
            let x = &inner.nodes[self.id];
            let w = &inner.nodes[weight.id];
            let b = &inner.nodes[bias.id];
            let geom = ConvGeom::new(&x.shape, &w.shape, &b.shape, stride, pad)?;
            let value = conv::forward(&geom, &x.value, &w.value, &b.value);
            (geom, value, x.tracked || w.tracked || b.tracked)
        };
        Ok(self.graph.push(
            geom.out_shape(),
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                geom,
            },
            tracked,
        ))
    }

    /// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
    pub fn upsample2x(self) -> Result<Var<'g>> {
        let (shape, value, planes, h, w, tracked) = {
            let inner = self.graph.live()?;
            let n = &inner.nodes[self.id];
            if n.shape.len() != 4 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "upsample2x",
                    lhs: n.shape.clone(),
                    rhs: vec![0, 0, 0, 0],
                });
            }
            let (planes, h, w) = (n.shape[0] * n.shape[1], n.shape[2], n.shape[3]);
            let (h2, w2) = (2 * h, 2 * w);
            let mut value = vec![0.0; planes * h2 * w2];
            for p in 0..planes {
                for y in 0..h2 {
                    for x in 0..w2 {
                        value[(p * h2 + y) * w2 + x] = n.value[(p * h + y / 2) * w + x / 2];
                    }
                }
            }
            let shape = vec![n.shape[0], n.shape[1], h2, w2];
            (shape, value, planes, h, w, n.tracked)
        };
        Ok(self.graph.push(
            shape,
            value,
            Op::Upsample2x {
                a: self.id,
                planes,
                h,
                w,
            },
            tracked,
        ))
    }
}
