//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Every operation appends one node holding its forward value and the ids of
//! its parents. Node ids grow monotonically, so the tape is already in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! A value used by several nodes receives the sum of their contributions.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{contract, Error, Result};
use crate::math::{self, PROB_FLOOR};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Values<'p> {
    Owned(Vec<f64>),
    Borrowed(&'p [f64]),
}

impl Values<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Values::Owned(v) => v,
            Values::Borrowed(v) => v,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBroadcast(Var, Var),
    Affine(Var, f64),
    ScaleBy(Var, Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Slice(Var, usize),
    GatherRow(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    ScatterAdd(Var, Vec<usize>),
    Pad(Var),
    Nll(Var, usize),
    Pick(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
}

struct Node<'p> {
    shape: Vec<usize>,
    values: Values<'p>,
    op: Op,
    requires_grad: bool,
}

/// Operation log for one forward pass.
///
/// `'p` is the lifetime of parameter storage borrowed by [`Tape::param`];
/// parameters are read in place rather than copied onto the tape.
pub struct Tape<'p> {
    nodes: RefCell<Vec<Node<'p>>>,
    clamped: RefCell<Vec<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a node, or `None` when the seed does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a node as a tensor of the node's shape; zeros when unreachable.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), clamped: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), values.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, values: Values::Owned(values), op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A differentiable input owned by the tape.
    pub fn leaf(&self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// A differentiable input read in place from `t`.
    pub fn param(&self, t: &'p Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            values: Values::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn numel(&self, v: Var) -> usize {
        numel(&self.nodes.borrow()[v.0].shape)
    }

    /// Copy of a node's forward value.
    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.values.as_slice().to_vec()).expect("node shape")
    }

    pub fn to_vec(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].values.as_slice().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].values.as_slice()[0]
    }

    /// Runs `f` on a borrowed view of a node's values.
    pub fn with_values<R>(&self, v: Var, f: impl FnOnce(&[f64]) -> R) -> R {
        f(self.nodes.borrow()[v.0].values.as_slice())
    }

    /// Nodes of [`Tape::nll`] whose probability fell below the log floor.
    pub fn clamped(&self) -> Vec<Var> {
        self.clamped.borrow().clone()
    }

    fn unary(&self, x: Var, shape: Vec<usize>, op: Op, f: impl FnOnce(&[f64]) -> Vec<f64>) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            f(nodes[x.0].values.as_slice())
        };
        let rg = self.any_grad(&[x]);
        self.push(shape, out, op, rg)
    }

    fn binary(&self, a: Var, b: Var, shape: Vec<usize>, op: Op, f: impl FnOnce(&[f64], &[f64]) -> Vec<f64>) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            f(nodes[a.0].values.as_slice(), nodes[b.0].values.as_slice())
        };
        let rg = self.any_grad(&[a, b]);
        self.push(shape, out, op, rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        self.binary(a, b, vec![m, n], Op::MatMul(a, b), |a, b| {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            out
        })
    }

    /// `[m, k] x [k] -> [m]`.
    pub fn matvec(&self, a: Var, x: Var) -> Var {
        let (sa, sx) = (self.shape(a), self.shape(x));
        assert!(sa.len() == 2 && sx.len() == 1 && sa[1] == sx[0], "matvec {sa:?} x {sx:?}");
        let (m, k) = (sa[0], sa[1]);
        self.binary(a, x, vec![m], Op::MatVec(a, x), |a, x| {
            (0..m).map(|i| a[i * k..(i + 1) * k].iter().zip(x).map(|(w, v)| w * v).sum()).collect()
        })
    }

    /// `[k] x [k, n] -> [n]`.
    pub fn vecmat(&self, x: Var, b: Var) -> Var {
        let (sx, sb) = (self.shape(x), self.shape(b));
        assert!(sx.len() == 1 && sb.len() == 2 && sb[0] == sx[0], "vecmat {sx:?} x {sb:?}");
        let (k, n) = (sb[0], sb[1]);
        self.binary(x, b, vec![n], Op::VecMat(x, b), |x, b| {
            let mut out = vec![0.0; n];
            for p in 0..k {
                for (o, &bv) in out.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o += x[p] * bv;
                }
            }
            out
        })
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Vec<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{what}: shape mismatch");
        sa
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let s = self.same_shape(a, b, "add");
        self.binary(a, b, s, Op::Add(a, b), |a, b| a.iter().zip(b).map(|(x, y)| x + y).collect())
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let s = self.same_shape(a, b, "sub");
        self.binary(a, b, s, Op::Sub(a, b), |a, b| a.iter().zip(b).map(|(x, y)| x - y).collect())
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let s = self.same_shape(a, b, "mul");
        self.binary(a, b, s, Op::Mul(a, b), |a, b| a.iter().zip(b).map(|(x, y)| x * y).collect())
    }

    /// Adds vector `v` to every row of matrix `m`.
    pub fn add_row_broadcast(&self, m: Var, v: Var) -> Var {
        let (sm, sv) = (self.shape(m), self.shape(v));
        assert!(sm.len() == 2 && sv.len() == 1 && sm[1] == sv[0], "broadcast {sm:?} + {sv:?}");
        let cols = sv[0];
        self.binary(m, v, sm, Op::AddRowBroadcast(m, v), |m, v| {
            m.iter().enumerate().map(|(i, x)| x + v[i % cols]).collect()
        })
    }

    /// `scale * x + shift`, elementwise with constant coefficients.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Var {
        let s = self.shape(x);
        self.unary(x, s, Op::Affine(x, scale), |x| x.iter().map(|v| scale * v + shift).collect())
    }

    /// Multiplies every entry of `x` by the one-element node `s`.
    pub fn scale_by(&self, x: Var, s: Var) -> Var {
        assert_eq!(self.numel(s), 1, "scale_by expects a scalar factor");
        let shape = self.shape(x);
        self.binary(x, s, shape, Op::ScaleBy(x, s), |x, s| x.iter().map(|v| v * s[0]).collect())
    }

    /// Concatenation along the last axis. All parts must agree on leading dims.
    pub fn concat(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p)).collect();
        let lead = &shapes[0][..shapes[0].len() - 1];
        for s in &shapes {
            assert_eq!(&s[..s.len() - 1], lead, "concat: leading dims differ");
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = shapes.iter().map(|s| s[s.len() - 1]).collect();
        let total: usize = widths.iter().sum();
        let out = {
            let nodes = self.nodes.borrow();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[p.0].values.as_slice()[r * w..(r + 1) * w]);
                }
            }
            out
        };
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.any_grad(parts);
        self.push(shape, out, Op::Concat(parts.to_vec()), rg)
    }

    /// Stacks equal-length vectors into a `[parts.len(), n]` matrix.
    pub fn stack(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack of nothing");
        let n = self.numel(parts[0]);
        let out = {
            let nodes = self.nodes.borrow();
            let mut out = Vec::with_capacity(parts.len() * n);
            for p in parts {
                let v = nodes[p.0].values.as_slice();
                assert_eq!(v.len(), n, "stack: unequal lengths");
                out.extend_from_slice(v);
            }
            out
        };
        let rg = self.any_grad(parts);
        self.push(vec![parts.len(), n], out, Op::Stack(parts.to_vec()), rg)
    }

    /// Contiguous range `[start, start + len)` of a vector.
    pub fn slice(&self, x: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.numel(x), "slice out of range");
        self.unary(x, vec![len], Op::Slice(x, start), |x| x[start..start + len].to_vec())
    }

    /// Row `index` of a matrix (embedding lookup).
    pub fn gather_row(&self, table: Var, index: usize) -> Var {
        let s = self.shape(table);
        assert!(s.len() == 2 && index < s[0], "gather_row {index} from {s:?}");
        let cols = s[1];
        self.unary(table, vec![cols], Op::GatherRow(table, index), |t| t[index * cols..(index + 1) * cols].to_vec())
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let s = self.shape(x);
        self.unary(x, s, Op::Sigmoid(x), |x| x.iter().map(|&v| math::sigmoid(v)).collect())
    }

    pub fn tanh(&self, x: Var) -> Var {
        let s = self.shape(x);
        self.unary(x, s, Op::Tanh(x), |x| x.iter().map(|&v| math::tanh(v)).collect())
    }

    /// Softmax over all entries of `x`, stabilized by max subtraction.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let out = self.with_values(x, math::softmax)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(self.shape(x), out, Op::Softmax(x), rg))
    }

    /// `out[indices[t]] += x[t]` into a zero vector of length `width`.
    pub fn scatter_add(&self, x: Var, indices: &[usize], width: usize) -> Var {
        assert_eq!(self.numel(x), indices.len(), "scatter_add: index count");
        assert!(indices.iter().all(|&i| i < width), "scatter_add: index out of range");
        let idx = indices.to_vec();
        self.unary(x, vec![width], Op::ScatterAdd(x, idx), |x| {
            let mut out = vec![0.0; width];
            for (&v, &i) in x.iter().zip(indices) {
                out[i] += v;
            }
            out
        })
    }

    /// Extends a vector with trailing zeros up to `width`.
    pub fn pad(&self, x: Var, width: usize) -> Var {
        let n = self.numel(x);
        assert!(width >= n, "pad: width {width} below length {n}");
        self.unary(x, vec![width], Op::Pad(x), |x| {
            let mut out = x.to_vec();
            out.resize(width, 0.0);
            out
        })
    }

    /// `-ln(max(x[index], 1e-12))`; a clamped entry contributes no gradient.
    pub fn nll(&self, p: Var, index: usize) -> Var {
        assert!(index < self.numel(p), "nll index out of range");
        let prob = self.with_values(p, |v| v[index]);
        let out = self.unary(p, vec![1], Op::Nll(p, index), |_| alloc::vec![-math::ln(prob.max(PROB_FLOOR))]);
        if prob < PROB_FLOOR {
            self.clamped.borrow_mut().push(out);
        }
        out
    }

    /// Entry `index` of `x` as a one-element node.
    pub fn pick(&self, x: Var, index: usize) -> Var {
        assert!(index < self.numel(x), "pick index out of range");
        self.unary(x, vec![1], Op::Pick(x, index), |x| vec![x[index]])
    }

    pub fn sum(&self, x: Var) -> Var {
        self.unary(x, vec![1], Op::Sum(x), |x| vec![x.iter().sum()])
    }

    pub fn mean(&self, x: Var) -> Var {
        self.unary(x, vec![1], Op::Mean(x), |x| vec![x.iter().sum::<f64>() / x.len() as f64])
    }

    /// Mean of a matrix over `axis` (0: over rows, 1: over columns).
    pub fn mean_axis(&self, x: Var, axis: usize) -> Var {
        let s = self.shape(x);
        assert!(s.len() == 2 && axis < 2, "mean_axis expects a matrix");
        let (r, c) = (s[0], s[1]);
        let shape = if axis == 0 { vec![c] } else { vec![r] };
        self.unary(x, shape, Op::MeanAxis(x, axis), |x| {
            if axis == 0 {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += x[i * c + j];
                    }
                }
                out.iter().map(|v| v / r as f64).collect()
            } else {
                (0..r).map(|i| x[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64).collect()
            }
        })
    }

    /// Sum of one-element nodes.
    pub fn sum_scalars(&self, xs: &[Var]) -> Var {
        let stacked = self.stack(xs);
        self.sum(stacked)
    }

    /// Mean of one-element nodes.
    pub fn mean_scalars(&self, xs: &[Var]) -> Var {
        let stacked = self.stack(xs);
        self.mean(stacked)
    }

    /// Reverse sweep from a one-element `seed`.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let seed_len = numel(&nodes[seed.0].shape);
        if seed_len != 1 {
            return Err(contract!("backward seed must be a scalar, got {seed_len} values"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[seed.0] = Some(vec![1.0]);

        for i in (0..=seed.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.requires_grad {
                Self::propagate(&nodes, node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(nodes: &[Node<'p>], node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| nodes[v.0].values.as_slice();
        let shape = |v: Var| nodes[v.0].shape.as_slice();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let len = numel(&nodes[v.0].shape);
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(buf);
            }
        };
        let out = node.values.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += a_ip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::MatVec(a, x) => {
                let k = shape(*a)[1];
                let (av, xv) = (val(*a), val(*x));
                acc(*a, &mut |ga| {
                    for (i, &gi) in g.iter().enumerate() {
                        for (w, &xj) in ga[i * k..(i + 1) * k].iter_mut().zip(xv) {
                            *w += gi * xj;
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for (i, &gi) in g.iter().enumerate() {
                        for (o, &w) in gx.iter_mut().zip(&av[i * k..(i + 1) * k]) {
                            *o += gi * w;
                        }
                    }
                });
            }
            Op::VecMat(x, b) => {
                let n = shape(*b)[1];
                let (xv, bv) = (val(*x), val(*b));
                acc(*x, &mut |gx| {
                    for (p, o) in gx.iter_mut().enumerate() {
                        *o += bv[p * n..(p + 1) * n].iter().zip(g).map(|(w, gj)| w * gj).sum::<f64>();
                    }
                });
                acc(*b, &mut |gb| {
                    for (p, &xp) in xv.iter().enumerate() {
                        for (o, &gj) in gb[p * n..(p + 1) * n].iter_mut().zip(g) {
                            *o += xp * gj;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o += v));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((o, gv), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gv), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            Op::AddRowBroadcast(m, v) => {
                let cols = shape(*v)[0];
                acc(*m, &mut |gm| gm.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc(*v, &mut |gv| {
                    for (i, x) in g.iter().enumerate() {
                        gv[i % cols] += x;
                    }
                });
            }
            Op::Affine(x, scale) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += scale * v));
            }
            Op::ScaleBy(x, s) => {
                let (xv, sv) = (val(*x), val(*s)[0]);
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += sv * v));
                acc(*s, &mut |gs| gs[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>());
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| *shape(*p).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    acc(*p, &mut |gp| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (o, v) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Stack(parts) => {
                let n = g.len() / parts.len();
                for (r, p) in parts.iter().enumerate() {
                    acc(*p, &mut |gp| gp.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(o, v)| *o += v));
                }
            }
            Op::Slice(x, start) => {
                acc(*x, &mut |gx| gx[*start..*start + g.len()].iter_mut().zip(g).for_each(|(o, v)| *o += v));
            }
            Op::GatherRow(t, index) => {
                let cols = g.len();
                acc(*t, &mut |gt| gt[index * cols..(index + 1) * cols].iter_mut().zip(g).for_each(|(o, v)| *o += v));
            }
            Op::Sigmoid(x) => {
                acc(*x, &mut |gx| {
                    for ((o, gv), y) in gx.iter_mut().zip(g).zip(out) {
                        *o += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(x) => {
                acc(*x, &mut |gx| {
                    for ((o, gv), y) in gx.iter_mut().zip(g).zip(out) {
                        *o += gv * (1.0 - y * y);
                    }
                });
            }
            Op::Softmax(x) => {
                let dot: f64 = g.iter().zip(out).map(|(a, b)| a * b).sum();
                acc(*x, &mut |gx| {
                    for ((o, gv), y) in gx.iter_mut().zip(g).zip(out) {
                        *o += y * (gv - dot);
                    }
                });
            }
            Op::ScatterAdd(x, indices) => {
                acc(*x, &mut |gx| {
                    for (o, &i) in gx.iter_mut().zip(indices) {
                        *o += g[i];
                    }
                });
            }
            Op::Pad(x) => {
                acc(*x, &mut |gx| {
                    let n = gx.len();
                    gx.iter_mut().zip(&g[..n]).for_each(|(o, v)| *o += v)
                });
            }
            Op::Nll(p, index) => {
                let prob = val(*p)[*index];
                if prob >= PROB_FLOOR {
                    acc(*p, &mut |gp| gp[*index] -= g[0] / prob);
                }
            }
            Op::Pick(x, index) => {
                acc(*x, &mut |gx| gx[*index] += g[0]);
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(x) => {
                let n = numel(shape(*x)) as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::MeanAxis(x, axis) => {
                let (r, c) = (shape(*x)[0], shape(*x)[1]);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += if *axis == 0 { g[j] / r as f64 } else { g[i] / c as f64 };
                        }
                    }
                });
            }
        }
    }
}

/// Fails with a numeric-domain error when any value of `v` is not finite.
pub fn ensure_finite(tape: &Tape<'_>, v: Var, what: &str) -> Result<()> {
    if tape.with_values(v, |x| x.iter().all(|x| x.is_finite())) {
        Ok(())
    } else {
        Err(Error::NumericDomain(alloc::format!("{what} is not finite")))
    }
}
