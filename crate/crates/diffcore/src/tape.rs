//! Reverse-mode differentiation over a linear tape.
//!
//! Ops are recorded in evaluation order while the forward values are
//! computed eagerly. [`Tape::backward`] walks the tape in reverse and sums
//! every contribution a node makes, so a value used twice receives the sum
//! of both gradients.
//!
//! Tape ops panic on shape mismatches; the exported blocks in [`crate::nn`]
//! and [`crate::dist`] validate their inputs and return errors instead.

use std::cell::{Ref, RefCell};

use crate::array::Array;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Elu,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
    Sqrt,
    Sin,
    Atanh,
    Clamp(f64, f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Unary(Var, Unary),
    Concat(Vec<Var>),
    Slice(Var, usize),
    SumAll(Var),
    SumCols(Var),
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Row-major product `[m,k] x [k,n]`, with optional transposition of either
/// operand expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    // a is logically [m,k]; stored as [m,k] or, when transposed, [k,m].
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the slices cover exactly the extents described by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Sin => x.sin(),
            Unary::Atanh => x.atanh(),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    /// dy/dx given input and output.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Sin => x.cos(),
            Unary::Atanh => 1.0 / (1.0 - x * x),
            Unary::Clamp(lo, hi) => {
                if x > lo && x < hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Var {
        self.constant(Array::zeros(shape))
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Array> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = (av.rows(), av.cols());
            let (k2, n) = (bv.rows(), bv.cols());
            assert_eq!(k, k2, "matmul: inner dimensions {:?} x {:?}", av.shape(), bv.shape());
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, av.data(), false, bv.data(), false, &mut c, 0.0);
            Array::new(vec![m, n], c).expect("matmul shape")
        };
        self.push(out, Op::MatMul(a, b), self.rg(&[a, b]))
    }

    /// `x [m,n] + b [1,n]` broadcast over rows.
    pub fn add_row(&self, x: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[x.0].value, &nodes[b.0].value);
            let n = xv.cols();
            assert_eq!(bv.len(), n, "add_row: {:?} + {:?}", xv.shape(), bv.shape());
            let mut o = xv.clone();
            for row in o.data_mut().chunks_mut(n) {
                for (o, b) in row.iter_mut().zip(bv.data()) {
                    *o += b;
                }
            }
            o
        };
        self.push(out, Op::AddRow(x, b), self.rg(&[x, b]))
    }

    fn binary(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Array {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        assert_eq!(av.len(), bv.len(), "{}: {:?} vs {:?}", name, av.shape(), bv.shape());
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(av.shape().to_vec(), data).expect("binary shape")
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, "add", |x, y| x + y);
        self.push(v, Op::Add(a, b), self.rg(&[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, "sub", |x, y| x - y);
        self.push(v, Op::Sub(a, b), self.rg(&[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, "mul", |x, y| x * y);
        self.push(v, Op::Mul(a, b), self.rg(&[a, b]))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, "div", |x, y| x / y);
        self.push(v, Op::Div(a, b), self.rg(&[a, b]))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), self.rg(&[a]))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + c` elementwise.
    pub fn shift(&self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Shift(a), self.rg(&[a]))
    }

    fn unary(&self, a: Var, u: Unary) -> Var {
        let v = self.value(a).map(|x| u.forward(x));
        self.push(v, Op::Unary(a, u), self.rg(&[a]))
    }

    pub fn elu(&self, a: Var) -> Var {
        self.unary(a, Unary::Elu)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }

    pub fn atanh(&self, a: Var) -> Var {
        self.unary(a, Unary::Atanh)
    }

    /// Clamp with zero gradient outside `(lo, hi)`.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Unary::Clamp(lo, hi))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let arrays: Vec<&Array> = parts.iter().map(|p| &nodes[p.0].value).collect();
            Array::concat_cols(&arrays).expect("concat_cols: row counts differ")
        };
        self.push(v, Op::Concat(parts.to_vec()), self.rg(parts))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let v = {
            let av = self.value(a);
            assert!(start + len <= av.cols(), "slice_cols out of range");
            av.slice_cols(start, len)
        };
        self.push(v, Op::Slice(a, start), self.rg(&[a]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, a: Var) -> Var {
        let v = Array::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a), self.rg(&[a]))
    }

    /// Per-row sum, shape `[rows, 1]`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let v = {
            let av = self.value(a);
            let c = av.cols();
            let data: Vec<f64> = av.data().chunks(c).map(|r| r.iter().sum()).collect();
            let rows = data.len();
            Array::new(vec![rows, 1], data).expect("sum_cols")
        };
        self.push(v, Op::SumCols(a), self.rg(&[a]))
    }

    /// Gradients of the scalar `output` with respect to every recorded value.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.0].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: &[f64]) {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => {
                    for (b, x) in buf.iter_mut().zip(g) {
                        *b += x;
                    }
                }
                slot @ None => *slot = Some(g.to_vec()),
            }
        }

        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if nodes[a.0].requires_grad {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, bv.data(), true, &mut da, 0.0);
                        acc(&mut grads, &nodes, *a, &da);
                    }
                    if nodes[b.0].requires_grad {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), true, &g, false, &mut db, 0.0);
                        acc(&mut grads, &nodes, *b, &db);
                    }
                }
                Op::AddRow(x, b) => {
                    acc(&mut grads, &nodes, *x, &g);
                    if nodes[b.0].requires_grad {
                        let n = nodes[b.0].value.len();
                        let mut db = vec![0.0; n];
                        for row in g.chunks(n) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        acc(&mut grads, &nodes, *b, &db);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, &g);
                    acc(&mut grads, &nodes, *b, &g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *a, &g);
                    if nodes[b.0].requires_grad {
                        let ng: Vec<f64> = g.iter().map(|x| -x).collect();
                        acc(&mut grads, &nodes, *b, &ng);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if nodes[a.0].requires_grad {
                        let da: Vec<f64> = g.iter().zip(bv).map(|(g, y)| g * y).collect();
                        acc(&mut grads, &nodes, *a, &da);
                    }
                    if nodes[b.0].requires_grad {
                        let db: Vec<f64> = g.iter().zip(av).map(|(g, x)| g * x).collect();
                        acc(&mut grads, &nodes, *b, &db);
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if nodes[a.0].requires_grad {
                        let da: Vec<f64> = g.iter().zip(bv).map(|(g, y)| g / y).collect();
                        acc(&mut grads, &nodes, *a, &da);
                    }
                    if nodes[b.0].requires_grad {
                        let db: Vec<f64> = g
                            .iter()
                            .zip(av.iter().zip(bv))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect();
                        acc(&mut grads, &nodes, *b, &db);
                    }
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                    acc(&mut grads, &nodes, *a, &da);
                }
                Op::Shift(a) => acc(&mut grads, &nodes, *a, &g),
                Op::Unary(a, u) => {
                    let xv = nodes[a.0].value.data();
                    let yv = node.value.data();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(xv.iter().zip(yv))
                        .map(|(g, (&x, &y))| g * u.derivative(x, y))
                        .collect();
                    acc(&mut grads, &nodes, *a, &da);
                }
                Op::Concat(parts) => {
                    let total = node.value.cols();
                    let rows = node.value.rows();
                    let mut offset = 0;
                    for p in parts {
                        let c = nodes[p.0].value.cols();
                        if nodes[p.0].requires_grad {
                            let mut dp = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                            }
                            acc(&mut grads, &nodes, *p, &dp);
                        }
                        offset += c;
                    }
                }
                Op::Slice(a, start) => {
                    let av = &nodes[a.0].value;
                    let (rows, cols) = (av.rows(), av.cols());
                    let len = node.value.cols();
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        da[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    acc(&mut grads, &nodes, *a, &da);
                }
                Op::SumAll(a) => {
                    let da = vec![g[0]; nodes[a.0].value.len()];
                    acc(&mut grads, &nodes, *a, &da);
                }
                Op::SumCols(a) => {
                    let c = nodes[a.0].value.cols();
                    let da: Vec<f64> =
                        g.iter().flat_map(|&x| std::iter::repeat_n(x, c)).collect();
                    acc(&mut grads, &nodes, *a, &da);
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if `v` does not influence the output or
    /// does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled to `len` when absent.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}
