//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive operation applied to its [`Var`]
//! handles. Leaves are either parameters (gradients are produced for them)
//! or constants (never differentiated). Operations on constants only produce
//! constants, so no backward rule is ever run for them.
//!
//! The tape is single-use: one forward pass, one [`Tape::backward`]. A second
//! backward call fails until [`Tape::reset`] clears the recording.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a backward pass; reset it first")]
    TapeConsumed,
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::BadLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new([rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(AutodiffError::Invalid {
                op,
                detail: format!("expected a matrix, got shape {other:?}"),
            }),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Parameter,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Tanh(Var),
    Relu(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SliceCols(Var, usize),
    Clamp(Var, f64, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss, keyed by parameter handle.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn remove(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return c;
    }
    // SAFETY: a holds m*k values addressed by (rsa, csa), b holds k*n values
    // addressed by (rsb, csb), c is a freshly allocated row-major m*n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears the recording. Handles from before the reset become invalid.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.consumed.set(false);
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Registers a differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Parameter, true)
    }

    /// Registers a constant leaf; no gradient is ever produced for it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copies `v` onto the tape as a constant (stop-gradient).
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.with_value(v, |t| t.shape.clone())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> Result<f64> {
        self.with_value(v, |t| {
            t.item().ok_or_else(|| AutodiffError::Invalid {
                op: "item",
                detail: format!("expected one element, got shape {:?}", t.shape),
            })
        })
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            let data = n.value.data.iter().map(|&x| f(x)).collect();
            (
                Tensor {
                    shape: n.value.shape.clone(),
                    data,
                },
                n.requires_grad,
            )
        };
        self.push(value, op, rg)
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.value.shape != nb.value.shape {
                return Err(AutodiffError::ShapeMismatch {
                    op: name,
                    left: na.value.shape.clone(),
                    right: nb.value.shape.clone(),
                });
            }
            let data = na
                .value
                .data
                .iter()
                .zip(&nb.value.data)
                .map(|(&x, &y)| f(x, y))
                .collect();
            (
                Tensor {
                    shape: na.value.shape.clone(),
                    data,
                },
                na.requires_grad || nb.requires_grad,
            )
        };
        Ok(self.push(value, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let zero = self.with_value(b, |t| t.data.iter().position(|&y| y == 0.0 || y.is_nan()));
        if let Some(i) = zero {
            return Err(AutodiffError::Domain {
                op: "div",
                detail: format!("denominator element {i} is zero or NaN"),
            });
        }
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (m, k) = na.value.dims2("matmul")?;
            let (k2, n) = nb.value.dims2("matmul")?;
            if k != k2 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    left: na.value.shape.clone(),
                    right: nb.value.shape.clone(),
                });
            }
            let data = gemm((m, k, n), &na.value.data, (k, 1), &nb.value.data, (n, 1));
            (
                Tensor {
                    shape: vec![m, n],
                    data,
                },
                na.requires_grad || nb.requires_grad,
            )
        };
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds the row vector `bias` (`[n]`) to every row of `a` (`[m, n]`).
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[bias.0]);
            let (_, n) = na.value.dims2("add_row")?;
            if nb.value.shape != [n] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "add_row",
                    left: na.value.shape.clone(),
                    right: nb.value.shape.clone(),
                });
            }
            let mut data = na.value.data.clone();
            for row in data.chunks_exact_mut(n.max(1)) {
                row.iter_mut().zip(&nb.value.data).for_each(|(x, b)| *x += b);
            }
            (
                Tensor {
                    shape: na.value.shape.clone(),
                    data,
                },
                na.requires_grad || nb.requires_grad,
            )
        };
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let bad = self.with_value(a, |t| t.data.iter().position(|&x| !(x > 0.0)));
        if let Some(i) = bad {
            let x = self.with_value(a, |t| t.data[i]);
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("element {i} is {x}, expected a positive value"),
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    /// Adds the constant `c` to every element.
    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, a: Var) -> Var {
        let (s, rg) = self.reduce(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.with_value(a, |t| t.len());
        if n == 0 {
            return Err(AutodiffError::Invalid {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let (s, rg) = self.reduce(a);
        Ok(self.push(Tensor::scalar(s / n as f64), Op::Mean(a), rg))
    }

    fn reduce(&self, a: Var) -> (f64, bool) {
        let nodes = self.nodes.borrow();
        let n = &nodes[a.0];
        (n.value.data.iter().sum(), n.requires_grad)
    }

    /// Per-row sums of a matrix: `[m, n] -> [m]`.
    pub fn sum_rows(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let (m, n) = na.value.dims2("sum_rows")?;
            let data = if n == 0 {
                vec![0.0; m]
            } else {
                na.value.data.chunks_exact(n).map(|r| r.iter().sum()).collect()
            };
            (Tensor::vector(data), na.requires_grad)
        };
        Ok(self.push(value, Op::SumRows(a), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let (m, n) = na.value.dims2("slice_cols")?;
            if start > end || end > n {
                return Err(AutodiffError::Invalid {
                    op: "slice_cols",
                    detail: format!("range {start}..{end} out of bounds for {n} columns"),
                });
            }
            let w = end - start;
            let mut data = Vec::with_capacity(m * w);
            for r in 0..m {
                data.extend_from_slice(&na.value.data[r * n + start..r * n + end]);
            }
            (
                Tensor {
                    shape: vec![m, w],
                    data,
                },
                na.requires_grad,
            )
        };
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Returns a gradient for every parameter leaf on the tape (zeros for
    /// parameters the loss does not depend on). Consumes the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(AutodiffError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let loss_shape = &nodes[loss.0].value.shape;
        if nodes[loss.0].value.len() != 1 || !loss_shape.is_empty() && loss_shape != &[1] {
            return Err(AutodiffError::NonScalarLoss(loss_shape.clone()));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Parameter | Op::Constant) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let wants = |v: Var| nodes[v.0].requires_grad;
            let mut emit = |v: Var, contrib: Vec<f64>| {
                if wants(v) {
                    accumulate(&mut grads[v.0], contrib);
                }
            };
            match node.op {
                Op::Parameter | Op::Constant => unreachable!(),
                Op::Add(a, b) => {
                    if wants(b) {
                        emit(b, g.clone());
                    }
                    emit(a, g);
                }
                Op::Sub(a, b) => {
                    if wants(b) {
                        emit(b, g.iter().map(|x| -x).collect());
                    }
                    emit(a, g);
                }
                Op::Mul(a, b) => {
                    if wants(a) {
                        emit(a, g.iter().zip(&val(b).data).map(|(g, y)| g * y).collect());
                    }
                    if wants(b) {
                        emit(b, g.iter().zip(&val(a).data).map(|(g, x)| g * x).collect());
                    }
                }
                Op::Div(a, b) => {
                    let yb = &val(b).data;
                    if wants(a) {
                        emit(a, g.iter().zip(yb).map(|(g, y)| g / y).collect());
                    }
                    if wants(b) {
                        let out = &node.value.data;
                        let gb = g
                            .iter()
                            .zip(out)
                            .zip(yb)
                            .map(|((g, q), y)| -g * q / y)
                            .collect();
                        emit(b, gb);
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let (m, k) = (ta.shape[0], ta.shape[1]);
                    let n = tb.shape[1];
                    if wants(a) {
                        // dA = G B^T
                        emit(a, gemm((m, n, k), &g, (n, 1), &tb.data, (1, n)));
                    }
                    if wants(b) {
                        // dB = A^T G
                        emit(b, gemm((k, m, n), &ta.data, (1, k), &g, (n, 1)));
                    }
                }
                Op::AddRow(a, bias) => {
                    if wants(bias) {
                        let n = val(bias).len();
                        let mut gb = vec![0.0; n];
                        for row in g.chunks_exact(n.max(1)) {
                            gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                        }
                        emit(bias, gb);
                    }
                    emit(a, g);
                }
                Op::Exp(a) => {
                    let out = &node.value.data;
                    emit(a, g.iter().zip(out).map(|(g, y)| g * y).collect());
                }
                Op::Log(a) => {
                    emit(a, g.iter().zip(&val(a).data).map(|(g, x)| g / x).collect());
                }
                Op::Square(a) => {
                    emit(a, g.iter().zip(&val(a).data).map(|(g, x)| 2.0 * g * x).collect());
                }
                Op::Tanh(a) => {
                    let out = &node.value.data;
                    emit(a, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect());
                }
                Op::Relu(a) => {
                    let ga = g
                        .iter()
                        .zip(&val(a).data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    emit(a, ga);
                }
                Op::Scale(a, c) => emit(a, g.iter().map(|g| c * g).collect()),
                Op::AddScalar(a) => emit(a, g),
                Op::Clamp(a, lo, hi) => {
                    let ga = g
                        .iter()
                        .zip(&val(a).data)
                        .map(|(g, &x)| if (lo..=hi).contains(&x) { *g } else { 0.0 })
                        .collect();
                    emit(a, ga);
                }
                Op::Sum(a) => emit(a, vec![g[0]; val(a).len()]),
                Op::Mean(a) => {
                    let n = val(a).len();
                    emit(a, vec![g[0] / n as f64; n]);
                }
                Op::SumRows(a) => {
                    let n = val(a).shape[1];
                    let mut ga = Vec::with_capacity(val(a).len());
                    for gr in &g {
                        ga.extend(std::iter::repeat_n(*gr, n));
                    }
                    emit(a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = (val(a).shape[0], val(a).shape[1]);
                    let w = node.value.shape[1];
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        ga[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    emit(a, ga);
                }
            }
        }

        let mut out = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Parameter) {
                let data = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                out.insert(
                    Var(id),
                    Tensor {
                        shape: node.value.shape.clone(),
                        data,
                    },
                );
            }
        }
        Ok(Gradients { grads: out })
    }
}
