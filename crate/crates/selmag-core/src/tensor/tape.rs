//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as a node holding its forward payload;
//! [`Tape::backward`] walks the recording once in reverse and accumulates
//! gradients for every node. The operation set is deliberately small: each op
//! has an explicit, hand-derived adjoint, and every adjoint is validated
//! against central finite differences in the test suite.
//!
//! Gradients at non-differentiable points follow the usual conventions:
//! `relu` uses derivative 0 at the origin, `max_pool_rows` routes the
//! gradient to the first maximal row, and `log` (which clamps its argument
//! to `1e-12` for stability) has derivative 0 inside the clamped region.

use std::cell::RefCell;

use crate::tensor::matrix::Matrix;

/// Floor applied to `log` arguments to keep losses finite.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

enum Op {
    Input,
    /// Elementwise sum; the right operand may be a `1 x m` row vector which
    /// is broadcast across the rows of the left operand.
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    MulElem(ValueId, ValueId),
    MatMul(ValueId, ValueId),
    Transpose(ValueId),
    ScalarMul(ValueId, f64),
    Relu(ValueId),
    Sigmoid(ValueId),
    SoftmaxRows(ValueId),
    Log(ValueId),
    Exp(ValueId),
    Sum(ValueId),
    Mean(ValueId),
    ConcatCols(ValueId, ValueId),
    SliceRows(ValueId, Vec<usize>),
    MaxPoolRows(ValueId),
    MeanPoolRows(ValueId),
    Square(ValueId),
    Neg(ValueId),
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Append-only recording of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, op: Op, value: Matrix) -> ValueId {
        debug_assert!(value.is_finite(), "tape op produced a non-finite value");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        ValueId(nodes.len() - 1)
    }

    /// Records a leaf that will typically receive a gradient (a parameter).
    pub fn input(&self, value: Matrix) -> ValueId {
        self.push(Op::Input, value)
    }

    /// Records a leaf treated as data; identical to [`Tape::input`] except in
    /// intent at the call site.
    pub fn constant(&self, value: Matrix) -> ValueId {
        self.push(Op::Input, value)
    }

    /// Clone of the forward payload of `id`.
    pub fn value(&self, id: ValueId) -> Matrix {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn shape(&self, id: ValueId) -> (usize, usize) {
        self.nodes.borrow()[id.0].value.shape()
    }

    /// Scalar payload of a `1x1` node.
    pub fn item(&self, id: ValueId) -> f64 {
        self.nodes.borrow()[id.0].value.item()
    }

    /// Applies `f` to the payload of `id` without cloning it.
    pub fn with_value<R>(&self, id: ValueId, f: impl FnOnce(&Matrix) -> R) -> R {
        f(&self.nodes.borrow()[id.0].value)
    }

    pub fn add(&self, a: ValueId, b: ValueId) -> ValueId {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if va.shape() == vb.shape() {
                va.add(vb)
            } else {
                assert!(
                    vb.rows() == 1 && vb.cols() == va.cols(),
                    "add: incompatible shapes {:?} and {:?}",
                    va.shape(),
                    vb.shape()
                );
                va.add_row_broadcast(vb)
            }
        };
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&self, a: ValueId, b: ValueId) -> ValueId {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
            va.sub(vb)
        };
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul_elem(&self, a: ValueId, b: ValueId) -> ValueId {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.mul_elem(&nodes[b.0].value)
        };
        self.push(Op::MulElem(a, b), value)
    }

    pub fn matmul(&self, a: ValueId, b: ValueId) -> ValueId {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)
        };
        self.push(Op::MatMul(a, b), value)
    }

    pub fn transpose(&self, a: ValueId) -> ValueId {
        let value = self.nodes.borrow()[a.0].value.transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn scalar_mul(&self, a: ValueId, c: f64) -> ValueId {
        assert!(c.is_finite(), "scalar_mul: non-finite factor");
        let value = self.nodes.borrow()[a.0].value.scale(c);
        self.push(Op::ScalarMul(a, c), value)
    }

    pub fn relu(&self, a: ValueId) -> ValueId {
        let value = self.nodes.borrow()[a.0].value.map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(a), value)
    }

    pub fn sigmoid(&self, a: ValueId) -> ValueId {
        let value = self.nodes.borrow()[a.0].value.map(stable_sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    /// Row-wise softmax with the usual max-subtraction for stability.
    pub fn softmax_rows(&self, a: ValueId) -> ValueId {
        let value = {
            let va = &self.nodes.borrow()[a.0].value;
            let mut out = va.clone();
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            out
        };
        self.push(Op::SoftmaxRows(a), value)
    }

    /// Natural log of `max(x, 1e-12)`.
    pub fn log(&self, a: ValueId) -> ValueId {
        let value = self.nodes.borrow()[a.0].value.map(|v| v.max(LOG_CLAMP).ln());
        self.push(Op::Log(a), value)
    }

    pub fn exp(&self, a: ValueId) -> ValueId {
        let value = self.nodes.borrow()[a.0].value.map(f64::exp);
        self.push(Op::Exp(a), value)
    }

    /// Sum of all entries, as a `1x1` matrix.
    pub fn sum(&self, a: ValueId) -> ValueId {
        let value = Matrix::scalar(self.nodes.borrow()[a.0].value.sum());
        self.push(Op::Sum(a), value)
    }

    /// Mean of all entries, as a `1x1` matrix.
    pub fn mean(&self, a: ValueId) -> ValueId {
        let value = {
            let va = &self.nodes.borrow()[a.0].value;
            assert!(!va.is_empty(), "mean of an empty matrix");
            Matrix::scalar(va.sum() / va.len() as f64)
        };
        self.push(Op::Mean(a), value)
    }

    /// Horizontal concatenation `[a | b]`.
    pub fn concat_cols(&self, a: ValueId, b: ValueId) -> ValueId {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.rows(), vb.rows(), "concat_cols: row count mismatch");
            let mut out = Matrix::zeros(va.rows(), va.cols() + vb.cols());
            for i in 0..va.rows() {
                let dst = out.row_mut(i);
                dst[..va.cols()].copy_from_slice(va.row(i));
                dst[va.cols()..].copy_from_slice(vb.row(i));
            }
            out
        };
        self.push(Op::ConcatCols(a, b), value)
    }

    /// Gathers the given rows; repeated indices are allowed and their
    /// gradients accumulate.
    pub fn slice_rows(&self, a: ValueId, indices: &[usize]) -> ValueId {
        let value = self.nodes.borrow()[a.0].value.gather_rows(indices);
        self.push(Op::SliceRows(a, indices.to_vec()), value)
    }

    /// Column-wise max over rows, producing a `1 x cols` row.
    pub fn max_pool_rows(&self, a: ValueId) -> ValueId {
        let value = {
            let va = &self.nodes.borrow()[a.0].value;
            assert!(va.rows() > 0, "max_pool_rows of an empty matrix");
            let mut out = Matrix::from_vec(1, va.cols(), va.row(0).to_vec()).expect("finite");
            for i in 1..va.rows() {
                for (o, &v) in out.data_mut().iter_mut().zip(va.row(i)) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
            out
        };
        self.push(Op::MaxPoolRows(a), value)
    }

    /// Column-wise mean over rows, producing a `1 x cols` row.
    pub fn mean_pool_rows(&self, a: ValueId) -> ValueId {
        let value = {
            let va = &self.nodes.borrow()[a.0].value;
            assert!(va.rows() > 0, "mean_pool_rows of an empty matrix");
            va.col_sums().scale(1.0 / va.rows() as f64)
        };
        self.push(Op::MeanPoolRows(a), value)
    }

    pub fn square(&self, a: ValueId) -> ValueId {
        let value = self.nodes.borrow()[a.0].value.map(|v| v * v);
        self.push(Op::Square(a), value)
    }

    pub fn neg(&self, a: ValueId) -> ValueId {
        let value = self.nodes.borrow()[a.0].value.scale(-1.0);
        self.push(Op::Neg(a), value)
    }

    /// Reverse pass from a scalar root. Returns gradients for every node
    /// that influences the root; untouched nodes report `None`.
    pub fn backward(&self, root: ValueId) -> GradStore {
        let nodes = self.nodes.borrow();
        assert!(root.0 < nodes.len(), "backward: unknown root");
        assert_eq!(
            nodes[root.0].value.shape(),
            (1, 1),
            "backward: root must be a scalar"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[root.0] = Some(Matrix::scalar(1.0));

        for i in (0..=root.0).rev() {
            // Parents always precede children on the tape, so splitting at i
            // gives mutable access to all parent slots while g stays shared.
            let (parents, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_ref() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Add(a, b) => {
                    accum(&mut parents[a.0], g.clone());
                    let vb_shape = nodes[b.0].value.shape();
                    if vb_shape == g.shape() {
                        accum(&mut parents[b.0], g.clone());
                    } else {
                        accum(&mut parents[b.0], g.col_sums());
                    }
                }
                Op::Sub(a, b) => {
                    accum(&mut parents[a.0], g.clone());
                    accum(&mut parents[b.0], g.scale(-1.0));
                }
                Op::MulElem(a, b) => {
                    accum(&mut parents[a.0], g.mul_elem(&nodes[b.0].value));
                    accum(&mut parents[b.0], g.mul_elem(&nodes[a.0].value));
                }
                Op::MatMul(a, b) => {
                    accum(&mut parents[a.0], g.matmul(&nodes[b.0].value.transpose()));
                    accum(&mut parents[b.0], nodes[a.0].value.transpose().matmul(g));
                }
                Op::Transpose(a) => {
                    accum(&mut parents[a.0], g.transpose());
                }
                Op::ScalarMul(a, c) => {
                    accum(&mut parents[a.0], g.scale(*c));
                }
                Op::Relu(a) => {
                    let mask = nodes[a.0].value.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accum(&mut parents[a.0], g.mul_elem(&mask));
                }
                Op::Sigmoid(a) => {
                    let deriv = node.value.map(|y| y * (1.0 - y));
                    accum(&mut parents[a.0], g.mul_elem(&deriv));
                }
                Op::SoftmaxRows(a) => {
                    // Per row: dL/dx_j = y_j * (g_j - sum_k g_k y_k).
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (o, (&yv, &gv)) in
                            da.row_mut(r).iter_mut().zip(yr.iter().zip(gr))
                        {
                            *o = yv * (gv - dot);
                        }
                    }
                    accum(&mut parents[a.0], da);
                }
                Op::Log(a) => {
                    let deriv = nodes[a.0]
                        .value
                        .map(|v| if v > LOG_CLAMP { 1.0 / v } else { 0.0 });
                    accum(&mut parents[a.0], g.mul_elem(&deriv));
                }
                Op::Exp(a) => {
                    accum(&mut parents[a.0], g.mul_elem(&node.value));
                }
                Op::Sum(a) => {
                    let shape = nodes[a.0].value.shape();
                    accum(&mut parents[a.0], Matrix::ones(shape.0, shape.1).scale(g.item()));
                }
                Op::Mean(a) => {
                    let va = &nodes[a.0].value;
                    let c = g.item() / va.len() as f64;
                    accum(&mut parents[a.0], Matrix::ones(va.rows(), va.cols()).scale(c));
                }
                Op::ConcatCols(a, b) => {
                    let ca = nodes[a.0].value.cols();
                    let cb = nodes[b.0].value.cols();
                    let mut ga = Matrix::zeros(g.rows(), ca);
                    let mut gb = Matrix::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        let src = g.row(r);
                        ga.row_mut(r).copy_from_slice(&src[..ca]);
                        gb.row_mut(r).copy_from_slice(&src[ca..]);
                    }
                    accum(&mut parents[a.0], ga);
                    accum(&mut parents[b.0], gb);
                }
                Op::SliceRows(a, indices) => {
                    let va_shape = nodes[a.0].value.shape();
                    let mut da = Matrix::zeros(va_shape.0, va_shape.1);
                    for (r, &src) in indices.iter().enumerate() {
                        for (o, &v) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accum(&mut parents[a.0], da);
                }
                Op::MaxPoolRows(a) => {
                    // Gradient flows to the first row attaining the maximum.
                    let va = &nodes[a.0].value;
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    for j in 0..va.cols() {
                        let mut best_i = 0;
                        let mut best_v = va.get(0, j);
                        for i in 1..va.rows() {
                            let v = va.get(i, j);
                            if v > best_v {
                                best_v = v;
                                best_i = i;
                            }
                        }
                        da.set(best_i, j, g.get(0, j));
                    }
                    accum(&mut parents[a.0], da);
                }
                Op::MeanPoolRows(a) => {
                    let va = &nodes[a.0].value;
                    let inv = 1.0 / va.rows() as f64;
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    for i in 0..va.rows() {
                        for (o, &v) in da.row_mut(i).iter_mut().zip(g.row(0)) {
                            *o = v * inv;
                        }
                    }
                    accum(&mut parents[a.0], da);
                }
                Op::Square(a) => {
                    let deriv = nodes[a.0].value.scale(2.0);
                    accum(&mut parents[a.0], g.mul_elem(&deriv));
                }
                Op::Neg(a) => {
                    accum(&mut parents[a.0], g.scale(-1.0));
                }
            }
        }
        GradStore { grads }
    }
}

fn accum(slot: &mut Option<Matrix>, delta: Matrix) {
    match slot {
        Some(g) => g.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

#[inline]
fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct GradStore {
    grads: Vec<Option<Matrix>>,
}

impl GradStore {
    /// Gradient of the root with respect to `id`, if `id` influenced it.
    pub fn grad(&self, id: ValueId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of the root with respect to `id`, densified to zeros when
    /// `id` did not influence the root.
    pub fn grad_or_zeros(&self, tape: &Tape, id: ValueId) -> Matrix {
        match self.grad(id) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.shape(id);
                Matrix::zeros(r, c)
            }
        }
    }
}

/// Numerically stable softplus `ln(1 + e^x)` built from tape primitives:
/// `softplus(x) = relu(x) + ln(1 + e^{-|x|})`, so the exponent never
/// overflows and the log argument stays in `(1, 2]`.
pub fn softplus(tape: &Tape, x: ValueId) -> ValueId {
    let pos = tape.relu(x);
    let negpart = tape.relu(tape.neg(x));
    let abs = tape.add(pos, negpart);
    let decay = tape.exp(tape.neg(abs));
    let (r, c) = tape.shape(x);
    let one = tape.constant(Matrix::ones(r, c));
    let log1p = tape.log(tape.add(one, decay));
    tape.add(pos, log1p)
}

/// Central-difference gradient of a scalar-valued function of one matrix.
/// Used throughout the test suite as an oracle for the tape adjoints.
pub fn finite_diff_grad(f: &mut dyn FnMut(&Matrix) -> f64, x: &Matrix, eps: f64) -> Matrix {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[idx] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[idx] = orig;
        grad.data_mut()[idx] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Largest absolute difference between two gradients, relative to the
/// oracle's scale (with a floor so zero gradients compare absolutely).
pub fn max_rel_err(got: &Matrix, oracle: &Matrix) -> f64 {
    assert_eq!(got.shape(), oracle.shape(), "gradient shape mismatch");
    let scale = oracle.max_abs().max(1.0);
    let mut worst = 0.0f64;
    for (a, b) in got.data().iter().zip(oracle.data()) {
        worst = worst.max((a - b).abs());
    }
    worst / scale
}
