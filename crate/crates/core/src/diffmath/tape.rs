use std::fmt;

use thiserror::Error;

/// Row-major 2-D shape. Scalars are `1 x 1`, vectors are `1 x n` or `n x 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}x{}]", self.rows, self.cols)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: input {value} at index {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("non-finite value {value} in {what}")]
    NonFinite { what: String, value: f64 },
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Powf(Var, f64),
    Abs(Var),
    Relu(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanRows(Var),
    Cumsum(Var),
    Softplus(Var),
    Sigmoid(Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Var, Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    shape: Shape,
    op: Op,
    tracked: bool,
}

/// Append-only record of array operations.
///
/// Leaves created with [`Tape::var`] are tracked; leaves created with
/// [`Tape::constant`] are not, and neither is any node whose inputs are all
/// untracked. [`Tape::backward`] returns a fresh gradient buffer on every
/// call, so replaying is deterministic and never sees stale state.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient buffers produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`. `None` for constants and
    /// for nodes the output does not depend on.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but materializes absent gradients as zeros.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

#[inline]
fn bval(x: &[f64], i: usize) -> f64 {
    if x.len() == 1 {
        x[0]
    } else {
        x[i]
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

/// `c (m x n) += a (m x k) * b (k x n)` with arbitrary strides on a and b.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: every caller passes buffers of exactly m*k, k*n and m*n
    // elements together with strides that stay inside them.
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

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Shape, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(value.len(), shape.len());
        self.nodes.push(Node {
            value,
            shape,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, values: Vec<f64>, rows: usize, cols: usize, tracked: bool) -> Result<Var> {
        let shape = Shape::new(rows, cols);
        if values.len() != shape.len() {
            return Err(DiffError::Invalid {
                op: "leaf",
                msg: format!("{} values do not fill shape {}", values.len(), shape),
            });
        }
        Ok(self.push(values, shape, Op::Leaf, tracked))
    }

    /// Differentiable input.
    pub fn var(&mut self, values: Vec<f64>, rows: usize, cols: usize) -> Result<Var> {
        self.leaf(values, rows, cols, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, values: Vec<f64>, rows: usize, cols: usize) -> Result<Var> {
        self.leaf(values, rows, cols, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(vec![x], Shape::SCALAR, Op::Leaf, false)
    }

    pub fn var_scalar(&mut self, x: f64) -> Var {
        self.push(vec![x], Shape::SCALAR, Op::Leaf, true)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(vec![0.0; rows * cols], Shape::new(rows, cols), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    /// Value of a `1 x 1` node (first element otherwise).
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || sb.is_scalar() {
            Ok(sa)
        } else if sa.is_scalar() {
            Ok(sb)
        } else {
            Err(DiffError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.broadcast_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = (0..shape.len())
            .map(|i| f(bval(va, i), bval(vb, i)))
            .collect();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, shape, op, tracked))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a);
        let tracked = self.tracked(&[a]);
        self.push(value, shape, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    fn check_domain(&self, op: &'static str, a: Var) -> Result<()> {
        match self.value(a).iter().position(|&x| x < 0.0) {
            Some(index) => Err(DiffError::Domain {
                op,
                index,
                value: self.value(a)[index],
            }),
            None => Ok(()),
        }
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check_domain("log", a)?;
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.check_domain("sqrt", a)?;
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Powf(a, 2.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "maximum",
            a,
            b,
            |x, y| if x >= y { x } else { y },
            Op::Maximum(a, b),
        )
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "minimum",
            a,
            b,
            |x, y| if x <= y { x } else { y },
            Op::Minimum(a, b),
        )
    }

    /// Clamp into `[lo, hi]`. The adjoint is 1 inside the closed interval
    /// (boundaries included) and 0 strictly outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(DiffError::Invalid {
                op: "clamp",
                msg: format!("empty interval [{lo}, {hi}]"),
            });
        }
        Ok(self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi)))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `(n x k) * (k x m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let shape = Shape::new(sa.rows, sb.cols);
        let mut out = vec![0.0; shape.len()];
        gemm(
            sa.rows,
            sa.cols,
            sb.cols,
            self.value(a),
            sa.cols as isize,
            1,
            self.value(b),
            sb.cols as isize,
            1,
            &mut out,
            0.0,
        );
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, shape, Op::MatMul(a, b), tracked))
    }

    /// Adds the `1 x k` row `b` to every row of the `n x k` matrix `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.rows != 1 || sb.cols != sa.cols {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                left: sa,
                right: sb,
            });
        }
        let vb = self.value(b);
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb[i % sa.cols])
            .collect();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, sa, Op::AddRow(a, b), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let tracked = self.tracked(&[a]);
        self.push(vec![s], Shape::SCALAR, Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let tracked = self.tracked(&[a]);
        self.push(vec![s], Shape::SCALAR, Op::Mean(a), tracked)
    }

    /// Per-row sum: `n x k -> n x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let sa = self.shape(a);
        let value = self
            .value(a)
            .chunks(sa.cols.max(1))
            .map(|row| row.iter().sum())
            .collect();
        let tracked = self.tracked(&[a]);
        self.push(value, Shape::new(sa.rows, 1), Op::SumRows(a), tracked)
    }

    /// Per-row mean: `n x k -> n x 1`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let sa = self.shape(a);
        let k = sa.cols as f64;
        let value = self
            .value(a)
            .chunks(sa.cols.max(1))
            .map(|row| row.iter().sum::<f64>() / k)
            .collect();
        let tracked = self.tracked(&[a]);
        self.push(value, Shape::new(sa.rows, 1), Op::MeanRows(a), tracked)
    }

    /// Inclusive cumulative sum along the last axis.
    pub fn cumsum(&mut self, a: Var) -> Var {
        let sa = self.shape(a);
        let mut value = self.value(a).to_vec();
        for row in value.chunks_mut(sa.cols.max(1)) {
            let mut acc = 0.0;
            for x in row.iter_mut() {
                acc += *x;
                *x = acc;
            }
        }
        let tracked = self.tracked(&[a]);
        self.push(value, sa, Op::Cumsum(a), tracked)
    }

    /// `out[k] = a[indices[k]]` over row-major storage, reshaped to
    /// `rows x cols`. The adjoint scatter-adds back through the indices.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, rows: usize, cols: usize) -> Result<Var> {
        let n = self.shape(a).len();
        if indices.len() != rows * cols {
            return Err(DiffError::Invalid {
                op: "gather",
                msg: format!("{} indices do not fill shape [{rows}x{cols}]", indices.len()),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(DiffError::Invalid {
                op: "gather",
                msg: format!("index {bad} out of range for {}", self.shape(a)),
            });
        }
        let va = self.value(a);
        let value = indices.iter().map(|&i| va[i]).collect();
        let tracked = self.tracked(&[a]);
        Ok(self.push(value, Shape::new(rows, cols), Op::Gather(a, indices), tracked))
    }

    /// Selects whole rows of `a` in the given order.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let cols = self.shape(a).cols;
        let indices = rows
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| r * cols + c))
            .collect();
        self.gather(a, indices, rows.len(), cols)
    }

    /// Selects one column as an `n x 1` array.
    pub fn column(&mut self, a: Var, col: usize) -> Result<Var> {
        let s = self.shape(a);
        if col >= s.cols {
            return Err(DiffError::Invalid {
                op: "column",
                msg: format!("column {col} out of range for {s}"),
            });
        }
        let indices = (0..s.rows).map(|r| r * s.cols + col).collect();
        self.gather(a, indices, s.rows, 1)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rows != sb.rows {
            return Err(DiffError::ShapeMismatch {
                op: "concat_cols",
                left: sa,
                right: sb,
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut value = Vec::with_capacity(sa.len() + sb.len());
        for r in 0..sa.rows {
            value.extend_from_slice(&va[r * sa.cols..(r + 1) * sa.cols]);
            value.extend_from_slice(&vb[r * sb.cols..(r + 1) * sb.cols]);
        }
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(
            value,
            Shape::new(sa.rows, sa.cols + sb.cols),
            Op::ConcatCols(a, b),
            tracked,
        ))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != rows * cols {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                left: sa,
                right: Shape::new(rows, cols),
            });
        }
        let value = self.value(a).to_vec();
        let tracked = self.tracked(&[a]);
        Ok(self.push(value, Shape::new(rows, cols), Op::Reshape(a), tracked))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.shape(output);
        if !out_shape.is_scalar() {
            return Err(DiffError::ShapeMismatch {
                op: "backward",
                left: out_shape,
                right: Shape::SCALAR,
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        if self.nodes[output.0].tracked {
            grads[output.0] = Some(vec![1.0]);
        }
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let nodes = &self.nodes;

        // Accumulates `f(i)` into the gradient of `v`. With `per_out` the
        // index runs over the output and a 1x1 input sums every contribution;
        // otherwise it runs over the input's own elements.
        let n_out = out.len();
        let mut accumulate = |v: Var, per_out: bool, f: &dyn Fn(usize) -> f64| {
            if !nodes[v.0].tracked {
                return;
            }
            let n = nodes[v.0].shape.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            if per_out && n == 1 && n_out != 1 {
                buf[0] += (0..n_out).map(f).sum::<f64>();
            } else {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b += f(i);
                }
            }
        };
        let val = |v: Var| nodes[v.0].value.as_slice();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(*a, true, &|i| g[i]);
                accumulate(*b, true, &|i| g[i]);
            }
            Op::Sub(a, b) => {
                accumulate(*a, true, &|i| g[i]);
                accumulate(*b, true, &|i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(*a, true, &|i| g[i] * bval(vb, i));
                accumulate(*b, true, &|i| g[i] * bval(va, i));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(*a, true, &|i| g[i] / bval(vb, i));
                accumulate(*b, true, &|i| {
                    let d = bval(vb, i);
                    -g[i] * bval(va, i) / (d * d)
                });
            }
            Op::Neg(a) => accumulate(*a, true, &|i| -g[i]),
            Op::AddScalar(a) => accumulate(*a, true, &|i| g[i]),
            Op::MulScalar(a, c) => accumulate(*a, true, &|i| g[i] * c),
            Op::Exp(a) => accumulate(*a, true, &|i| g[i] * out[i]),
            Op::Log(a) => {
                let va = val(*a);
                accumulate(*a, true, &|i| g[i] / va[i]);
            }
            Op::Sin(a) => {
                let va = val(*a);
                accumulate(*a, true, &|i| g[i] * va[i].cos());
            }
            Op::Cos(a) => {
                let va = val(*a);
                accumulate(*a, true, &|i| -g[i] * va[i].sin());
            }
            Op::Sqrt(a) => accumulate(*a, true, &|i| g[i] * 0.5 / out[i]),
            Op::Powf(a, p) => {
                let va = val(*a);
                if *p == 2.0 {
                    accumulate(*a, true, &|i| g[i] * 2.0 * va[i]);
                } else {
                    accumulate(*a, true, &|i| g[i] * p * va[i].powf(p - 1.0));
                }
            }
            Op::Abs(a) => {
                let va = val(*a);
                accumulate(*a, true, &|i| {
                    if va[i] > 0.0 {
                        g[i]
                    } else if va[i] < 0.0 {
                        -g[i]
                    } else {
                        0.0
                    }
                });
            }
            Op::Relu(a) => {
                let va = val(*a);
                accumulate(*a, true, &|i| if va[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Maximum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(*a, true, &|i| if bval(va, i) >= bval(vb, i) { g[i] } else { 0.0 });
                accumulate(*b, true, &|i| if bval(va, i) >= bval(vb, i) { 0.0 } else { g[i] });
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(*a, true, &|i| if bval(va, i) <= bval(vb, i) { g[i] } else { 0.0 });
                accumulate(*b, true, &|i| if bval(va, i) <= bval(vb, i) { 0.0 } else { g[i] });
            }
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                accumulate(*a, true, &|i| {
                    if va[i] >= *lo && va[i] <= *hi {
                        g[i]
                    } else {
                        0.0
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].shape, nodes[b.0].shape);
                let (n, k, m) = (sa.rows, sa.cols, sb.cols);
                if nodes[a.0].tracked {
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; n * k]);
                    // dA = G (n x m) * B^T (m x k)
                    gemm(n, m, k, g, m as isize, 1, val(*b), 1, m as isize, buf, 1.0);
                }
                if nodes[b.0].tracked {
                    let buf = grads[b.0].get_or_insert_with(|| vec![0.0; k * m]);
                    // dB = A^T (k x n) * G (n x m)
                    gemm(k, n, m, val(*a), 1, k as isize, g, m as isize, 1, buf, 1.0);
                }
            }
            Op::AddRow(a, b) => {
                accumulate(*a, true, &|i| g[i]);
                if nodes[b.0].tracked {
                    let k = nodes[b.0].shape.cols;
                    let buf = grads[b.0].get_or_insert_with(|| vec![0.0; k]);
                    for row in g.chunks(k) {
                        for (bj, gj) in buf.iter_mut().zip(row) {
                            *bj += gj;
                        }
                    }
                }
            }
            Op::Sum(a) => accumulate(*a, false, &|_| g[0]),
            Op::Mean(a) => {
                let n = nodes[a.0].shape.len() as f64;
                accumulate(*a, false, &|_| g[0] / n);
            }
            Op::SumRows(a) => {
                let k = nodes[a.0].shape.cols;
                accumulate(*a, false, &|i| g[i / k]);
            }
            Op::MeanRows(a) => {
                let k = nodes[a.0].shape.cols;
                accumulate(*a, false, &|i| g[i / k] / k as f64);
            }
            Op::Cumsum(a) => {
                if nodes[a.0].tracked {
                    let k = nodes[a.0].shape.cols;
                    let n = nodes[a.0].shape.len();
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; n]);
                    for (brow, grow) in buf.chunks_mut(k).zip(g.chunks(k)) {
                        let mut tail = 0.0;
                        for j in (0..k).rev() {
                            tail += grow[j];
                            brow[j] += tail;
                        }
                    }
                }
            }
            Op::Softplus(a) => {
                let va = val(*a);
                accumulate(*a, true, &|i| g[i] * sigmoid(va[i]));
            }
            Op::Sigmoid(a) => accumulate(*a, true, &|i| g[i] * out[i] * (1.0 - out[i])),
            Op::Gather(a, indices) => {
                if nodes[a.0].tracked {
                    let n = nodes[a.0].shape.len();
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; n]);
                    for (k, &src) in indices.iter().enumerate() {
                        buf[src] += g[k];
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (nodes[a.0].shape.cols, nodes[b.0].shape.cols);
                let w = ca + cb;
                accumulate(*a, false, &|i| g[(i / ca) * w + i % ca]);
                accumulate(*b, false, &|i| g[(i / cb) * w + ca + i % cb]);
            }
            Op::Reshape(a) => accumulate(*a, true, &|i| g[i]),
        }
    }
}
