//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Leaves are registered either as
//! constants or as parameters; every operation appends a node whose inputs
//! already live on the tape, so the node order is a topological order and
//! [`Tape::backward`] is a single reverse sweep.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor with an optional accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(AutodiffError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    /// Builds a `rows × cols` matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 {
            return Err(AutodiffError::Contract("empty matrix".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(AutodiffError::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the stored gradient, creating it if absent.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(AutodiffError::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Parameter,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log { input: Var, floor: f64 },
    LogSoftmax(Var),
    Reduce {
        input: Var,
        axis: Option<usize>,
        kind: Reduction,
    },
    // Mask entries are 0 or 1/(1 - rate).
    Dropout { input: Var, mask: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite { op })
    }
}

/// Splits a shape around `axis` into (outer, extent, inner) strides.
fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { shape, values, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.values.clone(), Op::Constant)
    }

    /// Registers a leaf whose gradient is reported by [`Tape::backward`].
    pub fn parameter(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.values.clone(), Op::Parameter)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].values[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.values.clone(),
            grad: None,
        }
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(AutodiffError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(AutodiffError::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        check_finite("matmul", &out)?;
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        check_finite("add", &out)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        check_finite("mul", &out)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("add_row", a)?;
        let bn: usize = self.shape(bias).iter().product();
        if bn != n {
            return Err(AutodiffError::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bv = self.value(bias);
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *o += b;
            }
        }
        check_finite("add_row", &out)?;
        Ok(self.push(vec![m, n], out, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        check_finite("scale", &out)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Scale(a, c)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        check_finite("relu", &out)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Relu(a)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x.exp()).collect();
        check_finite("exp", &out)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Exp(a)))
    }

    /// Natural logarithm with no clamping; non-positive inputs are a numeric error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.log_clamped(a, 0.0)
    }

    /// `ln(max(x, floor))`. The adjoint is zero wherever the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| x.max(floor).ln()).collect();
        check_finite("log", &out)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Log { input: a, floor }))
    }

    /// Row-wise `z - max(z) - ln Σ exp(z - max(z))` over a `B × K` matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (b, k) = self.matrix_dims("log_softmax", a)?;
        if k < 2 {
            return Err(AutodiffError::Contract(format!(
                "log_softmax needs at least two classes, got {k}"
            )));
        }
        let z = self.value(a);
        check_finite("log_softmax", z)?;
        let mut out = vec![0.0; b * k];
        for r in 0..b {
            let row = &z[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (o, x) in out[r * k..(r + 1) * k].iter_mut().zip(row) {
                *o = x - max - lse;
            }
        }
        check_finite("log_softmax", &out)?;
        Ok(self.push(vec![b, k], out, Op::LogSoftmax(a)))
    }

    /// Sum or mean, either over everything (result shape `[1]`) or along one axis.
    pub fn reduce(&mut self, kind: Reduction, a: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let values = self.value(a);
        let (out_shape, out) = match axis {
            None => {
                let s: f64 = values.iter().sum();
                let v = match kind {
                    Reduction::Sum => s,
                    Reduction::Mean => s / values.len() as f64,
                };
                (vec![1], vec![v])
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(AutodiffError::Axis {
                        axis: ax,
                        rank: shape.len(),
                    });
                }
                let (outer, extent, inner) = axis_strides(&shape, ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        let base = (o * extent + e) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += values[base + i];
                        }
                    }
                }
                if kind == Reduction::Mean {
                    out.iter_mut().for_each(|x| *x /= extent as f64);
                }
                let mut s = shape.clone();
                s.remove(ax);
                if s.is_empty() {
                    s.push(1);
                }
                (s, out)
            }
        };
        check_finite("reduce", &out)?;
        Ok(self.push(out_shape, out, Op::Reduce { input: a, axis, kind }))
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduction::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduction::Mean, a, axis)
    }

    /// Inverted dropout. Eval mode and `rate == 0` return `a` itself and draw nothing.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::Contract(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Dropout { input: a, mask }))
    }

    /// Reverse sweep from a scalar loss. Returns the adjoint of every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
            match &mut adj[v.0] {
                Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
                slot @ None => *slot = Some(delta),
            }
        }

        let mut params = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Parameter => {
                    params.push((Var(idx), g));
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    // dA = dOut · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = g[i * n..(i + 1) * n]
                                .iter()
                                .zip(brow)
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    // dB = Aᵀ · dOut
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            for (d, y) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * y;
                            }
                        }
                    }
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    let db = g.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::AddRow(a, bias) => {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                    acc(&mut adj, *a, g);
                    acc(&mut adj, *bias, db);
                }
                Op::Scale(a, c) => {
                    acc(&mut adj, *a, g.iter().map(|x| x * c).collect());
                }
                Op::Relu(a) => {
                    let d = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    acc(&mut adj, *a, d);
                }
                Op::Exp(a) => {
                    let d = g.iter().zip(&node.values).map(|(g, y)| g * y).collect();
                    acc(&mut adj, *a, d);
                }
                Op::Log { input, floor } => {
                    let d = g
                        .iter()
                        .zip(self.value(*input))
                        .map(|(g, &x)| if x > *floor { g / x } else { 0.0 })
                        .collect();
                    acc(&mut adj, *input, d);
                }
                Op::LogSoftmax(a) => {
                    let k = node.shape[1];
                    let mut d = vec![0.0; g.len()];
                    for ((drow, grow), yrow) in d
                        .chunks_mut(k)
                        .zip(g.chunks(k))
                        .zip(node.values.chunks(k))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv = gv - yv.exp() * gsum;
                        }
                    }
                    acc(&mut adj, *a, d);
                }
                Op::Reduce { input, axis, kind } => {
                    let in_shape = self.shape(*input);
                    let total: usize = in_shape.iter().product();
                    let d = match axis {
                        None => {
                            let s = match kind {
                                Reduction::Sum => g[0],
                                Reduction::Mean => g[0] / total as f64,
                            };
                            vec![s; total]
                        }
                        Some(ax) => {
                            let (outer, extent, inner) = axis_strides(in_shape, *ax);
                            let div = match kind {
                                Reduction::Sum => 1.0,
                                Reduction::Mean => extent as f64,
                            };
                            let mut d = vec![0.0; total];
                            for o in 0..outer {
                                for e in 0..extent {
                                    let base = (o * extent + e) * inner;
                                    for i in 0..inner {
                                        d[base + i] = g[o * inner + i] / div;
                                    }
                                }
                            }
                            d
                        }
                    };
                    acc(&mut adj, *input, d);
                }
                Op::Dropout { input, mask } => {
                    let d = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                    acc(&mut adj, *input, d);
                }
            }
        }
        params.reverse();
        Ok(Gradients { params })
    }
}

/// Parameter adjoints produced by one backward sweep, in tape order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    params: Vec<(Var, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.params
            .binary_search_by_key(&v, |(p, _)| *p)
            .ok()
            .map(|i| self.params[i].1.as_slice())
    }

    /// Gradient of `v` with zeros for parameters the loss never reached.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }

    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.len()]),
        }
    }
}
