//! Reverse-mode differentiation over matrix-valued primitives.
//!
//! A [`Tape`] is an append-only list of nodes. Every operation pushes one node
//! holding its forward value, so node order is a topological order and the
//! backward pass is a single reverse sweep.

use std::collections::HashMap;

use super::matrix::{gemm, Matrix};
use crate::error::{dim_err, Result};

/// Lower and upper clamp applied to log standard deviations before
/// exponentiation.
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 5.0;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    TileRows(Var, usize),
    Reshape(Var),
    Transpose(Var),
    LogSumExpRows(Var),
    LogSoftmaxRows(Var),
    SubColBroadcast(Var, Var),
    MulColBroadcast(Var, Var),
    GaussianSample { mean: Var, log_std: Var, eps: Matrix },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

/// Adjoints produced by [`Tape::backward`]. Only leaf adjoints (constants and
/// parameters) are retained; interior adjoints are consumed by the sweep.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.adjoints[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.adjoints[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Leaf for a trainable parameter identified by `key`. Registering the
    /// same key twice on one tape returns the existing node.
    pub fn param(&mut self, key: usize, value: &Matrix) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(Op::Leaf, value.clone());
        self.params.insert(key, v);
        v
    }

    pub fn param_var(&self, key: usize) -> Option<Var> {
        self.params.get(&key).copied()
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, ctx: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err(ctx, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `a + 1ᵀ·bias` with `bias` a single row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if self.shape(bias) != (1, cols) {
            return Err(dim_err(
                "add_bias",
                format!("(1, {cols})"),
                format!("{:?}", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..rows {
            for (o, bj) in out.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(&b) {
                *o += bj;
            }
        }
        Ok(self.push(Op::AddBias(a, bias), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| k * x);
        self.push(Op::Scale(a, k), out)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(Op::AddScalar(a), out)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Log(a), out)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), out)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), out)
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Matrix::filled(1, 1, s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums: n×c → n×1.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let out = Matrix::from_fn(m.rows(), 1, |i, _| m.row(i).iter().sum());
        self.push(Op::SumRows(a), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let cols = self.shape(a).1;
        if start > end || end > cols {
            return Err(dim_err("slice_cols", format!("range within 0..{cols}"), format!("{start}..{end}")));
        }
        let out = self.value(a).slice_cols(start, end);
        Ok(self.push(Op::SliceCols(a, start), out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::hstack(&mats)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    /// Stacks `k` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let m = self.value(a);
        let parts: Vec<&Matrix> = std::iter::repeat_n(m, k).collect();
        let out = if k == 0 {
            Matrix::zeros(0, m.cols())
        } else {
            Matrix::vstack(&parts)?
        };
        Ok(self.push(Op::TileRows(a, k), out))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).reshape(rows, cols)?;
        Ok(self.push(Op::Reshape(a), out))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out)
    }

    /// Row-wise log-sum-exp: n×c → n×1.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let out = Matrix::from_fn(m.rows(), 1, |i, _| logsumexp(m.row(i)));
        self.push(Op::LogSumExpRows(a), out)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let cols = m.cols();
        let mut out = m.clone();
        for i in 0..m.rows() {
            let l = logsumexp(m.row(i));
            for o in &mut out.data_mut()[i * cols..(i + 1) * cols] {
                *o -= l;
            }
        }
        self.push(Op::LogSoftmaxRows(a), out)
    }

    /// `a[i, j] - b[i, 0]`.
    pub fn sub_col_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, _) = self.shape(a);
        if self.shape(b) != (rows, 1) {
            return Err(dim_err("sub_col_broadcast", format!("({rows}, 1)"), format!("{:?}", self.shape(b))));
        }
        let bv = self.value(b).data().to_vec();
        let out = Matrix::from_fn(rows, self.shape(a).1, |i, j| self.value(a).get(i, j) - bv[i]);
        Ok(self.push(Op::SubColBroadcast(a, b), out))
    }

    /// `a[i, j] * b[i, 0]`.
    pub fn mul_col_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, _) = self.shape(a);
        if self.shape(b) != (rows, 1) {
            return Err(dim_err("mul_col_broadcast", format!("({rows}, 1)"), format!("{:?}", self.shape(b))));
        }
        let bv = self.value(b).data().to_vec();
        let out = Matrix::from_fn(rows, self.shape(a).1, |i, j| self.value(a).get(i, j) * bv[i]);
        Ok(self.push(Op::MulColBroadcast(a, b), out))
    }

    /// Reparameterized draw `mean + exp(clamp(log_std)) ⊙ eps`. The noise is
    /// recorded on the node; gradients flow to `mean` and `log_std` only.
    pub fn gaussian_sample(&mut self, mean: Var, log_std: Var, eps: Matrix) -> Result<Var> {
        self.same_shape(mean, log_std, "gaussian_sample")?;
        if eps.shape() != self.shape(mean) {
            return Err(dim_err("gaussian_sample noise", format!("{:?}", self.shape(mean)), format!("{:?}", eps.shape())));
        }
        let mu = self.value(mean);
        let ls = self.value(log_std);
        let out = Matrix::from_fn(mu.rows(), mu.cols(), |i, j| {
            mu.get(i, j) + ls.get(i, j).clamp(LOG_STD_MIN, LOG_STD_MAX).exp() * eps.get(i, j)
        });
        Ok(self.push(Op::GaussianSample { mean, log_std, eps }, out))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(dim_err("backward", "scalar loss (1, 1)", format!("{:?}", self.shape(loss))));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    accumulate(&mut adj, *a, gemm(&g, false, vb, true));
                    accumulate(&mut adj, *b, gemm(va, true, &g, false));
                }
                Op::AddBias(a, b) => {
                    let cols = g.cols();
                    let mut db = Matrix::zeros(1, cols);
                    for i in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut adj, *b, db);
                    accumulate(&mut adj, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.map(|v| -v));
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |u, v| u * v);
                    let gb = g.zip_map(self.value(*a), |u, v| u * v);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(a, k) => accumulate(&mut adj, *a, g.map(|v| k * v)),
                Op::AddScalar(a) => accumulate(&mut adj, *a, g),
                Op::LeakyRelu(a, slope) => {
                    let d = g.zip_map(self.value(*a), |u, x| if x >= 0.0 { u } else { slope * u });
                    accumulate(&mut adj, *a, d);
                }
                Op::Exp(a) => accumulate(&mut adj, *a, g.zip_map(&node.value, |u, y| u * y)),
                Op::Log(a) => accumulate(&mut adj, *a, g.zip_map(self.value(*a), |u, x| u / x)),
                Op::Square(a) => accumulate(&mut adj, *a, g.zip_map(self.value(*a), |u, x| 2.0 * x * u)),
                Op::Clamp(a, lo, hi) => {
                    let d = g.zip_map(self.value(*a), |u, x| if x >= *lo && x <= *hi { u } else { 0.0 });
                    accumulate(&mut adj, *a, d);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut adj, *a, Matrix::filled(r, c, g.data()[0]));
                }
                Op::SumRows(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut adj, *a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)));
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let w = g.cols();
                    let d = Matrix::from_fn(r, c, |i, j| {
                        if j >= *start && j < start + w {
                            g.get(i, j - start)
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adj, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        accumulate(&mut adj, *p, g.slice_cols(off, off + w));
                        off += w;
                    }
                }
                Op::TileRows(a, k) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Matrix::zeros(r, c);
                    for t in 0..*k {
                        let block = &g.data()[t * r * c..(t + 1) * r * c];
                        for (x, y) in d.data_mut().iter_mut().zip(block) {
                            *x += y;
                        }
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut adj, *a, g.reshape(r, c)?);
                }
                Op::Transpose(a) => accumulate(&mut adj, *a, g.transpose()),
                Op::LogSumExpRows(a) => {
                    let x = self.value(*a);
                    let d = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                        g.get(i, 0) * (x.get(i, j) - node.value.get(i, 0)).exp()
                    });
                    accumulate(&mut adj, *a, d);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let row_sums: Vec<f64> = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
                    let d = Matrix::from_fn(y.rows(), y.cols(), |i, j| {
                        g.get(i, j) - y.get(i, j).exp() * row_sums[i]
                    });
                    accumulate(&mut adj, *a, d);
                }
                Op::SubColBroadcast(a, b) => {
                    let db = Matrix::from_fn(g.rows(), 1, |i, _| -g.row(i).iter().sum::<f64>());
                    accumulate(&mut adj, *b, db);
                    accumulate(&mut adj, *a, g);
                }
                Op::MulColBroadcast(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let db = Matrix::from_fn(g.rows(), 1, |i, _| {
                        g.row(i).iter().zip(va.row(i)).map(|(u, x)| u * x).sum()
                    });
                    let da = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * vb.get(i, 0));
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::GaussianSample { mean, log_std, eps } => {
                    let ls = self.value(*log_std);
                    let dls = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        let l = ls.get(i, j);
                        if (LOG_STD_MIN..=LOG_STD_MAX).contains(&l) {
                            g.get(i, j) * l.exp() * eps.get(i, j)
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adj, *log_std, dls);
                    accumulate(&mut adj, *mean, g);
                }
            }
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable log-sum-exp of a slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
