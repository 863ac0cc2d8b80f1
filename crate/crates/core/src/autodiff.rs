//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation in insertion order; because operands
//! must already exist when an op is pushed, insertion order is a topological
//! order and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use catte::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf_row(&[1.0, 2.0, 3.0]);
//! let sq = tape.square(x);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x), &[2.0, 4.0, 6.0]);
//! ```

use thiserror::Error;

use crate::specialmath::{digamma_unchecked, log_gamma_unchecked, trigamma_unchecked};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: {detail}")]
    Structure { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, AdError>;

/// Handle to a node on a [`Tape`]. Cheap to copy; the shape is fixed when the
/// node is created.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    /// x·W + broadcast(b)
    Linear(usize, usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    SumRows(usize),
    Sin(usize),
    Cos(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    LogGamma(usize),
    Digamma(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Broadcast(usize),
    GatherRows(usize, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one dense gradient per tape node that was
/// reached, zeros for everything else.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
    zeros: Vec<f64>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Nodes the loss does not
    /// depend on get a zero gradient.
    pub fn wrt(&self, v: Var) -> &[f64] {
        match &self.grads[v.id] {
            Some(g) => g,
            None => &self.zeros[..self.sizes[v.id]],
        }
    }
}

// C = op(A)·op(B) + beta·C with row-major storage.
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
    // Strides of the logical (m×k) and (k×n) operands.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
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

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let id = self.nodes.len();
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var { id, rows, cols }
    }

    /// A leaf holding `data` in row-major order.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(AdError::Structure {
                op: "leaf",
                detail: format!("{} values for a {rows}x{cols} matrix", data.len()),
            });
        }
        Ok(self.push(rows, cols, data, Op::Leaf))
    }

    pub fn leaf_row(&mut self, data: &[f64]) -> Var {
        self.push(1, data.len(), data.to_vec(), Op::Leaf)
    }

    pub fn leaf_col(&mut self, data: &[f64]) -> Var {
        self.push(data.len(), 1, data.to_vec(), Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(1, 1, vec![x], Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].value
    }

    /// Value of a 1×1 node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.id].value[0]
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(AdError::Shape {
                op,
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = &self.nodes[a.id].value;
        let vb = &self.nodes[b.id].value;
        let out = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        self.push(a.rows, a.cols, out, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.nodes[a.id].value.iter().map(|&x| f(x)).collect();
        self.push(a.rows, a.cols, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a.id, b.id)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a.id, b.id)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a.id, b.id)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(AdError::Shape {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let mut out = vec![0.0; a.rows * b.cols];
        gemm(
            a.rows,
            a.cols,
            b.cols,
            &self.nodes[a.id].value,
            false,
            &self.nodes[b.id].value,
            false,
            &mut out,
            0.0,
        );
        Ok(self.push(a.rows, b.cols, out, Op::MatMul(a.id, b.id)))
    }

    /// Fused affine map `x·W + b` with `b` a 1×n row broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        if x.cols != w.rows || b.rows != 1 || b.cols != w.cols {
            return Err(AdError::Shape {
                op: "linear",
                lhs: x.shape(),
                rhs: w.shape(),
            });
        }
        let n = w.cols;
        let mut out = Vec::with_capacity(x.rows * n);
        let bias = &self.nodes[b.id].value;
        for _ in 0..x.rows {
            out.extend_from_slice(bias);
        }
        gemm(
            x.rows,
            x.cols,
            n,
            &self.nodes[x.id].value,
            false,
            &self.nodes[w.id].value,
            false,
            &mut out,
            1.0,
        );
        Ok(self.push(x.rows, n, out, Op::Linear(x.id, w.id, b.id)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a.id, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a.id))
    }

    /// Sum of all entries, 1×1.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.id].value.iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a.id))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = a.len().max(1) as f64;
        let s: f64 = self.nodes[a.id].value.iter().sum();
        self.push(1, 1, vec![s / n], Op::Mean(a.id))
    }

    /// Row sums: r×c → r×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.id].value;
        let out = if a.cols == 0 {
            vec![0.0; a.rows]
        } else {
            v.chunks(a.cols).map(|row| row.iter().sum()).collect()
        };
        self.push(a.rows, 1, out, Op::SumCols(a.id))
    }

    /// Column sums: r×c → 1×c.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.id].value;
        let mut out = vec![0.0; a.cols];
        for row in v.chunks(a.cols.max(1)) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        self.push(1, a.cols, out, Op::SumRows(a.id))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.map(a, f64::sin, Op::Sin(a.id))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.map(a, f64::cos, Op::Cos(a.id))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a.id))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a.id))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Ln(a.id))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a.id))
    }

    /// Elementwise `ln Γ(x)`; the caller guarantees positive entries.
    pub fn log_gamma(&mut self, a: Var) -> Var {
        self.map(a, log_gamma_unchecked, Op::LogGamma(a.id))
    }

    /// Elementwise ψ(x); the caller guarantees positive entries.
    pub fn digamma(&mut self, a: Var) -> Var {
        self.map(a, digamma_unchecked, Op::Digamma(a.id))
    }

    /// Stacks operands vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| AdError::Structure {
            op: "concat_rows",
            detail: "no operands".into(),
        })?;
        let cols = first.cols;
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(AdError::Shape {
                    op: "concat_rows",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
            rows += p.rows;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(&self.nodes[p.id].value);
        }
        Ok(self.push(
            rows,
            cols,
            out,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// Places operands side by side; all must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| AdError::Structure {
            op: "concat_cols",
            detail: "no operands".into(),
        })?;
        let rows = first.rows;
        let mut cols = 0;
        for p in parts {
            if p.rows != rows {
                return Err(AdError::Shape {
                    op: "concat_cols",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
            cols += p.cols;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let v = &self.nodes[p.id].value;
                out.extend_from_slice(&v[r * p.cols..(r + 1) * p.cols]);
            }
        }
        Ok(self.push(
            rows,
            cols,
            out,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        if start > end || end > a.cols {
            return Err(AdError::Structure {
                op: "slice_cols",
                detail: format!("range {start}..{end} out of {} columns", a.cols),
            });
        }
        let w = end - start;
        let v = &self.nodes[a.id].value;
        let mut out = Vec::with_capacity(a.rows * w);
        for r in 0..a.rows {
            out.extend_from_slice(&v[r * a.cols + start..r * a.cols + end]);
        }
        Ok(self.push(a.rows, w, out, Op::SliceCols(a.id, start)))
    }

    /// Broadcasts a 1×1, 1×c or r×1 operand to `rows`×`cols`.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let ok = (a.rows == 1 || a.rows == rows) && (a.cols == 1 || a.cols == cols);
        if !ok {
            return Err(AdError::Shape {
                op: "broadcast",
                lhs: a.shape(),
                rhs: (rows, cols),
            });
        }
        let v = &self.nodes[a.id].value;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let rr = if a.rows == 1 { 0 } else { r };
            for c in 0..cols {
                let cc = if a.cols == 1 { 0 } else { c };
                out.push(v[rr * a.cols + cc]);
            }
        }
        Ok(self.push(rows, cols, out, Op::Broadcast(a.id)))
    }

    /// Row `i` of the result is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        if let Some(&bad) = index.iter().find(|&&i| i >= a.rows) {
            return Err(AdError::Structure {
                op: "gather_rows",
                detail: format!("row {bad} out of {}", a.rows),
            });
        }
        let v = &self.nodes[a.id].value;
        let mut out = Vec::with_capacity(index.len() * a.cols);
        for &i in index {
            out.extend_from_slice(&v[i * a.cols..(i + 1) * a.cols]);
        }
        Ok(self.push(
            index.len(),
            a.cols,
            out,
            Op::GatherRows(a.id, index.to_vec()),
        ))
    }

    /// Reverse sweep from a 1×1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.shape() != (1, 1) {
            return Err(AdError::Structure {
                op: "backward",
                detail: format!("loss must be 1x1, got {:?}", loss.shape()),
            });
        }
        let n = self.nodes.len();
        let sizes: Vec<usize> = self.nodes.iter().map(|nd| nd.value.len()).collect();
        let max = sizes.iter().copied().max().unwrap_or(0);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            sizes,
            zeros: vec![0.0; max],
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| &self.nodes[i].value;
        let len = |i: usize| self.nodes[i].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[*a], len(*a), |d| add_into(d, g));
                accumulate(&mut grads[*b], len(*b), |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[*a], len(*a), |d| add_into(d, g));
                accumulate(&mut grads[*b], len(*b), |d| {
                    for (d, g) in d.iter_mut().zip(g) {
                        *d -= g;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(&mut grads[*a], len(*a), |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                accumulate(&mut grads[*b], len(*b), |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::MatMul(a, b) | Op::Linear(a, b, _) => {
                let (na, nb) = (&self.nodes[*a], &self.nodes[*b]);
                let (m, k, n) = (na.rows, na.cols, nb.cols);
                // dA = G·Bᵀ, dB = Aᵀ·G
                accumulate(&mut grads[*a], m * k, |d| {
                    gemm(m, n, k, g, false, &nb.value, true, d, 1.0)
                });
                accumulate(&mut grads[*b], k * n, |d| {
                    gemm(k, m, n, &na.value, true, g, false, d, 1.0)
                });
                if let Op::Linear(_, _, bias) = node.op {
                    accumulate(&mut grads[bias], n, |d| {
                        for row in g.chunks(n) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Scale(a, c) => accumulate(&mut grads[*a], len(*a), |d| {
                for (d, g) in d.iter_mut().zip(g) {
                    *d += c * g;
                }
            }),
            Op::AddScalar(a) => accumulate(&mut grads[*a], len(*a), |d| add_into(d, g)),
            Op::Sum(a) => accumulate(&mut grads[*a], len(*a), |d| {
                for d in d.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(a) => {
                let s = g[0] / len(*a).max(1) as f64;
                accumulate(&mut grads[*a], len(*a), |d| {
                    for d in d.iter_mut() {
                        *d += s;
                    }
                })
            }
            Op::SumCols(a) => {
                let cols = self.nodes[*a].cols;
                accumulate(&mut grads[*a], len(*a), |d| {
                    for (row, g) in d.chunks_mut(cols.max(1)).zip(g) {
                        for d in row {
                            *d += g;
                        }
                    }
                })
            }
            Op::SumRows(a) => {
                let cols = self.nodes[*a].cols;
                accumulate(&mut grads[*a], len(*a), |d| {
                    for row in d.chunks_mut(cols.max(1)) {
                        add_into(row, g);
                    }
                })
            }
            Op::Sin(a) => unary(grads, *a, val(*a), g, |x| x.cos()),
            Op::Cos(a) => unary(grads, *a, val(*a), g, |x| -x.sin()),
            Op::Tanh(a) => {
                let out = &node.value;
                accumulate(&mut grads[*a], len(*a), |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                        *d += g * (1.0 - y * y);
                    }
                })
            }
            Op::Exp(a) => {
                let out = &node.value;
                accumulate(&mut grads[*a], len(*a), |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                        *d += g * y;
                    }
                })
            }
            Op::Ln(a) => unary(grads, *a, val(*a), g, |x| 1.0 / x),
            Op::Square(a) => unary(grads, *a, val(*a), g, |x| 2.0 * x),
            Op::LogGamma(a) => unary(grads, *a, val(*a), g, digamma_unchecked),
            Op::Digamma(a) => unary(grads, *a, val(*a), g, trigamma_unchecked),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let l = len(p);
                    accumulate(&mut grads[p], l, |d| add_into(d, &g[off..off + l]));
                    off += l;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.cols;
                let mut off = 0;
                for &p in parts {
                    let pc = self.nodes[p].cols;
                    accumulate(&mut grads[p], len(p), |d| {
                        for r in 0..node.rows {
                            add_into(
                                &mut d[r * pc..(r + 1) * pc],
                                &g[r * total + off..r * total + off + pc],
                            );
                        }
                    });
                    off += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let src_cols = self.nodes[*a].cols;
                let w = node.cols;
                accumulate(&mut grads[*a], len(*a), |d| {
                    for r in 0..node.rows {
                        add_into(
                            &mut d[r * src_cols + start..r * src_cols + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                })
            }
            Op::Broadcast(a) => {
                let src = &self.nodes[*a];
                accumulate(&mut grads[*a], len(*a), |d| {
                    for r in 0..node.rows {
                        let rr = if src.rows == 1 { 0 } else { r };
                        for c in 0..node.cols {
                            let cc = if src.cols == 1 { 0 } else { c };
                            d[rr * src.cols + cc] += g[r * node.cols + c];
                        }
                    }
                })
            }
            Op::GatherRows(a, index) => {
                let cols = node.cols;
                accumulate(&mut grads[*a], len(*a), |d| {
                    for (i, &src) in index.iter().enumerate() {
                        add_into(
                            &mut d[src * cols..(src + 1) * cols],
                            &g[i * cols..(i + 1) * cols],
                        );
                    }
                })
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (d, g) in d.iter_mut().zip(g) {
        *d += g;
    }
}

fn unary(
    grads: &mut [Option<Vec<f64>>],
    a: usize,
    x: &[f64],
    g: &[f64],
    deriv: impl Fn(f64) -> f64,
) {
    accumulate(&mut grads[a], x.len(), |d| {
        for ((d, g), &x) in d.iter_mut().zip(g).zip(x) {
            *d += g * deriv(x);
        }
    })
}
