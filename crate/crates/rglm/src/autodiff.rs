//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Define-by-run: every op records its parents and a backward closure on
//! the output node, and [`backward`] replays the graph in reverse
//! topological order. Tensors are rank 1 or 2; a handful of ops accept a
//! rank-1 right-hand side as a row broadcast.

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64], &[Tensor])>;

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A dense differentiable array. Cloning is shallow; both handles refer
/// to the same node in the computation record.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Node>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.inner.borrow();
        write!(f, "Tensor(shape={:?}, requires_grad={})", n.shape, n.requires_grad)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), values.len());
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                shape,
                values,
                grad: None,
                requires_grad,
                parents: Vec::new(),
                backward: None,
            })),
        }
    }

    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Tensor {
        assert_eq!(numel(shape), values.len(), "shape/value length mismatch");
        Tensor::make(shape.to_vec(), values, false)
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Tensor {
        assert_eq!(numel(shape), values.len(), "shape/value length mismatch");
        Tensor::make(shape.to_vec(), values, true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::make(vec![1], vec![v], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::make(shape.to_vec(), vec![0.0; numel(shape)], false)
    }

    fn op(shape: Vec<usize>, values: Vec<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        let requires = parents.iter().any(|p| p.requires_grad());
        let t = Tensor::make(shape, values, requires);
        if requires {
            let mut n = t.inner.borrow_mut();
            n.parents = parents;
            n.backward = Some(backward);
        }
        t
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn rows(&self) -> usize {
        self.inner.borrow().shape[0]
    }

    pub fn cols(&self) -> usize {
        let n = self.inner.borrow();
        if n.shape.len() == 2 {
            n.shape[1]
        } else {
            1
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    pub fn item(&self) -> f64 {
        let n = self.inner.borrow();
        assert_eq!(n.values.len(), 1, "item() on non-scalar tensor");
        n.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Gradient of the last backward pass; zeros if the tensor never
    /// participated.
    pub fn grad(&self) -> Vec<f64> {
        let n = self.inner.borrow();
        n.grad.clone().unwrap_or_else(|| vec![0.0; n.values.len()])
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite the stored values in place (optimizer updates, FD probes).
    pub fn set_values(&self, values: &[f64]) {
        let mut n = self.inner.borrow_mut();
        assert_eq!(n.values.len(), values.len());
        n.values.copy_from_slice(values);
    }

    /// Same values, severed from the computation record.
    pub fn detach(&self) -> Tensor {
        let n = self.inner.borrow();
        Tensor::make(n.shape.clone(), n.values.clone(), false)
    }

    fn accumulate(&self, g: &[f64]) {
        let mut n = self.inner.borrow_mut();
        if !n.requires_grad {
            return;
        }
        let len = n.values.len();
        let grad = n.grad.get_or_insert_with(|| vec![0.0; len]);
        for (gi, v) in grad.iter_mut().zip(g) {
            *gi += v;
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tensor {
    /// Elementwise sum; a rank-1 rhs of length `cols` broadcasts over rows.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        let broadcast = other.shape().len() == 1 && self.shape().len() == 2 && other.len() == c;
        if !broadcast {
            same_shape(self, other, "add")?;
        }
        let a = self.values();
        let b = other.values();
        let out: Vec<f64> = if broadcast {
            (0..r * c).map(|i| a[i] + b[i % c]).collect()
        } else {
            a.iter().zip(&b).map(|(x, y)| x + y).collect()
        };
        Ok(Tensor::op(
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate(g);
                if broadcast {
                    let mut gb = vec![0.0; c];
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % c] += gi;
                    }
                    parents[1].accumulate(&gb);
                } else {
                    parents[1].accumulate(g);
                }
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.scale(-1.0))
    }

    /// Elementwise product; a rank-1 rhs of length `cols` broadcasts over rows.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        let broadcast = other.shape().len() == 1 && self.shape().len() == 2 && other.len() == c;
        if !broadcast {
            same_shape(self, other, "mul")?;
        }
        let a = self.values();
        let b = other.values();
        let out: Vec<f64> = if broadcast {
            (0..r * c).map(|i| a[i] * b[i % c]).collect()
        } else {
            a.iter().zip(&b).map(|(x, y)| x * y).collect()
        };
        Ok(Tensor::op(
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                let av = parents[0].values();
                let bv = parents[1].values();
                if broadcast {
                    let ga: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * bv[i % c]).collect();
                    parents[0].accumulate(&ga);
                    let mut gb = vec![0.0; c];
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % c] += gi * av[i];
                    }
                    parents[1].accumulate(&gb);
                } else {
                    let ga: Vec<f64> = g.iter().zip(&bv).map(|(gi, y)| gi * y).collect();
                    let gb: Vec<f64> = g.iter().zip(&av).map(|(gi, x)| gi * x).collect();
                    parents[0].accumulate(&ga);
                    parents[1].accumulate(&gb);
                }
            }),
        ))
    }

    pub fn scale(&self, k: f64) -> Tensor {
        let out: Vec<f64> = self.values().iter().map(|x| x * k).collect();
        Tensor::op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let ga: Vec<f64> = g.iter().map(|gi| gi * k).collect();
                parents[0].accumulate(&ga);
            }),
        )
    }

    pub fn add_scalar(&self, k: f64) -> Tensor {
        let out: Vec<f64> = self.values().iter().map(|x| x + k).collect();
        Tensor::op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| parents[0].accumulate(g)),
        )
    }

    /// Scale row i by `s[i]` (column broadcast).
    pub fn scale_rows(&self, s: &Tensor) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        if s.shape() != vec![r] {
            return Err(Error::Dimension(format!(
                "scale_rows: {:?} vs {:?}",
                self.shape(),
                s.shape()
            )));
        }
        let a = self.values();
        let sv = s.values();
        let out: Vec<f64> = (0..r * c).map(|i| a[i] * sv[i / c]).collect();
        Ok(Tensor::op(
            self.shape(),
            out,
            vec![self.clone(), s.clone()],
            Box::new(move |g, parents| {
                let av = parents[0].values();
                let sv = parents[1].values();
                let ga: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * sv[i / c]).collect();
                parents[0].accumulate(&ga);
                let mut gs = vec![0.0; r];
                for (i, gi) in g.iter().enumerate() {
                    gs[i / c] += gi * av[i];
                }
                parents[1].accumulate(&gs);
            }),
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if self.shape().len() != 2 || other.shape().len() != 2 || k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let a = self.values();
        let b = other.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        Ok(Tensor::op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                let a = parents[0].values();
                let b = parents[1].values();
                // dA = g . B^T
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            ga[i * k + p] += gij * b[p * n + j];
                        }
                    }
                }
                parents[0].accumulate(&ga);
                // dB = A^T . g
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = a[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                parents[1].accumulate(&gb);
            }),
        ))
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let a = self.values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
        Tensor::op(
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                parents[0].accumulate(&ga);
            }),
        )
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty());
        let c = parts[0].cols();
        let mut values = Vec::new();
        let mut row_counts = Vec::new();
        for p in parts {
            if p.cols() != c {
                return Err(Error::Dimension(format!(
                    "concat_rows: column mismatch {:?} vs {c}",
                    p.shape()
                )));
            }
            row_counts.push(p.rows());
            values.extend(p.values());
        }
        let total: usize = row_counts.iter().sum();
        Ok(Tensor::op(
            vec![total, c],
            values,
            parts.to_vec(),
            Box::new(move |g, parents| {
                let mut off = 0;
                for (p, &rc) in parents.iter().zip(&row_counts) {
                    p.accumulate(&g[off..off + rc * c]);
                    off += rc * c;
                }
            }),
        ))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty());
        let r = parts[0].rows();
        let mut col_counts = Vec::new();
        for p in parts {
            if p.rows() != r {
                return Err(Error::Dimension(format!(
                    "concat_cols: row mismatch {:?} vs {r}",
                    p.shape()
                )));
            }
            col_counts.push(p.cols());
        }
        let total: usize = col_counts.iter().sum();
        let mut values = vec![0.0; r * total];
        let mut off = 0;
        for (p, &cc) in parts.iter().zip(&col_counts) {
            let pv = p.values();
            for i in 0..r {
                values[i * total + off..i * total + off + cc]
                    .copy_from_slice(&pv[i * cc..(i + 1) * cc]);
            }
            off += cc;
        }
        Ok(Tensor::op(
            vec![r, total],
            values,
            parts.to_vec(),
            Box::new(move |g, parents| {
                let mut off = 0;
                for (p, &cc) in parents.iter().zip(&col_counts) {
                    let mut gp = vec![0.0; r * cc];
                    for i in 0..r {
                        gp[i * cc..(i + 1) * cc]
                            .copy_from_slice(&g[i * total + off..i * total + off + cc]);
                    }
                    p.accumulate(&gp);
                    off += cc;
                }
            }),
        ))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        if start > end || end > r {
            return Err(Error::Dimension(format!("slice_rows {start}..{end} of {r} rows")));
        }
        let values = self.values()[start * c..end * c].to_vec();
        Ok(Tensor::op(
            vec![end - start, c],
            values,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut ga = vec![0.0; r * c];
                ga[start * c..end * c].copy_from_slice(g);
                parents[0].accumulate(&ga);
            }),
        ))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        if start > end || end > c {
            return Err(Error::Dimension(format!("slice_cols {start}..{end} of {c} cols")));
        }
        let a = self.values();
        let w = end - start;
        let mut values = vec![0.0; r * w];
        for i in 0..r {
            values[i * w..(i + 1) * w].copy_from_slice(&a[i * c + start..i * c + end]);
        }
        Ok(Tensor::op(
            vec![r, w],
            values,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                parents[0].accumulate(&ga);
            }),
        ))
    }

    /// Row gather; doubles as embedding lookup on a parameter table.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        for &i in indices {
            if i >= r {
                return Err(Error::Dimension(format!("gather_rows: index {i} out of {r}")));
            }
        }
        let a = self.values();
        let mut values = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            values.extend_from_slice(&a[i * c..(i + 1) * c]);
        }
        let idx = indices.to_vec();
        Ok(Tensor::op(
            vec![indices.len(), c],
            values,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut ga = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += g[k * c + j];
                    }
                }
                parents[0].accumulate(&ga);
            }),
        ))
    }

    /// Mean-pool rows by index groups: output row g is the mean of the
    /// input rows listed in `groups[g]`. Empty groups are a usage error.
    pub fn index_mean_pool(&self, groups: &[Vec<usize>]) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        for grp in groups {
            if grp.is_empty() {
                return Err(Error::Usage("index_mean_pool: empty group".into()));
            }
            for &i in grp {
                if i >= r {
                    return Err(Error::Dimension(format!("index_mean_pool: index {i} out of {r}")));
                }
            }
        }
        let a = self.values();
        let mut values = vec![0.0; groups.len() * c];
        for (g, grp) in groups.iter().enumerate() {
            let inv = 1.0 / grp.len() as f64;
            for &i in grp {
                for j in 0..c {
                    values[g * c + j] += a[i * c + j] * inv;
                }
            }
        }
        let groups = groups.to_vec();
        Ok(Tensor::op(
            vec![groups.len(), c],
            values,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut ga = vec![0.0; r * c];
                for (k, grp) in groups.iter().enumerate() {
                    let inv = 1.0 / grp.len() as f64;
                    for &i in grp {
                        for j in 0..c {
                            ga[i * c + j] += g[k * c + j] * inv;
                        }
                    }
                }
                parents[0].accumulate(&ga);
            }),
        ))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let a = self.values();
        let out: Vec<f64> = a.iter().map(|&x| f(x)).collect();
        let saved = out.clone();
        Tensor::op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let x = parents[0].values();
                let ga: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * df(x[i], saved[i]))
                    .collect();
                parents[0].accumulate(&ga);
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(|x| x.tanh(), |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    /// tanh-approximation GELU.
    pub fn gelu(&self) -> Tensor {
        const K: f64 = 0.7978845608028654; // sqrt(2/pi)
        const C: f64 = 0.044715;
        self.unary(
            |x| 0.5 * x * (1.0 + (K * (x + C * x * x * x)).tanh()),
            |x, _| {
                let u = K * (x + C * x * x * x);
                let t = u.tanh();
                let du = K * (1.0 + 3.0 * C * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(|x| x.sqrt(), |_, y| 0.5 / y)
    }

    pub fn log(&self) -> Tensor {
        self.unary(|x| x.ln(), |x, _| 1.0 / x)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(|x| x.exp(), |_, y| y)
    }

    /// ln(1 + e^x), computed in the overflow-free branch form.
    pub fn softplus(&self) -> Tensor {
        self.unary(
            |x| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    /// View with a new shape of the same element count; gradients pass
    /// through unchanged.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {} elements to {:?}",
                self.len(),
                shape
            )));
        }
        Ok(Tensor::op(
            shape.to_vec(),
            self.values(),
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate(g);
            }),
        ))
    }

    pub fn recip(&self) -> Tensor {
        self.unary(|x| 1.0 / x, |_, y| -y * y)
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.values().iter().sum();
        let n = self.len();
        Tensor::op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate(&vec![g[0]; n]);
            }),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Per-row sums, rank-1 output of length `rows`.
    pub fn sum_rows(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let a = self.values();
        let out: Vec<f64> = (0..r).map(|i| a[i * c..(i + 1) * c].iter().sum()).collect();
        Tensor::op(
            vec![r],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[i];
                    }
                }
                parents[0].accumulate(&ga);
            }),
        )
    }

    /// Per-row Euclidean norms, rank-1 output of length `rows`.
    pub fn norm_rows(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let a = self.values();
        let out: Vec<f64> = (0..r)
            .map(|i| a[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let saved = out.clone();
        Tensor::op(
            vec![r],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let x = parents[0].values();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let ni = saved[i].max(1e-300);
                    for j in 0..c {
                        ga[i * c + j] = g[i] * x[i * c + j] / ni;
                    }
                }
                parents[0].accumulate(&ga);
            }),
        )
    }

    /// Row-wise softmax. `mask`, when given, marks positions that stay
    /// (true); masked-out positions get exactly zero probability. A row
    /// with no unmasked position is left all-zero.
    pub fn softmax_rows(&self, mask: Option<&[bool]>) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::Dimension(format!(
                    "softmax mask length {} vs {} elements",
                    m.len(),
                    r * c
                )));
            }
        }
        let a = self.values();
        let keep: Vec<bool> = match mask {
            Some(m) => m.to_vec(),
            None => vec![true; r * c],
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &a[i * c..(i + 1) * c];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..c {
                if keep[i * c + j] {
                    mx = mx.max(row[j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..c {
                if keep[i * c + j] {
                    let e = (row[j] - mx).exp();
                    out[i * c + j] = e;
                    z += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let saved = out.clone();
        Ok(Tensor::op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let y = &saved[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..c {
                        ga[i * c + j] = y[j] * (gr[j] - dot);
                    }
                }
                parents[0].accumulate(&ga);
            }),
        ))
    }

    /// Row-wise normalization to zero mean and unit variance.
    /// Gain/bias, when wanted, are applied by the caller with
    /// broadcasting `mul`/`add`.
    pub fn layer_norm(&self) -> Tensor {
        const EPS: f64 = 1e-12;
        let (r, c) = (self.rows(), self.cols());
        let a = self.values();
        let mut out = vec![0.0; r * c];
        let mut means = vec![0.0; r];
        let mut stds = vec![0.0; r];
        for i in 0..r {
            let row = &a[i * c..(i + 1) * c];
            let m = row.iter().sum::<f64>() / c as f64;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / c as f64;
            let s = (v + EPS).sqrt();
            means[i] = m;
            stds[i] = s;
            for j in 0..c {
                out[i * c + j] = (row[j] - m) / s;
            }
        }
        let saved = out.clone();
        Tensor::op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut ga = vec![0.0; r * c];
                let n = c as f64;
                for i in 0..r {
                    let y = &saved[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let gsum: f64 = gr.iter().sum();
                    let gy: f64 = gr.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    for j in 0..c {
                        ga[i * c + j] = (gr[j] - gsum / n - y[j] * gy / n) / stds[i];
                    }
                }
                parents[0].accumulate(&ga);
            }),
        )
    }
}

/// Run reverse-mode accumulation from a scalar loss. Every reachable
/// tensor with `requires_grad` receives its gradient contribution.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.len() != 1 {
        return Err(Error::Usage(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    // Topological order by DFS over the parent links.
    let mut order: Vec<Tensor> = Vec::new();
    let mut seen: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(loss.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        let key = Rc::as_ptr(&t.inner) as usize;
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(key) {
            continue;
        }
        let parents = t.inner.borrow().parents.clone();
        stack.push((t, true));
        for p in parents {
            if p.requires_grad() {
                stack.push((p, false));
            }
        }
    }
    loss.accumulate(&[1.0]);
    for t in order.iter().rev() {
        let grad = t.inner.borrow().grad.clone();
        let Some(grad) = grad else { continue };
        let node = t.inner.borrow();
        if let Some(bw) = &node.backward {
            bw(&grad, &node.parents);
        }
    }
    Ok(())
}

/// Clear gradients on every tensor reachable from `loss`.
pub fn zero_grads(params: &[Tensor]) {
    for p in params {
        p.zero_grad();
    }
}

/// Compare analytic gradients against central finite differences.
/// Returns the max over all parameter elements of
/// `|analytic - fd| / max(|fd|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Parameter(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    zero_grads(params);
    let loss = f()?;
    if !loss.item().is_finite() {
        return Err(Error::Numeric("grad_check: non-finite loss".into()));
    }
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad()).collect();
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let base = p.values();
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + eps;
            p.set_values(&probe);
            let up = f()?.item();
            probe[i] = base[i] - eps;
            p.set_values(&probe);
            let dn = f()?.item();
            p.set_values(&base);
            let fd = (up - dn) / (2.0 * eps);
            if !fd.is_finite() {
                return Err(Error::Numeric("grad_check: non-finite finite difference".into()));
            }
            let diff = (analytic[pi][i] - fd).abs();
            let denom = analytic[pi][i].abs().max(fd.abs());
            // When both gradients are near zero the quotient is dominated by
            // finite-difference noise, so fall back to the absolute error.
            let rel = if denom < 1e-6 { diff } else { diff / denom };
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn softmax_uniform() {
        let t = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]);
        let s = t.softmax_rows(None).unwrap();
        assert_eq!(s.values(), vec![0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_zero_and_row_sums() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
        let mask = [true, false, true, true, true, true];
        let s = t.softmax_rows(Some(&mask)).unwrap();
        let v = s.values();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[3] + v[4] + v[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_moments() {
        let t = Tensor::from_vec(&[1, 4], vec![3.0, -1.0, 7.0, 2.5]);
        let y = t.layer_norm().values();
        let m: f64 = y.iter().sum::<f64>() / 4.0;
        let v: f64 = y.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-10);
        assert!((v - 1.0).abs() < 1e-10);
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let id = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(a.matmul(&id).unwrap().values(), a.values());
    }

    #[test]
    fn backward_sum_of_squares() {
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]);
        let loss = x.square().sum();
        backward(&loss).unwrap();
        assert_eq!(x.grad(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn detached_param_gets_zero_grad() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let y = Tensor::param(&[2], vec![3.0, 4.0]);
        let loss = x.square().sum();
        backward(&loss).unwrap();
        assert_eq!(y.grad(), vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        assert!(matches!(backward(&x.square()), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::from_vec(&[2, 2], vec![0.0; 4]);
        let b = Tensor::from_vec(&[3, 2], vec![0.0; 6]);
        match a.add(&b) {
            Err(Error::Dimension(msg)) => {
                assert!(msg.contains("[2, 2]") && msg.contains("[3, 2]"));
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn grad_check_simple_square() {
        let x = Tensor::param(&[1], vec![3.0]);
        let xc = x.clone();
        let err = grad_check(move || Ok(xc.mul(&xc)?.sum()), &[x.clone()], 1e-5).unwrap();
        assert!(err < 1e-9, "rel err {err}");
        assert_eq!(x.grad(), vec![6.0]);
    }

    #[test]
    fn grad_check_two_layer_perceptron_mse() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x = Tensor::from_vec(&[4, 3], randn(&mut rng, 12));
        let target = Tensor::from_vec(&[4, 2], randn(&mut rng, 8));
        let w1 = Tensor::param(&[3, 5], randn(&mut rng, 15));
        let b1 = Tensor::param(&[5], randn(&mut rng, 5));
        let w2 = Tensor::param(&[5, 2], randn(&mut rng, 10));
        let params = vec![w1.clone(), b1.clone(), w2.clone()];
        let err = grad_check(
            move || {
                let h = x.matmul(&w1)?.add(&b1)?.tanh();
                let y = h.matmul(&w2)?;
                Ok(y.sub(&target)?.square().mean())
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn grad_check_softmax_log_path() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let w = Tensor::param(&[2, 4], randn(&mut rng, 8));
        let x = Tensor::from_vec(&[3, 2], randn(&mut rng, 6));
        let params = vec![w.clone()];
        let err = grad_check(
            move || {
                let p = x.matmul(&w)?.softmax_rows(None)?;
                Ok(p.add_scalar(1e-3).log().mean().scale(-1.0))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    // Every registered primitive against finite differences on random
    // small tensors.
    #[test]
    fn grad_check_all_primitives() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for trial in 0..20 {
            let r = 2 + (trial % 3);
            let c = 2 + (trial % 2);
            let a = Tensor::param(&[r, c], randn(&mut rng, r * c));
            let b = Tensor::param(&[r, c], randn(&mut rng, r * c));
            let sq = Tensor::param(&[c, c], randn(&mut rng, c * c));
            let row = Tensor::param(&[c], randn(&mut rng, c));
            let pos = Tensor::param(
                &[r, c],
                (0..r * c).map(|_| 0.5 + rng.gen::<f64>()).collect(),
            );
            let groups: Vec<Vec<usize>> = vec![vec![0, r - 1], vec![1 % r]];
            let lnx = Tensor::param(&[3, 5], randn(&mut rng, 15));
            let lnw = Tensor::from_vec(&[3, 5], randn(&mut rng, 15));
            let mask: Vec<bool> = (0..r * c).map(|i| i % 3 != 1).collect();
            let cases: Vec<(&str, Box<dyn Fn() -> Result<Tensor>>, Vec<Tensor>)> = vec![
                ("add", {
                    let (a, b) = (a.clone(), b.clone());
                    Box::new(move || Ok(a.add(&b)?.sum()))
                }, vec![a.clone(), b.clone()]),
                ("add_bcast", {
                    let (a, row) = (a.clone(), row.clone());
                    Box::new(move || Ok(a.add(&row)?.square().sum()))
                }, vec![a.clone(), row.clone()]),
                ("mul", {
                    let (a, b) = (a.clone(), b.clone());
                    Box::new(move || Ok(a.mul(&b)?.sum()))
                }, vec![a.clone(), b.clone()]),
                ("mul_bcast", {
                    let (a, row) = (a.clone(), row.clone());
                    Box::new(move || Ok(a.mul(&row)?.square().sum()))
                }, vec![a.clone(), row.clone()]),
                ("matmul", {
                    let (a, sq) = (a.clone(), sq.clone());
                    Box::new(move || Ok(a.matmul(&sq)?.square().sum()))
                }, vec![a.clone(), sq.clone()]),
                ("transpose", {
                    let a = a.clone();
                    Box::new(move || Ok(a.transpose().square().sum()))
                }, vec![a.clone()]),
                ("concat_rows", {
                    let (a, b) = (a.clone(), b.clone());
                    Box::new(move || Ok(Tensor::concat_rows(&[a.clone(), b.clone()])?.square().sum()))
                }, vec![a.clone(), b.clone()]),
                ("concat_cols", {
                    let (a, b) = (a.clone(), b.clone());
                    Box::new(move || Ok(Tensor::concat_cols(&[a.clone(), b.clone()])?.square().sum()))
                }, vec![a.clone(), b.clone()]),
                ("slice", {
                    let a = a.clone();
                    Box::new(move || Ok(a.slice_rows(0, 2)?.slice_cols(1, c)?.square().sum()))
                }, vec![a.clone()]),
                ("gather_rows", {
                    let a = a.clone();
                    Box::new(move || Ok(a.gather_rows(&[0, 0, r - 1])?.square().sum()))
                }, vec![a.clone()]),
                ("index_mean_pool", {
                    let (a, groups) = (a.clone(), groups.clone());
                    Box::new(move || Ok(a.index_mean_pool(&groups)?.square().sum()))
                }, vec![a.clone()]),
                ("relu", {
                    let a = a.clone();
                    Box::new(move || Ok(a.relu().square().sum()))
                }, vec![a.clone()]),
                ("gelu", {
                    let a = a.clone();
                    Box::new(move || Ok(a.gelu().sum()))
                }, vec![a.clone()]),
                ("tanh", {
                    let a = a.clone();
                    Box::new(move || Ok(a.tanh().sum()))
                }, vec![a.clone()]),
                ("sigmoid", {
                    let a = a.clone();
                    Box::new(move || Ok(a.sigmoid().sum()))
                }, vec![a.clone()]),
                ("softmax", {
                    let a = a.clone();
                    Box::new(move || Ok(a.softmax_rows(None)?.square().sum()))
                }, vec![a.clone()]),
                ("softmax_masked", {
                    let (a, mask) = (a.clone(), mask.clone());
                    Box::new(move || Ok(a.softmax_rows(Some(&mask))?.square().sum()))
                }, vec![a.clone()]),
                ("layer_norm", {
                    // weight by constants and use >=3 columns: the
                    // sum-of-squares of a layer-norm output is constant,
                    // and 2-column rows normalize to exactly +-1
                    let lxc = lnx.clone();
                    let lw = lnw.clone();
                    Box::new(move || Ok(lxc.layer_norm().mul(&lw)?.sum()))
                }, vec![lnx.clone()]),
                ("sum_rows", {
                    let a = a.clone();
                    Box::new(move || Ok(a.sum_rows().square().sum()))
                }, vec![a.clone()]),
                ("norm_rows", {
                    let a = a.clone();
                    Box::new(move || Ok(a.norm_rows().sum()))
                }, vec![a.clone()]),
                ("scale_rows", {
                    let a = a.clone();
                    let s = Tensor::param(&[r], randn(&mut rng, r));
                    let sp = s.clone();
                    Box::new(move || Ok(a.scale_rows(&sp)?.square().sum()))
                }, vec![a.clone()]),
                ("sqrt_log_recip", {
                    let pos = pos.clone();
                    Box::new(move || Ok(pos.sqrt().log().recip().sum()))
                }, vec![pos.clone()]),
                ("mean", {
                    let a = a.clone();
                    Box::new(move || Ok(a.square().mean()))
                }, vec![a.clone()]),
            ];
            for (name, f, params) in cases {
                let err = grad_check(f, &params, 1e-5).unwrap();
                assert!(err <= 1e-4, "{name}: rel err {err} (trial {trial})");
            }
        }
    }

    #[test]
    fn backward_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let w = Tensor::param(&[3, 3], randn(&mut rng, 9));
        let x = Tensor::from_vec(&[2, 3], randn(&mut rng, 6));
        let mut grads = Vec::new();
        for _ in 0..2 {
            w.zero_grad();
            let loss = x.matmul(&w).unwrap().tanh().square().sum();
            backward(&loss).unwrap();
            grads.push(w.grad());
        }
        assert_eq!(grads[0], grads[1]);
    }
}
