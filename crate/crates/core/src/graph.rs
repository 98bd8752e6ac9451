//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep.

use std::rc::Rc;

use crate::deform::{bilinear_backward, bilinear_forward, BilinearCache};
use crate::error::{dim_err, Error, Result};
use crate::ssm::{scan_backward, scan_forward, ScanCache, ScanShape};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations accepted by [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Sigmoid,
    Tanh,
    Exp,
    Softplus,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Tanh,
    Exp,
    Softplus,
    Relu,
    Neg,
    Ln,
    Abs,
    Sqrt,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Minimum,
}

enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Shift(Var),
    ClampMin(Var, f64),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Max(Var, usize),
    RowSum(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    SliceCols(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SoftmaxRows(Var),
    GroupWeightedSum(Var, Var),
    Bilinear { feat: Var, pos: Var, cache: BilinearCache },
    Scan { x: Var, delta: Var, a_log: Var, b: Var, c: Var, cache: ScanCache },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn is_scalar(t: &Tensor) -> bool {
    t.numel() == 1
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf; differentiable iff `t.requires_grad`.
    pub fn input(&mut self, mut t: Tensor) -> Var {
        let rg = t.requires_grad;
        t.grad = None;
        self.push(t, Op::Leaf, rg)
    }

    /// Adds a differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.input(t.with_grad())
    }

    /// Adds a non-differentiable leaf.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.input(t)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    // ---------------------------------------------------------------- pointwise

    /// Generic pointwise entry point: binary ops take two args, unary one.
    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        let need = if matches!(op, Elementwise::Add | Elementwise::Mul) { 2 } else { 1 };
        if args.len() != need {
            return Err(Error::Contract(format!("{op:?} takes {need} argument(s), got {}", args.len())));
        }
        Ok(match op {
            Elementwise::Add => self.add(args[0], args[1])?,
            Elementwise::Mul => self.mul(args[0], args[1])?,
            Elementwise::Sigmoid => self.sigmoid(args[0]),
            Elementwise::Tanh => self.tanh(args[0]),
            Elementwise::Exp => self.exp(args[0]),
            Elementwise::Softplus => self.softplus(args[0]),
            Elementwise::Relu => self.relu(args[0]),
        })
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = if ta.shape() == tb.shape() {
            ta.shape().to_vec()
        } else if matches!(kind, Binary::Maximum | Binary::Minimum) {
            return Err(dim_err("elementwise max/min", ta.shape(), tb.shape()));
        } else if is_scalar(tb) {
            ta.shape().to_vec()
        } else if is_scalar(ta) {
            tb.shape().to_vec()
        } else {
            return Err(dim_err("broadcast", ta.shape(), tb.shape()));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
            Binary::Maximum => |x: f64, y: f64| if x >= y { x } else { y },
            Binary::Minimum => |x: f64, y: f64| if x <= y { x } else { y },
        };
        let data = (0..n).map(|i| f(pick(da, i), pick(db, i))).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(shape, data), Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Maximum, a, b)
    }
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Minimum, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let f = |x: f64| match kind {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Softplus => softplus(x),
            Unary::Relu => x.max(0.0),
            Unary::Neg => -x,
            Unary::Ln => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
        };
        let out = Tensor::from_vec(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(a);
        self.push(out, Op::Unary(kind, a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }
    /// Rectifier; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Ln, a)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor::from_vec(t.shape().to_vec(), t.data().iter().map(|x| x * k).collect());
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor::from_vec(t.shape().to_vec(), t.data().iter().map(|x| x + k).collect());
        let rg = self.rg(a);
        self.push(out, Op::Shift(a), rg)
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor::from_vec(t.shape().to_vec(), t.data().iter().map(|x| x.max(lo)).collect());
        let rg = self.rg(a);
        self.push(out, Op::ClampMin(a, lo), rg)
    }

    // ------------------------------------------------------------------ linear

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec([m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(dim_err("matmul_nt", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec([m, n], out), Op::MatMulNt(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let (m, n) = tx.dims2();
        if tb.numel() != n || tx.rank() != 2 {
            return Err(dim_err("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.data().to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::from_vec([m, n], out), Op::AddBias(x, bias), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 2 {
            return Err(Error::Dimension(format!("transpose needs rank 2, got {:?}", t.shape())));
        }
        let (m, n) = t.dims2();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec([n, m], out), Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    // -------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Maximum over all entries (gradient flows to the first argmax).
    pub fn max(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (idx, v) = t
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Max(a, idx), rg)
    }

    /// Per-row sums of an `m×n` matrix, shape `[m]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        let out = (0..m).map(|i| t.data()[i * n..(i + 1) * n].iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::from_vec([m], out), Op::RowSum(a), rg)
    }

    /// Column means of an `m×n` matrix, shape `[1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(&t.data()[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(a);
        self.push(Tensor::from_vec([1, n], out), Op::MeanRows(a), rg)
    }

    // ------------------------------------------------------------------ layout

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.cols() != n {
                return Err(dim_err("concat_rows", self.shape(parts[0]), t.shape()));
            }
            m += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_vec([m, n], data), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.cols()).collect();
        for &p in parts {
            if self.nodes[p.0].value.rows() != m {
                return Err(dim_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_vec([m, n], data), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: impl Into<Rc<[usize]>>) -> Result<Var> {
        let idx = idx.into();
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            if i >= m {
                return Err(Error::Dimension(format!("row {i} out of range for {m} rows")));
            }
            data.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec([idx.len(), n], data), Op::GatherRows(a, idx), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        if start + len > n {
            return Err(Error::Dimension(format!("columns {start}..{} of {n}", start + len)));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec([m, len], data), Op::SliceCols(a, start), rg))
    }

    // ------------------------------------------------------------------- fused

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let t = &self.nodes[x.0].value;
        let (m, n) = t.dims2();
        let (g, b) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        if g.numel() != n || b.numel() != n {
            return Err(dim_err("layer_norm", t.shape(), g.shape()));
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mu) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(Tensor::from_vec([m, n], out), Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Softmax along the last dimension.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n.max(1)).take(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(t.shape().to_vec(), out), Op::SoftmaxRows(a), rg)
    }

    /// `out[i] = Σ_g w[i,g] · samples[i·G + g]` for `samples: (N·G)×D`, `w: N×G`.
    pub fn group_weighted_sum(&mut self, samples: Var, weights: Var) -> Result<Var> {
        let (ts, tw) = (&self.nodes[samples.0].value, &self.nodes[weights.0].value);
        let (rows, d) = ts.dims2();
        let (n, g) = tw.dims2();
        if rows != n * g {
            return Err(dim_err("group_weighted_sum", ts.shape(), tw.shape()));
        }
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for k in 0..g {
                let w = tw.data()[i * g + k];
                let src = &ts.data()[(i * g + k) * d..(i * g + k + 1) * d];
                for (o, s) in out[i * d..(i + 1) * d].iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        let rg = self.rg(samples) || self.rg(weights);
        Ok(self.push(Tensor::from_vec([n, d], out), Op::GroupWeightedSum(samples, weights), rg))
    }

    /// Linear interpolation of the rows of `feat` at normalized positions `pos`.
    ///
    /// `scale` maps a normalized time to a fractional row index via
    /// `u = pos · scale − 0.5`; indices clamp to `[0, valid − 1]`.
    pub fn bilinear(&mut self, feat: Var, pos: Var, scale: f64, valid: usize) -> Result<Var> {
        let (tf, tp) = (&self.nodes[feat.0].value, &self.nodes[pos.0].value);
        let (rows, c) = tf.dims2();
        if rows == 0 || valid == 0 || valid > rows {
            return Err(Error::Dimension(format!("bilinear sampling of {rows} rows with {valid} valid")));
        }
        let (out, cache) = bilinear_forward(tf.data(), c, valid, tp.data(), scale);
        let m = tp.numel();
        let rg = self.rg(feat) || self.rg(pos);
        Ok(self.push(Tensor::from_vec([m, c], out), Op::Bilinear { feat, pos, cache }, rg))
    }

    /// Selective scan over `x: T×C` with step sizes `delta: T×C`, log decay
    /// `a_log: C×S`, input gates `b: T×S` and output gates `c: T×S`.
    ///
    /// The sequence is split into independent segments of `seg_len` rows;
    /// `reverse` scans each segment back to front.
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        seg_len: usize,
        reverse: bool,
    ) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (t, ch) = tx.dims2();
        let s = self.nodes[a_log.0].value.cols();
        let checks = [
            (self.shape(delta).to_vec(), vec![t, ch]),
            (self.shape(a_log).to_vec(), vec![ch, s]),
            (self.shape(b).to_vec(), vec![t, s]),
            (self.shape(c).to_vec(), vec![t, s]),
        ];
        for (got, want) in &checks {
            if got != want {
                return Err(dim_err("selective_scan operand", got, want));
            }
        }
        if seg_len == 0 || t % seg_len != 0 {
            return Err(Error::Dimension(format!("segment length {seg_len} does not divide {t}")));
        }
        let shape = ScanShape { t, c: ch, s, seg_len, reverse };
        let (y, cache) = scan_forward(
            &shape,
            tx.data(),
            self.nodes[delta.0].value.data(),
            self.nodes[a_log.0].value.data(),
            self.nodes[b.0].value.data(),
            self.nodes[c.0].value.data(),
        );
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("selective scan overflowed".into()));
        }
        let rg = [x, delta, a_log, b, c].iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::from_vec([t, ch], y), Op::Scan { x, delta, a_log, b, c, cache }, rg))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls; intermediate gradients do not persist.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i].value;
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, update: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            update(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                let pick = |d: &[f64], k: usize| if d.len() == 1 { d[0] } else { d[k] };
                let (ga, gb): (Vec<f64>, Vec<f64>) = (0..g.len())
                    .map(|k| {
                        let (x, y) = (pick(da, k), pick(db, k));
                        match kind {
                            Binary::Add => (g[k], g[k]),
                            Binary::Sub => (g[k], -g[k]),
                            Binary::Mul => (g[k] * y, g[k] * x),
                            Binary::Div => (g[k] / y, -g[k] * x / (y * y)),
                            Binary::Maximum => if x >= y { (g[k], 0.0) } else { (0.0, g[k]) },
                            Binary::Minimum => if x <= y { (g[k], 0.0) } else { (0.0, g[k]) },
                        }
                    })
                    .unzip();
                let reduce = |slot: &mut [f64], src: &[f64]| {
                    if slot.len() == src.len() {
                        slot.iter_mut().zip(src).for_each(|(s, v)| *s += v);
                    } else {
                        slot[0] += src.iter().sum::<f64>();
                    }
                };
                acc(*a, &|s| reduce(s, &ga));
                acc(*b, &|s| reduce(s, &gb));
            }
            Op::Unary(kind, a) => {
                let x = val(*a).data();
                let y = out.data();
                acc(*a, &|s| {
                    for k in 0..s.len() {
                        let d = match kind {
                            Unary::Sigmoid => y[k] * (1.0 - y[k]),
                            Unary::Tanh => 1.0 - y[k] * y[k],
                            Unary::Exp => y[k],
                            Unary::Softplus => sigmoid(x[k]),
                            Unary::Relu => if x[k] > 0.0 { 1.0 } else { 0.0 },
                            Unary::Neg => -1.0,
                            Unary::Ln => 1.0 / x[k],
                            Unary::Abs => if x[k] > 0.0 { 1.0 } else if x[k] < 0.0 { -1.0 } else { 0.0 },
                            Unary::Sqrt => 0.5 / y[k],
                            Unary::Square => 2.0 * x[k],
                        };
                        s[k] += g[k] * d;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k)),
            Op::Shift(a) | Op::Reshape(a) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::ClampMin(a, lo) => {
                let x = val(*a).data();
                acc(*a, &|s| {
                    for k in 0..s.len() {
                        if x[k] > *lo {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &|s| matmul_nt_acc(g, tb.data(), s, m, n, k));
                acc(*b, &|s| matmul_tn_acc(ta.data(), g, s, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ, a: m×k, b: n×k
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                acc(*a, &|s| matmul_acc(g, tb.data(), s, m, n, k));
                acc(*b, &|s| matmul_tn_acc(g, ta.data(), s, m, n, k));
            }
            Op::AddBias(x, b) => {
                let n = val(*b).numel();
                acc(*x, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &|s| {
                    for row in g.chunks(n) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = val(*a).dims2();
                acc(*a, &|s| {
                    for r in 0..m {
                        for c in 0..n {
                            s[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let inv = 1.0 / val(*a).numel() as f64;
                acc(*a, &|s| s.iter_mut().for_each(|s| *s += g[0] * inv));
            }
            Op::Max(a, idx) => acc(*a, &|s| s[*idx] += g[0]),
            Op::RowSum(a) => {
                let n = val(*a).cols();
                acc(*a, &|s| {
                    for (k, v) in s.iter_mut().enumerate() {
                        *v += g[k / n];
                    }
                });
            }
            Op::MeanRows(a) => {
                let (m, n) = val(*a).dims2();
                let inv = 1.0 / m as f64;
                acc(*a, &|s| {
                    for (k, v) in s.iter_mut().enumerate() {
                        *v += g[k % n] * inv;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    acc(p, &|s| s.iter_mut().zip(&g[off..off + len]).for_each(|(s, g)| *s += g));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut col = 0;
                for &p in parts {
                    let (m, w) = val(p).dims2();
                    acc(p, &|s| {
                        for r in 0..m {
                            for c in 0..w {
                                s[r * w + c] += g[r * total + col + c];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let n = val(*a).cols();
                acc(*a, &|s| {
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..n {
                            s[src * n + c] += g[r * n + c];
                        }
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let (m, n) = val(*a).dims2();
                let w = out.cols();
                acc(*a, &|s| {
                    for r in 0..m {
                        for c in 0..w {
                            s[r * n + start + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (m, n) = out.dims2();
                let gn = val(*gain).data();
                acc(*x, &|s| {
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let gx: Vec<f64> = (0..n).map(|j| g[r * n + j] * gn[j]).collect();
                        let mean_g = gx.iter().sum::<f64>() / n as f64;
                        let mean_gx =
                            gx.iter().zip(&xhat[row.clone()]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            s[r * n + j] += rstd[r] * (gx[j] - mean_g - xhat[r * n + j] * mean_gx);
                        }
                    }
                });
                acc(*gain, &|s| {
                    for r in 0..m {
                        for j in 0..n {
                            s[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                acc(*bias, &|s| {
                    for r in 0..m {
                        for j in 0..n {
                            s[j] += g[r * n + j];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (_, n) = out.dims2();
                let y = out.data();
                acc(*a, &|s| {
                    for (r, yr) in y.chunks(n).enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            s[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::GroupWeightedSum(samples, weights) => {
                let (ts, tw) = (val(*samples), val(*weights));
                let d = ts.cols();
                let (n, gcount) = tw.dims2();
                acc(*samples, &|s| {
                    for i in 0..n {
                        for k in 0..gcount {
                            let w = tw.data()[i * gcount + k];
                            let row = (i * gcount + k) * d;
                            for c in 0..d {
                                s[row + c] += w * g[i * d + c];
                            }
                        }
                    }
                });
                acc(*weights, &|s| {
                    for i in 0..n {
                        for k in 0..gcount {
                            let row = (i * gcount + k) * d;
                            let dot: f64 = (0..d).map(|c| ts.data()[row + c] * g[i * d + c]).sum();
                            s[i * gcount + k] += dot;
                        }
                    }
                });
            }
            Op::Bilinear { feat, pos, cache } => {
                let tf = val(*feat);
                let c = tf.cols();
                let (gf, gp) = bilinear_backward(tf.data(), c, cache, g);
                acc(*feat, &|s| s.iter_mut().zip(&gf).for_each(|(s, v)| *s += v));
                acc(*pos, &|s| s.iter_mut().zip(&gp).for_each(|(s, v)| *s += v));
            }
            Op::Scan { x, delta, a_log, b, c, cache } => {
                let gr = scan_backward(
                    &cache.shape,
                    val(*x).data(),
                    val(*delta).data(),
                    val(*b).data(),
                    val(*c).data(),
                    cache,
                    g,
                );
                acc(*x, &|s| s.iter_mut().zip(&gr.x).for_each(|(s, v)| *s += v));
                acc(*delta, &|s| s.iter_mut().zip(&gr.delta).for_each(|(s, v)| *s += v));
                acc(*a_log, &|s| s.iter_mut().zip(&gr.a_log).for_each(|(s, v)| *s += v));
                acc(*b, &|s| s.iter_mut().zip(&gr.b).for_each(|(s, v)| *s += v));
                acc(*c, &|s| s.iter_mut().zip(&gr.c).for_each(|(s, v)| *s += v));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(2));
        let m = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let a = g.constant(t2(&[&[1.0, 2.0]]));
        let b = g.constant(t2(&[&[3.0], &[4.0]]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::uniform([3, 3], -1e3, 1e3, &mut rng);
        let b = Tensor::uniform([3, 3], -1e3, 1e3, &mut rng);
        let mut oracle = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    oracle[i * 3 + j] += a.at(i, k) * b.at(k, j);
                }
            }
        }
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let p = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(p).data().iter().zip(oracle) {
            assert!((x - y).abs() <= 1e-10 * y.abs().max(1.0));
        }
    }

    #[test]
    fn pointwise_examples() {
        let mut g = Graph::new();
        let z = g.scalar(0.0);
        let s = g.elementwise(Elementwise::Sigmoid, &[z]).unwrap();
        assert_eq!(g.item(s), 0.5);
        let sp = g.elementwise(Elementwise::Softplus, &[z]).unwrap();
        assert!((g.item(sp) - std::f64::consts::LN_2).abs() < 1e-15);
        let a = g.constant(Tensor::from_vec([2], vec![1.0, 2.0]));
        let b = g.constant(Tensor::from_vec([2], vec![3.0, 4.0]));
        let c = g.elementwise(Elementwise::Add, &[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn broadcast_limited_to_scalar_and_exact_shape() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 2]));
        let s = g.scalar(1.5);
        let ok = g.add(a, s).unwrap();
        assert_eq!(g.value(ok).data(), &[1.5; 4]);
        let row = g.constant(Tensor::zeros([2]));
        assert!(matches!(g.add(a, row), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec([3], vec![1.0, -2.0, 0.5]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let l = g.mul(x, x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn second_backward_doubles_grads() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec([2], vec![0.3, -0.7]));
        let t = g.tanh(x);
        let y = g.mul(t, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        let first = g.grad(x).unwrap().to_vec();
        g.backward(l).unwrap();
        let second = g.grad(x).unwrap();
        for (a, b) in first.iter().zip(second) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec([3], vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        let l = g.sum(r);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::uniform([3, 4], 0.2, 1.5, &mut rng);
        let w = Tensor::uniform([4, 2], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |g, x| {
                let w = g.constant(w.clone());
                let m = g.matmul(x, w)?;
                let sg = g.sigmoid(m);
                let th = g.tanh(x);
                let ex = g.exp(th);
                let sp = g.softplus(ex);
                let ln = g.ln(x);
                let sq = g.sqrt(x);
                let a = g.mul(sp, ln)?;
                let b = g.div(a, sq)?;
                let t = g.transpose(b)?;
                let tt = g.matmul_nt(t, t)?;
                let mx = g.maximum(x, sq)?;
                let mn = g.minimum(x, sq)?;
                let d = g.sub(mx, mn)?;
                let ab = g.abs(d);
                let cat = g.concat_cols(&[ab, x])?;
                let sl = g.slice_cols(cat, 2, 4)?;
                let gr = g.gather_rows(sl, vec![2, 0, 0])?;
                let rs = g.row_sum(gr);
                let mr = g.mean_rows(gr);
                let sm = g.softmax_rows(gr);
                let xs = g.concat_rows(&[x, x, x, x])?;
                let gws = g.group_weighted_sum(xs, sm)?;
                let parts = [g.sum(sg), g.mean(tt), g.sum(rs), g.sum(mr), g.max(gws)];
                let mut total = parts[0];
                for p in &parts[1..] {
                    total = g.add(total, *p)?;
                }
                let sq = g.square(total);
                Ok(g.scale(sq, 0.1))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform([3, 5], -2.0, 2.0, &mut rng);
        let gain = Tensor::uniform([5], 0.5, 1.5, &mut rng);
        let bias = Tensor::uniform([5], -0.5, 0.5, &mut rng);
        let err = grad_check(
            |g, x| {
                let gn = g.constant(gain.clone());
                let bs = g.constant(bias.clone());
                let y = g.layer_norm(x, gn, bs)?;
                let y3 = g.mul(y, y)?;
                let y3 = g.mul(y3, y)?;
                Ok(g.sum(y3))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }
}
