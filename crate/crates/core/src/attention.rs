//! Dense multi-head attention with anchor position encodings, and
//! deformable (sparse, sampled) self/cross attention over the pyramid.

use crate::dcssm::{anchor_matrix, Anchor};
use crate::deform::{split_levels, ReferenceGrid};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Builder, Cx, Linear};
use crate::tensor::Tensor;

const SINUSOID_BASE: f64 = 10000.0;

/// `sin/cos` features of a scalar in `dim` (even) slots.
pub fn sinusoid(x: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = SINUSOID_BASE.powf(-(i as f64) / half.max(1) as f64);
        out[2 * i] = (x * freq * std::f64::consts::TAU).sin();
        out[2 * i + 1] = (x * freq * std::f64::consts::TAU).cos();
    }
    out
}

/// Concatenated center and duration encodings, `N × C`.
pub fn anchor_encoding(anchors: &[Anchor], c: usize) -> Result<Tensor> {
    if c % 4 != 0 {
        return Err(Error::Config(format!("anchor encoding needs C divisible by 4, got {c}")));
    }
    let mut data = Vec::with_capacity(anchors.len() * c);
    for a in anchors {
        data.extend(sinusoid(a.center, c / 2));
        data.extend(sinusoid(a.duration, c / 2));
    }
    Ok(Tensor::from_vec([anchors.len(), c], data))
}

fn check_heads(c: usize, heads: usize) -> Result<usize> {
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide {c} channels")));
    }
    Ok(c / heads)
}

/// Multi-head attention; queries and keys receive a learned projection of
/// their anchor encodings.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub pos: Linear,
    pub heads: usize,
}

impl Mhsa {
    pub fn new(b: &mut Builder, name: &str, c: usize, heads: usize) -> Result<Self> {
        check_heads(c, heads)?;
        b.scoped(name, |b| {
            Ok(Self {
                q: b.linear("q", c, c)?,
                k: b.linear("k", c, c)?,
                v: b.linear("v", c, c)?,
                o: b.linear("o", c, c)?,
                pos: b.linear("pos", c, c)?,
                heads,
            })
        })
    }

    fn encode(&self, cx: &mut Cx, x: Var, anchors: &[Anchor]) -> Result<Var> {
        let c = cx.g.value(x).cols();
        if anchors.len() != cx.g.value(x).rows() {
            return Err(Error::Dimension(format!(
                "{} anchors for {} tokens",
                anchors.len(),
                cx.g.value(x).rows()
            )));
        }
        let pe = cx.constant(anchor_encoding(anchors, c)?);
        let pe = self.pos.forward(cx, pe)?;
        cx.g.add(x, pe)
    }

    /// Attention of `xq` over `xkv`.
    pub fn forward_kv(&self, cx: &mut Cx, xq: Var, aq: &[Anchor], xkv: Var, akv: &[Anchor]) -> Result<Var> {
        let c = cx.g.value(xq).cols();
        let dh = check_heads(c, self.heads)?;
        let qi = self.encode(cx, xq, aq)?;
        let ki = self.encode(cx, xkv, akv)?;
        let q = self.q.forward(cx, qi)?;
        let k = self.k.forward(cx, ki)?;
        let v = self.v.forward(cx, xkv)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = cx.g.slice_cols(q, h * dh, dh)?;
            let kh = cx.g.slice_cols(k, h * dh, dh)?;
            let vh = cx.g.slice_cols(v, h * dh, dh)?;
            let s = cx.g.matmul_nt(qh, kh)?;
            let s = cx.g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = cx.g.softmax_rows(s);
            heads.push(cx.g.matmul(a, vh)?);
        }
        let cat = cx.g.concat_cols(&heads)?;
        self.o.forward(cx, cat)
    }

    pub fn forward(&self, cx: &mut Cx, x: Var, anchors: &[Anchor]) -> Result<Var> {
        self.forward_kv(cx, x, anchors, x, anchors)
    }
}

/// Sparse attention: each query reads `K` interpolated values per head and
/// level around its reference, weighted by a softmax over all `L·K`.
#[derive(Clone, Debug)]
pub struct DeformableAttention {
    /// `C → H·L·K`, zero-initialized.
    pub offsets: Linear,
    /// `C → H·L·K`, zero-initialized.
    pub logits: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

/// Sampling references of a deformable attention call.
pub enum Reference<'a> {
    /// Self attention: each token's own reference point.
    Tokens,
    /// Cross attention: offsets are scaled by half the anchor duration.
    Anchors(&'a [Anchor]),
}

impl DeformableAttention {
    pub fn new(b: &mut Builder, name: &str, c: usize, heads: usize, levels: usize, points: usize) -> Result<Self> {
        check_heads(c, heads)?;
        let width = heads * levels * points;
        b.scoped(name, |b| {
            Ok(Self {
                offsets: b.linear_zero("offsets", c, width)?,
                logits: b.linear_zero("logits", c, width)?,
                value: b.linear("value", c, c)?,
                out: b.linear("out", c, c)?,
                heads,
                levels,
                points,
            })
        })
    }

    fn width(&self) -> usize {
        self.heads * self.levels * self.points
    }

    /// Per-head attention weights `N × (L·K)` for the query rows.
    pub fn weights(&self, cx: &mut Cx, query: Var) -> Result<Vec<Var>> {
        let logits = self.logits.forward(cx, query)?;
        let lk = self.levels * self.points;
        (0..self.heads)
            .map(|h| {
                let s = cx.g.slice_cols(logits, h * lk, lk)?;
                Ok(cx.g.softmax_rows(s))
            })
            .collect()
    }

    /// `query: N × C`; `tokens`: the flattened pyramid the values come from.
    pub fn forward(&self, cx: &mut Cx, query: Var, reference: Reference, tokens: Var, grid: &ReferenceGrid) -> Result<Var> {
        let (n, c) = cx.g.value(query).dims2();
        let dh = check_heads(c, self.heads)?;
        if grid.num_levels() != self.levels {
            return Err(Error::Dimension(format!(
                "attention built for {} levels, grid has {}",
                self.levels,
                grid.num_levels()
            )));
        }
        let width = self.width();
        let off = self.offsets.forward(cx, query)?;
        let pos = match reference {
            Reference::Tokens => {
                if n != grid.total_tokens() {
                    return Err(Error::Dimension(format!("{n} queries for a {}-token grid", grid.total_tokens())));
                }
                let refs: Vec<f64> = grid.flat_points().iter().flat_map(|&p| std::iter::repeat_n(p, width)).collect();
                let refs = cx.constant(Tensor::from_vec([n, width], refs));
                cx.g.add(off, refs)?
            }
            Reference::Anchors(anchors) => {
                if anchors.len() != n {
                    return Err(Error::Dimension(format!("{} anchors for {n} queries", anchors.len())));
                }
                let half = cx.constant(anchor_matrix(anchors, width, |a| a.duration / 2.0));
                let centers = cx.constant(anchor_matrix(anchors, width, |a| a.center));
                let scaled = cx.g.mul(off, half)?;
                cx.g.add(scaled, centers)?
            }
        };
        let weights = self.weights(cx, query)?;
        let values = self.value.forward(cx, tokens)?;
        let values = split_levels(cx, values, grid)?;
        let lk = self.levels * self.points;
        let k = self.points;
        let mut heads = Vec::with_capacity(self.heads);
        for (h, &w) in weights.iter().enumerate() {
            let mut acc: Option<Var> = None;
            for (l, (&vl, lg)) in values.iter().zip(&grid.levels).enumerate() {
                let vh = cx.g.slice_cols(vl, h * dh, dh)?;
                let p = cx.g.slice_cols(pos, h * lk + l * k, k)?;
                let p = cx.g.reshape(p, &[n * k])?;
                let s = cx.g.bilinear(vh, p, lg.scale, lg.valid)?;
                let wl = cx.g.slice_cols(w, l * k, k)?;
                let part = cx.g.group_weighted_sum(s, wl)?;
                acc = Some(match acc {
                    Some(a) => cx.g.add(a, part)?,
                    None => part,
                });
            }
            heads.push(acc.expect("at least one level"));
        }
        let cat = cx.g.concat_cols(&heads)?;
        self.out.forward(cx, cat)
    }
}
