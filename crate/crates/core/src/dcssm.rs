//! Deformable cross-scan: each query gathers a short sequence of interpolated
//! encoder features around its anchor and summarizes it with a scan.

use crate::deform::{sample_levels, zero_head, ReferenceGrid};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Builder, Cx, Ffn, LayerNorm, Linear, Mlp, ParamId};
use crate::ssm::{Direction, SsmParams};
use crate::tensor::Tensor;

/// Temporal anchor of a query in normalized `[0, 1]` time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub center: f64,
    pub duration: f64,
}

/// `t + o·d/2` for every offset of one query.
pub fn query_sample_points(anchor: Anchor, offsets: &[f64]) -> Vec<f64> {
    offsets.iter().map(|o| anchor.center + o * anchor.duration / 2.0).collect()
}

/// Row `j` of the result repeats `f(anchor_j)` across `width` columns.
pub(crate) fn anchor_matrix(anchors: &[Anchor], width: usize, f: impl Fn(&Anchor) -> f64) -> Tensor {
    Tensor::from_vec(
        [anchors.len(), width],
        anchors.iter().flat_map(|a| std::iter::repeat_n(f(a), width)).collect(),
    )
}

#[derive(Clone, Debug)]
pub struct DcSsmBlock {
    pub norm: LayerNorm,
    /// `C → L·N_s`, zero-initialized. Without it the samples sit on a fixed
    /// evenly spaced grid spanning the anchor.
    pub offset_head: Option<Mlp>,
    /// Learned token appended after the sampled sequence; its scan output is
    /// the readout.
    pub empty: ParamId,
    pub scan: SsmParams,
    pub out: Linear,
    pub ffn: Ffn,
    pub levels: usize,
    pub per_level: usize,
}

impl DcSsmBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        c: usize,
        levels: usize,
        per_level: usize,
        state_dim: usize,
        deformable: bool,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                norm: b.layer_norm("norm", c)?,
                offset_head: if deformable { Some(zero_head(b, "offsets", c, levels * per_level)?) } else { None },
                empty: b.uniform("empty", &[1, c], 1.0 / (c as f64).sqrt())?,
                scan: SsmParams::new(b, "scan", c, state_dim)?,
                out: b.linear("out", c, c)?,
                ffn: b.ffn("ffn", c, 4 * c)?,
                levels,
                per_level,
            })
        })
    }

    pub fn sequence_len(&self) -> usize {
        self.levels * self.per_level + 1
    }

    /// Sampled per-query sequences, `N_q·(L·N_s + 1) × C`: query-major, then
    /// level, then sample, with the empty token last in each.
    pub fn gather(&self, cx: &mut Cx, z: Var, anchors: &[Anchor], levels: &[Var], grid: &ReferenceGrid) -> Result<Var> {
        let nq = cx.g.value(z).rows();
        if anchors.len() != nq {
            return Err(Error::Dimension(format!("{} anchors for {nq} queries", anchors.len())));
        }
        if levels.len() != self.levels || grid.num_levels() != self.levels {
            return Err(Error::Dimension(format!(
                "cross-scan built for {} levels, got {} feature levels and a {}-level grid",
                self.levels,
                levels.len(),
                grid.num_levels()
            )));
        }
        let width = self.levels * self.per_level;
        let offsets = match &self.offset_head {
            Some(h) => h.forward(cx, z)?,
            None => {
                let grid: Vec<f64> = (0..self.levels)
                    .flat_map(|_| (0..self.per_level).map(|s| (2 * s + 1) as f64 / self.per_level as f64 - 1.0))
                    .collect();
                let rows: Vec<f64> = (0..nq).flat_map(|_| grid.iter().copied()).collect();
                cx.constant(Tensor::from_vec([nq, width], rows))
            }
        };
        let half = cx.constant(anchor_matrix(anchors, width, |a| a.duration / 2.0));
        let centers = cx.constant(anchor_matrix(anchors, width, |a| a.center));
        let scaled = cx.g.mul(offsets, half)?;
        let pos = cx.g.add(scaled, centers)?;
        let feats = sample_levels(cx, pos, levels, grid, self.per_level)?;
        let c = cx.g.value(z).cols();
        let rows = cx.g.reshape(feats, &[nq * width, c])?;
        let empty = cx.p(self.empty);
        let all = cx.g.concat_rows(&[rows, empty])?;
        let idx: Vec<usize> = (0..nq)
            .flat_map(|q| (0..width).map(move |i| q * width + i).chain(std::iter::once(nq * width)))
            .collect();
        cx.g.gather_rows(all, idx)
    }

    /// Raw per-query readout (`N_q × C`) before projection and residual.
    pub fn readout(&self, cx: &mut Cx, z: Var, anchors: &[Anchor], levels: &[Var], grid: &ReferenceGrid) -> Result<Var> {
        let seq = self.gather(cx, z, anchors, levels, grid)?;
        let len = self.sequence_len();
        let y = self.scan.scan_segments(cx, seq, len, Direction::Forward)?;
        let nq = anchors.len();
        cx.g.gather_rows(y, (0..nq).map(|q| q * len + len - 1).collect::<Vec<_>>())
    }

    pub fn forward(&self, cx: &mut Cx, q: Var, anchors: &[Anchor], levels: &[Var], grid: &ReferenceGrid) -> Result<Var> {
        let z = self.norm.forward(cx, q)?;
        let r = self.readout(cx, z, anchors, levels, grid)?;
        let r = self.out.forward(cx, r)?;
        let q1 = cx.g.add(q, r)?;
        self.ffn.forward(cx, q1)
    }
}
