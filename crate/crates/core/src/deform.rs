//! Deformable temporal sampling: reference points, offset prediction,
//! interpolated multi-scale reads and the deformable self-scan block.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Activation, Builder, Cx, Ffn, LayerNorm, Mlp, ParamStore};
use crate::relay::{self, InsertionMap, RelayBank};
use crate::ssm::FbSsm;
use crate::tensor::Tensor;

/// Fractional indices closer than this to an integer snap onto it, so that
/// reference points retrieve stored rows exactly.
const SNAP: f64 = 1e-9;

// ---------------------------------------------------------------- reference

/// Reference points of one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelGrid {
    /// Tokens stored at this level, including padding.
    pub len: usize,
    /// Tokens backed by real (non-padded) frames; sampling clamps to these.
    pub valid: usize,
    /// `fps · d / (ω · 2^{l−1})`: normalized time → fractional index.
    pub scale: f64,
    pub points: Vec<f64>,
}

/// Normalized temporal reference locations for every token of every level.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceGrid {
    pub levels: Vec<LevelGrid>,
    pub stride: f64,
    pub fps: f64,
    pub duration: f64,
}

/// `p_n^l = ω·2^{l−1}·(n + 0.5) / (fps·d)` for `N_l = N_1 / 2^{l−1}` tokens.
pub fn reference_points(n1: usize, levels: usize, stride: f64, fps: f64, duration: f64) -> Result<ReferenceGrid> {
    ReferenceGrid::padded(n1, n1, levels, stride, fps, duration)
}

impl ReferenceGrid {
    /// Grid over `n_stored` first-level tokens of which the first `n_valid`
    /// are real.
    pub fn padded(
        n_stored: usize,
        n_valid: usize,
        levels: usize,
        stride: f64,
        fps: f64,
        duration: f64,
    ) -> Result<Self> {
        if !(stride > 0.0 && fps > 0.0 && duration > 0.0) {
            return Err(Error::Config(format!(
                "stride {stride}, fps {fps} and duration {duration} must be positive"
            )));
        }
        if levels == 0 {
            return Err(Error::Config("at least one level is required".into()));
        }
        let mut out = Vec::with_capacity(levels);
        for l in 0..levels {
            let step = 1usize << l;
            let len = n_stored / step;
            let valid = n_valid.div_ceil(step).min(len);
            if len == 0 || valid == 0 {
                return Err(Error::Config(format!(
                    "level {} has no tokens ({n_stored} tokens, {levels} levels)",
                    l + 1
                )));
            }
            let mult = stride * step as f64;
            let denom = fps * duration;
            let points = (0..len).map(|n| mult * (n as f64 + 0.5) / denom).collect();
            out.push(LevelGrid { len, valid, scale: denom / mult, points });
        }
        Ok(Self { levels: out, stride, fps, duration })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.levels.iter().map(|l| l.len).sum()
    }

    /// First flattened index of each level (level-major order).
    pub fn level_starts(&self) -> Vec<usize> {
        let mut acc = 0;
        self.levels
            .iter()
            .map(|l| {
                let s = acc;
                acc += l.len;
                s
            })
            .collect()
    }

    /// All reference points, level-major.
    pub fn flat_points(&self) -> Vec<f64> {
        self.levels.iter().flat_map(|l| l.points.iter().copied()).collect()
    }

    /// Level index of every flattened token.
    pub fn flat_levels(&self) -> Vec<usize> {
        self.levels.iter().enumerate().flat_map(|(i, l)| std::iter::repeat_n(i, l.len)).collect()
    }
}

// ------------------------------------------------------------------ kernels

pub(crate) struct BilinearCache {
    rows: usize,
    lo: Vec<usize>,
    hi: Vec<usize>,
    w: Vec<f64>,
    /// `d out / d pos` is nonzero only when the position was not clamped.
    active: Vec<bool>,
    scale: f64,
}

fn locate(p: f64, scale: f64, valid: usize) -> (usize, usize, f64, bool) {
    let max = (valid - 1) as f64;
    let mut u = p * scale - 0.5;
    let mut active = true;
    if !(u > 0.0) {
        // also catches NaN
        active = u == 0.0;
        u = 0.0;
    } else if u >= max {
        active = u == max;
        u = max;
    }
    let r = u.round();
    if (u - r).abs() < SNAP {
        u = r;
    }
    let lo = u.floor() as usize;
    let hi = (lo + 1).min(valid - 1);
    (lo, hi, u - lo as f64, active && valid > 1)
}

pub(crate) fn bilinear_forward(feat: &[f64], c: usize, valid: usize, pos: &[f64], scale: f64) -> (Vec<f64>, BilinearCache) {
    let m = pos.len();
    let mut out = vec![0.0; m * c];
    let mut cache = BilinearCache {
        rows: feat.len() / c.max(1),
        lo: Vec::with_capacity(m),
        hi: Vec::with_capacity(m),
        w: Vec::with_capacity(m),
        active: Vec::with_capacity(m),
        scale,
    };
    for (i, &p) in pos.iter().enumerate() {
        let (lo, hi, w, active) = locate(p, scale, valid);
        let (a, b) = (&feat[lo * c..(lo + 1) * c], &feat[hi * c..(hi + 1) * c]);
        let o = &mut out[i * c..(i + 1) * c];
        if w == 0.0 {
            o.copy_from_slice(a);
        } else {
            for k in 0..c {
                o[k] = (1.0 - w) * a[k] + w * b[k];
            }
        }
        cache.lo.push(lo);
        cache.hi.push(hi);
        cache.w.push(w);
        cache.active.push(active);
    }
    (out, cache)
}

pub(crate) fn bilinear_backward(feat: &[f64], c: usize, cache: &BilinearCache, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut gf = vec![0.0; cache.rows * c];
    let mut gp = vec![0.0; cache.lo.len()];
    for i in 0..cache.lo.len() {
        let (lo, hi, w) = (cache.lo[i], cache.hi[i], cache.w[i]);
        let gi = &g[i * c..(i + 1) * c];
        let mut slope = 0.0;
        for k in 0..c {
            gf[lo * c + k] += (1.0 - w) * gi[k];
            gf[hi * c + k] += w * gi[k];
            slope += gi[k] * (feat[hi * c + k] - feat[lo * c + k]);
        }
        if cache.active[i] {
            gp[i] = slope * cache.scale;
        }
    }
    (gf, gp)
}

/// Reads the level-`level` features at normalized time `p`.
pub fn bilinear_sample(p: f64, level_feat: &Tensor, level: &LevelGrid) -> Result<Vec<f64>> {
    let (rows, c) = level_feat.dims2();
    if rows == 0 {
        return Err(Error::Dimension("cannot sample an empty level".into()));
    }
    let valid = level.valid.min(rows);
    Ok(bilinear_forward(level_feat.data(), c, valid, &[p], level.scale).0)
}

// ------------------------------------------------------------------ offsets

/// Per-token `L×N_s` normalized temporal displacements.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    pub levels: usize,
    pub per_level: usize,
    pub values: Vec<f64>,
}

impl OffsetField {
    pub fn at(&self, level: usize, s: usize) -> f64 {
        self.values[level * self.per_level + s]
    }
}

pub fn zero_head(b: &mut Builder, name: &str, d_in: usize, d_out: usize) -> Result<Mlp> {
    Ok(Mlp { layers: vec![(b.linear_zero(name, d_in, d_out)?, Activation::Identity)] })
}

/// Offsets of one token feature through `head` (no output activation).
pub fn predict_offsets(store: &ParamStore, head: &Mlp, f: &[f64], levels: usize, per_level: usize) -> Result<OffsetField> {
    if head.d_out() != levels * per_level {
        return Err(Error::Dimension(format!(
            "offset head emits {} values, need {levels}×{per_level}",
            head.d_out()
        )));
    }
    let mut cx = Cx::eval(store);
    let x = cx.constant(Tensor::from_vec([1, f.len()], f.to_vec()));
    let o = head.forward(&mut cx, x)?;
    let values = cx.g.value(o).data().to_vec();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("offsets are not finite".into()));
    }
    Ok(OffsetField { levels, per_level, values })
}

/// Splits a flattened level-major `N×C` token matrix into per-level views.
pub fn split_levels(cx: &mut Cx, tokens: Var, grid: &ReferenceGrid) -> Result<Vec<Var>> {
    let starts = grid.level_starts();
    grid.levels
        .iter()
        .zip(starts)
        .map(|(l, s)| cx.g.gather_rows(tokens, (s..s + l.len).collect::<Vec<_>>()))
        .collect()
}

/// Samples every level at the positions in `pos: N × (L·K)` (level-major
/// columns) and returns `N × (L·K·C)` features in the same column order.
pub fn sample_levels(cx: &mut Cx, pos: Var, levels: &[Var], grid: &ReferenceGrid, k: usize) -> Result<Var> {
    let n = cx.g.value(pos).rows();
    let mut parts = Vec::with_capacity(levels.len());
    for (l, (&feat, lg)) in levels.iter().zip(&grid.levels).enumerate() {
        let c = cx.g.value(feat).cols();
        let cols = cx.g.slice_cols(pos, l * k, k)?;
        let flat = cx.g.reshape(cols, &[n * k])?;
        let s = cx.g.bilinear(feat, flat, lg.scale, lg.valid)?;
        parts.push(cx.g.reshape(s, &[n, k * c])?);
    }
    cx.g.concat_cols(&parts)
}

/// Deformable self-scan of every flattened token.
#[derive(Clone, Debug)]
pub struct DeformableSampler {
    /// `C → L·N_s` offsets, zero-initialized.
    pub offset_head: Mlp,
    /// `L·N_s·C → 2C → C` aggregation.
    pub aggregate: Mlp,
    pub levels: usize,
    pub per_level: usize,
}

impl DeformableSampler {
    pub fn new(b: &mut Builder, name: &str, c: usize, levels: usize, per_level: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                offset_head: zero_head(b, "offsets", c, levels * per_level)?,
                aggregate: b.mlp("aggregate", &[levels * per_level * c, 2 * c, c], Activation::Relu)?,
                levels,
                per_level,
            })
        })
    }

    /// Sampled (pre-aggregation) features `N × L·N_s·C` and the offsets used.
    pub fn sample(&self, cx: &mut Cx, tokens: Var, grid: &ReferenceGrid) -> Result<(Var, Var)> {
        if grid.num_levels() != self.levels {
            return Err(Error::Dimension(format!(
                "sampler built for {} levels, grid has {}",
                self.levels,
                grid.num_levels()
            )));
        }
        let n = cx.g.value(tokens).rows();
        if n != grid.total_tokens() {
            return Err(Error::Dimension(format!("{n} tokens for a {}-token grid", grid.total_tokens())));
        }
        let width = self.levels * self.per_level;
        let offsets = self.offset_head.forward(cx, tokens)?;
        let refs: Vec<f64> = grid.flat_points().iter().flat_map(|&p| std::iter::repeat_n(p, width)).collect();
        let refs = cx.constant(Tensor::from_vec([n, width], refs));
        let pos = cx.g.add(offsets, refs)?;
        let levels = split_levels(cx, tokens, grid)?;
        let feats = sample_levels(cx, pos, &levels, grid, self.per_level)?;
        Ok((feats, offsets))
    }

    pub fn forward(&self, cx: &mut Cx, tokens: Var, grid: &ReferenceGrid) -> Result<Var> {
        let (feats, _) = self.sample(cx, tokens, grid)?;
        self.aggregate.forward(cx, feats)
    }
}

/// Outputs of one self-scan block.
pub struct BlockOutput {
    pub out: Var,
    /// Relay states and stripped sequence after the scan, when relays are on.
    pub relay: Option<RelayOutputs>,
}

pub struct RelayOutputs {
    pub relay_out: Var,
    pub seq_out: Var,
    pub map: InsertionMap,
}

/// Pre-norm self-scan block: optional deformable resampling, optional relay
/// insertion, forward–backward scan, residual, then a residual FFN.
#[derive(Clone, Debug)]
pub struct DsSsmBlock {
    pub norm: LayerNorm,
    pub sampler: Option<DeformableSampler>,
    pub fb: FbSsm,
    pub ffn: Ffn,
}

impl DsSsmBlock {
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
                sampler: if deformable { Some(DeformableSampler::new(b, "sampler", c, levels, per_level)?) } else { None },
                fb: FbSsm::new(b, "fb", c, state_dim)?,
                ffn: b.ffn("ffn", c, 4 * c)?,
            })
        })
    }

    /// The sequence the scans run over: normalized, optionally resampled,
    /// with relay tokens inserted when a non-empty bank is given.
    pub fn scan_input(
        &self,
        cx: &mut Cx,
        x: Var,
        grid: &ReferenceGrid,
        bank: Option<&RelayBank>,
    ) -> Result<(Var, Option<InsertionMap>)> {
        let z = self.norm.forward(cx, x)?;
        let seq = match &self.sampler {
            Some(s) => s.forward(cx, z, grid)?,
            None => z,
        };
        match bank.filter(|b| b.count > 0) {
            Some(bank) => {
                let map = relay::insertion_map(cx.g.value(seq).rows(), bank.count);
                let r = cx.p(bank.tokens);
                Ok((relay::insert(cx, seq, r, &map)?, Some(map)))
            }
            None => Ok((seq, None)),
        }
    }

    pub fn forward(&self, cx: &mut Cx, x: Var, grid: &ReferenceGrid, bank: Option<&RelayBank>) -> Result<BlockOutput> {
        let (seq, map) = self.scan_input(cx, x, grid, bank)?;
        let y_all = self.fb.forward(cx, seq)?;
        let (y, relay) = match map {
            Some(map) => {
                let (seq_out, relay_out) = relay::strip(cx, y_all, &map)?;
                let relay_out = relay_out.expect("relay count > 0");
                (seq_out, Some(RelayOutputs { relay_out, seq_out, map }))
            }
            None => (y_all, None),
        };
        let x1 = cx.g.add(x, y)?;
        let out = self.ffn.forward(cx, x1)?;
        Ok(BlockOutput { out, relay })
    }
}

/// Deterministic generator for tests and fixtures.
pub fn fixture_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::relative_error;

    #[test]
    fn reference_points_match_direct_evaluation() {
        let g = reference_points(200, 3, 1.0, 25.0, 8.0).unwrap();
        assert!((g.levels[0].points[0] - 0.0025).abs() < 1e-15);
        assert!((g.levels[0].points[199] - 0.9975).abs() < 1e-15);
        assert!((g.levels[1].points[0] - 0.005).abs() < 1e-15);
        assert_eq!(g.levels[1].len, 100);
        for l in &g.levels {
            assert!(l.points.windows(2).all(|w| w[0] < w[1]));
            assert!(l.points.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn empty_level_is_a_config_error() {
        assert!(matches!(reference_points(2, 3, 1.0, 25.0, 1.0), Err(Error::Config(_))));
    }

    fn level(rows: &[f64]) -> (Tensor, LevelGrid) {
        let n = rows.len();
        let g = reference_points(n, 1, 1.0, 1.0, n as f64).unwrap();
        (Tensor::from_vec([n, 1], rows.to_vec()), g.levels[0].clone())
    }

    #[test]
    fn grid_points_retrieve_exactly() {
        let vals = [0.1f64, 0.7, -0.3, 1.0 / 3.0, 0.9];
        let (f, lg) = level(&vals);
        for (n, &v) in vals.iter().enumerate() {
            let got = bilinear_sample(lg.points[n], &f, &lg).unwrap();
            assert_eq!(got[0].to_bits(), v.to_bits());
        }
    }

    #[test]
    fn midpoint_and_clamp() {
        let (f, lg) = level(&[1.0, 3.0, 7.0]);
        let mid = 0.5 * (lg.points[1] + lg.points[2]);
        assert!((bilinear_sample(mid, &f, &lg).unwrap()[0] - 5.0).abs() < 1e-12);
        assert_eq!(bilinear_sample(-0.3, &f, &lg).unwrap()[0], 1.0);
        assert_eq!(bilinear_sample(4.0, &f, &lg).unwrap()[0], 7.0);
    }

    #[test]
    fn sampling_slope_matches_finite_differences() {
        let (f, lg) = level(&[0.2, -1.0, 2.5, 0.0]);
        for p in [0.2, 0.33, 0.51, 0.7] {
            let h = 1e-6;
            let fd = (bilinear_sample(p + h, &f, &lg).unwrap()[0] - bilinear_sample(p - h, &f, &lg).unwrap()[0]) / (2.0 * h);
            let store = ParamStore::new();
            let mut cx = Cx::eval(&store);
            let fv = cx.constant(f.clone());
            let pv = cx.g.param(Tensor::from_vec([1], vec![p]));
            let s = cx.g.bilinear(fv, pv, lg.scale, lg.valid).unwrap();
            let l = cx.g.sum(s);
            cx.g.backward(l).unwrap();
            let analytic = cx.g.grad(pv).unwrap()[0];
            assert!(relative_error(analytic, fd) < 1e-6, "p={p}: {analytic} vs {fd}");
            assert!(analytic != 0.0);
        }
    }

    #[test]
    fn padded_levels_clamp_to_valid_rows() {
        let g = ReferenceGrid::padded(8, 6, 2, 1.0, 1.0, 6.0).unwrap();
        assert_eq!((g.levels[0].len, g.levels[0].valid), (8, 6));
        assert_eq!((g.levels[1].len, g.levels[1].valid), (4, 3));
        let f = Tensor::from_vec([8, 1], (0..8).map(f64::from).collect());
        assert_eq!(bilinear_sample(0.99, &f, &g.levels[0]).unwrap()[0], 5.0);
    }

    #[test]
    fn zero_head_gives_zero_offsets_and_bias_head_is_shared() {
        let mut store = ParamStore::new();
        let mut rng = fixture_rng(0);
        let head = zero_head(&mut Builder::new(&mut store, &mut rng), "h", 4, 6).unwrap();
        let o = predict_offsets(&store, &head, &[0.3, 0.1, -0.2, 0.5], 2, 3).unwrap();
        assert!(o.values.iter().all(|&v| v == 0.0));
        store.set(head.last().b, vec![0.1, 0.2, 0.3, -0.1, -0.2, -0.3]).unwrap();
        let a = predict_offsets(&store, &head, &[0.3, 0.1, -0.2, 0.5], 2, 3).unwrap();
        let b = predict_offsets(&store, &head, &[-1.0, 2.0, 0.0, 0.0], 2, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.at(1, 2), -0.3);
    }
}
