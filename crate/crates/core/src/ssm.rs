//! Diagonal selective state-space scan.
//!
//! Per channel `c` and state `s`:
//!
//! ```text
//! ā_t = exp(−Δ_t[c] · exp(a_log[c,s]))
//! h_t = ā_t · h_{t−1} + Δ_t[c] · B_t[s] · x_t[c]
//! y_t[c] = Σ_s C_t[s] · h_t[c,s]
//! ```
//!
//! with `h_0 = 0`. Input discretization is first order (`b̄ = Δ·B`).

use std::io::Write;

use crate::error::{Error, Result};
use crate::graph::{softplus, Var};
use crate::nn::{Builder, Cx, Linear, ParamStore};
use crate::tensor::Tensor;

/// Lower bound on the step size so that `ā < 1` strictly.
pub const MIN_DELTA: f64 = 1e-4;
pub const DEFAULT_STATE_DIM: usize = 8;
/// Largest sequence for which the dense interaction matrix is materialized.
pub const HIDDEN_ATTENTION_LIMIT: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

// ------------------------------------------------------------------ kernels

#[derive(Clone, Copy, Debug)]
pub(crate) struct ScanShape {
    pub t: usize,
    pub c: usize,
    pub s: usize,
    pub seg_len: usize,
    pub reverse: bool,
}

impl ScanShape {
    fn order(&self, seg: usize, k: usize) -> usize {
        if self.reverse {
            seg * self.seg_len + self.seg_len - 1 - k
        } else {
            seg * self.seg_len + k
        }
    }
}

pub(crate) struct ScanCache {
    pub shape: ScanShape,
    a: Vec<f64>,
    abar: Vec<f64>,
    h: Vec<f64>,
}

pub(crate) struct ScanGrads {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a_log: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

pub(crate) fn scan_forward(
    sh: &ScanShape,
    x: &[f64],
    delta: &[f64],
    a_log: &[f64],
    b: &[f64],
    cg: &[f64],
) -> (Vec<f64>, ScanCache) {
    let (c, s) = (sh.c, sh.s);
    let cs = c * s;
    let a: Vec<f64> = a_log.iter().map(|v| v.exp()).collect();
    let mut abar = vec![0.0; sh.t * cs];
    let mut h = vec![0.0; sh.t * cs];
    let mut y = vec![0.0; sh.t * c];
    for seg in 0..sh.t / sh.seg_len {
        let mut prev: Option<usize> = None;
        for k in 0..sh.seg_len {
            let ti = sh.order(seg, k);
            for ch in 0..c {
                let d = delta[ti * c + ch];
                let xv = x[ti * c + ch];
                let mut acc = 0.0;
                for st in 0..s {
                    let j = ch * s + st;
                    let ab = (-d * a[j]).exp();
                    let hp = prev.map_or(0.0, |p| h[p * cs + j]);
                    let hv = ab * hp + d * b[ti * s + st] * xv;
                    abar[ti * cs + j] = ab;
                    h[ti * cs + j] = hv;
                    acc += cg[ti * s + st] * hv;
                }
                y[ti * c + ch] = acc;
            }
            prev = Some(ti);
        }
    }
    (y, ScanCache { shape: *sh, a, abar, h })
}

pub(crate) fn scan_backward(
    sh: &ScanShape,
    x: &[f64],
    delta: &[f64],
    b: &[f64],
    cg: &[f64],
    cache: &ScanCache,
    gy: &[f64],
) -> ScanGrads {
    let (c, s) = (sh.c, sh.s);
    let cs = c * s;
    let mut gr = ScanGrads {
        x: vec![0.0; sh.t * c],
        delta: vec![0.0; sh.t * c],
        a_log: vec![0.0; cs],
        b: vec![0.0; sh.t * s],
        c: vec![0.0; sh.t * s],
    };
    let mut ga = vec![0.0; cs];
    let mut carry = vec![0.0; cs];
    for seg in 0..sh.t / sh.seg_len {
        carry.iter_mut().for_each(|v| *v = 0.0);
        for k in (0..sh.seg_len).rev() {
            let ti = sh.order(seg, k);
            let prev = (k > 0).then(|| sh.order(seg, k - 1));
            for ch in 0..c {
                let d = delta[ti * c + ch];
                let xv = x[ti * c + ch];
                let gyv = gy[ti * c + ch];
                let mut gx = 0.0;
                let mut gd = 0.0;
                for st in 0..s {
                    let j = ch * s + st;
                    let hv = cache.h[ti * cs + j];
                    let ab = cache.abar[ti * cs + j];
                    let gh = cg[ti * s + st] * gyv + carry[j];
                    gr.c[ti * s + st] += gyv * hv;
                    let hp = prev.map_or(0.0, |p| cache.h[p * cs + j]);
                    let gab = gh * hp * ab;
                    gd -= gab * cache.a[j];
                    ga[j] -= gab * d;
                    let bv = b[ti * s + st];
                    gx += gh * d * bv;
                    gd += gh * bv * xv;
                    gr.b[ti * s + st] += gh * d * xv;
                    carry[j] = ab * gh;
                }
                gr.x[ti * c + ch] += gx;
                gr.delta[ti * c + ch] += gd;
            }
        }
    }
    for j in 0..cs {
        gr.a_log[j] = ga[j] * cache.a[j];
    }
    gr
}

// --------------------------------------------------------------- parameters

/// Learnable parameters of one scan direction.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub a_log: crate::nn::ParamId,
    pub delta_proj: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub channels: usize,
    pub state_dim: usize,
}

/// Input-dependent gates for a whole sequence.
pub struct Gates {
    pub delta: Var,
    pub b: Var,
    pub c: Var,
}

impl SsmParams {
    /// `a_log[c, s] = ln(s + 1)` so the state dimensions span a range of decay
    /// rates.
    pub fn new(b: &mut Builder, name: &str, channels: usize, state_dim: usize) -> Result<Self> {
        b.scoped(name, |b| {
            let a: Vec<f64> = (0..channels)
                .flat_map(|_| (1..=state_dim).map(|s| (s as f64).ln()))
                .collect();
            let a_log = b.tensor("a_log", Tensor::from_vec([channels, state_dim], a))?;
            Ok(Self {
                a_log,
                delta_proj: b.linear("delta", channels, channels)?,
                b_proj: b.linear("b", channels, state_dim)?,
                c_proj: b.linear("c", channels, state_dim)?,
                channels,
                state_dim,
            })
        })
    }

    pub fn gates(&self, cx: &mut Cx, x: Var) -> Result<Gates> {
        let z = self.delta_proj.forward(cx, x)?;
        let sp = cx.g.softplus(z);
        let delta = cx.g.clamp_min(sp, MIN_DELTA);
        let b = self.b_proj.forward(cx, x)?;
        let c = self.c_proj.forward(cx, x)?;
        Ok(Gates { delta, b, c })
    }

    /// Scans independent segments of `seg_len` rows of `x` with shared
    /// parameters.
    pub fn scan_segments(&self, cx: &mut Cx, x: Var, seg_len: usize, dir: Direction) -> Result<Var> {
        let cols = cx.g.shape(x).last().copied().unwrap_or(0);
        if cols != self.channels {
            return Err(Error::Dimension(format!(
                "scan over {cols} channels with parameters for {}",
                self.channels
            )));
        }
        let gates = self.gates(cx, x)?;
        let a_log = cx.p(self.a_log);
        cx.g.selective_scan(x, gates.delta, a_log, gates.b, gates.c, seg_len, dir == Direction::Backward)
    }

    pub fn scan(&self, cx: &mut Cx, x: Var, dir: Direction) -> Result<Var> {
        let t = cx.g.value(x).rows();
        if t == 0 {
            return Err(Error::Contract("scan needs at least one token".into()));
        }
        self.scan_segments(cx, x, t, dir)
    }

    /// Evaluates the gates on `x` and returns the discretized recurrence.
    pub fn discretize(&self, store: &ParamStore, x: &Tensor) -> Result<Discretized> {
        let mut cx = Cx::eval(store);
        let xv = cx.constant(x.clone());
        let gates = self.gates(&mut cx, xv)?;
        let a_log = store.get(self.a_log).data();
        let (t, c) = x.dims2();
        let s = self.state_dim;
        let delta = cx.g.value(gates.delta).data();
        let bg = cx.g.value(gates.b).data();
        let cgate = cx.g.value(gates.c).data().to_vec();
        let mut steps = Discretized::zeros(t, c, s);
        for ti in 0..t {
            let step = discretize(
                a_log,
                &delta[ti * c..(ti + 1) * c],
                &bg[ti * s..(ti + 1) * s],
                &cgate[ti * s..(ti + 1) * s],
            )?;
            steps.set_step(ti, &step);
        }
        Ok(steps)
    }
}

// ------------------------------------------------------------ discretization

/// One discretized step: `abar`, `bbar` are `C×S`, `c` is `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub abar: Vec<f64>,
    pub bbar: Vec<f64>,
    pub c: Vec<f64>,
}

/// `ā = exp(−Δ·exp(a_log))`, `b̄ = Δ·B`, `c = C`.
pub fn discretize(a_log: &[f64], delta: &[f64], b: &[f64], c: &[f64]) -> Result<Step> {
    let ch = delta.len();
    let s = b.len();
    if a_log.len() != ch * s || c.len() != s {
        return Err(Error::Dimension(format!(
            "a_log has {} entries for {ch} channels × {s} states",
            a_log.len()
        )));
    }
    if let Some(d) = delta.iter().find(|d| !d.is_finite()) {
        return Err(Error::Numeric(format!("non-finite step size {d}")));
    }
    let mut abar = vec![0.0; ch * s];
    let mut bbar = vec![0.0; ch * s];
    for i in 0..ch {
        for j in 0..s {
            abar[i * s + j] = (-delta[i] * a_log[i * s + j].exp()).exp();
            bbar[i * s + j] = delta[i] * b[j];
        }
    }
    Ok(Step { abar, bbar, c: c.to_vec() })
}

/// Step-size map used by the gates: `max(softplus(z), MIN_DELTA)`.
pub fn step_size(z: f64) -> f64 {
    softplus(z).max(MIN_DELTA)
}

/// A discretized recurrence over a whole sequence (`T×C×S` decays and input
/// gains, `T×S` output gates).
#[derive(Clone, Debug, PartialEq)]
pub struct Discretized {
    pub t: usize,
    pub c: usize,
    pub s: usize,
    pub abar: Vec<f64>,
    pub bbar: Vec<f64>,
    pub cgate: Vec<f64>,
}

impl Discretized {
    pub fn zeros(t: usize, c: usize, s: usize) -> Self {
        Self { t, c, s, abar: vec![0.0; t * c * s], bbar: vec![0.0; t * c * s], cgate: vec![0.0; t * s] }
    }

    /// Every step uses the same constants.
    pub fn constant(t: usize, c: usize, s: usize, abar: f64, bbar: f64, cgate: f64) -> Self {
        Self {
            t,
            c,
            s,
            abar: vec![abar; t * c * s],
            bbar: vec![bbar; t * c * s],
            cgate: vec![cgate; t * s],
        }
    }

    pub fn set_step(&mut self, t: usize, step: &Step) {
        let cs = self.c * self.s;
        self.abar[t * cs..(t + 1) * cs].copy_from_slice(&step.abar);
        self.bbar[t * cs..(t + 1) * cs].copy_from_slice(&step.bbar);
        self.cgate[t * self.s..(t + 1) * self.s].copy_from_slice(&step.c);
    }

    /// Reverses the time axis.
    pub fn reversed(&self) -> Self {
        let cs = self.c * self.s;
        let mut out = self.clone();
        for t in 0..self.t {
            let src = self.t - 1 - t;
            out.abar[t * cs..(t + 1) * cs].copy_from_slice(&self.abar[src * cs..(src + 1) * cs]);
            out.bbar[t * cs..(t + 1) * cs].copy_from_slice(&self.bbar[src * cs..(src + 1) * cs]);
            out.cgate[t * self.s..(t + 1) * self.s]
                .copy_from_slice(&self.cgate[src * self.s..(src + 1) * self.s]);
        }
        out
    }
}

/// Runs the recurrence with explicit discretized coefficients.
pub fn scan_discretized(x: &Tensor, d: &Discretized, dir: Direction) -> Result<Tensor> {
    let (t, c) = x.dims2();
    if t != d.t || c != d.c {
        return Err(Error::Dimension(format!("input {t}×{c} vs coefficients {}×{}", d.t, d.c)));
    }
    let (s, cs) = (d.s, d.c * d.s);
    let mut h = vec![0.0; cs];
    let mut y = vec![0.0; t * c];
    let order: Vec<usize> = match dir {
        Direction::Forward => (0..t).collect(),
        Direction::Backward => (0..t).rev().collect(),
    };
    for ti in order {
        for ch in 0..c {
            let mut acc = 0.0;
            for st in 0..s {
                let j = ch * s + st;
                h[j] = d.abar[ti * cs + j] * h[j] + d.bbar[ti * cs + j] * x.data()[ti * c + ch];
                acc += d.cgate[ti * s + st] * h[j];
            }
            y[ti * c + ch] = acc;
        }
    }
    let out = Tensor::from_vec([t, c], y);
    if !out.is_finite() {
        return Err(Error::Numeric("scan overflowed".into()));
    }
    Ok(out)
}

/// Selective scan of a value tensor with stored parameters (no gradients).
pub fn selective_scan(store: &ParamStore, params: &SsmParams, x: &Tensor, dir: Direction) -> Result<Tensor> {
    let mut cx = Cx::eval(store);
    let xv = cx.constant(x.clone());
    let y = params.scan(&mut cx, xv, dir)?;
    Ok(cx.g.value(y).clone())
}

// -------------------------------------------------------------------- FB-SSM

/// Forward and backward scans summed, then linearly projected.
#[derive(Clone, Debug)]
pub struct FbSsm {
    pub fwd: SsmParams,
    pub bwd: SsmParams,
    pub proj: Linear,
}

impl FbSsm {
    pub fn new(b: &mut Builder, name: &str, channels: usize, state_dim: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                fwd: SsmParams::new(b, "fwd", channels, state_dim)?,
                bwd: SsmParams::new(b, "bwd", channels, state_dim)?,
                proj: b.linear("proj", channels, channels)?,
            })
        })
    }

    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        if self.fwd.channels != self.bwd.channels {
            return Err(Error::Dimension(format!(
                "forward scan has {} channels, backward {}",
                self.fwd.channels, self.bwd.channels
            )));
        }
        let f = self.fwd.scan(cx, x, Direction::Forward)?;
        let b = self.bwd.scan(cx, x, Direction::Backward)?;
        let s = cx.g.add(f, b)?;
        self.proj.forward(cx, s)
    }
}

// ---------------------------------------------------------- hidden attention

/// Implicit token-to-token interaction weights of a forward scan.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenAttention {
    pub t: usize,
    /// Row-major `T×T`, channel-averaged.
    pub matrix: Vec<f64>,
}

impl HiddenAttention {
    pub fn at(&self, t: usize, s: usize) -> f64 {
        self.matrix[t * self.t + s]
    }

    /// Sum of `|α_{t,s}|` over pairs farther apart than `distance`.
    pub fn off_band_mass(&self, distance: f64) -> f64 {
        let mut m = 0.0;
        for t in 0..self.t {
            for s in 0..self.t {
                if (t as f64 - s as f64).abs() > distance {
                    m += self.at(t, s).abs();
                }
            }
        }
        m
    }

    /// Keeps the rows and columns listed in `keep`, in order.
    pub fn restrict(&self, keep: &[usize]) -> Self {
        let n = keep.len();
        let mut matrix = vec![0.0; n * n];
        for (i, &t) in keep.iter().enumerate() {
            for (j, &s) in keep.iter().enumerate() {
                matrix[i * n + j] = self.at(t, s);
            }
        }
        Self { t: n, matrix }
    }

    /// CSV with header `t,s,alpha`, one row per nonzero entry.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,s,alpha")?;
        for t in 0..self.t {
            for s in 0..self.t {
                let a = self.at(t, s);
                if a != 0.0 {
                    writeln!(w, "{t},{s},{a:e}")?;
                }
            }
        }
        Ok(())
    }
}

fn check_capacity(t: usize) -> Result<()> {
    if t > HIDDEN_ATTENTION_LIMIT {
        return Err(Error::Capacity(format!(
            "hidden attention over {t} tokens exceeds the {HIDDEN_ATTENTION_LIMIT}-token limit; truncate the sequence"
        )));
    }
    Ok(())
}

/// Adds `k · α^ch` to the row-major `T×T` buffer `out`, where
/// `α^ch_{t,s} = Σ_j c_t[j] (Π_{i=s+1}^{t} ā_i[ch,j]) b̄_s[ch,j]` for `s ≤ t`.
fn accumulate_channel(d: &Discretized, ch: usize, k: f64, out: &mut [f64]) {
    let (t, s) = (d.t, d.s);
    let cs = d.c * s;
    let mut prod = vec![0.0; s];
    for src in 0..t {
        for st in 0..s {
            prod[st] = d.bbar[src * cs + ch * s + st];
        }
        for tgt in src..t {
            if tgt > src {
                for st in 0..s {
                    prod[st] *= d.abar[tgt * cs + ch * s + st];
                }
            }
            let v: f64 = (0..s).map(|st| d.cgate[tgt * s + st] * prod[st]).sum();
            out[tgt * t + src] += k * v;
        }
    }
}

/// Per-channel interaction matrices, returned as `C` row-major `T×T` blocks.
pub fn hidden_attention_per_channel(d: &Discretized) -> Result<Vec<Vec<f64>>> {
    check_capacity(d.t)?;
    Ok((0..d.c)
        .map(|ch| {
            let mut m = vec![0.0; d.t * d.t];
            accumulate_channel(d, ch, 1.0, &mut m);
            m
        })
        .collect())
}

/// Channel-averaged interaction matrix.
pub fn hidden_attention_from(d: &Discretized) -> Result<HiddenAttention> {
    check_capacity(d.t)?;
    let mut matrix = vec![0.0; d.t * d.t];
    let inv = 1.0 / d.c as f64;
    for ch in 0..d.c {
        accumulate_channel(d, ch, inv, &mut matrix);
    }
    Ok(HiddenAttention { t: d.t, matrix })
}

/// Hidden attention of the forward scan of `params` over `x`.
pub fn hidden_attention(store: &ParamStore, params: &SsmParams, x: &Tensor) -> Result<HiddenAttention> {
    check_capacity(x.rows())?;
    hidden_attention_from(&params.discretize(store, x)?)
}

/// Interaction magnitude `ā^k` between tokens `k` steps apart.
pub fn decay_profile(abar: f64, k: u32) -> Result<f64> {
    if !(abar > 0.0 && abar < 1.0) {
        return Err(Error::Contract(format!("decay {abar} outside (0, 1)")));
    }
    Ok(abar.powi(k as i32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(vals: &[f64]) -> Tensor {
        Tensor::from_vec([vals.len(), 1], vals.to_vec())
    }

    #[test]
    fn discretize_limits() {
        let tiny = discretize(&[0.0], &[1e-12], &[1.0], &[1.0]).unwrap();
        assert!((tiny.abar[0] - 1.0).abs() < 1e-11 && tiny.bbar[0] < 1e-11);
        let mid = discretize(&[0.0], &[0.1053605], &[1.0], &[1.0]).unwrap();
        assert!((mid.abar[0] - 0.9).abs() < 1e-7);
        let big = discretize(&[0.0], &[1e3], &[1.0], &[1.0]).unwrap();
        assert!(big.abar[0] < 1e-300);
        assert!(matches!(discretize(&[0.0], &[f64::NAN], &[1.0], &[1.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn memoryless_scan_is_identity_and_integrator_is_prefix_sum() {
        let x = seq(&[1.0, -2.0, 3.5, 0.25]);
        let id = Discretized::constant(4, 1, 1, 0.0, 1.0, 1.0);
        assert_eq!(scan_discretized(&x, &id, Direction::Forward).unwrap().data(), x.data());
        let integ = Discretized::constant(4, 1, 1, 1.0, 1.0, 1.0);
        let y = scan_discretized(&x, &integ, Direction::Forward).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0, 2.5, 2.75]);
        let yb = scan_discretized(&x, &integ, Direction::Backward).unwrap();
        assert_eq!(yb.data(), &[2.75, 1.75, 3.75, 0.25]);
    }

    #[test]
    fn constant_decay_hidden_attention_is_geometric() {
        let d = Discretized::constant(6, 1, 1, 0.9, 1.0, 1.0);
        let ha = hidden_attention_from(&d).unwrap();
        for t in 0..6 {
            for s in 0..6 {
                let want = if s <= t { 0.9f64.powi((t - s) as i32) } else { 0.0 };
                assert!((ha.at(t, s) - want).abs() < 1e-15);
            }
        }
        let memoryless = hidden_attention_from(&Discretized::constant(4, 1, 1, 0.0, 1.0, 1.0)).unwrap();
        for t in 0..4 {
            for s in 0..4 {
                assert_eq!(memoryless.at(t, s) != 0.0, t == s);
            }
        }
    }

    #[test]
    fn decay_profile_values() {
        assert!((decay_profile(0.9, 10).unwrap() - 0.3486784401).abs() < 1e-9);
        assert_eq!(decay_profile(0.3, 0).unwrap(), 1.0);
        let far = decay_profile(0.9, 400).unwrap();
        assert!((far / 4.97e-19 - 1.0).abs() < 0.01, "{far}");
        assert!(decay_profile(1.0, 3).is_err());
        assert!(decay_profile(0.0, 3).is_err());
    }

    #[test]
    fn capacity_limit_enforced() {
        let d = Discretized::zeros(HIDDEN_ATTENTION_LIMIT + 1, 1, 1);
        assert!(matches!(hidden_attention_from(&d), Err(Error::Capacity(_))));
    }

    fn random_ssm(c: usize, s: usize, seed: u64) -> (ParamStore, SsmParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = SsmParams::new(&mut Builder::new(&mut store, &mut rng), "ssm", c, s).unwrap();
        store.perturb(0.3, &mut rng);
        (store, p)
    }

    #[test]
    fn graph_scan_matches_discretized_scan_both_directions() {
        let (store, p) = random_ssm(3, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform([9, 3], -1.0, 1.0, &mut rng);
        let d = p.discretize(&store, &x).unwrap();
        for dir in [Direction::Forward, Direction::Backward] {
            let a = selective_scan(&store, &p, &x, dir).unwrap();
            let b = scan_discretized(&x, &d, dir).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (t, c, s) = (7, 3, 2);
        let x = Tensor::uniform([t, c], -1.0, 1.0, &mut rng);
        let delta = Tensor::uniform([t, c], 0.05, 0.8, &mut rng);
        let a_log = Tensor::uniform([c, s], -0.5, 0.5, &mut rng);
        let b = Tensor::uniform([t, s], -1.0, 1.0, &mut rng);
        let cg = Tensor::uniform([t, s], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform([t, c], -1.0, 1.0, &mut rng);
        let inputs = [x, delta, a_log, b, cg];
        for reverse in [false, true] {
            for which in 0..5 {
                let (all, w) = (inputs.clone(), w.clone());
                let err = grad_check(
                    move |g, v| {
                        let mut vars: Vec<Var> = all.iter().map(|t| g.constant(t.clone())).collect();
                        vars[which] = v;
                        let y = g.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], t, reverse)?;
                        let wv = g.constant(w.clone());
                        let p = g.mul(y, wv)?;
                        Ok(g.sum(p))
                    },
                    &inputs[which],
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "operand {which} reverse {reverse}: {err}");
            }
        }
    }

    #[test]
    fn segmented_scan_resets_state_between_segments() {
        let x = Tensor::from_vec([4, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let mut g = crate::graph::Graph::new();
        let xv = g.constant(x);
        let d = g.constant(Tensor::full([4, 1], 1.0));
        let a = g.constant(Tensor::full([1, 1], -40.0)); // ā ≈ 1
        let b = g.constant(Tensor::full([4, 1], 1.0));
        let c = g.constant(Tensor::full([4, 1], 1.0));
        let y = g.selective_scan(xv, d, a, b, c, 2, false).unwrap();
        let got = g.value(y).data();
        for (a, b) in got.iter().zip([1.0, 3.0, 3.0, 7.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fb_ssm_single_token_directions_coincide() {
        let (store, p) = random_ssm(2, 3, 4);
        let x = Tensor::from_vec([1, 2], vec![0.4, -0.9]);
        let f = selective_scan(&store, &p, &x, Direction::Forward).unwrap();
        let b = selective_scan(&store, &p, &x, Direction::Backward).unwrap();
        assert_eq!(f, b);
    }

    #[test]
    fn csv_lists_nonzero_entries() {
        let ha = hidden_attention_from(&Discretized::constant(2, 1, 1, 0.5, 1.0, 1.0)).unwrap();
        let mut buf = Vec::new();
        ha.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("t,s,alpha\n"));
    }
}
