//! Runtime-scaling measurements of the scan kernel against dense attention.

use std::hint::black_box;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ssm::{scan_forward, ScanShape};

pub const BENCH_CHANNELS: usize = 8;
pub const BENCH_STATE: usize = 8;
pub const BENCH_HEAD_DIM: usize = 8;
pub const REPEATS: usize = 5;
/// Each timed sample loops the kernel until at least this much time passes.
const MIN_SAMPLE: Duration = Duration::from_millis(2);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchKind {
    SsmScan,
    DenseAttention,
}

impl BenchKind {
    pub fn name(self) -> &'static str {
        match self {
            BenchKind::SsmScan => "ssm_scan",
            BenchKind::DenseAttention => "dense_attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ssm_scan" => Ok(BenchKind::SsmScan),
            "dense_attention" => Ok(BenchKind::DenseAttention),
            _ => Err(Error::Config(format!("unknown benchmark `{s}` (ssm_scan, dense_attention)"))),
        }
    }
}

/// Inputs of the scan kernel at length `t`.
pub struct ScanFixture {
    shape: ScanShape,
    x: Vec<f64>,
    delta: Vec<f64>,
    a_log: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl ScanFixture {
    pub fn new(t: usize, seed: u64) -> Self {
        let (c, s) = (BENCH_CHANNELS, BENCH_STATE);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        Self {
            shape: ScanShape { t, c, s, seg_len: t, reverse: false },
            x: v(t * c, -1.0, 1.0),
            delta: v(t * c, 0.01, 0.5),
            a_log: v(c * s, -1.0, 1.0),
            b: v(t * s, -1.0, 1.0),
            c: v(t * s, -1.0, 1.0),
        }
    }

    pub fn run(&self) -> f64 {
        let (y, _) = scan_forward(&self.shape, &self.x, &self.delta, &self.a_log, &self.b, &self.c);
        y[y.len() - 1]
    }
}

/// Single-head softmax attention over `t` tokens, computed one query at a
/// time with a running max so memory stays `O(t·d)`.
pub struct AttentionFixture {
    t: usize,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

impl AttentionFixture {
    pub fn new(t: usize, seed: u64) -> Self {
        let d = BENCH_HEAD_DIM;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        Self { t, q: v(t * d), k: v(t * d), v: v(t * d) }
    }

    pub fn run(&self) -> f64 {
        let d = BENCH_HEAD_DIM;
        let scale = 1.0 / (d as f64).sqrt();
        let mut last = 0.0;
        for i in 0..self.t {
            let q = &self.q[i * d..(i + 1) * d];
            let (mut m, mut z) = (f64::NEG_INFINITY, 0.0);
            let mut acc = [0.0; BENCH_HEAD_DIM];
            for j in 0..self.t {
                let k = &self.k[j * d..(j + 1) * d];
                let s = scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
                if s > m {
                    let r = (m - s).exp();
                    z *= r;
                    acc.iter_mut().for_each(|a| *a *= r);
                    m = s;
                }
                let w = (s - m).exp();
                z += w;
                for (a, v) in acc.iter_mut().zip(&self.v[j * d..(j + 1) * d]) {
                    *a += w * v;
                }
            }
            last = acc[0] / z;
        }
        last
    }
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..16 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    best
}

/// Median-of-`REPEATS` seconds per call of `f`.
pub fn time_median(mut f: impl FnMut() -> f64) -> (f64, usize) {
    let t0 = Instant::now();
    black_box(f());
    let once = t0.elapsed().max(Duration::from_nanos(1));
    let inner = (MIN_SAMPLE.as_secs_f64() / once.as_secs_f64()).ceil().max(1.0) as usize;
    let mut samples: Vec<f64> = (0..REPEATS)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..inner {
                black_box(f());
            }
            t.elapsed().as_secs_f64() / inner as f64
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    (samples[REPEATS / 2], inner)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config(format!("slope needs at least two paired points, got {} / {}", xs.len(), ys.len())));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::Numeric("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("lengths must not all be equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchPoint {
    pub length: usize,
    pub seconds: f64,
    /// Kernel calls per timed sample.
    pub inner: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub kind: BenchKind,
    pub points: Vec<BenchPoint>,
    pub slope: f64,
}

pub fn check_lengths(lengths: &[usize]) -> Result<()> {
    if lengths.len() < 4 {
        return Err(Error::Config(format!("need at least 4 lengths for a slope, got {}", lengths.len())));
    }
    if lengths[0] == 0 || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("lengths must be positive and strictly ascending".into()));
    }
    Ok(())
}

pub fn run(kind: BenchKind, lengths: &[usize], seed: u64) -> Result<BenchReport> {
    check_lengths(lengths)?;
    let resolution = timer_resolution().as_secs_f64();
    let mut points = Vec::with_capacity(lengths.len());
    for &t in lengths {
        let (seconds, inner) = match kind {
            BenchKind::SsmScan => {
                let f = ScanFixture::new(t, seed);
                time_median(|| f.run())
            }
            BenchKind::DenseAttention => {
                let f = AttentionFixture::new(t, seed);
                time_median(|| f.run())
            }
        };
        if points.is_empty() && seconds * (inner as f64) < 100.0 * resolution {
            return Err(Error::Config(format!(
                "timer resolution {resolution:.1e}s is too coarse for length {t}; raise the minimum length"
            )));
        }
        log::debug!("{} T={t}: {seconds:.3e}s ({inner} calls/sample)", kind.name());
        points.push(BenchPoint { length: t, seconds, inner });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.length as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.seconds).collect();
    Ok(BenchReport { kind, slope: loglog_slope(&xs, &ys)?, points })
}

/// `kind,length,median_seconds` rows.
pub fn write_csv<W: Write>(reports: &[BenchReport], mut w: W) -> Result<()> {
    writeln!(w, "kind,length,median_seconds")?;
    for r in reports {
        for p in &r.points {
            writeln!(w, "{},{},{:e}", r.kind.name(), p.length, p.seconds)?;
        }
    }
    Ok(())
}

pub fn summary(reports: &[BenchReport]) -> String {
    reports
        .iter()
        .map(|r| {
            let (lo, hi) = (r.points[0].length, r.points[r.points.len() - 1].length);
            format!("{}: log-log slope {:.3} over T={lo}..{hi}", r.kind.name(), r.slope)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// `2^lo ..= 2^hi`.
pub fn powers_of_two(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|p| 1usize << p).collect()
}
