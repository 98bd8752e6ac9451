//! Synthetic planted-forgery feature sequences, the on-disk feature format,
//! and feature-level perturbations.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dcssm::Anchor;
use crate::error::{Error, Result};
use crate::model::GroundTruth;
use crate::par::{self, Execution};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"DTFV";
pub const FEATURE_VERSION: u32 = 1;
const PLACEMENT_ATTEMPTS: usize = 100;
const NOISE_SIGMA: f64 = 0.1;
const SINUSOIDS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub samples: usize,
    pub channels: usize,
    pub length: usize,
    /// `0` gives strong, easily separable forgeries; `1` the faintest.
    pub difficulty: f64,
    /// Frames over which a forgery fades in and out.
    pub ramp: usize,
    pub seed: u64,
    pub min_duration: usize,
    pub max_duration: usize,
    pub max_segments: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            channels: 16,
            length: 200,
            difficulty: 0.5,
            ramp: 2,
            seed: 0,
            min_duration: 2,
            max_duration: 40,
            max_segments: 3,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::Config(format!("difficulty {} outside [0, 1]", self.difficulty)));
        }
        if self.channels == 0 || self.length == 0 {
            return Err(Error::Config("channels and length must be positive".into()));
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return Err(Error::Config(format!(
                "invalid duration range [{}, {}]",
                self.min_duration, self.max_duration
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Audio,
    Both,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub seed: u64,
    pub index: usize,
    pub difficulty: f64,
    pub ramp: usize,
    /// Modality of each planted segment, aligned with `gt.segments`.
    pub modalities: Vec<Modality>,
    /// Segments dropped because no free placement was found.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub video: Tensor,
    pub audio: Tensor,
    pub gt: GroundTruth,
    pub meta: SampleMeta,
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn base_signal(rng: &mut ChaCha8Rng, t: usize, c: usize, noise: &Normal<f64>) -> Tensor {
    let mut comps = Vec::with_capacity(c * SINUSOIDS);
    for _ in 0..c * SINUSOIDS {
        let amp: f64 = rng.random_range(0.0..0.25);
        let cycles: f64 = rng.random_range(0.5..8.0);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        comps.push((amp, cycles, phase));
    }
    let mut data = vec![0.0; t * c];
    for i in 0..t {
        let x = i as f64 / t as f64;
        for ch in 0..c {
            let s: f64 = comps[ch * SINUSOIDS..(ch + 1) * SINUSOIDS]
                .iter()
                .map(|&(a, f, p)| a * (std::f64::consts::TAU * f * x + p).sin())
                .sum();
            data[i * c + ch] = s + noise.sample(rng);
        }
    }
    Tensor::from_vec([t, c], data)
}

fn unit_rms(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let std = Normal::new(0.0, 1.0).expect("valid normal");
    let v: Vec<f64> = (0..c).map(|_| std.sample(rng)).collect();
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / c as f64).sqrt().max(1e-12);
    v.into_iter().map(|x| x / rms).collect()
}

/// Blend weight of frame `i` inside `[start, end)` with `ramp` fade frames.
pub fn ramp_weight(i: usize, start: usize, end: usize, ramp: usize) -> f64 {
    if i < start || i >= end {
        return 0.0;
    }
    let w = (ramp + 1) as f64;
    let up = (i - start + 1) as f64 / w;
    let down = (end - i) as f64 / w;
    up.min(down).min(1.0)
}

pub fn generate_sample(cfg: &DataConfig, index: usize) -> Sample {
    let mut rng = sample_rng(cfg.seed, index);
    let (t, c) = (cfg.length, cfg.channels);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid normal");
    let mut video = base_signal(&mut rng, t, c, &noise);
    let mut audio = base_signal(&mut rng, t, c, &noise);
    let pattern_v = unit_rms(&mut rng, c);
    let pattern_a = unit_rms(&mut rng, c);
    let magnitude = 1.5 - cfg.difficulty;
    let count = rng.random_range(0..=cfg.max_segments);
    let max_d = cfg.max_duration.min(t);
    let mut spans: Vec<(usize, usize, Modality)> = Vec::new();
    let mut skipped = 0;
    for _ in 0..count {
        let mut placed = false;
        if cfg.min_duration <= max_d {
            for _ in 0..PLACEMENT_ATTEMPTS {
                let d = rng.random_range(cfg.min_duration..=max_d);
                let s = rng.random_range(0..=t - d);
                if spans.iter().all(|&(a, b, _)| s + d <= a || s >= b) {
                    let m = match rng.random_range(0..3) {
                        0 => Modality::Video,
                        1 => Modality::Audio,
                        _ => Modality::Both,
                    };
                    spans.push((s, s + d, m));
                    placed = true;
                    break;
                }
            }
        }
        if !placed {
            skipped += 1;
            log::warn!("sample {index}: no room for another forged segment after {PLACEMENT_ATTEMPTS} attempts; skipped");
        }
    }
    spans.sort_by_key(|s| s.0);
    for &(s, e, m) in &spans {
        for i in s..e {
            let w = magnitude * ramp_weight(i, s, e, cfg.ramp);
            if matches!(m, Modality::Video | Modality::Both) {
                let row = &mut video.data_mut()[i * c..(i + 1) * c];
                row.iter_mut().zip(&pattern_v).for_each(|(x, p)| *x += w * p);
            }
            if matches!(m, Modality::Audio | Modality::Both) {
                let row = &mut audio.data_mut()[i * c..(i + 1) * c];
                row.iter_mut().zip(&pattern_a).for_each(|(x, p)| *x += w * p);
            }
        }
    }
    let segments: Vec<Anchor> = spans
        .iter()
        .map(|&(s, e, _)| Anchor {
            center: (s + e) as f64 / 2.0 / t as f64,
            duration: (e - s) as f64 / t as f64,
        })
        .collect();
    Sample {
        video,
        audio,
        gt: GroundTruth { label: !segments.is_empty(), segments },
        meta: SampleMeta {
            seed: cfg.seed,
            index,
            difficulty: cfg.difficulty,
            ramp: cfg.ramp,
            modalities: spans.iter().map(|s| s.2).collect(),
            skipped,
        },
    }
}

pub fn generate_dataset(cfg: &DataConfig, exec: Execution) -> Result<Vec<Sample>> {
    cfg.validate()?;
    generate_range(cfg, 0, exec)
}

/// `cfg.samples` samples with stream indices starting at `start`; disjoint
/// ranges of one seed give independent splits.
pub fn generate_range(cfg: &DataConfig, start: usize, exec: Execution) -> Result<Vec<Sample>> {
    cfg.validate()?;
    Ok(par::map_range(exec, cfg.samples, |i| generate_sample(cfg, start + i)))
}

// ------------------------------------------------------------- perturbation

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturbation {
    GaussianNoise,
}

/// Noise standard deviation of intensity level `1..=5`.
pub fn noise_sigma(intensity: u8) -> Result<f64> {
    const SIGMAS: [f64; 5] = [0.05, 0.1, 0.2, 0.4, 0.8];
    SIGMAS
        .get(usize::from(intensity).wrapping_sub(1))
        .copied()
        .ok_or_else(|| Error::Config(format!("intensity {intensity} outside 1..=5")))
}

/// Seeded additive noise on both streams; annotations are untouched.
pub fn add_gaussian_noise(samples: &[Sample], sigma: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma {sigma} must be finite and non-negative")));
    }
    if sigma == 0.0 {
        return Ok(samples.to_vec());
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    Ok(samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = sample_rng(seed ^ 0x5eed0fa015e, i);
            let mut out = s.clone();
            for v in out.video.data_mut().iter_mut().chain(out.audio.data_mut().iter_mut()) {
                *v += normal.sample(&mut rng);
            }
            out
        })
        .collect())
}

pub fn perturb_features(samples: &[Sample], kind: Perturbation, intensity: u8, seed: u64) -> Result<Vec<Sample>> {
    match kind {
        Perturbation::GaussianNoise => add_gaussian_noise(samples, noise_sigma(intensity)?, seed),
    }
}

// ------------------------------------------------------------------ files

#[derive(Serialize, Deserialize)]
struct SegmentJson {
    center: f64,
    duration: f64,
}

#[derive(Serialize, Deserialize)]
struct AnnotationJson {
    label: u8,
    segments: Vec<SegmentJson>,
}

pub fn annotation_path(feature: &Path) -> PathBuf {
    feature.with_extension("json")
}

/// Writes `<path>` (binary features) and its JSON sidecar.
pub fn write_features(path: &Path, video: &Tensor, audio: &Tensor, gt: &GroundTruth) -> Result<()> {
    let (t, c) = video.dims2();
    if audio.dims2() != (t, c) {
        return Err(Error::Dimension(format!("video {:?} vs audio {:?}", video.shape(), audio.shape())));
    }
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")));
    let mut buf = Vec::with_capacity(16 + 8 * t * c);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&to_u32(t)?.to_le_bytes());
    buf.extend_from_slice(&to_u32(c)?.to_le_bytes());
    for v in video.data().iter().chain(audio.data()) {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    let ann = AnnotationJson {
        label: u8::from(gt.label),
        segments: gt.segments.iter().map(|a| SegmentJson { center: a.center, duration: a.duration }).collect(),
    };
    fs::write(annotation_path(path), serde_json::to_string_pretty(&ann)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<(Tensor, Tensor)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format(format!("{} is not a feature file", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("feature file version {version}, expected {FEATURE_VERSION}")));
    }
    let (t, c) = (word(8) as usize, word(12) as usize);
    let n = t * c;
    if bytes.len() != 16 + 8 * n {
        return Err(Error::Format(format!(
            "{}: {} payload bytes for {t}×{c} features",
            path.display(),
            bytes.len() - 16
        )));
    }
    let vals: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
        .collect();
    Ok((Tensor::from_vec([t, c], vals[..n].to_vec()), Tensor::from_vec([t, c], vals[n..].to_vec())))
}

pub fn read_annotation(path: &Path) -> Result<GroundTruth> {
    let ann: AnnotationJson = serde_json::from_str(&fs::read_to_string(path)?)?;
    if ann.label > 1 {
        return Err(Error::Format(format!("label {} is not 0 or 1", ann.label)));
    }
    let mut segments = Vec::with_capacity(ann.segments.len());
    for s in ann.segments {
        let ok = s.duration > 0.0 && s.center - s.duration / 2.0 >= -1e-9 && s.center + s.duration / 2.0 <= 1.0 + 1e-9;
        if !ok {
            return Err(Error::Format(format!(
                "segment ({}, {}) lies outside the normalized timeline",
                s.center, s.duration
            )));
        }
        segments.push(Anchor { center: s.center, duration: s.duration });
    }
    Ok(GroundTruth { segments, label: ann.label == 1 })
}

/// Writes every sample as `<dir>/sample_<index>.dtfv` plus sidecars.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in samples {
        write_features(&dir.join(format!("sample_{:06}.dtfv", s.meta.index)), &s.video, &s.audio, &s.gt)?;
    }
    Ok(())
}

/// Loads every `.dtfv` file of `dir` (sorted by name) with its sidecar.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "dtfv"))
        .collect();
    paths.sort();
    paths
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let (video, audio) = read_features(p)?;
            let gt = read_annotation(&annotation_path(p))?;
            Ok(Sample {
                video,
                audio,
                meta: SampleMeta { seed: 0, index, difficulty: f64::NAN, ramp: 0, modalities: Vec::new(), skipped: 0 },
                gt,
            })
        })
        .collect()
}
