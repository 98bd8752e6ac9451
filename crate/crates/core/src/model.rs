//! Full localization network: fusion, pyramid, encoder, query decoder,
//! heads, and the training objective, plus the ablation variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{DeformableAttention, Mhsa, Reference};
use crate::dcssm::{Anchor, DcSsmBlock};
use crate::deform::{split_levels, DsSsmBlock, ReferenceGrid, RelayOutputs};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::loss::{self, anchors_of, FocalParams, LossComponents};
use crate::matching::MatchWeights;
use crate::nn::{Activation, Builder, Cx, Ffn, LayerNorm, Linear, Mlp, ParamStore};
use crate::relay::{self, EnhanceOperand, InsertionMap, RelayBank};
use crate::ssm::{self, HiddenAttention};
use crate::tensor::Tensor;

/// Anchors are kept this far inside `(0, 1)` before the inverse sigmoid.
pub const ANCHOR_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Deformable self/cross scans, relay tokens, both relay losses.
    DeformTrace,
    /// Every scan block replaced by its attention counterpart.
    FullFormer,
    /// Plain scans in encoder and decoder, no relay tokens.
    VanillaSsm,
    /// Plain self-scan, deformable cross-scan, no relay tokens.
    NoDsSsm,
    /// Deformable self-scan, plain cross-scan, no relay tokens.
    NoDcSsm,
    /// Both deformable scans, no relay tokens.
    NoRelay,
    /// Relay tokens trained with the cooperation loss only.
    NoEnh,
    /// Relay tokens trained with the enhancement loss only.
    NoCoop,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::VanillaSsm,
        Variant::NoDcSsm,
        Variant::NoDsSsm,
        Variant::NoRelay,
        Variant::NoCoop,
        Variant::NoEnh,
        Variant::DeformTrace,
        Variant::FullFormer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DeformTrace => "deformtrace",
            Variant::FullFormer => "fullformer",
            Variant::VanillaSsm => "vanilla_ssm",
            Variant::NoDsSsm => "no_dsssm",
            Variant::NoDcSsm => "no_dcssm",
            Variant::NoRelay => "no_relay",
            Variant::NoEnh => "no_enh",
            Variant::NoCoop => "no_coop",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }

    pub fn deformable_self(self) -> bool {
        !matches!(self, Variant::VanillaSsm | Variant::NoDsSsm)
    }

    pub fn deformable_cross(self) -> bool {
        !matches!(self, Variant::VanillaSsm | Variant::NoDcSsm)
    }

    pub fn relay_tokens(self) -> bool {
        matches!(self, Variant::DeformTrace | Variant::NoEnh | Variant::NoCoop)
    }

    pub fn enhance_loss(self) -> bool {
        matches!(self, Variant::DeformTrace | Variant::NoCoop)
    }

    pub fn cooperation_loss(self) -> bool {
        matches!(self, Variant::DeformTrace | Variant::NoEnh)
    }

    /// Row of the component ablation table this variant reproduces.
    pub fn ablation_row(self) -> Option<usize> {
        Self::ALL[..7].iter().position(|&v| v == self).map(|i| i + 1)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channels of each input modality.
    pub input_channels: usize,
    pub channels: usize,
    pub levels: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Sampled points per level in the deformable scans and attention.
    pub samples: usize,
    pub queries: usize,
    pub relays: usize,
    pub heads: usize,
    pub state_dim: usize,
    pub lambda_enh: f64,
    pub lambda_coop: f64,
    pub gamma: f64,
    pub fps: f64,
    pub stride: f64,
    pub variant: Variant,
    pub enhance_operand: EnhanceOperand,
    /// One relay bank per encoder layer instead of a shared one.
    pub relay_per_layer: bool,
    /// Matched losses on every intermediate decoder layer too.
    pub aux_loss: bool,
    pub match_weights: MatchWeights,
    pub focal: FocalParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 256,
            channels: 256,
            levels: 6,
            encoder_layers: 2,
            decoder_layers: 3,
            samples: 6,
            queries: 60,
            relays: 8,
            heads: 4,
            state_dim: ssm::DEFAULT_STATE_DIM,
            lambda_enh: 0.5,
            lambda_coop: 0.2,
            gamma: 1.0,
            fps: 25.0,
            stride: 1.0,
            variant: Variant::DeformTrace,
            enhance_operand: EnhanceOperand::PostScan,
            relay_per_layer: false,
            aux_loss: true,
            match_weights: MatchWeights::default(),
            focal: FocalParams::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used for the synthetic ablations.
    pub fn tiny(input_channels: usize) -> Self {
        Self {
            input_channels,
            channels: 64,
            levels: 4,
            encoder_layers: 1,
            decoder_layers: 2,
            queries: 20,
            relays: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_channels", self.input_channels),
            ("channels", self.channels),
            ("levels", self.levels),
            ("samples", self.samples),
            ("queries", self.queries),
            ("heads", self.heads),
            ("state_dim", self.state_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.channels % 4 != 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} must be divisible by 4 and by {} heads",
                self.channels, self.heads
            )));
        }
        if !(self.fps > 0.0 && self.stride > 0.0) {
            return Err(Error::Config("fps and stride must be positive".into()));
        }
        for (name, v) in [("lambda_enh", self.lambda_enh), ("lambda_coop", self.lambda_coop), ("gamma", self.gamma)] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    /// Relay count actually inserted (zero for relay-free variants).
    pub fn effective_relays(&self) -> usize {
        if self.variant.relay_tokens() { self.relays } else { 0 }
    }

    /// First-level length after right-padding to a multiple of `2^{L−1}`.
    pub fn padded_len(&self, n1: usize) -> usize {
        let m = 1usize << (self.levels - 1);
        n1.div_ceil(m) * m
    }
}

/// Annotated forgery spans of one video.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GroundTruth {
    pub segments: Vec<Anchor>,
    pub label: bool,
}

/// A scored segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub anchor: Anchor,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub detections: Vec<Detection>,
    pub video_score: f64,
}

// ------------------------------------------------------------------ blocks

/// Kernel-3 stride-2 temporal convolution, layer norm, relu.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Linear,
    pub norm: LayerNorm,
}

impl Downsample {
    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        let (n, c) = cx.g.value(x).dims2();
        if n % 2 != 0 {
            return Err(Error::Config(format!("cannot halve a level of {n} tokens")));
        }
        let zero = cx.constant(Tensor::zeros([1, c]));
        let src = cx.g.concat_rows(&[x, zero])?;
        let idx: Vec<usize> = (0..n / 2)
            .flat_map(|i| {
                let centre = 2 * i;
                let left = if centre == 0 { n } else { centre - 1 };
                let right = if centre + 1 < n { centre + 1 } else { n };
                [left, centre, right]
            })
            .collect();
        let win = cx.g.gather_rows(src, idx)?;
        let win = cx.g.reshape(win, &[n / 2, 3 * c])?;
        let y = self.conv.forward(cx, win)?;
        let y = self.norm.forward(cx, y)?;
        Ok(cx.g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub enum SelfMixer {
    Scan(DsSsmBlock),
    Attention { norm: LayerNorm, attn: Mhsa, ffn: Ffn },
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub mixer: SelfMixer,
    pub dsa_norm: LayerNorm,
    pub dsa: DeformableAttention,
    pub ffn: Ffn,
}

pub struct EncoderOutput {
    pub out: Var,
    pub relay: Option<RelayOutputs>,
}

impl EncoderLayer {
    pub fn forward(
        &self,
        cx: &mut Cx,
        x: Var,
        grid: &ReferenceGrid,
        tokens: &[Anchor],
        bank: Option<&RelayBank>,
    ) -> Result<EncoderOutput> {
        let (x1, relay) = match &self.mixer {
            SelfMixer::Scan(block) => {
                let o = block.forward(cx, x, grid, bank)?;
                (o.out, o.relay)
            }
            SelfMixer::Attention { norm, attn, ffn } => {
                let z = norm.forward(cx, x)?;
                let y = attn.forward(cx, z, tokens)?;
                let x1 = cx.g.add(x, y)?;
                (ffn.forward(cx, x1)?, None)
            }
        };
        let z = self.dsa_norm.forward(cx, x1)?;
        let y = self.dsa.forward(cx, z, Reference::Tokens, z, grid)?;
        let x2 = cx.g.add(x1, y)?;
        Ok(EncoderOutput { out: self.ffn.forward(cx, x2)?, relay })
    }
}

#[derive(Clone, Debug)]
pub enum CrossMixer {
    Scan(DcSsmBlock),
    Attention { norm: LayerNorm, attn: Mhsa, ffn: Ffn },
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub cross: CrossMixer,
    pub sa_norm: LayerNorm,
    pub mhsa: Mhsa,
    pub dca_norm: LayerNorm,
    pub dca: DeformableAttention,
    pub ffn: Ffn,
    /// `C → C → 2` offsets in logit space; last layer zero-initialized.
    pub refine: Mlp,
}

/// Encoder context shared by every decoder layer.
pub struct Memory<'a> {
    pub tokens: Var,
    pub levels: Vec<Var>,
    pub grid: &'a ReferenceGrid,
    pub token_anchors: &'a [Anchor],
}

impl DecoderLayer {
    /// Updated queries for anchors `anchors` (treated as constants).
    pub fn forward(&self, cx: &mut Cx, q: Var, anchors: &[Anchor], mem: &Memory) -> Result<Var> {
        let q = match &self.cross {
            CrossMixer::Scan(block) => block.forward(cx, q, anchors, &mem.levels, mem.grid)?,
            CrossMixer::Attention { norm, attn, ffn } => {
                let z = norm.forward(cx, q)?;
                let y = attn.forward_kv(cx, z, anchors, mem.tokens, mem.token_anchors)?;
                let q1 = cx.g.add(q, y)?;
                ffn.forward(cx, q1)?
            }
        };
        let z = self.sa_norm.forward(cx, q)?;
        let y = self.mhsa.forward(cx, z, anchors)?;
        let q = cx.g.add(q, y)?;
        let z = self.dca_norm.forward(cx, q)?;
        let y = self.dca.forward(cx, z, Reference::Anchors(anchors), mem.tokens, mem.grid)?;
        let q = cx.g.add(q, y)?;
        self.ffn.forward(cx, q)
    }

    /// `σ(σ⁻¹(A) + Δ)` with `Δ` predicted from the updated queries.
    pub fn refine_anchors(&self, cx: &mut Cx, q: Var, anchors: Var) -> Result<Var> {
        let delta = self.refine.forward(cx, q)?;
        let logit = inverse_sigmoid(cx, anchors)?;
        let z = cx.g.add(logit, delta)?;
        Ok(cx.g.sigmoid(z))
    }
}

/// Inverse sigmoid after clamping into `[ANCHOR_EPS, 1 − ANCHOR_EPS]`.
pub fn inverse_sigmoid(cx: &mut Cx, a: Var) -> Result<Var> {
    let lo = cx.g.clamp_min(a, ANCHOR_EPS);
    let flipped = cx.g.neg(lo);
    let flipped = cx.g.clamp_min(flipped, ANCHOR_EPS - 1.0);
    let a = cx.g.neg(flipped);
    let la = cx.g.ln(a);
    let na = cx.g.neg(a);
    let one_minus = cx.g.shift(na, 1.0);
    let lb = cx.g.ln(one_minus);
    cx.g.sub(la, lb)
}

/// Value-level anchor refinement.
pub fn refine_anchor(a: Anchor, dt: f64, dd: f64) -> Anchor {
    let logit = |x: f64| {
        let x = x.clamp(ANCHOR_EPS, 1.0 - ANCHOR_EPS);
        (x / (1.0 - x)).ln()
    };
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    Anchor { center: sig(logit(a.center) + dt), duration: sig(logit(a.duration) + dd) }
}

// ------------------------------------------------------------------- model

/// Tape handles of one forward pass.
pub struct Output {
    /// Per decoder layer: query logits `N_q × 1`.
    pub logits: Vec<Var>,
    /// Per decoder layer: refined anchors `N_q × 2`.
    pub anchors: Vec<Var>,
    pub initial_anchors: Var,
    /// Anchor values each decoder layer sampled at.
    pub sampling_anchors: Vec<Vec<Anchor>>,
    pub video_logit: Var,
    pub relay: Vec<RelayOutputs>,
    pub memory: Var,
}

/// Differentiable loss and its logged components.
pub struct Objective {
    pub total: Var,
    pub components: LossComponents,
    /// Query matched to each ground-truth segment in the final layer.
    pub assignment: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub fuse: Linear,
    pub pyramid: Vec<Downsample>,
    pub banks: Vec<RelayBank>,
    pub encoder: Vec<EncoderLayer>,
    pub pool_video: Linear,
    pub pool_audio: Linear,
    pub query_mlp: Mlp,
    pub proposal: Mlp,
    pub decoder: Vec<DecoderLayer>,
    pub classifier: Mlp,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let cfg = &config;
        let (c, l, ns) = (cfg.channels, cfg.levels, cfg.samples);
        let fuse = b.linear("fuse", 2 * cfg.input_channels, c)?;
        let pyramid = (1..l)
            .map(|i| {
                b.scoped(&format!("pyramid{i}"), |b| {
                    Ok(Downsample { conv: b.linear("conv", 3 * c, c)?, norm: b.layer_norm("norm", c)? })
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n_r = cfg.effective_relays();
        let banks = if n_r == 0 || cfg.variant == Variant::FullFormer {
            Vec::new()
        } else if cfg.relay_per_layer {
            (0..cfg.encoder_layers)
                .map(|i| RelayBank::new(&mut b, &format!("relay{i}"), n_r, c, cfg.gamma))
                .collect::<Result<_>>()?
        } else {
            vec![RelayBank::new(&mut b, "relay", n_r, c, cfg.gamma)?]
        };
        let encoder = (0..cfg.encoder_layers)
            .map(|i| {
                b.scoped(&format!("enc{i}"), |b| {
                    let mixer = if cfg.variant == Variant::FullFormer {
                        SelfMixer::Attention {
                            norm: b.layer_norm("mix_norm", c)?,
                            attn: Mhsa::new(b, "mix", c, cfg.heads)?,
                            ffn: b.ffn("mix_ffn", c, 4 * c)?,
                        }
                    } else {
                        SelfMixer::Scan(DsSsmBlock::new(b, "ds", c, l, ns, cfg.state_dim, cfg.variant.deformable_self())?)
                    };
                    Ok(EncoderLayer {
                        mixer,
                        dsa_norm: b.layer_norm("dsa_norm", c)?,
                        dsa: DeformableAttention::new(b, "dsa", c, cfg.heads, l, ns)?,
                        ffn: b.ffn("ffn", c, 4 * c)?,
                    })
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pool_video = b.linear("pool_video", cfg.input_channels, c)?;
        let pool_audio = b.linear("pool_audio", cfg.input_channels, c)?;
        let query_mlp = b.mlp("query", &[2 * c, c, c], Activation::Relu)?;
        let nq = cfg.queries;
        let proposal = b.scoped("proposal", |b| {
            let hidden = b.linear("l0", c, c)?;
            let out = b.linear_zero("l1", c, 2 * nq)?;
            let bias: Vec<f64> = (0..nq).flat_map(|j| [logit((j as f64 + 0.5) / nq as f64), logit(0.1)]).collect();
            b.store.set(out.b, bias)?;
            Ok(Mlp { layers: vec![(hidden, Activation::Relu), (out, Activation::Identity)] })
        })?;
        let decoder = (0..cfg.decoder_layers)
            .map(|i| {
                b.scoped(&format!("dec{i}"), |b| {
                    let cross = if cfg.variant == Variant::FullFormer {
                        CrossMixer::Attention {
                            norm: b.layer_norm("cross_norm", c)?,
                            attn: Mhsa::new(b, "cross", c, cfg.heads)?,
                            ffn: b.ffn("cross_ffn", c, 4 * c)?,
                        }
                    } else {
                        CrossMixer::Scan(DcSsmBlock::new(b, "dc", c, l, ns, cfg.state_dim, cfg.variant.deformable_cross())?)
                    };
                    let refine = b.scoped("refine", |b| {
                        let hidden = b.linear("l0", c, c)?;
                        let out = b.linear_zero("l1", c, 2)?;
                        Ok(Mlp { layers: vec![(hidden, Activation::Relu), (out, Activation::Identity)] })
                    })?;
                    Ok(DecoderLayer {
                        cross,
                        sa_norm: b.layer_norm("sa_norm", c)?,
                        mhsa: Mhsa::new(b, "mhsa", c, cfg.heads)?,
                        dca_norm: b.layer_norm("dca_norm", c)?,
                        dca: DeformableAttention::new(b, "dca", c, cfg.heads, l, ns)?,
                        ffn: b.ffn("ffn", c, 4 * c)?,
                        refine,
                    })
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let classifier = b.mlp("classifier", &[c, c, 1], Activation::Relu)?;
        drop(b);
        Ok(Self {
            config,
            store,
            fuse,
            pyramid,
            banks,
            encoder,
            pool_video,
            pool_audio,
            query_mlp,
            proposal,
            decoder,
            classifier,
        })
    }

    /// Same architecture with parameters copied from `store` (names and
    /// shapes must match).
    pub fn with_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        if m.store.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                store.len(),
                m.store.len()
            )));
        }
        for id in m.store.ids().collect::<Vec<_>>() {
            let name = m.store.name(id).to_string();
            let src = store
                .find(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
            let t = store.get(src);
            if t.shape() != m.store.get(id).shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    m.store.get(id).shape()
                )));
            }
            m.store.set(id, t.data().to_vec())?;
        }
        Ok(m)
    }

    fn bank(&self, layer: usize) -> Option<&RelayBank> {
        match self.banks.len() {
            0 => None,
            1 => self.banks.first(),
            _ => self.banks.get(layer),
        }
    }

    fn check_inputs(&self, video: &Tensor, audio: &Tensor) -> Result<usize> {
        let (tv, cv) = video.dims2();
        let (ta, ca) = audio.dims2();
        if tv != ta {
            return Err(Error::Contract(format!("video has {tv} steps, audio {ta}")));
        }
        if cv != self.config.input_channels || ca != self.config.input_channels {
            return Err(Error::Dimension(format!(
                "inputs have {cv}/{ca} channels, model expects {}",
                self.config.input_channels
            )));
        }
        if tv == 0 {
            return Err(Error::Contract("empty input sequence".into()));
        }
        Ok(tv)
    }

    /// Reference grid for an input of `n1` steps (padded as needed).
    pub fn grid(&self, n1: usize) -> Result<ReferenceGrid> {
        let c = &self.config;
        ReferenceGrid::padded(c.padded_len(n1), n1, c.levels, c.stride, c.fps, n1 as f64 * c.stride / c.fps)
    }

    /// Per-token anchors (reference point, level extent) for dense attention.
    pub fn token_anchors(grid: &ReferenceGrid) -> Vec<Anchor> {
        grid.levels
            .iter()
            .flat_map(|l| l.points.iter().map(move |&p| Anchor { center: p, duration: 1.0 / l.scale }))
            .collect()
    }

    /// Fused first level, padded by edge replication.
    pub fn fuse_features(&self, cx: &mut Cx, video: Var, audio: Var) -> Result<Var> {
        let cat = cx.g.concat_cols(&[video, audio])?;
        let f = self.fuse.forward(cx, cat)?;
        let n1 = cx.g.value(f).rows();
        let padded = self.config.padded_len(n1);
        if padded == n1 {
            return Ok(f);
        }
        cx.g.gather_rows(f, (0..padded).map(|i| i.min(n1 - 1)).collect::<Vec<_>>())
    }

    pub fn build_pyramid(&self, cx: &mut Cx, f1: Var) -> Result<Vec<Var>> {
        let n = cx.g.value(f1).rows();
        let m = 1usize << self.pyramid.len();
        if n % m != 0 {
            return Err(Error::Config(format!("{n} tokens are not divisible by 2^{}", self.pyramid.len())));
        }
        let mut levels = vec![f1];
        for d in &self.pyramid {
            let prev = *levels.last().expect("non-empty");
            levels.push(d.forward(cx, prev)?);
        }
        Ok(levels)
    }

    /// Repeated initial queries `N_q × C` and initial anchors `N_q × 2`.
    pub fn init_queries(&self, cx: &mut Cx, video: Var, audio: Var, f1: Var) -> Result<(Var, Var)> {
        let pv = cx.g.mean_rows(video);
        let pa = cx.g.mean_rows(audio);
        let pv = self.pool_video.forward(cx, pv)?;
        let pa = self.pool_audio.forward(cx, pa)?;
        let g = cx.g.concat_cols(&[pv, pa])?;
        let q = self.query_mlp.forward(cx, g)?;
        let q0 = cx.g.gather_rows(q, vec![0; self.config.queries])?;
        let pooled = cx.g.mean_rows(f1);
        let z = self.proposal.forward(cx, pooled)?;
        let a = cx.g.sigmoid(z);
        let a0 = cx.g.reshape(a, &[self.config.queries, 2])?;
        Ok((q0, a0))
    }

    pub fn forward(&self, cx: &mut Cx, video: &Tensor, audio: &Tensor) -> Result<Output> {
        self.forward_pinned(cx, video, audio, None)
    }

    /// Forward pass whose decoder samples at `pinned[i]` in layer `i` instead
    /// of the current anchor values. Gradients never flow through sampling
    /// positions, so this is the function the tape differentiates when
    /// `pinned` holds the anchors of an unpinned pass.
    pub fn forward_pinned(&self, cx: &mut Cx, video: &Tensor, audio: &Tensor, pinned: Option<&[Vec<Anchor>]>) -> Result<Output> {
        if let Some(p) = pinned {
            if p.len() != self.decoder.len() {
                return Err(Error::Dimension(format!("{} pinned anchor sets for {} decoder layers", p.len(), self.decoder.len())));
            }
        }
        let n1 = self.check_inputs(video, audio)?;
        let grid = self.grid(n1)?;
        let tok_anchors = Self::token_anchors(&grid);
        let v = cx.constant(video.clone());
        let a = cx.constant(audio.clone());
        let f_pad = self.fuse_features(cx, v, a)?;
        let f1 = if self.config.padded_len(n1) == n1 {
            f_pad
        } else {
            cx.g.gather_rows(f_pad, (0..n1).collect::<Vec<_>>())?
        };
        let levels = self.build_pyramid(cx, f_pad)?;
        let mut x = cx.g.concat_rows(&levels)?;
        let mut relay = Vec::new();
        for (i, layer) in self.encoder.iter().enumerate() {
            let o = layer.forward(cx, x, &grid, &tok_anchors, self.bank(i))?;
            x = o.out;
            relay.extend(o.relay);
        }
        let mem = Memory { tokens: x, levels: split_levels(cx, x, &grid)?, grid: &grid, token_anchors: &tok_anchors };
        let (mut q, a0) = self.init_queries(cx, v, a, f1)?;
        let mut anchors = a0;
        let (mut all_logits, mut all_anchors) = (Vec::new(), Vec::new());
        let mut sampling_anchors = Vec::with_capacity(self.decoder.len());
        for (i, layer) in self.decoder.iter().enumerate() {
            let current = match pinned {
                Some(p) => p[i].clone(),
                None => anchors_of(cx.g.value(anchors)),
            };
            q = layer.forward(cx, q, &current, &mem)?;
            sampling_anchors.push(current);
            anchors = layer.refine_anchors(cx, q, anchors)?;
            all_logits.push(self.classifier.forward(cx, q)?);
            all_anchors.push(anchors);
        }
        let video_logit = match all_logits.last() {
            Some(&l) => cx.g.max(l),
            None => {
                let l = self.classifier.forward(cx, q)?;
                all_logits.push(l);
                all_anchors.push(anchors);
                cx.g.max(l)
            }
        };
        Ok(Output {
            logits: all_logits,
            anchors: all_anchors,
            initial_anchors: a0,
            sampling_anchors,
            video_logit,
            relay,
            memory: x,
        })
    }

    /// Differentiable training objective for one sample.
    pub fn objective(&self, cx: &mut Cx, out: &Output, gt: &GroundTruth) -> Result<Objective> {
        let cfg = &self.config;
        let n = out.logits.len();
        if gt.segments.len() > cfg.queries {
            return Err(Error::Contract(format!(
                "{} segments exceed {} queries",
                gt.segments.len(),
                cfg.queries
            )));
        }
        let layers: Vec<usize> = if cfg.aux_loss { (0..n).collect() } else { vec![n - 1] };
        let mut matching: Option<Var> = None;
        let mut assignment = Vec::new();
        for i in layers {
            let s = loss::set_loss(cx, out.logits[i], out.anchors[i], &gt.segments, cfg.match_weights, cfg.focal)?;
            matching = Some(match matching {
                Some(m) => cx.g.add(m, s.value)?,
                None => s.value,
            });
            assignment = s.assignment;
        }
        let matching = matching.expect("at least one decoder output");
        let classification = loss::video_bce(cx, out.video_logit, gt.label);
        let enhance = if cfg.variant.enhance_loss() && !out.relay.is_empty() {
            let mut acc: Option<Var> = None;
            for r in &out.relay {
                let relays = match cfg.enhance_operand {
                    EnhanceOperand::PostScan => r.relay_out,
                    EnhanceOperand::Embedding => {
                        let bank = self.bank(0).expect("relay outputs imply a bank");
                        cx.p(bank.tokens)
                    }
                };
                let t = relay::enhance_loss(cx, relays, r.seq_out, &r.map)?.value;
                acc = Some(match acc {
                    Some(a) => cx.g.add(a, t)?,
                    None => t,
                });
            }
            let s = acc.expect("non-empty");
            cx.g.scale(s, 1.0 / out.relay.len() as f64)
        } else {
            cx.g.scalar(0.0)
        };
        let cooperation = if cfg.variant.cooperation_loss() && !self.banks.is_empty() {
            let mut acc: Option<Var> = None;
            for bank in &self.banks {
                let r = cx.p(bank.tokens);
                let t = relay::cooperation_loss(cx, r, bank.gamma)?.value;
                acc = Some(match acc {
                    Some(a) => cx.g.add(a, t)?,
                    None => t,
                });
            }
            let s = acc.expect("non-empty");
            cx.g.scale(s, 1.0 / self.banks.len() as f64)
        } else {
            cx.g.scalar(0.0)
        };
        let total = loss::combine(cx, matching, classification, enhance, cooperation, cfg.lambda_enh, cfg.lambda_coop)?;
        let (m, c, e, k) = (cx.g.item(matching), cx.g.item(classification), cx.g.item(enhance), cx.g.item(cooperation));
        let expected = loss::total_loss(m, c, e, k, cfg.lambda_enh, cfg.lambda_coop)?;
        let components = LossComponents { matching: m, classification: c, enhance: e, cooperation: k, total: expected };
        Ok(Objective { total, components, assignment })
    }

    /// Loss value and parameter gradients for one training sample.
    pub fn loss_and_grads(&self, video: &Tensor, audio: &Tensor, gt: &GroundTruth) -> Result<(LossComponents, crate::nn::Grads)> {
        let mut cx = Cx::train(&self.store);
        let out = self.forward(&mut cx, video, audio)?;
        let obj = self.objective(&mut cx, &out, gt)?;
        let grads = cx.backward(obj.total)?;
        Ok((obj.components, grads))
    }

    pub fn loss(&self, video: &Tensor, audio: &Tensor, gt: &GroundTruth) -> Result<LossComponents> {
        let mut cx = Cx::eval(&self.store);
        let out = self.forward(&mut cx, video, audio)?;
        Ok(self.objective(&mut cx, &out, gt)?.components)
    }

    pub fn predict(&self, video: &Tensor, audio: &Tensor) -> Result<Prediction> {
        let mut cx = Cx::eval(&self.store);
        let out = self.forward(&mut cx, video, audio)?;
        Ok(self.prediction(&cx, &out))
    }

    pub fn prediction(&self, cx: &Cx, out: &Output) -> Prediction {
        let logits = cx.g.value(*out.logits.last().expect("decoder output")).data();
        let anchors = anchors_of(cx.g.value(*out.anchors.last().expect("decoder output")));
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let detections = anchors
            .into_iter()
            .zip(logits)
            .map(|(anchor, &z)| Detection { anchor, confidence: sig(z) })
            .collect();
        Prediction { detections, video_score: sig(cx.g.item(out.video_logit)) }
    }

    /// Sequence scanned by encoder layer `layer` (relays included) and its
    /// insertion map, for hidden-attention inspection.
    pub fn scan_sequence(&self, video: &Tensor, audio: &Tensor, layer: usize) -> Result<(Tensor, Option<InsertionMap>)> {
        if layer >= self.encoder.len() {
            return Err(Error::Config(format!("encoder has {} layers, asked for {layer}", self.encoder.len())));
        }
        let n1 = self.check_inputs(video, audio)?;
        let grid = self.grid(n1)?;
        let tok = Self::token_anchors(&grid);
        let mut cx = Cx::eval(&self.store);
        let v = cx.constant(video.clone());
        let a = cx.constant(audio.clone());
        let f = self.fuse_features(&mut cx, v, a)?;
        let levels = self.build_pyramid(&mut cx, f)?;
        let mut x = cx.g.concat_rows(&levels)?;
        for (i, l) in self.encoder[..layer].iter().enumerate() {
            x = l.forward(&mut cx, x, &grid, &tok, self.bank(i))?.out;
        }
        match &self.encoder[layer].mixer {
            SelfMixer::Scan(block) => {
                let (seq, map) = block.scan_input(&mut cx, x, &grid, self.bank(layer))?;
                Ok((cx.g.value(seq).clone(), map))
            }
            SelfMixer::Attention { .. } => Err(Error::Config("attention-only encoder has no scan to inspect".into())),
        }
    }

    /// Hidden attention of the forward scan in encoder layer `layer`.
    pub fn hidden_attention(&self, video: &Tensor, audio: &Tensor, layer: usize) -> Result<(HiddenAttention, Option<InsertionMap>)> {
        let (seq, map) = self.scan_sequence(video, audio, layer)?;
        let SelfMixer::Scan(block) = &self.encoder[layer].mixer else {
            unreachable!("scan_sequence rejects attention layers")
        };
        Ok((ssm::hidden_attention(&self.store, &block.fb.fwd, &seq)?, map))
    }
}
