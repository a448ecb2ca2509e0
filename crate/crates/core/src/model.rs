//! Conditional U-shaped velocity network.
//!
//! A conditional encoder turns the observed frames into a four-level pyramid.
//! The backbone encodes `z_t` with the same stage layout, fusing each of the
//! shallow stages with the matching condition level, runs token mixing and
//! the spline token block at the bottleneck, and decodes with skip fusion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfcast_autodiff::{Ctx, Element, ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::cgstf::{Cgstf, CgstfConfig};
use crate::error::{Error, Result};
use crate::fcm::{Fcm, FcmConfig};
use crate::kan::{KanBlock, KanMode};
use crate::nn::{from_tokens, to_tokens, Builder, Conv2d, ConvBn, Linear};
use crate::vrwkv::{VrwkvBlock, VrwkvConfig, VrwkvStage};
use crate::wgsc::{Wgsc, WgscConfig};

pub const LEVELS: usize = 4;
/// Width ratios of the four pyramid levels relative to `base_width`.
pub const WIDTH_RATIOS: [usize; LEVELS] = [1, 2, 4, 8];

/// How condition features reach decoder levels that are not wavelet-gated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// 1x1 projection added after skip fusion.
    Additive,
    /// Condition concatenated into the skip fusion conv.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Condition frames.
    pub j: usize,
    /// Forecast frames.
    pub k: usize,
    /// Width of level 1; level `i` has `base_width * 2^(i-1)` channels.
    pub base_width: usize,
    pub time_embed: bool,
    pub time_embed_dim: usize,
    pub kan_mode: KanMode,
    pub kan_scale_init: f64,
    pub injection: Injection,
    pub fcm: FcmConfig,
    pub cgstf: CgstfConfig,
    pub wgsc: WgscConfig,
    pub vrwkv: VrwkvConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            j: 5,
            k: 20,
            base_width: 32,
            time_embed: true,
            time_embed_dim: 64,
            kan_mode: KanMode::Spline,
            kan_scale_init: 0.1,
            injection: Injection::Additive,
            fcm: FcmConfig::default(),
            cgstf: CgstfConfig::default(),
            wgsc: WgscConfig::default(),
            vrwkv: VrwkvConfig::default(),
        }
    }
}

/// Base width of the full-size configuration.
pub const FULL_BASE_WIDTH: usize = 88;

impl ModelConfig {
    /// Desk-scale configuration used by the end-to-end run.
    pub fn toy() -> Self {
        Self { k: 10, base_width: 16, time_embed_dim: 32, ..Self::default() }
    }

    /// Full-size configuration at the 5 -> 20 frame setting.
    pub fn full() -> Self {
        Self { base_width: FULL_BASE_WIDTH, time_embed_dim: 2 * FULL_BASE_WIDTH, ..Self::default() }
    }

    /// Every optional module off.
    pub fn plain(mut self) -> Self {
        self.fcm.enabled = false;
        self.cgstf.enabled = false;
        self.wgsc.enabled = false;
        self.vrwkv.enabled = false;
        self
    }

    pub fn widths(&self) -> [usize; LEVELS] {
        WIDTH_RATIOS.map(|r| r * self.base_width)
    }

    /// Width multiplier relative to the `(32, 64, 128, 256)` reference widths.
    pub fn width_multiplier(&self) -> f64 {
        self.base_width as f64 / 32.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.j == 0 || self.k == 0 || self.base_width == 0 {
            return Err(Error::Config("model.j, model.k and model.base_width must be positive".into()));
        }
        if self.time_embed && self.time_embed_dim < 2 {
            return Err(Error::Config("model.time_embed_dim must be at least 2".into()));
        }
        self.fcm.validate()?;
        self.wgsc.validate()?;
        if self.fcm.reference_level > LEVELS {
            return Err(Error::Config(format!("fcm.reference_level must be at most {LEVELS}")));
        }
        let in_range = |v: &[usize]| v.iter().all(|&l| (1..=LEVELS).contains(&l));
        if !in_range(&self.cgstf.stages) || !in_range(&self.wgsc.skip_levels) {
            return Err(Error::Config(format!("stage and skip levels must lie in 1..={LEVELS}")));
        }
        if self.vrwkv.enabled && self.base_width * WIDTH_RATIOS[LEVELS - 1] % 4 != 0 {
            return Err(Error::Config("deepest width must be divisible by 4 for token mixing".into()));
        }
        if self.vrwkv.enabled && self.vrwkv.blocks_per_stage == 0 {
            return Err(Error::Config("vrwkv.blocks_per_stage must be positive".into()));
        }
        if !(self.kan_scale_init.is_finite()) {
            return Err(Error::Config("model.kan_scale_init must be finite".into()));
        }
        Ok(())
    }
}

/// Sinusoidal features of `t` for each batch element, `[N, dim]`.
pub fn sinusoidal_embedding<E: Element>(t: &[f64], dim: usize) -> Tensor<E> {
    let half = dim / 2;
    Tensor::from_fn([t.len(), dim], |i| {
        let (n, j) = (i / dim, i % dim);
        let f = (j % half.max(1)) as f64;
        let freq = (-(10_000f64.ln()) * f / half.max(1) as f64).exp();
        let arg = 1000.0 * t[n] * freq;
        E::lit(if j < half { arg.sin() } else if j < 2 * half { arg.cos() } else { 0.0 })
    })
}

/// Per-stage scale-shift `h * (1 + s) + b`.
#[derive(Clone, Debug)]
struct Modulation {
    proj: Linear,
    c: usize,
}

impl Modulation {
    fn new<E: Element>(b: &mut Builder<'_, E>, name: &str, d: usize, c: usize) -> Self {
        Self { proj: Linear::zeroed(b, name, d, 2 * c, true), c }
    }

    fn apply<'t, E: Element>(&self, ctx: &Ctx<'t, E>, h: Var<'t, E>, temb: Var<'t, E>) -> Var<'t, E> {
        let n = h.shape()[0];
        let ss = self.proj.forward(ctx, temb).reshape(vec![n, 2 * self.c, 1, 1]);
        let parts = ss.split(1, &[self.c, self.c]);
        h + h * parts[0] + parts[1]
    }
}

#[derive(Clone, Debug)]
struct TimeMlp {
    fc1: Linear,
    fc2: Linear,
    dim: usize,
}

/// Encoder: a 3x3 conv stage per level, max-pooled between levels.
#[derive(Clone, Debug)]
struct Encoder {
    stages: Vec<ConvBn>,
}

impl Encoder {
    fn new<E: Element>(b: &mut Builder<'_, E>, prefix: &str, c_in: usize, widths: &[usize]) -> Self {
        let stages = (0..widths.len())
            .map(|i| {
                let cin = if i == 0 { c_in } else { widths[i - 1] };
                ConvBn::new(b, &format!("{prefix}{}", i + 1), cin, widths[i], 3, true)
            })
            .collect();
        Self { stages }
    }

    fn stage<'t, E: Element>(&self, ctx: &Ctx<'t, E>, i: usize, x: Var<'t, E>) -> Var<'t, E> {
        let x = if i == 0 { x } else { x.maxpool2() };
        self.stages[i].forward(ctx, x)
    }
}

/// Skip fusion at one decoder level.
#[derive(Clone, Debug)]
enum SkipFusion {
    Wavelet(Wgsc),
    Plain { fuse: ConvBn, inject: Option<Conv2d> },
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Conv2d,
    skip: SkipFusion,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    widths: [usize; LEVELS],
    cond: Encoder,
    fcm: Option<Fcm>,
    enc: Encoder,
    align: Vec<Option<Cgstf>>,
    time: Option<TimeMlp>,
    enc_mod: Vec<Modulation>,
    tail: Vec<VrwkvBlock>,
    patch: Conv2d,
    mid_mod: Option<Modulation>,
    mid: Vec<VrwkvBlock>,
    kan: KanBlock,
    dec: Vec<DecoderLevel>,
    dec_mod: Vec<Modulation>,
    first: Vec<VrwkvBlock>,
    head: Conv2d,
}

/// Per-stage output shape and parameter count, for a `[1, *, h, w]` input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub shape: Vec<usize>,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSummary {
    pub base_width: usize,
    pub width_multiplier: f64,
    pub widths: Vec<usize>,
    pub stages: Vec<StageSummary>,
    pub total_params: usize,
}

impl Model {
    /// Registers all parameters in `store` (which must be empty).
    pub fn new<E: Element>(cfg: &ModelConfig, store: &mut ParamStore<E>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if !store.is_empty() {
            return Err(Error::Invalid("model parameters must be registered into an empty store".into()));
        }
        let widths = cfg.widths();
        let c4 = widths[LEVELS - 1];
        let mut b = Builder::new(store, rng);
        let cond = Encoder::new(&mut b.sub("cond"), "enc", cfg.j, &widths);
        let fcm = if cfg.fcm.enabled { Some(Fcm::new(&mut b.sub("fcm"), &widths, &cfg.fcm)?) } else { None };
        let time = cfg.time_embed.then(|| {
            let d = cfg.time_embed_dim;
            let mut s = b.sub("time");
            TimeMlp { fc1: Linear::new(&mut s, "fc1", d, d, true), fc2: Linear::new(&mut s, "fc2", d, d, true), dim: d }
        });
        let d = cfg.time_embed_dim;
        let enc = Encoder::new(&mut b, "enc", cfg.k, &widths);
        let mut enc_mod = Vec::new();
        let mut align = Vec::new();
        for (i, &c) in widths.iter().enumerate() {
            if cfg.time_embed {
                enc_mod.push(Modulation::new(&mut b, &format!("enc{}.time", i + 1), d, c));
            }
            let site = cfg.cgstf.stages.contains(&(i + 1));
            align.push(site.then(|| Cgstf::new(&mut b.sub(&format!("enc{}.align", i + 1)), c, c, c, cfg.cgstf.enabled, cfg.cgstf.alpha_mode)));
        }
        let blocks = |b: &mut Builder<'_, E>, stage: VrwkvStage, name: &str, c: usize| -> Result<Vec<VrwkvBlock>> {
            if !cfg.vrwkv.active(stage) {
                return Ok(Vec::new());
            }
            (0..cfg.vrwkv.blocks_per_stage).map(|n| VrwkvBlock::new(&mut b.sub(&format!("{name}{n}")), c, cfg.vrwkv.distance)).collect()
        };
        let tail = blocks(&mut b, VrwkvStage::EncoderTail, "tail.vrwkv", c4)?;
        let patch = Conv2d::with_init(&mut b, "mid.patch", c4, c4, 2, 2, 0, true, false);
        let mid_mod = cfg.time_embed.then(|| Modulation::new(&mut b, "mid.time", d, c4));
        let mid = blocks(&mut b, VrwkvStage::Bottleneck, "mid.vrwkv", c4)?;
        let kan = KanBlock::new(&mut b.sub("mid.kan"), c4, cfg.kan_mode, cfg.kan_scale_init);
        let mut dec = Vec::new();
        let mut dec_mod = Vec::new();
        for i in (0..LEVELS).rev() {
            let c = widths[i];
            let c_up = if i == LEVELS - 1 { c4 } else { widths[i + 1] };
            let mut s = b.sub(&format!("dec{}", i + 1));
            let up = Conv2d::new(&mut s, "up", c_up, c, 1, true);
            let skip = if cfg.wgsc.enabled && cfg.wgsc.skip_levels.contains(&(i + 1)) {
                SkipFusion::Wavelet(Wgsc::new(&mut s.sub("wgsc"), c))
            } else {
                match cfg.injection {
                    Injection::Additive => {
                        SkipFusion::Plain { fuse: ConvBn::new(&mut s, "fuse", 2 * c, c, 3, true), inject: Some(Conv2d::new(&mut s, "inject", c, c, 1, true)) }
                    }
                    Injection::Concat => SkipFusion::Plain { fuse: ConvBn::new(&mut s, "fuse", 3 * c, c, 3, true), inject: None },
                }
            };
            if cfg.time_embed {
                dec_mod.push(Modulation::new(&mut s, "time", d, c));
            }
            dec.push(DecoderLevel { up, skip });
        }
        let first = blocks(&mut b, VrwkvStage::DecoderFirst, "dec4.vrwkv", c4)?;
        let head = Conv2d::new(&mut b, "head", widths[0], cfg.k, 1, true);
        Ok(Self { cfg: cfg.clone(), widths, cond, fcm, enc, align, time, enc_mod, tail, patch, mid_mod, mid, kan, dec, dec_mod, first, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Smallest spatial divisor of valid inputs.
    pub const SPATIAL_DIVISOR: usize = 1 << LEVELS;

    fn check_input(&self, x: &Var<'_, impl Element>, channels: usize, what: &str) -> Result<(usize, usize, usize)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != channels {
            return Err(Error::Shape(format!("{what} must be [N, {channels}, H, W], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        if h == 0 || w == 0 || h % Self::SPATIAL_DIVISOR != 0 || w % Self::SPATIAL_DIVISOR != 0 {
            return Err(Error::Shape(format!("{what} spatial size {h}x{w} must be a positive multiple of {}", Self::SPATIAL_DIVISOR)));
        }
        Ok((s[0], h, w))
    }

    /// Condition frames `[N, J, H, W]` to the raw four-level pyramid.
    pub fn encode_condition<'t, E: Element>(&self, ctx: &Ctx<'t, E>, cond: Var<'t, E>) -> Result<Vec<Var<'t, E>>> {
        self.check_input(&cond, self.cfg.j, "condition window")?;
        let mut pyr = Vec::with_capacity(LEVELS);
        let mut x = cond;
        for i in 0..LEVELS {
            x = self.cond.stage(ctx, i, x);
            pyr.push(x);
        }
        Ok(pyr)
    }

    fn time_features<'t, E: Element>(&self, ctx: &Ctx<'t, E>, t: &[f64]) -> Result<Option<Var<'t, E>>> {
        let Some(mlp) = &self.time else { return Ok(None) };
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Invalid(format!("flow time {bad} outside [0, 1]")));
        }
        let e = ctx.tape.constant(sinusoidal_embedding(t, mlp.dim));
        Ok(Some(mlp.fc2.forward(ctx, mlp.fc1.forward(ctx, e).silu()).silu()))
    }

    /// Velocity for `z_t` `[N, K, H, W]` at per-example times `t`, given the raw condition pyramid.
    pub fn velocity_forward<'t, E: Element>(
        &self,
        ctx: &Ctx<'t, E>,
        z_t: Var<'t, E>,
        t: &[f64],
        cond_pyr: &[Var<'t, E>],
    ) -> Result<Var<'t, E>> {
        let (n, h, w) = self.check_input(&z_t, self.cfg.k, "z_t")?;
        if t.len() != n {
            return Err(Error::Shape(format!("{} flow times for a batch of {n}", t.len())));
        }
        if cond_pyr.len() != LEVELS {
            return Err(Error::Shape(format!("condition pyramid has {} levels, expected {LEVELS}", cond_pyr.len())));
        }
        for (i, f) in cond_pyr.iter().enumerate() {
            let expect = [n, self.widths[i], h >> i, w >> i];
            if f.shape() != expect {
                return Err(Error::Shape(format!("condition level {} is {:?}, expected {expect:?}", i + 1, f.shape())));
            }
        }
        let cond: Vec<Var<'t, E>> = match &self.fcm {
            Some(fcm) => fcm.forward(ctx, cond_pyr)?,
            None => cond_pyr.to_vec(),
        };
        let temb = self.time_features(ctx, t)?;
        let modulate = |m: Option<&Modulation>, x: Var<'t, E>| match (m, temb) {
            (Some(m), Some(e)) => m.apply(ctx, x, e),
            _ => x,
        };

        let mut skips = Vec::with_capacity(LEVELS);
        let mut x = z_t;
        for i in 0..LEVELS {
            x = modulate(self.enc_mod.get(i), self.enc.stage(ctx, i, x));
            if let Some(site) = &self.align[i] {
                x = site.forward(ctx, x, cond[i])?.out;
            }
            skips.push(x);
        }
        for blk in &self.tail {
            x = blk.forward(ctx, x)?;
        }
        skips[LEVELS - 1] = x;

        x = modulate(self.mid_mod.as_ref(), self.patch.forward(ctx, x));
        for blk in &self.mid {
            x = blk.forward(ctx, x)?;
        }
        let (_, _, hb, wb) = x.dims4();
        x = from_tokens(self.kan.forward(ctx, to_tokens(x)), hb, wb);

        for (step, lvl) in self.dec.iter().enumerate() {
            let i = LEVELS - 1 - step;
            let (hi, wi) = (h >> i, w >> i);
            let up = lvl.up.forward(ctx, x.resize_bilinear(hi, wi));
            x = match &lvl.skip {
                SkipFusion::Wavelet(g) => g.forward(ctx, skips[i], up, cond[i])?,
                SkipFusion::Plain { fuse, inject: Some(inj) } => fuse.forward(ctx, Var::cat(&[skips[i], up], 1)) + inj.forward(ctx, cond[i]),
                SkipFusion::Plain { fuse, inject: None } => fuse.forward(ctx, Var::cat(&[skips[i], up, cond[i]], 1)),
            };
            x = modulate(self.dec_mod.get(step), x);
            if step == 0 {
                for blk in &self.first {
                    x = blk.forward(ctx, x)?;
                }
            }
        }
        Ok(self.head.forward(ctx, x))
    }

    /// Condition encoding followed by [`Model::velocity_forward`].
    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, E>, z_t: Var<'t, E>, t: &[f64], cond: Var<'t, E>) -> Result<Var<'t, E>> {
        let pyr = self.encode_condition(ctx, cond)?;
        self.velocity_forward(ctx, z_t, t, &pyr)
    }

    /// Per-stage shapes for a `h x w` input and parameter counts grouped by top-level name.
    pub fn summary<E: Element>(&self, store: &ParamStore<E>, h: usize, w: usize) -> ArchitectureSummary {
        let count = |pred: &dyn Fn(&str) -> bool| -> usize {
            store.ids().filter(|&id| store.kind(id).trainable() && pred(store.name(id))).map(|id| store.get(id).numel()).sum()
        };
        let under = |p: &str| {
            let p = p.to_string();
            move |name: &str| name == p || name.starts_with(&format!("{p}."))
        };
        let mut stages = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, params: usize| stages.push(StageSummary { name, shape, params });
        let wd = self.widths;
        for i in 0..LEVELS {
            push(format!("cond.enc{}", i + 1), vec![wd[i], h >> i, w >> i], count(&under(&format!("cond.enc{}", i + 1))));
        }
        push("fcm".into(), vec![LEVELS], count(&under("fcm")));
        push("time".into(), vec![self.cfg.time_embed_dim], count(&under("time")));
        for i in 0..LEVELS {
            push(format!("enc{}", i + 1), vec![wd[i], h >> i, w >> i], count(&under(&format!("enc{}", i + 1))));
        }
        push("tail".into(), vec![wd[LEVELS - 1], h >> (LEVELS - 1), w >> (LEVELS - 1)], count(&under("tail")));
        push("mid".into(), vec![wd[LEVELS - 1], h >> LEVELS, w >> LEVELS], count(&under("mid")));
        for i in (0..LEVELS).rev() {
            push(format!("dec{}", i + 1), vec![wd[i], h >> i, w >> i], count(&under(&format!("dec{}", i + 1))));
        }
        push("head".into(), vec![self.cfg.k, h, w], count(&under("head")));
        ArchitectureSummary {
            base_width: self.cfg.base_width,
            width_multiplier: self.cfg.width_multiplier(),
            widths: wd.to_vec(),
            stages,
            total_params: store.num_trainable(),
        }
    }
}

/// Builds a model with a fixed seed into a fresh store.
pub fn build<E: Element>(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<E>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(cfg, &mut store, &mut rng)?;
    Ok((model, store))
}

/// Exact number of trainable scalars.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    Ok(build::<f32>(cfg, 0)?.1.num_trainable())
}

/// Multiply-accumulate count and the matching FLOP estimate of one velocity evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopEstimate {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub macs: u64,
    /// `2 * macs`.
    pub flops: u64,
}

impl FlopEstimate {
    pub fn gmacs(&self) -> f64 {
        self.macs as f64 * 1e-9
    }
}

/// Counts the multiply-accumulates of convolutions and matrix products in one
/// inference-mode forward pass (condition encoding included) at `[1, J, 1, size, size]`.
pub fn estimate_flops(cfg: &ModelConfig, size: usize) -> Result<FlopEstimate> {
    let (model, store) = build::<f32>(cfg, 0)?;
    let tape = Tape::<f32>::new();
    let ctx = Ctx::new(&tape, &store, false, false);
    let cond = tape.constant(Tensor::zeros([1, cfg.j, size, size]));
    let z = tape.constant(Tensor::zeros([1, cfg.k, size, size]));
    model.forward(&ctx, z, &[0.5], cond)?;
    let macs = tape.macs();
    Ok(FlopEstimate { batch: 1, height: size, width: size, macs, flops: 2 * macs })
}

/// Names of trainable parameters, sorted.
pub fn parameter_names<E: Element>(store: &ParamStore<E>) -> Vec<String> {
    let mut v: Vec<String> = store.ids().filter(|&id| store.kind(id).trainable()).map(|id| store.name(id).to_string()).collect();
    v.sort();
    v
}

/// Identifier of a trainable parameter by name.
pub fn param_id<E: Element>(store: &ParamStore<E>, name: &str) -> Result<ParamId> {
    store.id(name).ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))
}
