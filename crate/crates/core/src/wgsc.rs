//! Wavelet-guided skip fusion.
//!
//! A fixed one-level db4 analysis of the conditional features drives a
//! guidance map; spatial and channel gates on the encoder skip and a
//! wavelet gate on the decoder stream are blended by a learned per-pixel
//! weight and refined by an output block.

use rfcast_autodiff::{Ctx, Element, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvBn, Linear};

/// db4 analysis low-pass taps, in convolution order.
pub const DB4_DEC_LO: [f64; 8] = [
    -0.010597401784997278,
    0.032883011666982945,
    0.030841381835986965,
    -0.18703481171888114,
    -0.02798376941698385,
    0.6308807679295904,
    0.7148465705525415,
    0.23037781330885523,
];

/// db4 analysis high-pass taps (quadrature mirror of the low-pass).
pub const DB4_DEC_HI: [f64; 8] = [
    -0.23037781330885523,
    0.7148465705525415,
    -0.6308807679295904,
    -0.02798376941698385,
    0.18703481171888114,
    0.030841381835986965,
    -0.032883011666982945,
    -0.010597401784997278,
];

/// Smallest spatial size accepted by [`dwt2_db4`].
pub const DB4_SUPPORT: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WgscConfig {
    pub enabled: bool,
    /// 1-based decoder levels whose skips are gated.
    pub skip_levels: Vec<usize>,
    pub wavelet: String,
}

impl Default for WgscConfig {
    fn default() -> Self {
        Self { enabled: true, skip_levels: vec![3, 4], wavelet: "db4".into() }
    }
}

impl WgscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.wavelet != "db4" {
            return Err(Error::Config(format!("wgsc.wavelet must be \"db4\", got {:?}", self.wavelet)));
        }
        Ok(())
    }
}

/// Half-sample symmetric index: `x[-1] = x[0]`, `x[n] = x[n - 1]`.
pub fn reflect(i: isize, n: usize) -> usize {
    let p = 2 * n as isize;
    let m = i.rem_euclid(p) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// One-level analysis along a line: `y[k] = sum_j dec[j] * x~[2k + 4 - j]`, `k < ceil(n / 2)`.
pub fn analyze_1d(x: &[f64], dec: &[f64; 8]) -> Vec<f64> {
    let n = x.len();
    (0..n.div_ceil(2))
        .map(|k| (0..8).map(|j| dec[j] * x[reflect(2 * k as isize + 4 - j as isize, n)]).sum())
        .collect()
}

/// The four bands of a one-level 2-D transform, each `[N, C, ceil(H/2), ceil(W/2)]`.
///
/// `lh` is low-pass along the width and high-pass along the height, `hl` the reverse.
#[derive(Clone, Debug)]
pub struct WaveletBands<E> {
    pub ll: Tensor<E>,
    pub lh: Tensor<E>,
    pub hl: Tensor<E>,
    pub hh: Tensor<E>,
}

/// Separable db4 analysis of `[N, C, H, W]`: rows first, then columns.
pub fn dwt2_db4<E: Element>(x: &Tensor<E>) -> Result<WaveletBands<E>> {
    let (n, c, h, w) = x.dims4();
    if h < DB4_SUPPORT || w < DB4_SUPPORT {
        return Err(Error::Shape(format!("db4 analysis needs at least {DB4_SUPPORT}x{DB4_SUPPORT}, got {h}x{w}")));
    }
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let mut bands = [vec![0.0f64; n * c * h2 * w2], vec![0.0; n * c * h2 * w2], vec![0.0; n * c * h2 * w2], vec![0.0; n * c * h2 * w2]];
    let xd = x.to_f64_vec();
    let mut row_lo = vec![0.0; h * w2];
    let mut row_hi = vec![0.0; h * w2];
    for p in 0..n * c {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let line = &plane[y * w..(y + 1) * w];
            row_lo[y * w2..(y + 1) * w2].copy_from_slice(&analyze_1d(line, &DB4_DEC_LO));
            row_hi[y * w2..(y + 1) * w2].copy_from_slice(&analyze_1d(line, &DB4_DEC_HI));
        }
        for xx in 0..w2 {
            let col_lo: Vec<f64> = (0..h).map(|y| row_lo[y * w2 + xx]).collect();
            let col_hi: Vec<f64> = (0..h).map(|y| row_hi[y * w2 + xx]).collect();
            let outs = [
                analyze_1d(&col_lo, &DB4_DEC_LO),
                analyze_1d(&col_lo, &DB4_DEC_HI),
                analyze_1d(&col_hi, &DB4_DEC_LO),
                analyze_1d(&col_hi, &DB4_DEC_HI),
            ];
            for (band, o) in bands.iter_mut().zip(outs) {
                for (y, v) in o.into_iter().enumerate() {
                    band[p * h2 * w2 + y * w2 + xx] = v;
                }
            }
        }
    }
    let mk = |v: &[f64]| Tensor::from_f64([n, c, h2, w2], v);
    Ok(WaveletBands { ll: mk(&bands[0]), lh: mk(&bands[1]), hl: mk(&bands[2]), hh: mk(&bands[3]) })
}

/// Half-sample symmetric extension of `[N, C, H, W]` to `[N, C, ho, wo]` (`ho >= H`, `wo >= W`).
pub fn symmetric_pad<E: Element>(x: &Tensor<E>, ho: usize, wo: usize) -> Tensor<E> {
    let (n, c, h, w) = x.dims4();
    let d = x.data();
    Tensor::from_fn([n, c, ho, wo], |i| {
        let (p, r) = (i / (ho * wo), i % (ho * wo));
        let (y, xx) = (reflect((r / wo) as isize, h), reflect((r % wo) as isize, w));
        d[p * h * w + y * w + xx]
    })
}

/// Gates produced for one skip.
pub struct GateTriple<'t, E: Element> {
    /// `[N, 1, H, W]`
    pub m_s: Var<'t, E>,
    /// `[N, C, 1, 1]`
    pub m_c: Var<'t, E>,
    /// `[N, C, H, W]`
    pub m_w: Var<'t, E>,
}

pub struct WgscTrace<'t, E: Element> {
    pub a_wav: Var<'t, E>,
    pub gates: GateTriple<'t, E>,
    pub p_enc: Var<'t, E>,
    pub p_dec: Var<'t, E>,
    pub omega: Var<'t, E>,
    pub fused: Var<'t, E>,
    pub out: Var<'t, E>,
}

#[derive(Clone, Debug)]
pub struct Wgsc {
    c: usize,
    low: Conv2d,
    high: Conv2d,
    fuse: Conv2d,
    sa: Conv2d,
    ca1: Linear,
    ca2: Linear,
    mw1: Conv2d,
    mw2: Conv2d,
    enc_proc: Conv2d,
    dec_proc: Conv2d,
    fusion: Conv2d,
    out: ConvBn,
}

impl Wgsc {
    /// `c` is the width of the encoder, decoder and conditional maps.
    pub fn new<E: Element>(b: &mut Builder<'_, E>, c: usize) -> Self {
        let stem = (c / 4).max(1);
        let proc = (c / 4).max(1);
        let hidden = (c / 4).max(1);
        let mut g = b.sub("guide");
        let low = Conv2d::new(&mut g, "low", c, stem, 1, true);
        let high = Conv2d::new(&mut g, "high", 3 * c, stem, 1, true);
        let fuse = Conv2d::new(&mut g, "fuse", 2 * stem, c, 1, true);
        let sa = Conv2d::new(b, "sa", 2, 1, 7, true);
        let mut ca = b.sub("ca");
        let ca1 = Linear::new(&mut ca, "fc1", 3 * c, hidden, true);
        let ca2 = Linear::new(&mut ca, "fc2", hidden, c, true);
        let mut mw = b.sub("mw");
        let mw1 = Conv2d::new(&mut mw, "conv1", c, hidden, 1, true);
        let mw2 = Conv2d::new(&mut mw, "conv2", hidden, c, 1, true);
        let enc_proc = Conv2d::new(b, "enc_proc", c, proc, 3, true);
        let dec_proc = Conv2d::new(b, "dec_proc", c, proc, 3, true);
        let fusion = Conv2d::new(b, "fusion", 2 * proc, proc, 1, true);
        let out = ConvBn::new(b, "out", proc + c, c, 1, true);
        Self { c, low, high, fuse, sa, ca1, ca2, mw1, mw2, enc_proc, dec_proc, fusion, out }
    }

    /// Frequency-aware guidance map in `[0, 1]`, same shape as `f_cond`.
    ///
    /// The transform sees a detached copy of `f_cond`. Maps smaller than the
    /// filter support or of odd size are symmetrically extended first and the
    /// guidance is cropped back afterwards.
    pub fn guidance<'t, E: Element>(&self, ctx: &Ctx<'t, E>, f_cond: Var<'t, E>) -> Result<Var<'t, E>> {
        let (_, c, h, w) = f_cond.dims4();
        if c != self.c {
            return Err(Error::Shape(format!("guidance expects {} channels, got {c}", self.c)));
        }
        let ext = |m: usize| m.max(DB4_SUPPORT).next_multiple_of(2);
        let (hp, wp) = (ext(h), ext(w));
        let src = f_cond.value();
        let padded = if (hp, wp) == (h, w) { (*src).clone() } else { symmetric_pad(&src, hp, wp) };
        let bands = dwt2_db4(&padded)?;
        let tape = ctx.tape;
        let ll = tape.constant(bands.ll);
        let hi = tape.constant(concat_channels(&[&bands.lh, &bands.hl, &bands.hh]));
        let q_low = self.low.forward(ctx, ll).relu().resize_bilinear(hp, wp);
        let q_high = self.high.forward(ctx, hi).relu().resize_bilinear(hp, wp);
        let mut a = self.fuse.forward(ctx, Var::cat(&[q_low, q_high], 1)).sigmoid();
        if (hp, wp) != (h, w) {
            a = a.narrow(2, 0, h).narrow(3, 0, w);
        }
        Ok(a)
    }

    pub fn synthesize_gates<'t, E: Element>(
        &self,
        ctx: &Ctx<'t, E>,
        f_enc: Var<'t, E>,
        f_dec: Var<'t, E>,
        a_wav: Var<'t, E>,
    ) -> Result<GateTriple<'t, E>> {
        let s = f_enc.shape();
        if f_dec.shape() != s || a_wav.shape() != s || s[1] != self.c {
            return Err(Error::Shape(format!(
                "skip fusion expects equal [N, {}, H, W] maps, got {:?}, {:?}, {:?}",
                self.c,
                s,
                f_dec.shape(),
                a_wav.shape()
            )));
        }
        let n = s[0];
        let comb = Var::cat(&[f_enc, f_dec, a_wav], 1);
        let pooled = Var::cat(&[comb.mean_keepdim(&[1]), comb.max_keepdim(1)], 1);
        let m_s = self.sa.forward(ctx, pooled).sigmoid();
        let squeezed = comb.mean_keepdim(&[2, 3]).reshape(vec![n, 3 * self.c]);
        let m_c = self.ca2.forward(ctx, self.ca1.forward(ctx, squeezed).relu()).sigmoid().reshape(vec![n, self.c, 1, 1]);
        let m_w = self.mw2.forward(ctx, self.mw1.forward(ctx, a_wav).relu()).sigmoid();
        Ok(GateTriple { m_s, m_c, m_w })
    }

    /// `omega * p_enc + (1 - omega) * p_dec`.
    pub fn blend<'t, E: Element>(omega: Var<'t, E>, p_enc: Var<'t, E>, p_dec: Var<'t, E>) -> Var<'t, E> {
        omega * p_enc + omega.neg().shift(1.0) * p_dec
    }

    pub fn forward_trace<'t, E: Element>(
        &self,
        ctx: &Ctx<'t, E>,
        f_enc: Var<'t, E>,
        f_dec: Var<'t, E>,
        f_cond: Var<'t, E>,
    ) -> Result<WgscTrace<'t, E>> {
        let a_wav = self.guidance(ctx, f_cond)?;
        let gates = self.synthesize_gates(ctx, f_enc, f_dec, a_wav)?;
        let enc_mod = f_enc * gates.m_s * gates.m_c;
        let dec_mod = f_dec * gates.m_w;
        let p_enc = self.enc_proc.forward(ctx, enc_mod);
        let p_dec = self.dec_proc.forward(ctx, dec_mod);
        let omega = self.fusion.forward(ctx, Var::cat(&[p_enc, p_dec], 1)).sigmoid();
        let fused = Self::blend(omega, p_enc, p_dec);
        let out = self.out.forward(ctx, Var::cat(&[fused, f_enc], 1));
        Ok(WgscTrace { a_wav, gates, p_enc, p_dec, omega, fused, out })
    }

    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, E>, f_enc: Var<'t, E>, f_dec: Var<'t, E>, f_cond: Var<'t, E>) -> Result<Var<'t, E>> {
        Ok(self.forward_trace(ctx, f_enc, f_dec, f_cond)?.out)
    }
}

fn concat_channels<E: Element>(parts: &[&Tensor<E>]) -> Tensor<E> {
    let (n, _, h, w) = parts[0].dims4();
    let c: usize = parts.iter().map(|t| t.shape()[1]).sum();
    let mut out = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for t in parts {
            let ci = t.shape()[1];
            out.extend_from_slice(&t.data()[b * ci * h * w..(b + 1) * ci * h * w]);
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rfcast_autodiff::{ParamStore, Tape};

    #[test]
    fn filter_identities() {
        let s: f64 = DB4_DEC_LO.iter().sum();
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
        assert!(DB4_DEC_HI.iter().sum::<f64>().abs() < 1e-12);
        let e: f64 = DB4_DEC_LO.iter().map(|v| v * v).sum();
        assert!((e - 1.0).abs() < 1e-10);
    }

    #[test]
    fn reflect_is_half_sample() {
        let idx: Vec<_> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, [2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn constant_input_bands() {
        let x = Tensor::<f64>::full([1, 2, 9, 12], 0.7);
        let b = dwt2_db4(&x).unwrap();
        assert_eq!(b.ll.shape(), &[1, 2, 5, 6]);
        assert!(b.ll.data().iter().all(|v| (v - 1.4).abs() < 1e-9));
        for band in [&b.lh, &b.hl, &b.hh] {
            assert!(band.max_abs() < 1e-9);
        }
        assert!(dwt2_db4(&Tensor::<f64>::zeros([1, 1, 7, 8])).is_err());
    }

    #[test]
    fn guidance_and_gates_in_range_and_isolated() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Wgsc::new(&mut Builder::new(&mut store, &mut rng), 8);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, true, false);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut g = |s: &[usize]| tape.constant(crate::flow::gaussian(s, &mut r));
        let (enc, dec, cond) = (g(&[2, 8, 4, 6]), g(&[2, 8, 4, 6]), g(&[2, 8, 4, 6]));
        let tr = m.forward_trace(&ctx, enc, dec, cond).unwrap();
        assert_eq!(tr.a_wav.shape(), vec![2, 8, 4, 6]);
        assert_eq!(tr.gates.m_s.shape(), vec![2, 1, 4, 6]);
        assert_eq!(tr.gates.m_c.shape(), vec![2, 8, 1, 1]);
        assert_eq!(tr.out.shape(), vec![2, 8, 4, 6]);
        for v in [tr.a_wav, tr.gates.m_s, tr.gates.m_c, tr.gates.m_w, tr.omega] {
            assert!(v.value().data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
        let enc2 = g(&[2, 8, 4, 6]);
        let tr2 = m.forward_trace(&ctx, enc2, dec, cond).unwrap();
        assert_eq!(*tr2.gates.m_w.value(), *m.forward_trace(&ctx, enc, dec, cond).unwrap().gates.m_w.value());
        let one = tape.constant(Tensor::ones(tr.p_enc.shape()));
        assert_eq!(*Wgsc::blend(one, tr.p_enc, tr.p_dec).value(), *tr.p_enc.value());
    }
}
