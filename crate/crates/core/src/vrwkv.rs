//! Linear-time bidirectional token mixing for the deep stages.
//!
//! `bi_wkv` computes, per channel,
//! `out_t = (sum_{i != t} e^{k_i - w (|t - i| - 1)} v_i + e^{u + k_t} v_t) / (same without v)`
//! with one forward and one backward scan. Sums are carried as `a * e^p`
//! with a running maximum `p` so no exponential overflows.

use rfcast_autodiff::{Ctx, Element, ParamId, ParamKind, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{from_tokens, to_tokens, Builder, Init, LayerNorm, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VrwkvStage {
    EncoderTail,
    Bottleneck,
    DecoderFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayDistance {
    /// Decay by `|t - i| - 1`.
    Raw,
    /// Decay by `(|t - i| - 1) / T`.
    Normalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VrwkvConfig {
    pub enabled: bool,
    pub stages: Vec<VrwkvStage>,
    pub blocks_per_stage: usize,
    pub distance: DecayDistance,
}

impl Default for VrwkvConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            stages: vec![VrwkvStage::EncoderTail, VrwkvStage::Bottleneck, VrwkvStage::DecoderFirst],
            blocks_per_stage: 1,
            distance: DecayDistance::Raw,
        }
    }
}

impl VrwkvConfig {
    pub fn active(&self, stage: VrwkvStage) -> bool {
        self.enabled && self.stages.contains(&stage)
    }
}

/// Decayed one-sided sums over a line.
struct Scan {
    /// `a[s][i]` for each series `s`, scaled by `e^{p[i]}`.
    a: Vec<Vec<f64>>,
    /// Distance-weighted companions, same scale.
    m: Vec<Vec<f64>>,
    p: Vec<f64>,
}

/// For every `i`, `sum_{t before i} x_s[t] e^{off[t] - w (dist(t, i) - 1)}` where "before" is
/// `t < i` (forward) or `t > i` (reverse), along with the sums weighted by `dist - 1`.
fn decayed_sums(xs: &[&[f64]], off: &[f64], w: f64, reverse: bool, with_dist: bool) -> Scan {
    let t_len = off.len();
    let ns = xs.len();
    let mut a = vec![vec![0.0; t_len]; ns];
    let mut m = vec![vec![0.0; if with_dist { t_len } else { 0 }]; ns];
    let mut p = vec![f64::NEG_INFINITY; t_len];
    let (mut ca, mut cm, mut cp) = (vec![0.0; ns], vec![0.0; ns], f64::NEG_INFINITY);
    let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..t_len).rev()) } else { Box::new(0..t_len) };
    for i in order {
        p[i] = cp;
        for s in 0..ns {
            a[s][i] = ca[s];
            if with_dist {
                m[s][i] = cm[s];
            }
        }
        // advance: decay every stored term by one step and admit x[i] at distance 1
        let np = (cp - w).max(off[i]);
        let f_old = if cp == f64::NEG_INFINITY { 0.0 } else { (cp - w - np).exp() };
        let f_new = (off[i] - np).exp();
        for s in 0..ns {
            if with_dist {
                cm[s] = (cm[s] + ca[s]) * f_old;
            }
            ca[s] = ca[s] * f_old + xs[s][i] * f_new;
        }
        cp = np;
    }
    Scan { a, m, p }
}

fn scaled(a: f64, p: f64, shift: f64) -> f64 {
    if p == f64::NEG_INFINITY {
        0.0
    } else {
        a * (p + shift).exp()
    }
}

struct LineForward {
    out: Vec<f64>,
    den: Vec<f64>,
    q: Vec<f64>,
}

fn line_forward(k: &[f64], v: &[f64], w: f64, u: f64) -> LineForward {
    let t_len = k.len();
    let ones = vec![1.0; t_len];
    let l = decayed_sums(&[v, &ones], k, w, false, false);
    let r = decayed_sums(&[v, &ones], k, w, true, false);
    let mut out = vec![0.0; t_len];
    let mut den = vec![0.0; t_len];
    let mut q = vec![0.0; t_len];
    for t in 0..t_len {
        let e = u + k[t];
        let qt = e.max(l.p[t]).max(r.p[t]);
        let num = scaled(l.a[0][t], l.p[t], -qt) + scaled(r.a[0][t], r.p[t], -qt) + (e - qt).exp() * v[t];
        let d = scaled(l.a[1][t], l.p[t], -qt) + scaled(r.a[1][t], r.p[t], -qt) + (e - qt).exp();
        out[t] = num / d;
        den[t] = d;
        q[t] = qt;
    }
    LineForward { out, den, q }
}

/// Gradients of one line for upstream `g`: `(dk, dv, dw, du)`.
fn line_backward(k: &[f64], v: &[f64], w: f64, u: f64, g: &[f64]) -> (Vec<f64>, Vec<f64>, f64, f64) {
    let t_len = k.len();
    let f = line_forward(k, v, w, u);
    let y: Vec<f64> = (0..t_len).map(|t| g[t] / f.den[t]).collect();
    let yo: Vec<f64> = (0..t_len).map(|t| y[t] * f.out[t]).collect();
    let off: Vec<f64> = f.q.iter().map(|q| -q).collect();
    let l = decayed_sums(&[&y, &yo], &off, w, false, true);
    let r = decayed_sums(&[&y, &yo], &off, w, true, true);
    let (mut dk, mut dv) = (vec![0.0; t_len], vec![0.0; t_len]);
    let (mut dw, mut du) = (0.0, 0.0);
    for i in 0..t_len {
        let self_w = (u + k[i] - f.q[i]).exp();
        let s1 = scaled(l.a[0][i], l.p[i], k[i]) + scaled(r.a[0][i], r.p[i], k[i]);
        let s2 = scaled(l.a[1][i], l.p[i], k[i]) + scaled(r.a[1][i], r.p[i], k[i]);
        let m1 = scaled(l.m[0][i], l.p[i], k[i]) + scaled(r.m[0][i], r.p[i], k[i]);
        let m2 = scaled(l.m[1][i], l.p[i], k[i]) + scaled(r.m[1][i], r.p[i], k[i]);
        dv[i] = s1 + y[i] * self_w;
        dk[i] = v[i] * dv[i] - (s2 + yo[i] * self_w);
        dw -= v[i] * m1 - m2;
        du += y[i] * self_w * (v[i] - f.out[i]);
    }
    (dk, dv, dw, du)
}

/// Bidirectional WKV over `[B, T, D]` keys and values with per-channel decay `w >= 0` and bonus `u`, both `[D]`.
pub fn bi_wkv<'t, E: Element>(k: Var<'t, E>, v: Var<'t, E>, w: Var<'t, E>, u: Var<'t, E>) -> Var<'t, E> {
    let ks = k.shape();
    assert!(ks.len() == 3 && v.shape() == ks, "bi_wkv expects equal [B, T, D] keys and values");
    let (b, t_len, d) = (ks[0], ks[1], ks[2]);
    assert!(t_len >= 1, "bi_wkv needs at least one token");
    assert!(w.shape() == vec![d] && u.shape() == vec![d], "decay and bonus must be [D]");
    let lines = move |kv: &Tensor<E>, vv: &Tensor<E>, bb: usize, c: usize| -> (Vec<f64>, Vec<f64>) {
        let idx = move |t: usize| (bb * t_len + t) * d + c;
        ((0..t_len).map(|t| kv.data()[idx(t)].as_f64()).collect(), (0..t_len).map(|t| vv.data()[idx(t)].as_f64()).collect())
    };
    let (kv, vv, wv, uv) = (k.value(), v.value(), w.value(), u.value());
    let mut out = vec![E::zero(); b * t_len * d];
    for bb in 0..b {
        for c in 0..d {
            let (kl, vl) = lines(&kv, &vv, bb, c);
            let f = line_forward(&kl, &vl, wv.data()[c].as_f64(), uv.data()[c].as_f64());
            for t in 0..t_len {
                out[(bb * t_len + t) * d + c] = E::lit(f.out[t]);
            }
        }
    }
    k.tape().add_macs((b * t_len * d * 8) as u64);
    k.tape().custom_op(&[k, v, w, u], Tensor::new(ks.clone(), out), move |ctx| {
        let (kv, vv, wv, uv) = (&ctx.inputs[0], &ctx.inputs[1], &ctx.inputs[2], &ctx.inputs[3]);
        let g = ctx.grad.data();
        let mut dk = vec![E::zero(); b * t_len * d];
        let mut dv = vec![E::zero(); b * t_len * d];
        let mut dw = vec![E::zero(); d];
        let mut du = vec![E::zero(); d];
        for bb in 0..b {
            for c in 0..d {
                let (kl, vl) = lines(kv, vv, bb, c);
                let gl: Vec<f64> = (0..t_len).map(|t| g[(bb * t_len + t) * d + c].as_f64()).collect();
                let (lk, lv, lw, lu) = line_backward(&kl, &vl, wv.data()[c].as_f64(), uv.data()[c].as_f64(), &gl);
                for t in 0..t_len {
                    dk[(bb * t_len + t) * d + c] = E::lit(lk[t]);
                    dv[(bb * t_len + t) * d + c] = E::lit(lv[t]);
                }
                dw[c] += E::lit(lw);
                du[c] += E::lit(lu);
            }
        }
        vec![
            Some(Tensor::new(ks.clone(), dk)),
            Some(Tensor::new(ks.clone(), dv)),
            Some(Tensor::new(vec![d], dw)),
            Some(Tensor::new(vec![d], du)),
        ]
    })
}

/// Shifts four channel quarters of `[N, C, H, W]` by `shift` pixels right, left, down and up,
/// filling vacated pixels with zeros.
pub fn q_shift<'t, E: Element>(x: Var<'t, E>, shift: usize) -> Result<Var<'t, E>> {
    let (n, c, h, w) = x.dims4();
    if c % 4 != 0 {
        return Err(Error::Shape(format!("q_shift needs channels divisible by 4, got {c}")));
    }
    if shift == 0 {
        return Ok(x);
    }
    let q = c / 4;
    let s = shift as isize;
    // source offset (dy, dx) per quarter: out[y][x] = in[y - dy][x - dx]
    let offsets = [(0, s), (0, -s), (s, 0), (-s, 0)];
    let src_of = move |ch: usize, y: usize, xx: usize| -> Option<usize> {
        let (dy, dx) = offsets[ch / q];
        let (sy, sx) = (y as isize - dy, xx as isize - dx);
        (sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w).then(|| sy as usize * w + sx as usize)
    };
    let xv = x.value();
    let mut out = vec![E::zero(); xv.numel()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for y in 0..h {
                for xx in 0..w {
                    if let Some(si) = src_of(ch, y, xx) {
                        out[base + y * w + xx] = xv.data()[base + si];
                    }
                }
            }
        }
    }
    Ok(x.tape().custom_op(&[x], Tensor::new(vec![n, c, h, w], out), move |ctx| {
        let g = ctx.grad.data();
        let mut dx = vec![E::zero(); g.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for y in 0..h {
                    for xx in 0..w {
                        if let Some(si) = src_of(ch, y, xx) {
                            dx[base + si] += g[base + y * w + xx];
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::new(vec![n, c, h, w], dx))]
    }))
}

/// Token mixing with `r`, `k`, `v` projections compressed to `C / 4`.
#[derive(Clone, Debug)]
pub struct SpatialMix {
    ln: LayerNorm,
    key: Linear,
    value: Linear,
    receptance: Linear,
    /// Log of the per-channel decay.
    pub decay: ParamId,
    pub bonus: ParamId,
    /// Output projection, zero-initialized.
    pub output: Linear,
    distance: DecayDistance,
}

/// Gated two-layer feed-forward with a squared-ReLU hidden layer of width `C / 4`.
#[derive(Clone, Debug)]
pub struct ChannelMix {
    ln: LayerNorm,
    key: Linear,
    receptance: Linear,
    /// Output projection, zero-initialized.
    pub value: Linear,
}

/// One spatial-mix followed by one channel-mix.
#[derive(Clone, Debug)]
pub struct VrwkvBlock {
    pub spatial: SpatialMix,
    pub channel: ChannelMix,
}

/// Spatial-mix intermediates.
pub struct SpatialTrace<'t, E: Element> {
    pub v: Var<'t, E>,
    pub wkv: Var<'t, E>,
    /// `sigmoid(r) * wkv`, before the output projection.
    pub gated: Var<'t, E>,
    pub out: Var<'t, E>,
}

impl SpatialMix {
    pub fn new<E: Element>(b: &mut Builder<'_, E>, c: usize, distance: DecayDistance) -> Self {
        let h = c / 4;
        let ln = LayerNorm::new(b, "ln", c);
        let key = Linear::new(b, "key", c, h, false);
        let value = Linear::new(b, "value", c, h, false);
        let receptance = Linear::new(b, "receptance", c, h, false);
        // decays spread from slow to fast across channels
        let ramp: Vec<f64> = (0..h).map(|i| -3.0 + 3.0 * i as f64 / (h.max(2) - 1) as f64).collect();
        let decay = b.param_value("decay", Tensor::from_f64([h], &ramp), ParamKind::Weight);
        let bonus = b.param("bonus", &[h], Init::Const(0.5), ParamKind::Weight);
        let output = Linear::zeroed(b, "output", h, c, false);
        Self { ln, key, value, receptance, decay, bonus, output, distance }
    }

    pub fn forward_trace<'t, E: Element>(&self, ctx: &Ctx<'t, E>, x: Var<'t, E>) -> Result<SpatialTrace<'t, E>> {
        let (_, _, h, w) = x.dims4();
        let normed = from_tokens(self.ln.forward(ctx, to_tokens(x)), h, w);
        let tok = to_tokens(q_shift(normed, 1)?);
        let k = self.key.forward(ctx, tok);
        let v = self.value.forward(ctx, tok);
        let r = self.receptance.forward(ctx, tok).sigmoid();
        let mut decay = ctx.param(self.decay).exp();
        if self.distance == DecayDistance::Normalized {
            decay = decay.scale(1.0 / (h * w) as f64);
        }
        let wkv = bi_wkv(k, v, decay, ctx.param(self.bonus));
        let gated = r * wkv;
        let out = x + from_tokens(self.output.forward(ctx, gated), h, w);
        Ok(SpatialTrace { v, wkv, gated, out })
    }
}

impl ChannelMix {
    pub fn new<E: Element>(b: &mut Builder<'_, E>, c: usize) -> Self {
        Self {
            ln: LayerNorm::new(b, "ln", c),
            key: Linear::new(b, "key", c, c / 4, false),
            receptance: Linear::new(b, "receptance", c, c, false),
            value: Linear::zeroed(b, "value", c / 4, c, false),
        }
    }

    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let (_, _, h, w) = x.dims4();
        let normed = from_tokens(self.ln.forward(ctx, to_tokens(x)), h, w);
        let tok = to_tokens(q_shift(normed, 1)?);
        let hidden = self.key.forward(ctx, tok).relu().square();
        let r = self.receptance.forward(ctx, tok).sigmoid();
        Ok(x + from_tokens(r * self.value.forward(ctx, hidden), h, w))
    }
}

impl VrwkvBlock {
    pub fn new<E: Element>(b: &mut Builder<'_, E>, c: usize, distance: DecayDistance) -> Result<Self> {
        if c % 4 != 0 || c == 0 {
            return Err(Error::Config(format!("token mixing needs a positive width divisible by 4, got {c}")));
        }
        Ok(Self { spatial: SpatialMix::new(&mut b.sub("spatial"), c, distance), channel: ChannelMix::new(&mut b.sub("channel"), c) })
    }

    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let y = self.spatial.forward_trace(ctx, x)?.out;
        self.channel.forward(ctx, y)
    }
}
