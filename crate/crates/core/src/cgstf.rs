//! Condition-guided warping of backbone features.
//!
//! A small network predicts a bounded displacement field from conditional
//! features, the backbone map is resampled at the displaced grid with border
//! clamping, and the aligned map is fused with the condition by a 1x1 conv.
//!
//! Grids use the last axis ordered `(x, y)` with `x` along the width, and
//! normalized coordinates where -1 and 1 are the centres of the corner pixels.

use rfcast_autodiff::{Ctx, Element, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// `alpha = 2 / (W - 1)`: a unit pre-activation offset spans one pixel.
    Pixel,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CgstfConfig {
    pub enabled: bool,
    /// 1-based encoder stages that warp before fusing.
    pub stages: Vec<usize>,
    pub alpha_mode: AlphaMode,
}

impl Default for CgstfConfig {
    fn default() -> Self {
        Self { enabled: true, stages: vec![1, 2, 3], alpha_mode: AlphaMode::Pixel }
    }
}

impl AlphaMode {
    pub fn alpha(self, width: usize) -> f64 {
        match self {
            AlphaMode::Pixel => 2.0 / (width.max(2) - 1) as f64,
            AlphaMode::Fixed(a) => a,
        }
    }
}

/// Bilinear taps along one axis with border clamping.
/// Returns `(i0, i1, frac, inside)` where `inside` marks an unclamped coordinate.
fn taps(p: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let hi = (n - 1) as f64;
    let inside = (0.0..=hi).contains(&p);
    let pc = p.clamp(0.0, hi);
    let i0 = (pc.floor() as usize).min(n - 2);
    (i0, i0 + 1, pc - i0 as f64, inside)
}

/// Samples `[N, C, H, W]` features at pixel coordinates `[N, Ho, Wo, 2]`.
///
/// Coordinates beyond the image are clamped to the border pixel; their
/// coordinate gradient is zero.
pub fn sample_pixels<'t, E: Element>(feat: Var<'t, E>, coords: Var<'t, E>) -> Var<'t, E> {
    let f = feat.value();
    let g = coords.value();
    let (n, c, h, w) = f.dims4();
    let gs = g.shape().to_vec();
    assert!(gs.len() == 4 && gs[0] == n && gs[3] == 2, "sampling grid must be [N, Ho, Wo, 2], got {gs:?}");
    let (ho, wo) = (gs[1], gs[2]);
    let mut out = vec![E::zero(); n * c * ho * wo];
    let fd = f.data();
    let gd = g.data();
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let gi = ((b * ho + oy) * wo + ox) * 2;
                let (x0, x1, fx, _) = taps(gd[gi].as_f64(), w);
                let (y0, y1, fy, _) = taps(gd[gi + 1].as_f64(), h);
                let (fx, fy) = (E::lit(fx), E::lit(fy));
                let (gx, gy) = (E::one() - fx, E::one() - fy);
                for ch in 0..c {
                    let base = (b * c + ch) * h * w;
                    let top = fd[base + y0 * w + x0] * gx + fd[base + y0 * w + x1] * fx;
                    let bot = fd[base + y1 * w + x0] * gx + fd[base + y1 * w + x1] * fx;
                    out[((b * c + ch) * ho + oy) * wo + ox] = top * gy + bot * fy;
                }
            }
        }
    }
    feat.tape().add_macs((n * c * ho * wo * 4) as u64);
    let value = Tensor::new(vec![n, c, ho, wo], out);
    feat.tape().custom_op(&[feat, coords], value, move |ctx| {
        let (fv, gv) = (&ctx.inputs[0], &ctx.inputs[1]);
        let (fd, gd, up) = (fv.data(), gv.data(), ctx.grad.data());
        let mut dfeat = vec![E::zero(); fd.len()];
        let mut dgrid = vec![E::zero(); gd.len()];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gi = ((b * ho + oy) * wo + ox) * 2;
                    let (x0, x1, fx, in_x) = taps(gd[gi].as_f64(), w);
                    let (y0, y1, fy, in_y) = taps(gd[gi + 1].as_f64(), h);
                    let (fx, fy) = (E::lit(fx), E::lit(fy));
                    let (gx, gy) = (E::one() - fx, E::one() - fy);
                    let (mut sx, mut sy) = (E::zero(), E::zero());
                    for ch in 0..c {
                        let base = (b * c + ch) * h * w;
                        let u = up[((b * c + ch) * ho + oy) * wo + ox];
                        let (a, bb) = (fd[base + y0 * w + x0], fd[base + y0 * w + x1]);
                        let (cc, d) = (fd[base + y1 * w + x0], fd[base + y1 * w + x1]);
                        dfeat[base + y0 * w + x0] += u * gx * gy;
                        dfeat[base + y0 * w + x1] += u * fx * gy;
                        dfeat[base + y1 * w + x0] += u * gx * fy;
                        dfeat[base + y1 * w + x1] += u * fx * fy;
                        sx += u * (gy * (bb - a) + fy * (d - cc));
                        sy += u * (gx * (cc - a) + fx * (d - bb));
                    }
                    if in_x {
                        dgrid[gi] = sx;
                    }
                    if in_y {
                        dgrid[gi + 1] = sy;
                    }
                }
            }
        }
        vec![Some(Tensor::new(fv.shape().to_vec(), dfeat)), Some(Tensor::new(gv.shape().to_vec(), dgrid))]
    })
}

/// Per-axis scale from normalized to pixel units, shaped `[2]` as `(x, y)`.
fn pixel_scale<E: Element>(h: usize, w: usize) -> Tensor<E> {
    Tensor::from_f64([2], &[(w.max(1) - 1) as f64 / 2.0, (h.max(1) - 1) as f64 / 2.0])
}

/// Bilinear sampling at normalized grid `[N, Ho, Wo, 2]` with border padding.
pub fn grid_sample<'t, E: Element>(feat: Var<'t, E>, grid: Var<'t, E>) -> Var<'t, E> {
    let (_, _, h, w) = feat.dims4();
    let scale = feat.tape().constant(pixel_scale(h, w));
    sample_pixels(feat, grid.shift(1.0) * scale)
}

/// Corner-aligned base grid `[N, H, W, 2]` in normalized coordinates.
pub fn base_grid<E: Element>(n: usize, h: usize, w: usize) -> Tensor<E> {
    let lin = |i: usize, m: usize| if m > 1 { -1.0 + 2.0 * i as f64 / (m - 1) as f64 } else { 0.0 };
    Tensor::from_fn([n, h, w, 2], |idx| {
        let (p, axis) = (idx / 2, idx % 2);
        let (y, x) = ((p / w) % h, p % w);
        E::lit(if axis == 0 { lin(x, w) } else { lin(y, h) })
    })
}

/// Samples `feat` at the base grid displaced by `offsets` `[N, 2, H, W]` (normalized units).
///
/// The base grid is added in pixel units, so zero offsets reproduce `feat` exactly.
pub fn warp<'t, E: Element>(feat: Var<'t, E>, offsets: Var<'t, E>) -> Var<'t, E> {
    let (n, _, h, w) = feat.dims4();
    assert_eq!(offsets.shape(), vec![n, 2, h, w], "offsets must be [N, 2, H, W]");
    let tape = feat.tape();
    let base = Tensor::from_fn([n, h, w, 2], |idx| {
        let (p, axis) = (idx / 2, idx % 2);
        E::lit(if axis == 0 { (p % w) as f64 } else { ((p / w) % h) as f64 })
    });
    let shift = offsets.permute(&[0, 2, 3, 1]) * tape.constant(pixel_scale(h, w));
    sample_pixels(feat, tape.constant(base) + shift)
}

#[derive(Clone, Debug)]
pub struct OffsetNet {
    conv1: Conv2d,
    /// Final layer, zero-initialized so the warp starts at identity.
    pub conv2: Conv2d,
}

/// Warp-then-fuse at one encoder stage. `offset` is `None` for plain concat fusion.
#[derive(Clone, Debug)]
pub struct Cgstf {
    pub offset: Option<OffsetNet>,
    pub fuse: Conv2d,
    alpha_mode: AlphaMode,
}

/// Outputs of one stage.
pub struct CgstfOut<'t, E: Element> {
    pub out: Var<'t, E>,
    pub offsets: Option<Var<'t, E>>,
    pub warped: Var<'t, E>,
}

impl Cgstf {
    pub fn new<E: Element>(
        b: &mut Builder<'_, E>,
        c_main: usize,
        c_cond: usize,
        c_out: usize,
        warp_enabled: bool,
        alpha_mode: AlphaMode,
    ) -> Self {
        let offset = warp_enabled.then(|| {
            let mut s = b.sub("offset");
            let hidden = (c_cond / 2).max(2);
            OffsetNet { conv1: Conv2d::new(&mut s, "conv1", c_cond, hidden, 3, true), conv2: Conv2d::zeroed(&mut s, "conv2", hidden, 2, 3, true) }
        });
        let fuse = Conv2d::new(b, "fuse", c_main + c_cond, c_out, 1, true);
        Self { offset, fuse, alpha_mode }
    }

    /// `alpha * tanh(phi(f_cond))`, shaped `[N, 2, H, W]`.
    pub fn predict_offsets<'t, E: Element>(&self, ctx: &Ctx<'t, E>, f_cond: Var<'t, E>) -> Option<Var<'t, E>> {
        let net = self.offset.as_ref()?;
        let (_, _, _, w) = f_cond.dims4();
        let logits = net.conv2.forward(ctx, net.conv1.forward(ctx, f_cond).relu());
        Some(logits.tanh().scale(self.alpha_mode.alpha(w)))
    }

    /// 1x1 conv over the channel concatenation of the two maps.
    pub fn fuse<'t, E: Element>(&self, ctx: &Ctx<'t, E>, f_warp: Var<'t, E>, f_cond: Var<'t, E>) -> Result<Var<'t, E>> {
        let (nw, cw, hw, ww) = f_warp.dims4();
        let (nc, cc, hc, wc) = f_cond.dims4();
        if (nw, hw, ww) != (nc, hc, wc) || cw + cc != self.fuse.c_in {
            return Err(Error::Shape(format!(
                "fusion expects {} channels at equal size, got {:?} and {:?}",
                self.fuse.c_in,
                f_warp.shape(),
                f_cond.shape()
            )));
        }
        Ok(self.fuse.forward(ctx, Var::cat(&[f_warp, f_cond], 1)))
    }

    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, E>, f_main: Var<'t, E>, f_cond: Var<'t, E>) -> Result<CgstfOut<'t, E>> {
        let ((nm, _, hm, wm), (nc, _, hc, wc)) = (f_main.dims4(), f_cond.dims4());
        if (nm, hm, wm) != (nc, hc, wc) {
            return Err(Error::Shape(format!("alignment needs maps of equal size, got {:?} and {:?}", f_main.shape(), f_cond.shape())));
        }
        let offsets = self.predict_offsets(ctx, f_cond);
        let warped = match offsets {
            Some(o) => warp(f_main, o),
            None => f_main,
        };
        Ok(CgstfOut { out: self.fuse(ctx, warped, f_cond)?, offsets, warped })
    }
}
