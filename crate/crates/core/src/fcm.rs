//! Feature communication across pyramid levels.
//!
//! Three directional paths (top-down, bottom-up, lateral) are blended per
//! level, every level is then projected to a reference resolution where a
//! per-pixel softmax over scales weighs the other levels, and the result is
//! routed back and injected through a sigmoid gate.

use rfcast_autodiff::{Ctx, Element, ParamId, ParamKind, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvBn, Init, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FcmConfig {
    pub enabled: bool,
    /// 1-based pyramid level whose resolution hosts the cross-scale attention.
    pub reference_level: usize,
    pub gamma_init: f64,
    /// Kernel of the directional path blocks (1 or 3).
    pub path_kernel: usize,
}

impl Default for FcmConfig {
    fn default() -> Self {
        Self { enabled: true, reference_level: 2, gamma_init: 0.0, path_kernel: 1 }
    }
}

impl FcmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reference_level == 0 {
            return Err(Error::Config("fcm.reference_level is 1-based".into()));
        }
        if !matches!(self.path_kernel, 1 | 3) {
            return Err(Error::Config(format!("fcm.path_kernel must be 1 or 3, got {}", self.path_kernel)));
        }
        Ok(())
    }
}

/// Per-level maps of the three directional paths.
pub struct DirectionalPaths<'t, E: Element> {
    pub td: Vec<Var<'t, E>>,
    pub bu: Vec<Var<'t, E>>,
    pub lat: Vec<Var<'t, E>>,
}

/// Intermediate tensors of the cross-scale stage.
pub struct CrossScaleState<'t, E: Element> {
    pub aligned: Vec<Var<'t, E>>,
    /// `[N, L, H*, W*]`, softmax over axis 1. `None` for a single level.
    pub w_att: Option<Var<'t, E>>,
    pub enhanced_ref: Vec<Var<'t, E>>,
}

/// Everything produced by one forward pass, for inspection.
pub struct FcmTrace<'t, E: Element> {
    pub paths: DirectionalPaths<'t, E>,
    /// `[N, 3]` per level, ordered (td, bu, lat).
    pub alphas: Vec<Var<'t, E>>,
    pub fused: Vec<Var<'t, E>>,
    pub state: CrossScaleState<'t, E>,
    pub routed: Vec<Var<'t, E>>,
    pub gates: Vec<Var<'t, E>>,
    pub out: Vec<Var<'t, E>>,
}

/// Squeeze-excitation head producing three path logits.
#[derive(Clone, Debug)]
struct SeHead {
    fc1: Linear,
    fc2: Linear,
}

/// `sigmoid(BN(conv1x1(BN(relu(conv3x3(r))))))`.
#[derive(Clone, Debug)]
struct Gate {
    conv3: Conv2d,
    bn1: crate::nn::BatchNorm2d,
    conv1: Conv2d,
    bn2: crate::nn::BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct Fcm {
    widths: Vec<usize>,
    reference: usize,
    lat: Vec<ConvBn>,
    /// `td[i]` maps level `i + 1` to the width of level `i`.
    td: Vec<ConvBn>,
    /// `bu[i]` maps level `i` to the width of level `i + 1`.
    bu: Vec<ConvBn>,
    se: Vec<SeHead>,
    proj: Vec<Conv2d>,
    head: Option<(ConvBn, Conv2d)>,
    other: Option<Conv2d>,
    pub gamma: ParamId,
    /// Projection heads back to native widths (zero-initialized).
    pub route: Vec<Conv2d>,
    gates: Vec<Gate>,
}

impl Fcm {
    pub fn new<E: Element>(b: &mut Builder<'_, E>, widths: &[usize], cfg: &FcmConfig) -> Result<Self> {
        cfg.validate()?;
        let l = widths.len();
        if l == 0 || widths.contains(&0) {
            return Err(Error::Config("FCM needs at least one level of positive width".into()));
        }
        let reference = cfg.reference_level.min(l) - 1;
        let c_ref = widths[reference];
        let k = cfg.path_kernel;
        let lat = (0..l).map(|i| ConvBn::new(b, &format!("lat{}", i + 1), widths[i], widths[i], k, true)).collect();
        let td = (0..l.saturating_sub(1))
            .map(|i| ConvBn::new(b, &format!("td{}", i + 1), widths[i + 1], widths[i], k, true))
            .collect();
        let bu = (0..l.saturating_sub(1))
            .map(|i| ConvBn::new(b, &format!("bu{}", i + 2), widths[i], widths[i + 1], k, true))
            .collect();
        let se = (0..l)
            .map(|i| {
                let mut s = b.sub(&format!("se{}", i + 1));
                let hidden = (widths[i] / 4).max(1);
                SeHead { fc1: Linear::new(&mut s, "fc1", widths[i], hidden, true), fc2: Linear::new(&mut s, "fc2", hidden, 3, true) }
            })
            .collect();
        let proj = (0..l).map(|i| Conv2d::new(b, &format!("proj{}", i + 1), widths[i], c_ref, 1, true)).collect();
        let (head, other) = if l > 1 {
            let mut s = b.sub("att");
            let hidden = (c_ref / 2).max(1);
            let h1 = ConvBn::new(&mut s, "conv1", l * c_ref, hidden, 3, true);
            let h2 = Conv2d::new(&mut s, "conv2", hidden, l, 3, true);
            (Some((h1, h2)), Some(Conv2d::new(b, "other", (l - 1) * c_ref, c_ref, 1, true)))
        } else {
            (None, None)
        };
        let gamma = b.param("gamma", &[1], Init::Const(cfg.gamma_init), ParamKind::Scalar);
        let route = (0..l).map(|i| Conv2d::zeroed(b, &format!("route{}", i + 1), c_ref, widths[i], 1, true)).collect();
        let gates = (0..l)
            .map(|i| {
                let mut s = b.sub(&format!("gate{}", i + 1));
                let hidden = (widths[i] / 4).max(1);
                Gate {
                    conv3: Conv2d::new(&mut s, "conv3", widths[i], hidden, 3, true),
                    bn1: crate::nn::BatchNorm2d::new(&mut s, "bn1", hidden),
                    conv1: Conv2d::new(&mut s, "conv1", hidden, widths[i], 1, true),
                    bn2: crate::nn::BatchNorm2d::new(&mut s, "bn2", widths[i]),
                }
            })
            .collect();
        Ok(Self { widths: widths.to_vec(), reference, lat, td, bu, se, proj, head, other, gamma, route, gates })
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    fn check_pyramid<E: Element>(&self, pyr: &[Var<'_, E>]) -> Result<()> {
        if pyr.len() != self.widths.len() {
            return Err(Error::Shape(format!("pyramid has {} levels, FCM expects {}", pyr.len(), self.widths.len())));
        }
        let (n, _, h, w) = pyr[0].dims4();
        for (i, f) in pyr.iter().enumerate() {
            let (ni, ci, hi, wi) = f.dims4();
            let s = 1usize << i;
            if ni != n || ci != self.widths[i] || hi * s != h || wi * s != w {
                return Err(Error::Shape(format!(
                    "level {} is {:?}, expected [{n}, {}, {}, {}]",
                    i + 1,
                    f.shape(),
                    self.widths[i],
                    h / s,
                    w / s
                )));
            }
        }
        Ok(())
    }

    pub fn build_paths<'t, E: Element>(&self, ctx: &Ctx<'t, E>, pyr: &[Var<'t, E>]) -> Result<DirectionalPaths<'t, E>> {
        self.check_pyramid(pyr)?;
        let l = pyr.len();
        let lat: Vec<_> = (0..l).map(|i| self.lat[i].forward(ctx, pyr[i])).collect();
        let mut td = vec![lat[l - 1]; l];
        for i in (0..l - 1).rev() {
            let (_, _, h, w) = pyr[i].dims4();
            td[i] = self.td[i].forward(ctx, td[i + 1]).resize_bilinear(h, w);
        }
        let mut bu = vec![lat[0]; l];
        for i in 1..l {
            let (_, _, h, w) = pyr[i].dims4();
            bu[i] = self.bu[i - 1].forward(ctx, bu[i - 1]).resize_bilinear(h, w);
        }
        Ok(DirectionalPaths { td, bu, lat })
    }

    /// Path weights `[N, 3]` from the lateral map of every level.
    pub fn path_weights<'t, E: Element>(&self, ctx: &Ctx<'t, E>, paths: &DirectionalPaths<'t, E>) -> Vec<Var<'t, E>> {
        paths
            .lat
            .iter()
            .zip(&self.se)
            .map(|(&lat, se)| {
                let (n, c, _, _) = lat.dims4();
                let pooled = lat.mean_keepdim(&[2, 3]).reshape(vec![n, c]);
                se.fc2.forward(ctx, se.fc1.forward(ctx, pooled).relu()).softmax(1)
            })
            .collect()
    }

    /// Convex combination of the three paths with weights `[N, 3]` per level.
    pub fn fuse_directions<'t, E: Element>(paths: &DirectionalPaths<'t, E>, alphas: &[Var<'t, E>]) -> Vec<Var<'t, E>> {
        (0..paths.lat.len())
            .map(|i| {
                let n = alphas[i].shape()[0];
                let a = alphas[i].split(1, &[1, 1, 1]);
                let w = |j: usize| a[j].reshape(vec![n, 1, 1, 1]);
                paths.td[i] * w(0) + paths.bu[i] * w(1) + paths.lat[i] * w(2)
            })
            .collect()
    }

    pub fn cross_scale_communicate<'t, E: Element>(&self, ctx: &Ctx<'t, E>, fused: &[Var<'t, E>]) -> CrossScaleState<'t, E> {
        let (_, _, hr, wr) = fused[self.reference].dims4();
        let aligned: Vec<_> = fused.iter().zip(&self.proj).map(|(&f, p)| p.forward(ctx, f).resize_bilinear(hr, wr)).collect();
        let (Some((h1, h2)), Some(other)) = (&self.head, &self.other) else {
            return CrossScaleState { enhanced_ref: aligned.clone(), aligned, w_att: None };
        };
        let w_att = h2.forward(ctx, h1.forward(ctx, Var::cat(&aligned, 1))).softmax(1);
        let l = aligned.len();
        let weights = w_att.split(1, &vec![1; l]);
        let gamma = ctx.param(self.gamma);
        let enhanced_ref = (0..l)
            .map(|i| {
                let rest: Vec<_> = (0..l).filter(|&j| j != i).map(|j| aligned[j]).collect();
                let f_other = other.forward(ctx, Var::cat(&rest, 1));
                aligned[i] + (weights[i] * f_other) * gamma
            })
            .collect();
        CrossScaleState { aligned, w_att: Some(w_att), enhanced_ref }
    }

    /// Routes the enhanced maps back to native levels and injects them through gates.
    /// Returns `(routed, gates, out)`.
    #[allow(clippy::type_complexity)]
    pub fn gate_and_inject<'t, E: Element>(
        &self,
        ctx: &Ctx<'t, E>,
        state: &CrossScaleState<'t, E>,
        original: &[Var<'t, E>],
    ) -> (Vec<Var<'t, E>>, Vec<Var<'t, E>>, Vec<Var<'t, E>>) {
        let mut routed = Vec::new();
        let mut gates = Vec::new();
        let mut out = Vec::new();
        for (i, &f) in original.iter().enumerate() {
            let (_, _, h, w) = f.dims4();
            let r = self.route[i].forward(ctx, state.enhanced_ref[i].resize_bilinear(h, w));
            let g = &self.gates[i];
            let hidden = g.bn1.forward(ctx, g.conv3.forward(ctx, r).relu());
            let gate = g.bn2.forward(ctx, g.conv1.forward(ctx, hidden)).sigmoid();
            out.push(f + gate * r);
            routed.push(r);
            gates.push(gate);
        }
        (routed, gates, out)
    }

    pub fn forward_trace<'t, E: Element>(&self, ctx: &Ctx<'t, E>, pyr: &[Var<'t, E>]) -> Result<FcmTrace<'t, E>> {
        let paths = self.build_paths(ctx, pyr)?;
        let alphas = self.path_weights(ctx, &paths);
        let fused = Self::fuse_directions(&paths, &alphas);
        let state = self.cross_scale_communicate(ctx, &fused);
        let (routed, gates, out) = self.gate_and_inject(ctx, &state, pyr);
        Ok(FcmTrace { paths, alphas, fused, state, routed, gates, out })
    }

    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, E>, pyr: &[Var<'t, E>]) -> Result<Vec<Var<'t, E>>> {
        Ok(self.forward_trace(ctx, pyr)?.out)
    }
}
