//! Spline-based token operator for the bottleneck.
//!
//! Each edge carries `w_b * silu(x) + sum_j c_j B_j(x)` with cubic B-splines on
//! a uniform grid of 5 intervals over `[-1, 1]`, extended by the spline order
//! on both sides.

use rfcast_autodiff::{Ctx, Element, ParamId, ParamKind, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::nn::{Builder, Init, LayerNorm, Linear};

pub const GRID_SIZE: usize = 5;
pub const SPLINE_ORDER: usize = 3;
pub const GRID_RANGE: (f64, f64) = (-1.0, 1.0);
/// Basis functions per input.
pub const N_BASIS: usize = GRID_SIZE + SPLINE_ORDER;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KanMode {
    Spline,
    FeedForward,
}

fn knots() -> Vec<f64> {
    let h = (GRID_RANGE.1 - GRID_RANGE.0) / GRID_SIZE as f64;
    (0..GRID_SIZE + 2 * SPLINE_ORDER + 1).map(|j| GRID_RANGE.0 + (j as f64 - SPLINE_ORDER as f64) * h).collect()
}

/// Values and derivatives of the `N_BASIS` cubic B-splines at `x`.
pub fn bspline_basis(x: f64) -> ([f64; N_BASIS], [f64; N_BASIS]) {
    let t = knots();
    let nk = t.len();
    // order-0 indicators on half-open intervals
    let mut b: Vec<f64> = (0..nk - 1).map(|i| if x >= t[i] && x < t[i + 1] { 1.0 } else { 0.0 }).collect();
    let mut prev = b.clone();
    for k in 1..=SPLINE_ORDER {
        prev = b.clone();
        b = (0..nk - 1 - k)
            .map(|i| {
                let left = (x - t[i]) / (t[i + k] - t[i]) * prev[i];
                let right = (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * prev[i + 1];
                left + right
            })
            .collect();
    }
    let k = SPLINE_ORDER as f64;
    let mut val = [0.0; N_BASIS];
    let mut der = [0.0; N_BASIS];
    for i in 0..N_BASIS {
        val[i] = b[i];
        der[i] = k * (prev[i] / (t[i + SPLINE_ORDER] - t[i]) - prev[i + 1] / (t[i + SPLINE_ORDER + 1] - t[i + 1]));
    }
    (val, der)
}

/// Expands `[..., D]` to `[..., D * N_BASIS]` spline features.
pub fn spline_features<'t, E: Element>(x: Var<'t, E>) -> Var<'t, E> {
    let shape = x.shape();
    let xv = x.value();
    let n = xv.numel();
    let mut out = vec![E::zero(); n * N_BASIS];
    let mut der = vec![E::zero(); n * N_BASIS];
    for (i, &xi) in xv.data().iter().enumerate() {
        let (v, d) = bspline_basis(xi.as_f64());
        for j in 0..N_BASIS {
            out[i * N_BASIS + j] = E::lit(v[j]);
            der[i * N_BASIS + j] = E::lit(d[j]);
        }
    }
    let mut oshape = shape.clone();
    *oshape.last_mut().unwrap() *= N_BASIS;
    x.tape().custom_op(&[x], Tensor::new(oshape, out), move |ctx| {
        let g = ctx.grad.data();
        let dx = (0..n).map(|i| (0..N_BASIS).fold(E::zero(), |acc, j| acc + g[i * N_BASIS + j] * der[i * N_BASIS + j])).collect();
        vec![Some(Tensor::new(shape.clone(), dx))]
    })
}

/// `silu(x) W_base + B(x) W_spline` over the last axis.
#[derive(Clone, Debug)]
pub struct KanLinear {
    pub base: ParamId,
    pub spline: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl KanLinear {
    pub fn new<E: Element>(b: &mut Builder<'_, E>, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = b.sub(name);
        let bound = 1.0 / (d_in as f64).sqrt();
        let base = s.param("base", &[d_in, d_out], Init::Uniform(bound), ParamKind::Weight);
        let spline = s.param("spline", &[d_in * N_BASIS, d_out], Init::Uniform(0.1 * bound), ParamKind::Weight);
        Self { base, spline, d_in, d_out }
    }

    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, E>, x: Var<'t, E>) -> Var<'t, E> {
        x.silu().matmul(ctx.param(self.base)) + spline_features(x).matmul(ctx.param(self.spline))
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out * (1 + N_BASIS)
    }
}

#[derive(Clone, Debug)]
enum Inner {
    Spline(KanLinear, KanLinear),
    FeedForward(Linear, Linear),
}

/// Pre-norm residual token operator: `x + scale * f(LN(x))`.
#[derive(Clone, Debug)]
pub struct KanBlock {
    ln: LayerNorm,
    inner: Inner,
    /// Per-channel output scale.
    pub scale: ParamId,
}

impl KanBlock {
    /// Spline mode uses a hidden width of `d / 4`; feed-forward mode widens its
    /// hidden layer to match the spline parameter count.
    pub fn new<E: Element>(b: &mut Builder<'_, E>, d: usize, mode: KanMode, scale_init: f64) -> Self {
        let hidden = (d / 4).max(1);
        let ln = LayerNorm::new(b, "ln", d);
        let inner = match mode {
            KanMode::Spline => Inner::Spline(KanLinear::new(b, "kan1", d, hidden), KanLinear::new(b, "kan2", hidden, d)),
            KanMode::FeedForward => {
                let ff = hidden * (1 + N_BASIS);
                Inner::FeedForward(Linear::new(b, "fc1", d, ff, true), Linear::new(b, "fc2", ff, d, true))
            }
        };
        let scale = b.param("scale", &[d], Init::Const(scale_init), ParamKind::Weight);
        Self { ln, inner, scale }
    }

    /// Tokens `[N, T, D]` to `[N, T, D]`.
    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, E>, x: Var<'t, E>) -> Var<'t, E> {
        let h = self.ln.forward(ctx, x);
        let y = match &self.inner {
            Inner::Spline(a, b) => b.forward(ctx, a.forward(ctx, h)),
            Inner::FeedForward(a, b) => b.forward(ctx, a.forward(ctx, h).silu()),
        };
        x + y * ctx.param(self.scale)
    }
}
