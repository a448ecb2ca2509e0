//! Spatial resampling: corner-aligned bilinear resize and 2x2 max pooling.

use crate::element::Element;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Source index pair and weight of the upper neighbour for each output position.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let pos = if n_out > 1 { o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64 } else { 0.0 };
            let i0 = (pos.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

impl<'t, E: Element> Var<'t, E> {
    /// Corner-aligned bilinear resize of `[N, C, H, W]` to `[N, C, ho, wo]`.
    pub fn resize_bilinear(self, ho: usize, wo: usize) -> Var<'t, E> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        if (h, w) == (ho, wo) {
            return self;
        }
        let ty: Vec<(usize, usize, E)> = axis_taps(h, ho).into_iter().map(|(a, b, f)| (a, b, E::lit(f))).collect();
        let tx: Vec<(usize, usize, E)> = axis_taps(w, wo).into_iter().map(|(a, b, f)| (a, b, E::lit(f))).collect();
        let planes = n * c;
        let mut out = vec![E::zero(); planes * ho * wo];
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (E::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (E::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * wo + ox] = top * (E::one() - fy) + bot * fy;
                }
            }
        }
        self.unary(Tensor::new(vec![n, c, ho, wo], out), move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![E::zero(); planes * h * w];
            for p in 0..planes {
                let gs = &g[p * ho * wo..(p + 1) * ho * wo];
                let d = &mut dx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = gs[oy * wo + ox];
                        let (gt, gb) = (gv * (E::one() - fy), gv * fy);
                        d[y0 * w + x0] += gt * (E::one() - fx);
                        d[y0 * w + x1] += gt * fx;
                        d[y1 * w + x0] += gb * (E::one() - fx);
                        d[y1 * w + x1] += gb * fx;
                    }
                }
            }
            Tensor::new(vec![n, c, h, w], dx)
        })
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
    pub fn maxpool2(self) -> Var<'t, E> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = (h / 2, w / 2);
        let planes = n * c;
        let mut out = vec![E::zero(); planes * ho * wo];
        let mut arg = vec![0usize; planes * ho * wo];
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = 2 * oy * w + 2 * ox;
                    for idx in [2 * oy * w + 2 * ox + 1, (2 * oy + 1) * w + 2 * ox, (2 * oy + 1) * w + 2 * ox + 1] {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out[(p * ho + oy) * wo + ox] = src[best];
                    arg[(p * ho + oy) * wo + ox] = p * h * w + best;
                }
            }
        }
        self.unary(Tensor::new(vec![n, c, ho, wo], out), move |ctx| {
            let mut dx = vec![E::zero(); planes * h * w];
            for (&a, &g) in arg.iter().zip(ctx.grad.data()) {
                dx[a] += g;
            }
            Tensor::new(vec![n, c, h, w], dx)
        })
    }
}
