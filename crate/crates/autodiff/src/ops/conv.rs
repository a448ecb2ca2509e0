//! 2-D convolution over NCHW tensors via im2col and gemm.

use crate::element::{gemm, Element};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let ho = (self.h + 2 * self.pad - self.kh) / self.stride + 1;
        let wo = (self.w + 2 * self.pad - self.kw) / self.stride + 1;
        (ho, wo)
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one sample `[C, H, W]` into `[C*kh*kw, Ho*Wo]`.
pub fn im2col<E: Element>(x: &[E], g: &Conv2dGeom, cols: &mut [E]) {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { E::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into `[C, H, W]` (accumulating).
pub fn col2im<E: Element>(cols: &[E], g: &Conv2dGeom, x: &mut [E]) {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'t, E: Element> Var<'t, E> {
    /// Cross-correlation of `self: [N, Ci, H, W]` with `weight: [Co, Ci, kh, kw]`, zero padding.
    pub fn conv2d(self, weight: Var<'t, E>, bias: Option<Var<'t, E>>, stride: usize, pad: usize) -> Var<'t, E> {
        let x = self.value();
        let wv = weight.value();
        let (n, ci, h, w) = x.dims4();
        let (co, wci, kh, kw) = wv.dims4();
        assert_eq!(ci, wci, "conv2d channel mismatch: input {:?}, weight {:?}", x.shape(), wv.shape());
        assert!(stride >= 1);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than padded input");
        let g = Conv2dGeom { c_in: ci, h, w, kh, kw, stride, pad };
        let (ho, wo) = g.out_hw();
        let hw = ho * wo;
        let rows = g.col_rows();
        let keep_cols = weight.requires_grad() && !g.is_pointwise();
        let mut saved: Vec<E> = if keep_cols { Vec::with_capacity(n * rows * hw) } else { Vec::new() };
        let mut scratch = if g.is_pointwise() { Vec::new() } else { vec![E::zero(); rows * hw] };
        let mut out = vec![E::zero(); n * co * hw];
        for s in 0..n {
            let xs = &x.data()[s * ci * h * w..(s + 1) * ci * h * w];
            let cols: &[E] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut scratch);
                &scratch
            };
            gemm(co, rows, hw, wv.data(), false, cols, false, E::zero(), &mut out[s * co * hw..(s + 1) * co * hw]);
            if keep_cols {
                saved.extend_from_slice(cols);
            }
        }
        if let Some(b) = &bias {
            let bv = b.value();
            assert_eq!(bv.shape(), &[co], "conv2d bias shape");
            for s in 0..n {
                for (c, &bc) in bv.data().iter().enumerate() {
                    for o in &mut out[(s * co + c) * hw..(s * co + c + 1) * hw] {
                        *o += bc;
                    }
                }
            }
        }
        self.tape.add_macs((n * co * rows * hw) as u64);
        let out = Tensor::new(vec![n, co, ho, wo], out);
        let rg_x = self.requires_grad();
        let rg_w = weight.requires_grad();
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.tape.custom_op(&inputs, out, move |ctx| {
            let gout = ctx.grad.data();
            let x = &ctx.inputs[0];
            let wt = &ctx.inputs[1];
            let mut gx = rg_x.then(|| vec![E::zero(); n * ci * h * w]);
            let mut gw = rg_w.then(|| vec![E::zero(); co * rows]);
            let mut dcols = if rg_x && !g.is_pointwise() { vec![E::zero(); rows * hw] } else { Vec::new() };
            for s in 0..n {
                let go = &gout[s * co * hw..(s + 1) * co * hw];
                if let Some(gw) = gw.as_mut() {
                    let cols: &[E] = if g.is_pointwise() {
                        &x.data()[s * ci * h * w..(s + 1) * ci * h * w]
                    } else {
                        &saved[s * rows * hw..(s + 1) * rows * hw]
                    };
                    gemm(co, hw, rows, go, false, cols, true, E::one(), gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let gxs = &mut gx[s * ci * h * w..(s + 1) * ci * h * w];
                    if g.is_pointwise() {
                        gemm(rows, co, hw, wt.data(), true, go, false, E::zero(), gxs);
                    } else {
                        gemm(rows, co, hw, wt.data(), true, go, false, E::zero(), &mut dcols);
                        col2im(&dcols, &g, gxs);
                    }
                }
            }
            let mut grads = vec![
                gx.map(|d| Tensor::new(vec![n, ci, h, w], d)),
                gw.map(|d| Tensor::new(vec![co, ci, kh, kw], d)),
            ];
            if ctx.inputs.len() == 3 {
                let mut gb = vec![E::zero(); co];
                for s in 0..n {
                    for (c, b) in gb.iter_mut().enumerate() {
                        *b += gout[(s * co + c) * hw..(s * co + c + 1) * hw].iter().copied().sum::<E>();
                    }
                }
                grads.push(Some(Tensor::new(vec![co], gb)));
            }
            grads
        })
    }
}
