//! Batch normalization, layer normalization and softmax.

use crate::element::Element;
use crate::tape::Var;
use crate::tensor::{numel, Tensor};

/// Per-channel statistics of a training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<E> {
    pub mean: Vec<E>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var_unbiased: Vec<E>,
}

impl<'t, E: Element> Var<'t, E> {
    /// Training-mode batch norm over `[N, C, H, W]` with affine `gamma`, `beta: [C]`.
    pub fn batch_norm_train(self, gamma: Var<'t, E>, beta: Var<'t, E>, eps: f64) -> (Var<'t, E>, BatchStats<E>) {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let count = n * hw;
        let cnt = E::lit(count as f64);
        let eps = E::lit(eps);
        let gv = gamma.value();
        let bv = beta.value();
        let mut mean = vec![E::zero(); c];
        let mut var = vec![E::zero(); c];
        for ch in 0..c {
            let mut s = E::zero();
            for b in 0..n {
                s += x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<E>();
            }
            let m = s / cnt;
            let mut v = E::zero();
            for b in 0..n {
                for &xi in &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    v += (xi - m) * (xi - m);
                }
            }
            mean[ch] = m;
            var[ch] = v;
        }
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v / cnt + eps).sqrt()).collect();
        let mut xhat = vec![E::zero(); x.numel()];
        let mut out = vec![E::zero(); x.numel()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                let (m, is, g, be) = (mean[ch], inv_std[ch], gv.data()[ch], bv.data()[ch]);
                for ((o, xh), &xi) in out[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&x.data()[r]) {
                    *xh = (xi - m) * is;
                    *o = g * *xh + be;
                }
            }
        }
        let denom = E::lit((count.max(2) - 1) as f64);
        let stats = BatchStats { mean, var_unbiased: var.iter().map(|&v| v / denom).collect() };
        let out = self.tape.custom_op(&[self, gamma, beta], Tensor::new(x.shape().to_vec(), out), move |ctx| {
            let g = ctx.grad.data();
            let gamma = ctx.inputs[1].data();
            let mut dx = vec![E::zero(); g.len()];
            let mut dgamma = vec![E::zero(); c];
            let mut dbeta = vec![E::zero(); c];
            for ch in 0..c {
                let (mut sg, mut sgx) = (E::zero(), E::zero());
                for b in 0..n {
                    let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                    for (&gi, &xh) in g[r.clone()].iter().zip(&xhat[r]) {
                        sg += gi;
                        sgx += gi * xh;
                    }
                }
                dbeta[ch] = sg;
                dgamma[ch] = sgx;
                let k = gamma[ch] * inv_std[ch] / cnt;
                for b in 0..n {
                    let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                    for ((d, &gi), &xh) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                        *d = k * (cnt * gi - sg - xh * sgx);
                    }
                }
            }
            vec![
                Some(Tensor::new(vec![n, c, h, w], dx)),
                Some(Tensor::new(vec![c], dgamma)),
                Some(Tensor::new(vec![c], dbeta)),
            ]
        });
        (out, stats)
    }

    /// Inference-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t, E>,
        beta: Var<'t, E>,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
        eps: f64,
    ) -> Var<'t, E> {
        let c = self.value().dims4().1;
        let eps = E::lit(eps);
        let inv_std = running_var.map(|v| E::one() / (v + eps).sqrt()).reshape(vec![1, c, 1, 1]);
        let mean = running_mean.clone().reshape(vec![1, c, 1, 1]);
        let xhat = self.sub(self.tape.constant(mean)).mul(self.tape.constant(inv_std));
        xhat.mul(gamma.reshape(vec![1, c, 1, 1])).add(beta.reshape(vec![1, c, 1, 1]))
    }

    /// Layer norm over the last axis with affine `gamma`, `beta: [D]`.
    pub fn layer_norm(self, gamma: Var<'t, E>, beta: Var<'t, E>, eps: f64) -> Var<'t, E> {
        let x = self.value();
        let d = *x.shape().last().expect("layer_norm on a scalar");
        let rows = x.numel() / d.max(1);
        let dd = E::lit(d as f64);
        let eps = E::lit(eps);
        let gv = gamma.value();
        let bv = beta.value();
        let mut xhat = vec![E::zero(); x.numel()];
        let mut inv_std = vec![E::zero(); rows];
        let mut out = vec![E::zero(); x.numel()];
        for r in 0..rows {
            let xs = &x.data()[r * d..(r + 1) * d];
            let m = xs.iter().copied().sum::<E>() / dd;
            let v = xs.iter().map(|&a| (a - m) * (a - m)).sum::<E>() / dd;
            let is = E::one() / (v + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (xs[j] - m) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = gv.data()[j] * xh + bv.data()[j];
            }
        }
        self.tape.custom_op(&[self, gamma, beta], Tensor::new(x.shape().to_vec(), out), move |ctx| {
            let g = ctx.grad.data();
            let gamma = ctx.inputs[1].data();
            let mut dx = vec![E::zero(); g.len()];
            let mut dgamma = vec![E::zero(); d];
            let mut dbeta = vec![E::zero(); d];
            for r in 0..rows {
                let (mut s1, mut s2) = (E::zero(), E::zero());
                for j in 0..d {
                    let gi = g[r * d + j];
                    let xh = xhat[r * d + j];
                    dgamma[j] += gi * xh;
                    dbeta[j] += gi;
                    let dxh = gi * gamma[j];
                    s1 += dxh;
                    s2 += dxh * xh;
                }
                let (m1, m2) = (s1 / dd, s2 / dd);
                for j in 0..d {
                    let dxh = g[r * d + j] * gamma[j];
                    dx[r * d + j] = inv_std[r] * (dxh - m1 - xhat[r * d + j] * m2);
                }
            }
            vec![
                Some(Tensor::new(ctx.inputs[0].shape().to_vec(), dx)),
                Some(Tensor::new(vec![d], dgamma)),
                Some(Tensor::new(vec![d], dbeta)),
            ]
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Var<'t, E> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out = vec![E::zero(); x.numel()];
        let src = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut m = E::neg_infinity();
                for a in 0..len {
                    m = m.max(src[at(a)]);
                }
                let mut z = E::zero();
                for a in 0..len {
                    let e = (src[at(a)] - m).exp();
                    out[at(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[at(a)] /= z;
                }
            }
        }
        self.unary(Tensor::new(shape.clone(), out), move |ctx| {
            let g = ctx.grad.data();
            let y = ctx.output.data();
            let mut dx = vec![E::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let mut dot = E::zero();
                    for a in 0..len {
                        dot += g[at(a)] * y[at(a)];
                    }
                    for a in 0..len {
                        dx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
            Tensor::new(shape.clone(), dx)
        })
    }
}
