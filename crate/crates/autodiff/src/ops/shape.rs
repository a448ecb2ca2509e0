//! Reductions, reshapes, permutations, concatenation and slicing.

use crate::element::Element;
use crate::tape::Var;
use crate::tensor::{numel, reduce_to_shape, strides, zip_broadcast, Tensor};

/// Copies `t` into a permuted layout: `out.shape[i] = t.shape[axes[i]]`.
pub fn permute_tensor<E: Element>(t: &Tensor<E>, axes: &[usize]) -> Tensor<E> {
    let r = t.rank();
    assert_eq!(axes.len(), r, "permute axes rank");
    let src_strides = strides(t.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
    let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n = t.numel();
    let mut data = Vec::with_capacity(n);
    if n == 0 {
        return Tensor::new(out_shape, data);
    }
    let src = t.data();
    let inner = out_shape[r - 1];
    let inner_stride = perm_strides[r - 1];
    let mut idx = vec![0usize; r - 1];
    let mut off = 0usize;
    for _ in 0..n / inner {
        for i in 0..inner {
            data.push(src[off + i * inner_stride]);
        }
        for ax in (0..r - 1).rev() {
            idx[ax] += 1;
            off += perm_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= perm_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, data)
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl<'t, E: Element> Var<'t, E> {
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'t, E> {
        let shape = shape.into();
        let input_shape = self.shape();
        let out = (*self.value()).clone().reshape(shape);
        self.unary(out, move |ctx| ctx.grad.clone().reshape(input_shape.clone()))
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t, E> {
        let out = permute_tensor(&self.value(), axes);
        let inv = inverse_axes(axes);
        self.unary(out, move |ctx| permute_tensor(ctx.grad, &inv))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(self) -> Var<'t, E> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let out = Tensor::scalar(v.sum());
        self.unary(out, move |ctx| Tensor::full(shape.clone(), ctx.grad.item()))
    }

    pub fn mean_all(self) -> Var<'t, E> {
        let n = self.value().numel().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Mean over `axes`, keeping them as size-1 dimensions.
    pub fn mean_keepdim(self, axes: &[usize]) -> Var<'t, E> {
        let v = self.value();
        let mut target = v.shape().to_vec();
        let mut count = 1usize;
        for &a in axes {
            count *= target[a];
            target[a] = 1;
        }
        let inv = E::one() / E::lit(count.max(1) as f64);
        let out = reduce_to_shape(&v, &target).map(|x| x * inv);
        let full = v.shape().to_vec();
        self.unary(out, move |ctx| {
            let g = ctx.grad.map(|x| x * inv);
            zip_broadcast(&Tensor::zeros(full.clone()), &g, |_, y| y)
        })
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_keepdim(self, axes: &[usize]) -> Var<'t, E> {
        let v = self.value();
        let mut target = v.shape().to_vec();
        for &a in axes {
            target[a] = 1;
        }
        let out = reduce_to_shape(&v, &target);
        let full = v.shape().to_vec();
        self.unary(out, move |ctx| zip_broadcast(&Tensor::zeros(full.clone()), ctx.grad, |_, y| y))
    }

    /// Maximum along `axis` (kept as size 1); the gradient goes to the first arg-max.
    pub fn max_keepdim(self, axis: usize) -> Var<'t, E> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let mut out = vec![E::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        let src = v.data();
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    let x = src[base + i];
                    let slot = o * inner + i;
                    if x > out[slot] || a == 0 {
                        out[slot] = x;
                        arg[slot] = a;
                    }
                }
            }
        }
        self.unary(Tensor::new(out_shape, out), move |ctx| {
            let mut g = vec![E::zero(); outer * len * inner];
            let gd = ctx.grad.data();
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    g[(o * len + arg[slot]) * inner + i] = gd[slot];
                }
            }
            Tensor::new(shape.clone(), g)
        })
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn cat(parts: &[Var<'t, E>], axis: usize) -> Var<'t, E> {
        assert!(!parts.is_empty(), "cat of nothing");
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        for v in &values {
            assert_eq!(v.rank(), first.len(), "cat rank mismatch");
            for (d, (&a, &b)) in v.shape().iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "cat shape mismatch {:?} vs {:?}", v.shape(), first);
            }
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        tape.custom_op(parts, Tensor::new(out_shape, data), move |ctx| {
            let g = ctx.grad.data();
            let mut grads: Vec<Vec<E>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (gi, &l) in grads.iter_mut().zip(&lens) {
                    gi.extend_from_slice(&g[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads
                .into_iter()
                .zip(ctx.inputs)
                .map(|(d, inp)| Some(Tensor::new(inp.shape().to_vec(), d)))
                .collect()
        })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t, E> {
        let v = self.value();
        let shape = v.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.unary(Tensor::new(out_shape, data), move |ctx| {
            let mut g = vec![E::zero(); outer * full * inner];
            let gd = ctx.grad.data();
            for o in 0..outer {
                let base = (o * full + start) * inner;
                g[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            Tensor::new(shape.clone(), g)
        })
    }

    /// Splits along `axis` into consecutive chunks of the given sizes.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Vec<Var<'t, E>> {
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let v = self.narrow(axis, start, s);
                start += s;
                v
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn permute_round_trips() {
        let t = Tensor::<f64>::from_fn([2, 3, 4, 5], |i| i as f64);
        let p = permute_tensor(&t, &[0, 2, 3, 1]);
        assert_eq!(p.shape(), &[2, 4, 5, 3]);
        assert_eq!(p.at(&[1, 2, 3, 0]), t.at(&[1, 0, 2, 3]));
        let back = permute_tensor(&p, &inverse_axes(&[0, 2, 3, 1]));
        assert_eq!(back, t);
    }

    #[test]
    fn cat_then_split_restores_parts_and_routes_gradients() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn([2, 1, 3], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn([2, 2, 3], |i| 10.0 + i as f64));
        let c = Var::cat(&[a, b], 1);
        assert_eq!(c.shape(), vec![2, 3, 3]);
        let parts = c.split(1, &[1, 2]);
        assert_eq!(*parts[0].value(), *a.value());
        assert_eq!(*parts[1].value(), *b.value());
        let loss = (parts[1] * parts[1]).sum_all();
        let g = tape.backward(loss);
        assert_eq!(g.get(a).unwrap().max_abs(), 0.0);
        let gb = g.get(b).unwrap();
        for (x, y) in gb.data().iter().zip(b.value().data()) {
            assert_eq!(*x, 2.0 * y);
        }
    }

    #[test]
    fn max_keepdim_picks_maximum() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([1, 3, 2], &[1.0, 5.0, 4.0, 2.0, 3.0, 0.0]));
        let m = x.max_keepdim(1);
        assert_eq!(m.value().data(), &[4.0, 5.0]);
        let g = tape.backward(m.sum_all());
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
