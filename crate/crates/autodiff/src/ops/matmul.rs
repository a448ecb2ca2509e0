//! Batched matrix products against a shared right-hand matrix.

use crate::element::{gemm, Element};
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t, E: Element> Var<'t, E> {
    /// `[..., M, K] x [K, N] -> [..., M, N]`; all leading axes are folded into `M`.
    pub fn matmul(self, w: Var<'t, E>) -> Var<'t, E> {
        let (x, wv) = (self.value(), w.value());
        let xs = x.shape().to_vec();
        assert!(!xs.is_empty(), "matmul on a scalar");
        assert_eq!(wv.rank(), 2, "matmul rhs must be a matrix");
        let k = *xs.last().unwrap();
        let (wk, n) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(k, wk, "matmul inner dims {xs:?} x {:?}", wv.shape());
        let m = x.numel() / k.max(1);
        let mut out = vec![E::zero(); m * n];
        gemm(m, k, n, x.data(), false, wv.data(), false, E::zero(), &mut out);
        self.tape.add_macs((m * k * n) as u64);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = n;
        let (rg_x, rg_w) = (self.requires_grad(), w.requires_grad());
        self.tape.custom_op(&[self, w], Tensor::new(out_shape, out), move |ctx| {
            let g = ctx.grad.data();
            let (x, w) = (&ctx.inputs[0], &ctx.inputs[1]);
            let gx = rg_x.then(|| {
                let mut d = vec![E::zero(); m * k];
                gemm(m, n, k, g, false, w.data(), true, E::zero(), &mut d);
                Tensor::new(x.shape().to_vec(), d)
            });
            let gw = rg_w.then(|| {
                let mut d = vec![E::zero(); k * n];
                gemm(k, m, n, x.data(), true, g, false, E::zero(), &mut d);
                Tensor::new(vec![k, n], d)
            });
            vec![gx, gw]
        })
    }

    /// `x W + b` over the last axis, with `W: [in, out]` and `b: [out]`.
    pub fn linear(self, w: Var<'t, E>, b: Option<Var<'t, E>>) -> Var<'t, E> {
        let y = self.matmul(w);
        match b {
            Some(b) => y.add(b),
            None => y,
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn matmul_matches_hand_product() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([2, 1, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.leaf(Tensor::from_f64([3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let y = x.matmul(w);
        assert_eq!(y.shape(), vec![2, 1, 2]);
        assert_eq!(y.value().data(), &[4.0, 5.0, 10.0, 11.0]);
        let g = tape.backward(y.sum_all());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0]);
        assert_eq!(g.get(w).unwrap().data(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
        assert_eq!(tape.macs(), 12);
    }
}
