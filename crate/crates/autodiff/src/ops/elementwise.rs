//! Broadcasting binary ops and pointwise activations.

use std::ops::{Add, Mul, Neg, Sub};

use crate::element::Element;
use crate::tape::Var;
use crate::tensor::{reduce_to_shape, zip_broadcast, Tensor};

impl<'t, E: Element> Var<'t, E> {
    pub fn add(self, rhs: Var<'t, E>) -> Var<'t, E> {
        let (a, b) = (self.value(), rhs.value());
        let out = zip_broadcast(&a, &b, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.custom_op(&[self, rhs], out, move |ctx| {
            vec![Some(reduce_to_shape(ctx.grad, &sa)), Some(reduce_to_shape(ctx.grad, &sb))]
        })
    }

    pub fn sub(self, rhs: Var<'t, E>) -> Var<'t, E> {
        let (a, b) = (self.value(), rhs.value());
        let out = zip_broadcast(&a, &b, |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.custom_op(&[self, rhs], out, move |ctx| {
            let gb = reduce_to_shape(ctx.grad, &sb).map(|x| -x);
            vec![Some(reduce_to_shape(ctx.grad, &sa)), Some(gb)]
        })
    }

    pub fn mul(self, rhs: Var<'t, E>) -> Var<'t, E> {
        let (a, b) = (self.value(), rhs.value());
        let out = zip_broadcast(&a, &b, |x, y| x * y);
        let (rg_a, rg_b) = (self.requires_grad(), rhs.requires_grad());
        self.tape.custom_op(&[self, rhs], out, move |ctx| {
            let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
            let ga = rg_a.then(|| reduce_to_shape(&zip_broadcast(ctx.grad, b, |g, y| g * y), a.shape()));
            let gb = rg_b.then(|| reduce_to_shape(&zip_broadcast(ctx.grad, a, |g, x| g * x), b.shape()));
            vec![ga, gb]
        })
    }

    pub fn div(self, rhs: Var<'t, E>) -> Var<'t, E> {
        let (a, b) = (self.value(), rhs.value());
        let out = zip_broadcast(&a, &b, |x, y| x / y);
        self.tape.custom_op(&[self, rhs], out, move |ctx| {
            let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
            let ga = reduce_to_shape(&zip_broadcast(ctx.grad, b, |g, y| g / y), a.shape());
            // d(a/b)/db = -out / b
            let gob = zip_broadcast(ctx.grad, ctx.output, |g, o| g * o);
            let gb = reduce_to_shape(&zip_broadcast(&gob, b, |x, y| -x / y), b.shape());
            vec![Some(ga), Some(gb)]
        })
    }

    /// `self * c`.
    pub fn scale(self, c: f64) -> Var<'t, E> {
        let c = E::lit(c);
        let out = self.value().map(|x| x * c);
        self.unary(out, move |ctx| ctx.grad.map(|g| g * c))
    }

    /// `self + c`.
    pub fn shift(self, c: f64) -> Var<'t, E> {
        let c = E::lit(c);
        let out = self.value().map(|x| x + c);
        self.unary(out, |ctx| ctx.grad.clone())
    }

    pub fn neg(self) -> Var<'t, E> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'t, E> {
        let out = self.value().map(|x| x * x);
        self.unary(out, |ctx| zip_broadcast(ctx.grad, &ctx.inputs[0], |g, x| g * (x + x)))
    }

    pub fn relu(self) -> Var<'t, E> {
        let out = self.value().map(|x| if x > E::zero() { x } else { E::zero() });
        self.unary(out, |ctx| {
            zip_broadcast(ctx.grad, ctx.output, |g, y| if y > E::zero() { g } else { E::zero() })
        })
    }

    pub fn sigmoid(self) -> Var<'t, E> {
        let out = self.value().map(sigmoid);
        self.unary(out, |ctx| zip_broadcast(ctx.grad, ctx.output, |g, y| g * y * (E::one() - y)))
    }

    pub fn tanh(self) -> Var<'t, E> {
        let out = self.value().map(|x| x.tanh());
        self.unary(out, |ctx| zip_broadcast(ctx.grad, ctx.output, |g, y| g * (E::one() - y * y)))
    }

    pub fn exp(self) -> Var<'t, E> {
        let out = self.value().map(|x| x.exp());
        self.unary(out, |ctx| zip_broadcast(ctx.grad, ctx.output, |g, y| g * y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Var<'t, E> {
        let out = self.value().map(|x| x * sigmoid(x));
        self.unary(out, |ctx| {
            zip_broadcast(ctx.grad, &ctx.inputs[0], |g, x| {
                let s = sigmoid(x);
                g * (s + x * s * (E::one() - s))
            })
        })
    }
}

#[inline]
pub fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

impl<'t, E: Element> Add for Var<'t, E> {
    type Output = Var<'t, E>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'t, E: Element> Sub for Var<'t, E> {
    type Output = Var<'t, E>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'t, E: Element> Mul for Var<'t, E> {
    type Output = Var<'t, E>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

impl<'t, E: Element> Neg for Var<'t, E> {
    type Output = Var<'t, E>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}

/// Elementwise map over a tensor pair of equal shape; used by ops that need it outside a tape.
pub fn zip_map<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    assert_eq!(a.shape(), b.shape());
    zip_broadcast(a, b, f)
}
