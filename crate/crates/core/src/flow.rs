//! Rectified-flow objective, Euler sampling and parameter EMA.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rfcast_autodiff::{Element, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Straight-line interpolant between noise `x0` and data `x1` at time `t`.
#[derive(Clone, Debug)]
pub struct InterpolantSample<E> {
    pub x0: Tensor<E>,
    pub x1: Tensor<E>,
    pub t: f64,
    pub x_t: Tensor<E>,
    pub target_v: Tensor<E>,
}

impl<E: Element> InterpolantSample<E> {
    /// Builds the interpolant for given endpoints and time.
    pub fn at(x0: Tensor<E>, x1: Tensor<E>, t: f64) -> Result<Self> {
        if x0.shape() != x1.shape() {
            return Err(Error::Shape(format!("noise {:?} and data {:?} differ", x0.shape(), x1.shape())));
        }
        let (tt, one_m) = (E::lit(t), E::lit(1.0 - t));
        let x_t = Tensor::new(x1.shape().to_vec(), x0.data().iter().zip(x1.data()).map(|(&a, &b)| tt * b + one_m * a).collect());
        let target_v = Tensor::new(x1.shape().to_vec(), x0.data().iter().zip(x1.data()).map(|(&a, &b)| b - a).collect());
        Ok(Self { x0, x1, t, x_t, target_v })
    }
}

/// Standard-normal tensor.
pub fn gaussian<E: Element, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<E> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        E::lit(z)
    })
}

/// Draws `x0 ~ N(0, I)` and `t ~ U(0, 1)`.
pub fn draw_interpolant<E: Element, R: Rng + ?Sized>(x1: Tensor<E>, rng: &mut R) -> InterpolantSample<E> {
    let x0 = gaussian(x1.shape(), rng);
    let t = rng.random::<f64>();
    InterpolantSample::at(x0, x1, t).expect("shapes agree by construction")
}

/// Mean squared error between predicted and target velocity.
pub fn rf_loss<E: Element>(v_pred: &Tensor<E>, target_v: &Tensor<E>) -> Result<f64> {
    if v_pred.shape() != target_v.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", v_pred.shape(), target_v.shape())));
    }
    let n = v_pred.numel().max(1) as f64;
    let s: f64 = v_pred.data().iter().zip(target_v.data()).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum();
    Ok(s / n)
}

/// Differentiable form of [`rf_loss`].
pub fn rf_loss_var<'t, E: Element>(v_pred: Var<'t, E>, target_v: Var<'t, E>) -> Result<Var<'t, E>> {
    if v_pred.shape() != target_v.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", v_pred.shape(), target_v.shape())));
    }
    Ok((v_pred - target_v).square().mean_all())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 5 }
    }
}

/// Explicit Euler integration of `dz/dt = v(z, t)` from `t = 0` to `t = 1`.
///
/// The velocity is evaluated at the left end of each of `steps` equal intervals.
pub fn euler_sample<E: Element>(
    mut velocity: impl FnMut(&Tensor<E>, f64) -> Tensor<E>,
    z0: Tensor<E>,
    cfg: SamplerConfig,
) -> Result<Tensor<E>> {
    if cfg.steps == 0 {
        return Err(Error::Invalid("sampler needs at least one step".into()));
    }
    let dt = 1.0 / cfg.steps as f64;
    let mut z = z0;
    for step in 0..cfg.steps {
        let v = velocity(&z, step as f64 * dt);
        if v.shape() != z.shape() {
            return Err(Error::Shape(format!("velocity {:?} vs state {:?}", v.shape(), z.shape())));
        }
        let d = E::lit(dt);
        for (zi, &vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi = *zi + vi * d;
        }
        if !z.all_finite() {
            return Err(Error::SamplerNonFinite { step });
        }
    }
    Ok(z)
}

/// Shadow copy of the parameters, blended after every optimizer step.
#[derive(Clone, Debug)]
pub struct EmaState<E: Element> {
    pub shadow: ParamStore<E>,
    pub decay: f64,
}

impl<E: Element> EmaState<E> {
    pub fn new(params: &ParamStore<E>, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Invalid(format!("EMA decay must lie in (0, 1), got {decay}")));
        }
        Ok(Self { shadow: params.clone(), decay })
    }

    /// `shadow <- decay * shadow + (1 - decay) * param` for trainable entries.
    /// Buffers such as running statistics are copied verbatim.
    pub fn update(&mut self, params: &ParamStore<E>) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::Shape(format!("EMA tracks {} tensors, model has {}", self.shadow.len(), params.len())));
        }
        let d = E::lit(self.decay);
        let c = E::lit(1.0 - self.decay);
        for id in params.ids() {
            let p = params.get(id);
            if p.shape() != self.shadow.get(id).shape() {
                return Err(Error::Shape(format!("EMA shape mismatch for {}", params.name(id))));
            }
            if params.kind(id).trainable() {
                for (s, &v) in self.shadow.get_mut(id).data_mut().iter_mut().zip(p.data()) {
                    *s = d * *s + c * v;
                }
            } else {
                self.shadow.set(id, p.clone());
            }
        }
        Ok(())
    }
}
