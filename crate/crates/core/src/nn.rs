//! Parameterized layers shared by all modules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rfcast_autodiff::{Ctx, Element, ParamId, ParamKind, ParamStore, Tensor, Var};

/// Initial value of a freshly registered tensor.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, E: Element> {
    store: &'a mut ParamStore<E>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, E: Element> Builder<'a, E> {
    pub fn new(store: &'a mut ParamStore<E>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, E> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, kind: ParamKind) -> ParamId {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let value = match init {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Const(c) => Tensor::full(shape.to_vec(), E::lit(c)),
            Init::Uniform(b) => {
                let rng = &mut *self.rng;
                Tensor::from_fn(shape.to_vec(), |_| E::lit(if b > 0.0 { rng.random_range(-b..b) } else { 0.0 }))
            }
        };
        self.store.add(full, value, kind)
    }
}

impl<'a, E: Element> Builder<'a, E> {
    /// Registers an explicit initial value.
    pub fn param_value(&mut self, name: &str, value: Tensor<E>, kind: ParamKind) -> ParamId {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.add(full, value, kind)
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv2d {
    /// `k x k` convolution with "same" padding at stride 1.
    pub fn new<E: Element>(b: &mut Builder<'_, E>, name: &str, c_in: usize, c_out: usize, k: usize, bias: bool) -> Self {
        Self::with_init(b, name, c_in, c_out, k, 1, k / 2, bias, false)
    }

    /// Same as [`Conv2d::new`] but starting from all-zero weights and bias.
    pub fn zeroed<E: Element>(b: &mut Builder<'_, E>, name: &str, c_in: usize, c_out: usize, k: usize, bias: bool) -> Self {
        Self::with_init(b, name, c_in, c_out, k, 1, k / 2, bias, true)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init<E: Element>(
        b: &mut Builder<'_, E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        zero: bool,
    ) -> Self {
        let mut s = b.sub(name);
        let bound = if zero { 0.0 } else { fan_in_bound(c_in * k * k) };
        let weight = s.param("weight", &[c_out, c_in, k, k], Init::Uniform(bound), ParamKind::Weight);
        let bias = bias.then(|| s.param("bias", &[c_out], Init::Uniform(bound), ParamKind::Bias));
        Self { weight, bias, stride, pad, c_in, c_out, k }
    }

    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, E>, x: Var<'t, E>) -> Var<'t, E> {
        x.conv2d(ctx.param(self.weight), self.bias.map(|b| ctx.param(b)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new<E: Element>(b: &mut Builder<'_, E>, name: &str, c: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            gamma: s.param("gamma", &[c], Init::Const(1.0), ParamKind::Norm),
            beta: s.param("beta", &[c], Init::Zeros, ParamKind::Norm),
            running_mean: s.param("running_mean", &[c], Init::Zeros, ParamKind::Buffer),
            running_var: s.param("running_var", &[c], Init::Const(1.0), ParamKind::Buffer),
        }
    }

    /// Batch statistics in training mode (recording running-stat updates), running statistics otherwise.
    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, E>, x: Var<'t, E>) -> Var<'t, E> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        if ctx.train {
            let (y, stats) = x.batch_norm_train(g, b, BN_EPS);
            let m = E::lit(BN_MOMENTUM);
            let blend = |old: &Tensor<E>, new: &[E]| {
                Tensor::new(old.shape().to_vec(), old.data().iter().zip(new).map(|(&o, &n)| (E::one() - m) * o + m * n).collect())
            };
            ctx.record_buffer_update(self.running_mean, blend(&ctx.buffer(self.running_mean), &stats.mean));
            ctx.record_buffer_update(self.running_var, blend(&ctx.buffer(self.running_var), &stats.var_unbiased));
            y
        } else {
            x.batch_norm_eval(g, b, &ctx.buffer(self.running_mean), &ctx.buffer(self.running_var), BN_EPS)
        }
    }
}

/// Convolution, batch norm and optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    pub fn new<E: Element>(b: &mut Builder<'_, E>, name: &str, c_in: usize, c_out: usize, k: usize, relu: bool) -> Self {
        let mut s = b.sub(name);
        Self { conv: Conv2d::new(&mut s, "conv", c_in, c_out, k, false), bn: BatchNorm2d::new(&mut s, "bn", c_out), relu }
    }

    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, E>, x: Var<'t, E>) -> Var<'t, E> {
        let y = self.bn.forward(ctx, self.conv.forward(ctx, x));
        if self.relu {
            y.relu()
        } else {
            y
        }
    }
}

/// `x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<E: Element>(b: &mut Builder<'_, E>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self::with_zero(b, name, d_in, d_out, bias, false)
    }

    pub fn zeroed<E: Element>(b: &mut Builder<'_, E>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self::with_zero(b, name, d_in, d_out, bias, true)
    }

    fn with_zero<E: Element>(b: &mut Builder<'_, E>, name: &str, d_in: usize, d_out: usize, bias: bool, zero: bool) -> Self {
        let mut s = b.sub(name);
        let bound = if zero { 0.0 } else { fan_in_bound(d_in) };
        let weight = s.param("weight", &[d_in, d_out], Init::Uniform(bound), ParamKind::Weight);
        let bias = bias.then(|| s.param("bias", &[d_out], Init::Uniform(bound), ParamKind::Bias));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, E>, x: Var<'t, E>) -> Var<'t, E> {
        x.linear(ctx.param(self.weight), self.bias.map(|b| ctx.param(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<E: Element>(b: &mut Builder<'_, E>, name: &str, d: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            gamma: s.param("gamma", &[d], Init::Const(1.0), ParamKind::Norm),
            beta: s.param("beta", &[d], Init::Zeros, ParamKind::Norm),
        }
    }

    pub fn forward<'t, E: Element>(&self, ctx: &Ctx<'t, E>, x: Var<'t, E>) -> Var<'t, E> {
        x.layer_norm(ctx.param(self.gamma), ctx.param(self.beta), LN_EPS)
    }
}

/// Channel concatenation of NCHW maps.
pub fn cat_channels<'t, E: Element>(parts: &[Var<'t, E>]) -> Var<'t, E> {
    Var::cat(parts, 1)
}

/// `[N, C, H, W] -> [N, H*W, C]`.
pub fn to_tokens<'t, E: Element>(x: Var<'t, E>) -> Var<'t, E> {
    let (n, c, h, w) = x.dims4();
    x.reshape(vec![n, c, h * w]).permute(&[0, 2, 1])
}

/// `[N, H*W, C] -> [N, C, H, W]`.
pub fn from_tokens<'t, E: Element>(x: Var<'t, E>, h: usize, w: usize) -> Var<'t, E> {
    let s = x.shape();
    let (n, c) = (s[0], s[2]);
    x.permute(&[0, 2, 1]).reshape(vec![n, c, h, w])
}

/// Global average pool to `[N, C, 1, 1]`.
pub fn global_avg_pool<'t, E: Element>(x: Var<'t, E>) -> Var<'t, E> {
    x.mean_keepdim(&[2, 3])
}
