//! Independent oracles and helpers shared by the integration tests and the
//! acceptance runner. Nothing here calls the kernel it is meant to check.

#![allow(dead_code)]

pub mod checks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfcast_autodiff::gradcheck::relative_error;
use rfcast_autodiff::{Ctx, ParamStore, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform tensor on `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(lo..hi))
}

/// Pooled contingency counts by a plain double loop over rows and columns.
pub fn table_oracle(pred: &[f32], obs: &[f32], h: usize, w: usize, thr: f64) -> [u64; 4] {
    let mut c = [0u64; 4];
    for y in 0..h {
        for x in 0..w {
            let p = pred[y * w + x] as f64 >= thr;
            let o = obs[y * w + x] as f64 >= thr;
            let cell = match (p, o) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            c[cell] += 1;
        }
    }
    c
}

pub fn csi_oracle(c: [u64; 4]) -> f64 {
    let d = c[0] + c[1] + c[2];
    if d == 0 {
        0.0
    } else {
        c[0] as f64 / d as f64
    }
}

pub fn hss_oracle(c: [u64; 4]) -> f64 {
    let [tp, fp, fn_, tn] = c.map(|v| v as f64);
    let den = (tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn);
    if den == 0.0 {
        0.0
    } else {
        2.0 * (tp * tn - fn_ * fp) / den
    }
}

pub fn mse_oracle(pred: &[f32], obs: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        let d = pred[i] as f64 - obs[i] as f64;
        s += d * d;
    }
    s / pred.len() as f64
}

/// Four-neighbour bilinear value of a `h x w` plane at pixel coordinates,
/// with coordinates clamped to the image first.
pub fn bilinear_oracle(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.max(0.0).min((w - 1) as f64);
    let y = y.max(0.0).min((h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (x - x0 as f64, y - y0 as f64);
    let at = |yy: usize, xx: usize| plane[yy * w + xx];
    (1.0 - ay) * ((1.0 - ax) * at(y0, x0) + ax * at(y0, x1)) + ay * ((1.0 - ax) * at(y1, x0) + ax * at(y1, x1))
}

/// Orthonormal db4 analysis pair built from the scaling filter by the
/// quadrature-mirror relation `g[j] = (-1)^j h[7 - j]`.
pub fn db4_filters() -> ([f64; 8], [f64; 8]) {
    // reconstruction low-pass of the 4-vanishing-moment Daubechies wavelet
    let rec_lo = [
        0.230_377_813_308_855_23,
        0.714_846_570_552_541_5,
        0.630_880_767_929_590_4,
        -0.027_983_769_416_983_85,
        -0.187_034_811_718_881_14,
        0.030_841_381_835_986_965,
        0.032_883_011_666_982_945,
        -0.010_597_401_784_997_278,
    ];
    let mut dec_lo = [0.0; 8];
    let mut dec_hi = [0.0; 8];
    for j in 0..8 {
        dec_lo[j] = rec_lo[7 - j];
        let rec_hi = if j % 2 == 0 { rec_lo[7 - j] } else { -rec_lo[7 - j] };
        dec_hi[7 - j] = rec_hi;
    }
    (dec_lo, dec_hi)
}

/// Convolve with `dec`, then keep every second sample, on a signal padded by
/// mirroring about its end samples (`x[-1] = x[0]`).
pub fn dwt_1d_oracle(x: &[f64], dec: &[f64; 8]) -> Vec<f64> {
    let n = x.len() as isize;
    let pad = 16isize;
    let mut ext = Vec::new();
    for i in -pad..n + pad {
        let mut j = i;
        // unfold repeatedly so long pads on short signals still land inside
        while j < 0 || j >= n {
            j = if j < 0 { -1 - j } else { 2 * n - 1 - j };
        }
        ext.push(x[j as usize]);
    }
    let m = (x.len() + 1) / 2;
    let mut out = vec![0.0; m];
    for (k, o) in out.iter_mut().enumerate() {
        let centre = 2 * k as isize + 4;
        for (j, &d) in dec.iter().enumerate() {
            *o += d * ext[(centre - j as isize + pad) as usize];
        }
    }
    out
}

/// Separable 2-D analysis of a single `h x w` plane: rows then columns.
/// Returns `(ll, lh, hl, hh)` where the first letter is the row filter.
pub fn dwt_2d_oracle(plane: &[f64], h: usize, w: usize) -> [Vec<f64>; 4] {
    let (lo, hi) = db4_filters();
    let (h2, w2) = ((h + 1) / 2, (w + 1) / 2);
    let rows = |f: &[f64; 8]| -> Vec<Vec<f64>> { (0..h).map(|y| dwt_1d_oracle(&plane[y * w..(y + 1) * w], f)).collect() };
    let (rl, rh) = (rows(&lo), rows(&hi));
    let cols = |r: &Vec<Vec<f64>>, f: &[f64; 8]| -> Vec<f64> {
        let mut out = vec![0.0; h2 * w2];
        for x in 0..w2 {
            let col: Vec<f64> = (0..h).map(|y| r[y][x]).collect();
            for (y, v) in dwt_1d_oracle(&col, f).into_iter().enumerate() {
                out[y * w2 + x] = v;
            }
        }
        out
    };
    [cols(&rl, &lo), cols(&rl, &hi), cols(&rh, &lo), cols(&rh, &hi)]
}

/// Pairwise bidirectional WKV along one line.
pub fn wkv_oracle(k: &[f64], v: &[f64], w: f64, u: f64) -> Vec<f64> {
    let t_len = k.len();
    (0..t_len)
        .map(|t| {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..t_len {
                let e = if i == t { (u + k[i]).exp() } else { (k[i] - w * ((t as f64 - i as f64).abs() - 1.0)).exp() };
                num += e * v[i];
                den += e;
            }
            num / den
        })
        .collect()
}

/// Adds `N(0, scale^2)` to every trainable tensor so zero-initialised branches carry signal.
pub fn perturb(store: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().filter(|&id| store.kind(id).trainable()).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r);
            *v += scale * z;
        }
    }
}

/// Fixed random projection to a scalar.
pub fn project<'t>(y: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let w = uniform(&y.shape(), -1.0, 1.0, &mut rng(seed));
    (y * y.tape().constant(w)).sum_all()
}

/// Relative error between backprop and central differences over `count`
/// randomly chosen trainable coordinates of `store`.
pub fn param_gradcheck(
    store: &mut ParamStore<f64>,
    count: usize,
    seed: u64,
    f: impl for<'t> Fn(&Ctx<'t, f64>) -> Var<'t, f64>,
) -> f64 {
    param_gradcheck_where(store, count, seed, |_| true, f)
}

/// [`param_gradcheck`] restricted to trainable tensors whose name passes `keep`.
pub fn param_gradcheck_where(
    store: &mut ParamStore<f64>,
    count: usize,
    seed: u64,
    keep: impl Fn(&str) -> bool,
    f: impl for<'t> Fn(&Ctx<'t, f64>) -> Var<'t, f64>,
) -> f64 {
    let ids: Vec<_> = store.ids().filter(|&id| store.kind(id).trainable() && keep(store.name(id))).collect();
    let mut r = rng(seed);
    let mut picks = Vec::with_capacity(count);
    for _ in 0..count {
        let id = ids[r.random_range(0..ids.len())];
        let i = r.random_range(0..store.get(id).numel());
        picks.push((id, i));
    }
    let analytic: Vec<f64> = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, true, true);
        let loss = f(&ctx);
        let grads = ctx.param_grads(&tape.backward(loss));
        picks
            .iter()
            .map(|&(id, i)| grads.iter().find(|(g, _)| *g == id).map_or(0.0, |(_, t)| t.data()[i]))
            .collect()
    };
    let eval = |store: &ParamStore<f64>| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, true, false);
        f(&ctx).value().item()
    };
    let eps = 1e-6;
    let numeric: Vec<f64> = picks
        .iter()
        .map(|&(id, i)| {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let fp = eval(store);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let fm = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            (fp - fm) / (2.0 * eps)
        })
        .collect();
    relative_error(&analytic, &numeric)
}
