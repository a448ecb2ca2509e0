mod common;

use common::checks;
use proptest::prelude::*;
use rfcast_autodiff::{Ctx, ParamStore, Tape, Tensor, Var};
use rfcast_core::fcm::{DirectionalPaths, Fcm, FcmConfig};
use rfcast_core::flow::gaussian;
use rfcast_core::nn::Builder;

fn setup(widths: &[usize], cfg: &FcmConfig) -> (ParamStore<f64>, Fcm) {
    let mut store = ParamStore::new();
    let fcm = Fcm::new(&mut Builder::new(&mut store, &mut common::rng(1)).sub("fcm"), widths, cfg).unwrap();
    (store, fcm)
}

fn pyramid<'t>(tape: &'t Tape<f64>, widths: &[usize], h: usize, seed: u64) -> Vec<Var<'t, f64>> {
    let mut r = common::rng(seed);
    widths.iter().enumerate().map(|(i, &c)| tape.constant(gaussian(&[2, c, h >> i, h >> i], &mut r))).collect()
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn gates_and_softmaxes_hold_over_1000_passes() {
    let t0 = std::time::Instant::now();
    checks::gate_invariants(1000).unwrap();
    assert!(t0.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn equal_paths_fuse_to_themselves() {
    let tape = Tape::new();
    let m = pyramid(&tape, &[4, 4], 8, 2);
    let paths = DirectionalPaths { td: m.clone(), bu: m.clone(), lat: m.clone() };
    let alphas: Vec<_> = (0..2).map(|i| tape.constant(common::uniform(&[2, 3], -2.0, 2.0, &mut common::rng(i))).softmax(1)).collect();
    for (f, m) in Fcm::fuse_directions(&paths, &alphas).iter().zip(&m) {
        assert!(max_diff(&f.value(), &m.value()) < 1e-12);
    }
}

#[test]
fn zero_gamma_leaves_the_aligned_maps() {
    let widths = [4, 8, 8];
    let (mut store, fcm) = setup(&widths, &FcmConfig { gamma_init: 0.7, ..FcmConfig::default() });
    common::perturb(&mut store, 0.3, 4);
    store.set(fcm.gamma, Tensor::zeros([1]));
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, true, false);
    let tr = fcm.forward_trace(&ctx, &pyramid(&tape, &widths, 8, 5)).unwrap();
    for (e, a) in tr.state.enhanced_ref.iter().zip(&tr.state.aligned) {
        assert_eq!(*e.value(), *a.value());
    }
}

#[test]
fn two_level_attention_by_hand() {
    // identity projections and gamma = 1 reduce the enhancement to a_i + w_i * a_other
    let widths = [4, 4];
    let (mut store, fcm) = setup(&widths, &FcmConfig::default());
    common::perturb(&mut store, 0.3, 6);
    let eye = Tensor::<f64>::from_fn([4, 4, 1, 1], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    for name in ["fcm.proj1", "fcm.proj2", "fcm.other"] {
        let w = store.id(&format!("{name}.weight")).unwrap();
        store.set(w, eye.clone());
        let b = store.id(&format!("{name}.bias")).unwrap();
        store.set(b, Tensor::zeros([4]));
    }
    store.set(fcm.gamma, Tensor::ones([1]));
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, true, false);
    let tr = fcm.forward_trace(&ctx, &pyramid(&tape, &widths, 8, 7)).unwrap();
    // the reference level is the coarse one and keeps the fused map
    assert!(max_diff(&tr.state.aligned[1].value(), &tr.fused[1].value()) < 1e-12);
    let w = tr.state.w_att.unwrap().value();
    let (a0, a1) = (tr.state.aligned[0].value(), tr.state.aligned[1].value());
    let (n, c, h, ww) = a0.dims4();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..ww {
                    let (w0, w1) = (w.at(&[b, 0, y, x]), w.at(&[b, 1, y, x]));
                    let (p, q) = (a0.at(&[b, ch, y, x]), a1.at(&[b, ch, y, x]));
                    assert!((tr.state.enhanced_ref[0].value().at(&[b, ch, y, x]) - (p + w0 * q)).abs() < 1e-12);
                    assert!((tr.state.enhanced_ref[1].value().at(&[b, ch, y, x]) - (q + w1 * p)).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn injection_is_gated_residual() {
    let widths = [4, 8, 8];
    let (mut store, fcm) = setup(&widths, &FcmConfig { gamma_init: 0.5, ..FcmConfig::default() });
    common::perturb(&mut store, 0.2, 8);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, true, false);
    let pyr = pyramid(&tape, &widths, 16, 9);
    let tr = fcm.forward_trace(&ctx, &pyr).unwrap();
    for i in 0..3 {
        let (o, f, g, r) = (tr.out[i].value(), pyr[i].value(), tr.gates[i].value(), tr.routed[i].value());
        assert!(r.max_abs() > 0.0);
        assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
        for j in 0..o.numel() {
            assert!((o.data()[j] - f.data()[j] - g.data()[j] * r.data()[j]).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn fused_map_is_a_convex_combination(seed in 0u64..1000, logits in prop::collection::vec(-4.0f64..4.0, 6)) {
        let tape = Tape::new();
        let [td, bu, lat] = [0, 1, 2].map(|k| pyramid(&tape, &[3], 4, seed * 3 + k));
        let a = tape.constant(Tensor::from_f64([2, 3], &logits)).softmax(1);
        let paths = DirectionalPaths { td: td.clone(), bu: bu.clone(), lat: lat.clone() };
        let f = Fcm::fuse_directions(&paths, &[a])[0].value();
        let (x, y, z) = (td[0].value(), bu[0].value(), lat[0].value());
        for i in 0..f.numel() {
            let (p, q, r) = (x.data()[i], y.data()[i], z.data()[i]);
            prop_assert!(f.data()[i] >= p.min(q).min(r) - 1e-12 && f.data()[i] <= p.max(q).max(r) + 1e-12);
        }
    }
}
