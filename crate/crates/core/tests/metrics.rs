mod common;

use common::checks;
use ndarray::{s, Array3};
use proptest::prelude::*;
use rfcast_core::data::{make_windows, synthesize_advection, SynthConfig};
use rfcast_core::metrics::{accumulate, csi_m, lead_time_curves, mse, ContingencyTable, ThresholdSet, Verification};
use rfcast_core::train::persistence;

#[test]
fn pooled_scores_match_loop_oracles() {
    let t0 = std::time::Instant::now();
    checks::metrics_oracle().unwrap();
    assert!(t0.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn table_score_examples() {
    assert_eq!(ContingencyTable::new(4, 0, 0, 9).csi(), 1.0);
    assert_eq!(ContingencyTable::new(1, 1, 2, 0).csi(), 0.25);
    assert_eq!(ContingencyTable::new(0, 0, 0, 5).csi(), 0.0);
    assert_eq!(ContingencyTable::new(2, 0, 0, 3).hss(), 1.0);
    assert_eq!(ContingencyTable::new(0, 2, 2, 0).hss(), -1.0);
    assert_eq!(ContingencyTable::new(0, 0, 0, 8).hss(), 0.0);
    let below = Array3::<f32>::zeros((1, 2, 2));
    let above = Array3::<f32>::ones((1, 2, 2));
    let t = accumulate(below.view().into_dyn(), above.view().into_dyn(), 0.5).unwrap();
    assert_eq!((t.tp, t.fp, t.fn_, t.tn), (0, 0, 4, 0));
    let off = above.mapv(|v| v + 2.0);
    assert_eq!(mse(off.view().into_dyn(), above.view().into_dyn()).unwrap(), 4.0);
}

#[test]
fn csi_m_is_the_threshold_mean() {
    // one threshold scoring 0.2 and one scoring 0.4
    let obs = Array3::from_shape_vec((1, 1, 10), vec![1.0f32, 1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
    let pred = Array3::from_shape_vec((1, 1, 10), vec![0.0f32, 0.0, 0.0, 0.0, 0.0, 3.0, 3.0, 3.0, 3.0, 3.0]).unwrap();
    let a = ThresholdSet::new("custom", vec![0.5]).unwrap();
    let b = ThresholdSet::new("custom", vec![2.0]).unwrap();
    let both = ThresholdSet::new("custom", vec![0.5, 2.0]).unwrap();
    let (ca, cb) = (csi_m(pred.view().into_dyn(), obs.view().into_dyn(), &a).unwrap(), csi_m(pred.view().into_dyn(), obs.view().into_dyn(), &b).unwrap());
    assert!((ca - 0.2).abs() < 1e-12 && (cb - 0.4).abs() < 1e-12, "{ca} {cb}");
    let m = csi_m(pred.view().into_dyn(), obs.view().into_dyn(), &both).unwrap();
    assert!((m - 0.3).abs() < 1e-12);
}

#[test]
fn perfect_forecast_curves_are_flat() {
    let obs = Array3::from_shape_fn((4, 8, 8), |(k, y, x)| ((k + y + x) % 5) as f32);
    let set = ThresholdSet::new("custom", vec![1.0, 3.0]).unwrap();
    let c = lead_time_curves(&[obs.view()], &[obs.view()], &set).unwrap();
    assert!(c.csi_m.iter().all(|&v| v == 1.0));
    assert!(c.mse.iter().all(|&v| v == 0.0));
}

#[test]
fn single_lead_equals_global() {
    let p = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| ((y * 3 + x) % 7) as f32);
    let o = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| ((y + x * 2) % 7) as f32);
    let set = ThresholdSet::new("custom", vec![2.0, 4.0]).unwrap();
    let mut v = Verification::new(set.clone(), 1);
    v.add(p.view(), o.view()).unwrap();
    let s = v.summary();
    assert_eq!(s.lead_time.csi_m, vec![s.csi_m]);
    assert_eq!(s.lead_time.hss, vec![s.hss]);
    assert_eq!(s.lead_time.mse, vec![s.mse]);
    assert_eq!(s.per_threshold.len(), 2);
}

#[test]
fn persistence_skill_falls_with_lead_time() {
    let cfg = SynthConfig { seed: 3, n_blobs: 2, velocity: (1.5, 0.0), diffusion: 0.0, decay: 1.0, t: 16, h: 32, w: 64, ..Default::default() };
    let seq = synthesize_advection(&cfg).unwrap();
    let w = &make_windows(&seq, 0, 5, 10, 1).unwrap().windows[0];
    let set = ThresholdSet::new("custom", vec![0.2, 0.5]).unwrap();
    let base = persistence(w);
    assert_eq!(base.slice(s![3, .., ..]), w.condition.slice(s![4, .., ..]));
    let c = lead_time_curves(&[base.view()], &[w.target.view()], &set).unwrap();
    for pair in c.csi_m.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-12, "{:?}", c.csi_m);
    }
    assert!(c.csi_m[0] > c.csi_m[9]);
}

fn field() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.0f32..10.0, 64)
}

proptest! {
    #[test]
    fn scores_are_bounded(p in field(), o in field(), thr in 0.0f64..10.0) {
        let p = Array3::from_shape_vec((1, 8, 8), p).unwrap();
        let o = Array3::from_shape_vec((1, 8, 8), o).unwrap();
        let t = accumulate(p.view().into_dyn(), o.view().into_dyn(), thr).unwrap();
        prop_assert_eq!(t.total(), 64);
        prop_assert!((0.0..=1.0).contains(&t.csi()));
        prop_assert!((-1.0..=1.0).contains(&t.hss()));
    }

    #[test]
    fn scores_survive_monotone_rescaling(p in field(), o in field(), thr in 0.5f64..9.5, a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let f = |x: f32| (a * (x as f64) + b).exp() as f32;
        let p = Array3::from_shape_vec((1, 8, 8), p).unwrap();
        let o = Array3::from_shape_vec((1, 8, 8), o).unwrap();
        // keep values clear of the threshold so float rounding cannot flip a comparison
        prop_assume!(p.iter().chain(o.iter()).all(|&v| ((v as f64) - thr).abs() > 1e-3));
        let t1 = accumulate(p.view().into_dyn(), o.view().into_dyn(), thr).unwrap();
        let (pm, om) = (p.mapv(f), o.mapv(f));
        let t2 = accumulate(pm.view().into_dyn(), om.view().into_dyn(), (a * thr + b).exp()).unwrap();
        prop_assert_eq!(t1, t2);
    }

    #[test]
    fn merging_shards_matches_one_pass(fields in prop::collection::vec((field(), field()), 2..6), split in 1usize..5) {
        let set = ThresholdSet::new("custom", vec![2.0, 5.0, 8.0]).unwrap();
        let split = split.min(fields.len() - 1);
        let arr = |v: &Vec<f32>| Array3::from_shape_vec((1, 8, 8), v.clone()).unwrap();
        let mut whole = Verification::new(set.clone(), 1);
        let mut a = Verification::new(set.clone(), 1);
        let mut b = Verification::new(set, 1);
        for (i, (p, o)) in fields.iter().enumerate() {
            whole.add(arr(p).view(), arr(o).view()).unwrap();
            let shard = if i < split { &mut a } else { &mut b };
            shard.add(arr(p).view(), arr(o).view()).unwrap();
        }
        a.merge(&b).unwrap();
        prop_assert_eq!(a.tables, whole.tables);
        prop_assert_eq!(a.count, whole.count);
    }
}

#[test]
fn presets_hold_the_published_thresholds() {
    assert_eq!(ThresholdSet::preset("sevir").unwrap().thresholds, vec![16.0, 74.0, 133.0, 160.0, 181.0, 219.0]);
    assert_eq!(ThresholdSet::preset("meteonet").unwrap().thresholds, vec![12.0, 18.0, 24.0, 32.0]);
    assert_eq!(ThresholdSet::preset("shanghai").unwrap().thresholds, vec![20.0, 30.0, 35.0, 40.0]);
    assert_eq!(ThresholdSet::preset("cikm").unwrap().thresholds, vec![20.0, 30.0, 35.0, 40.0]);
}
