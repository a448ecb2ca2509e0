//! Categorical forecast verification on pooled contingency tables.

use std::ops::{Add, AddAssign};

use ndarray::{ArrayView3, ArrayViewD, Axis};
use serde::{Deserialize, Serialize};

use crate::data::NativeRange;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ContingencyTable {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `tp / (tp + fn + fp)`, 0 when there is neither an event nor a forecast.
    pub fn csi(&self) -> f64 {
        let d = self.tp + self.fn_ + self.fp;
        if d == 0 {
            0.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    /// Heidke skill score, 0 on a zero denominator.
    pub fn hss(&self) -> f64 {
        let (tp, fp, fn_, tn) = (self.tp as f64, self.fp as f64, self.fn_ as f64, self.tn as f64);
        let den = (tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn);
        if den == 0.0 {
            0.0
        } else {
            2.0 * (tp * tn - fn_ * fp) / den
        }
    }
}

impl Add for ContingencyTable {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

impl AddAssign for ContingencyTable {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Thresholds in native units for one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub dataset_id: String,
    pub thresholds: Vec<f64>,
}

impl ThresholdSet {
    pub fn new(dataset_id: impl Into<String>, thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::Invalid("threshold set is empty".into()));
        }
        if thresholds.iter().any(|t| !t.is_finite()) || thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!("thresholds must be finite and strictly increasing: {thresholds:?}")));
        }
        Ok(Self { dataset_id: dataset_id.into(), thresholds })
    }

    /// `sevir`, `meteonet`, `shanghai`, `cikm`, `synthetic`, or `custom:a,b,c`.
    pub fn preset(name: &str) -> Result<Self> {
        let t: Vec<f64> = match name {
            "sevir" => vec![16.0, 74.0, 133.0, 160.0, 181.0, 219.0],
            "meteonet" => vec![12.0, 18.0, 24.0, 32.0],
            "shanghai" | "cikm" => vec![20.0, 30.0, 35.0, 40.0],
            "synthetic" => vec![0.2, 0.5],
            _ => {
                let Some(list) = name.strip_prefix("custom:") else {
                    return Err(Error::Invalid(format!("unknown threshold preset {name:?}")));
                };
                let parsed = list
                    .split(',')
                    .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Invalid(format!("bad threshold {s:?}: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                return Self::new("custom", parsed);
            }
        };
        Self::new(name, t)
    }

    pub fn validate_range(&self, range: NativeRange) -> Result<()> {
        match self.thresholds.iter().find(|&&t| t < range.lo || t > range.hi) {
            Some(t) => Err(Error::Invalid(format!("threshold {t} outside native range [{}, {}]", range.lo, range.hi))),
            None => Ok(()),
        }
    }
}

/// Native value range of a named dataset product.
pub fn native_range_of(dataset_id: &str) -> Option<NativeRange> {
    let (lo, hi) = match dataset_id {
        "sevir" => (0.0, 255.0),
        "meteonet" | "shanghai" => (0.0, 70.0),
        "cikm" => (0.0, 76.0),
        "synthetic" => (0.0, 1.0),
        _ => return None,
    };
    Some(NativeRange { lo, hi })
}

fn check_shapes(pred: &ArrayViewD<'_, f32>, obs: &ArrayViewD<'_, f32>) -> Result<()> {
    if pred.shape() != obs.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs observation {:?}", pred.shape(), obs.shape())));
    }
    Ok(())
}

/// Pools per-pixel `>= threshold` outcomes over the whole field.
pub fn accumulate(pred: ArrayViewD<'_, f32>, obs: ArrayViewD<'_, f32>, threshold: f64) -> Result<ContingencyTable> {
    check_shapes(&pred, &obs)?;
    let mut t = ContingencyTable::default();
    for (&p, &o) in pred.iter().zip(obs.iter()) {
        match (p as f64 >= threshold, o as f64 >= threshold) {
            (true, true) => t.tp += 1,
            (true, false) => t.fp += 1,
            (false, true) => t.fn_ += 1,
            (false, false) => t.tn += 1,
        }
    }
    Ok(t)
}

/// Mean over thresholds of the pooled CSI.
pub fn csi_m(pred: ArrayViewD<'_, f32>, obs: ArrayViewD<'_, f32>, set: &ThresholdSet) -> Result<f64> {
    if set.thresholds.is_empty() {
        return Err(Error::Invalid("threshold set is empty".into()));
    }
    let mut s = 0.0;
    for &thr in &set.thresholds {
        s += accumulate(pred.view(), obs.view(), thr)?.csi();
    }
    Ok(s / set.thresholds.len() as f64)
}

/// Mean squared error in the units of the inputs.
pub fn mse(pred: ArrayViewD<'_, f32>, obs: ArrayViewD<'_, f32>) -> Result<f64> {
    check_shapes(&pred, &obs)?;
    let n = pred.len().max(1) as f64;
    Ok(pred.iter().zip(obs.iter()).map(|(&p, &o)| (p as f64 - o as f64).powi(2)).sum::<f64>() / n)
}

/// Streaming accumulator of tables per threshold and lead step plus squared error.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Verification {
    pub thresholds: ThresholdSet,
    /// `tables[threshold][lead]`.
    pub tables: Vec<Vec<ContingencyTable>>,
    pub sq_err: f64,
    pub count: u64,
    pub lead_sq_err: Vec<f64>,
    pub lead_count: Vec<u64>,
}

impl Verification {
    pub fn new(thresholds: ThresholdSet, k: usize) -> Self {
        let n = thresholds.thresholds.len();
        Self {
            thresholds,
            tables: vec![vec![ContingencyTable::default(); k]; n],
            sq_err: 0.0,
            count: 0,
            lead_sq_err: vec![0.0; k],
            lead_count: vec![0; k],
        }
    }

    pub fn k(&self) -> usize {
        self.lead_count.len()
    }

    /// Adds one `K x H x W` forecast/observation pair in native units.
    pub fn add(&mut self, pred: ArrayView3<'_, f32>, obs: ArrayView3<'_, f32>) -> Result<()> {
        if pred.shape() != obs.shape() || pred.dim().0 != self.k() {
            return Err(Error::Shape(format!("pair {:?} / {:?} for K = {}", pred.shape(), obs.shape(), self.k())));
        }
        for (lead, (p, o)) in pred.axis_iter(Axis(0)).zip(obs.axis_iter(Axis(0))).enumerate() {
            for (ti, &thr) in self.thresholds.thresholds.iter().enumerate() {
                self.tables[ti][lead] += accumulate(p.into_dyn(), o.into_dyn(), thr)?;
            }
            let se: f64 = p.iter().zip(o.iter()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            self.lead_sq_err[lead] += se;
            self.lead_count[lead] += p.len() as u64;
            self.sq_err += se;
            self.count += p.len() as u64;
        }
        Ok(())
    }

    /// Associative merge of two accumulators over disjoint shards.
    pub fn merge(&mut self, other: &Verification) -> Result<()> {
        if other.thresholds != self.thresholds || other.k() != self.k() {
            return Err(Error::Shape("cannot merge verifications with different layouts".into()));
        }
        for (a, b) in self.tables.iter_mut().zip(&other.tables) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        self.sq_err += other.sq_err;
        self.count += other.count;
        for l in 0..self.k() {
            self.lead_sq_err[l] += other.lead_sq_err[l];
            self.lead_count[l] += other.lead_count[l];
        }
        Ok(())
    }

    pub fn pooled_table(&self, threshold_index: usize) -> ContingencyTable {
        self.tables[threshold_index].iter().fold(ContingencyTable::default(), |a, &b| a + b)
    }

    pub fn summary(&self) -> MetricsSummary {
        let per_threshold: Vec<ThresholdMetrics> = self
            .thresholds
            .thresholds
            .iter()
            .enumerate()
            .map(|(i, &threshold)| {
                let t = self.pooled_table(i);
                ThresholdMetrics { threshold, csi: t.csi(), hss: t.hss(), table: t }
            })
            .collect();
        let n = per_threshold.len() as f64;
        let k = self.k();
        let lead_csi_m = (0..k)
            .map(|l| self.tables.iter().map(|ts| ts[l].csi()).sum::<f64>() / n)
            .collect();
        let lead_hss = (0..k)
            .map(|l| self.tables.iter().map(|ts| ts[l].hss()).sum::<f64>() / n)
            .collect();
        let lead_mse = (0..k)
            .map(|l| if self.lead_count[l] == 0 { 0.0 } else { self.lead_sq_err[l] / self.lead_count[l] as f64 })
            .collect();
        MetricsSummary {
            dataset_id: self.thresholds.dataset_id.clone(),
            csi_m: per_threshold.iter().map(|m| m.csi).sum::<f64>() / n,
            hss: per_threshold.iter().map(|m| m.hss).sum::<f64>() / n,
            mse: if self.count == 0 { 0.0 } else { self.sq_err / self.count as f64 },
            per_threshold,
            lead_time: LeadTimeCurves { csi_m: lead_csi_m, hss: lead_hss, mse: lead_mse },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub threshold: f64,
    pub csi: f64,
    pub hss: f64,
    pub table: ContingencyTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadTimeCurves {
    pub csi_m: Vec<f64>,
    pub hss: Vec<f64>,
    pub mse: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub dataset_id: String,
    pub csi_m: f64,
    /// Mean HSS over the threshold set; per-threshold values are in `per_threshold`.
    pub hss: f64,
    pub mse: f64,
    pub per_threshold: Vec<ThresholdMetrics>,
    pub lead_time: LeadTimeCurves,
}

/// Per-lead CSI-M/HSS series pooled over all pairs at each lead step.
pub fn lead_time_curves(preds: &[ArrayView3<'_, f32>], obs: &[ArrayView3<'_, f32>], set: &ThresholdSet) -> Result<LeadTimeCurves> {
    if preds.len() != obs.len() {
        return Err(Error::Shape(format!("{} forecasts vs {} observations", preds.len(), obs.len())));
    }
    let k = preds.first().map(|p| p.dim().0).unwrap_or(0);
    let mut v = Verification::new(set.clone(), k);
    for (p, o) in preds.iter().zip(obs) {
        v.add(p.view(), o.view())?;
    }
    Ok(v.summary().lead_time)
}
