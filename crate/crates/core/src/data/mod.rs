//! Radar sequences, preprocessing, windowing and chronological splitting.

pub mod container;
pub mod dataset;
pub mod synth;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use container::{load_tensor, save_tensor};
pub use dataset::{Dataset, DatasetMeta};
pub use synth::{synthesize_advection, SynthConfig};

/// Inclusive native value range of a product, e.g. `(0, 255)` for VIL.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NativeRange {
    pub lo: f64,
    pub hi: f64,
}

impl NativeRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidRange { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn span(&self) -> f64 {
        self.hi - self.lo
    }
}

/// `T x H x W` frames in native units.
#[derive(Clone, Debug)]
pub struct RadarSequence {
    frames: Array3<f32>,
    pub cadence_minutes: f64,
    pub native_range: NativeRange,
    pub dataset_id: String,
}

impl RadarSequence {
    /// Validates shape and finiteness; values outside the native range are clipped.
    pub fn new(mut frames: Array3<f32>, cadence_minutes: f64, native_range: NativeRange, dataset_id: impl Into<String>) -> Result<Self> {
        let (t, h, w) = frames.dim();
        if t < 1 || h < 8 || w < 8 {
            return Err(Error::Shape(format!("sequence must be at least 1x8x8, got {t}x{h}x{w}")));
        }
        if !(cadence_minutes > 0.0) {
            return Err(Error::Invalid(format!("cadence must be positive, got {cadence_minutes}")));
        }
        if let Some(index) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let (lo, hi) = (native_range.lo as f32, native_range.hi as f32);
        frames.mapv_inplace(|v| v.clamp(lo, hi));
        Ok(Self { frames, cadence_minutes, native_range, dataset_id: dataset_id.into() })
    }

    pub fn frames(&self) -> ArrayView3<'_, f32> {
        self.frames.view()
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.frames.dim();
        (h, w)
    }
}

/// Linear map of native values onto `[0, 1]`, clipping out-of-range values.
pub fn normalize(frame: ArrayView2<'_, f32>, range: NativeRange) -> Result<Array2<f32>> {
    if let Some(index) = frame.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let (lo, span) = (range.lo, range.span());
    Ok(frame.mapv(|v| (((v as f64 - lo) / span).clamp(0.0, 1.0)) as f32))
}

pub fn denormalize(frame: ArrayView2<'_, f32>, range: NativeRange) -> Array2<f32> {
    frame.mapv(|v| (range.lo + v as f64 * range.span()) as f32)
}

/// Corner-aligned bilinear resize.
pub fn resize_bilinear(frame: ArrayView2<'_, f32>, out_h: usize, out_w: usize) -> Result<Array2<f32>> {
    let (h, w) = frame.dim();
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("resize input must be at least 2x2, got {h}x{w}")));
    }
    if out_h < 2 || out_w < 2 {
        return Err(Error::Shape(format!("resize output must be at least 2x2, got {out_h}x{out_w}")));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(frame.to_owned());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let p = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
                let i0 = (p.floor() as usize).min(n_in - 2);
                (i0, i0 + 1, p - i0 as f64)
            })
            .collect()
    };
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = Array2::<f32>::zeros((out_h, out_w));
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let v = (1.0 - fy) * ((1.0 - fx) * frame[[y0, x0]] as f64 + fx * frame[[y0, x1]] as f64)
                + fy * ((1.0 - fx) * frame[[y1, x0]] as f64 + fx * frame[[y1, x1]] as f64);
            out[[oy, ox]] = v as f32;
        }
    }
    Ok(out)
}

/// One training/evaluation example: `J` conditioning frames followed by `K` targets, normalized.
#[derive(Clone, Debug)]
pub struct SequenceWindow {
    pub condition: Array3<f32>,
    pub target: Array3<f32>,
    /// Index of the source sequence in its dataset.
    pub event: usize,
    /// Frame index of the first conditioning frame.
    pub start: usize,
}

impl SequenceWindow {
    pub fn j(&self) -> usize {
        self.condition.dim().0
    }

    pub fn k(&self) -> usize {
        self.target.dim().0
    }
}

#[derive(Clone, Debug, Default)]
pub struct Windows {
    pub windows: Vec<SequenceWindow>,
    /// Set when the sequence was shorter than `J + K`.
    pub too_short: bool,
}

/// Cuts normalized `(J, K)` windows every `stride` frames.
pub fn make_windows(seq: &RadarSequence, event: usize, j: usize, k: usize, stride: usize) -> Result<Windows> {
    if j == 0 || k == 0 || stride == 0 {
        return Err(Error::Invalid(format!("J, K and stride must be positive (got {j}, {k}, {stride})")));
    }
    let t = seq.len();
    if t < j + k {
        log::warn!("sequence {event} has {t} frames, fewer than J + K = {}", j + k);
        return Ok(Windows { windows: Vec::new(), too_short: true });
    }
    let (h, w) = seq.hw();
    let mut norm = Array3::<f32>::zeros((t, h, w));
    for f in 0..t {
        norm.slice_mut(s![f, .., ..]).assign(&normalize(seq.frames.slice(s![f, .., ..]), seq.native_range)?);
    }
    let count = (t - j - k) / stride + 1;
    let windows = (0..count)
        .map(|i| {
            let st = i * stride;
            SequenceWindow {
                condition: norm.slice(s![st..st + j, .., ..]).to_owned(),
                target: norm.slice(s![st + j..st + j + k, .., ..]).to_owned(),
                event,
                start: st,
            }
        })
        .collect();
    Ok(Windows { windows, too_short: false })
}

/// Disjoint, chronologically ordered index sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Splits `n` chronologically ordered items into train/val/test prefixes.
///
/// Train and val sizes are `floor(f * n)`, test takes the remainder, and every
/// split is then topped up to at least one item by borrowing from the largest.
pub fn chronological_split(n: usize, fractions: (f64, f64, f64)) -> Result<SplitManifest> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("split fractions must be in [0,1] and sum to 1, got {fractions:?}")));
    }
    if n < 3 {
        return Err(Error::Invalid(format!("need at least 3 items to split, got {n}")));
    }
    let mut sizes = [(a * n as f64 + 1e-9).floor() as usize, (b * n as f64 + 1e-9).floor() as usize, 0];
    sizes[2] = n - sizes[0] - sizes[1];
    for i in 0..3 {
        while sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&d| (sizes[d], usize::MAX - d)).unwrap();
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }
    let (tr, va) = (sizes[0], sizes[1]);
    Ok(SplitManifest { train: (0..tr).collect(), val: (tr..tr + va).collect(), test: (tr + va..n).collect() })
}
