//! Dataset directories: one container per event plus a `dataset.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Ix3};
use serde::{Deserialize, Serialize};

use super::container::{load_tensor, save_tensor};
use super::synth::{synthesize_advection, SynthConfig};
use super::{chronological_split, make_windows, resize_bilinear, NativeRange, RadarSequence, SequenceWindow, SplitManifest};
use crate::error::{Error, Result};

pub const SIDECAR: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub dataset_id: String,
    pub cadence_minutes: f64,
    pub native_range: NativeRange,
    /// Event container files relative to the directory, in chronological order.
    pub events: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub sequences: Vec<RadarSequence>,
}

/// Windows of the three chronological splits.
#[derive(Clone, Debug)]
pub struct SplitWindows {
    pub train: Vec<SequenceWindow>,
    pub val: Vec<SequenceWindow>,
    pub test: Vec<SequenceWindow>,
    pub manifest: SplitManifest,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let side = dir.join(SIDECAR);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        NativeRange::new(meta.native_range.lo, meta.native_range.hi)?;
        let sequences = meta
            .events
            .iter()
            .map(|name| {
                let path = dir.join(name);
                let arr = load_tensor::<f32>(&path)?
                    .into_dimensionality::<Ix3>()
                    .map_err(|_| Error::format(&path, "event tensor must be T x H x W"))?;
                RadarSequence::new(arr, meta.cadence_minutes, meta.native_range, meta.dataset_id.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { meta, sequences })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, seq) in self.meta.events.iter().zip(&self.sequences) {
            save_tensor(dir.join(name), &seq.frames().to_owned().into_dyn())?;
        }
        let side = dir.join(SIDECAR);
        let text = serde_json::to_string_pretty(&self.meta)?;
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    /// Resizes every frame to `size x size`.
    pub fn resized(&self, size: usize) -> Result<Self> {
        let sequences = self
            .sequences
            .iter()
            .map(|seq| {
                if seq.hw() == (size, size) {
                    return Ok(seq.clone());
                }
                let mut out = Array3::<f32>::zeros((seq.len(), size, size));
                for f in 0..seq.len() {
                    out.slice_mut(s![f, .., ..]).assign(&resize_bilinear(seq.frames().slice(s![f, .., ..]), size, size)?);
                }
                RadarSequence::new(out, seq.cadence_minutes, seq.native_range, seq.dataset_id.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { meta: self.meta.clone(), sequences })
    }

    /// All windows in chronological order (event order, then start frame).
    pub fn windows(&self, j: usize, k: usize, stride: usize) -> Result<Vec<SequenceWindow>> {
        let mut all = Vec::new();
        for (e, seq) in self.sequences.iter().enumerate() {
            all.extend(make_windows(seq, e, j, k, stride)?.windows);
        }
        Ok(all)
    }

    /// Chronological split over windows. Windows that share frames with an
    /// earlier split are dropped so no frame is seen on both sides of a boundary.
    pub fn split(&self, j: usize, k: usize, stride: usize, fractions: (f64, f64, f64)) -> Result<SplitWindows> {
        let all = self.windows(j, k, stride)?;
        let manifest = chronological_split(all.len(), fractions)?;
        let span = j + k;
        let overlaps = |a: &SequenceWindow, b: &SequenceWindow| a.event == b.event && a.start < b.start + span && b.start < a.start + span;
        let mut manifest_out = manifest.clone();
        let train: Vec<_> = manifest.train.iter().map(|&i| all[i].clone()).collect();
        manifest_out.val.retain(|&i| !train.iter().any(|t| overlaps(t, &all[i])));
        let val: Vec<_> = manifest_out.val.iter().map(|&i| all[i].clone()).collect();
        manifest_out
            .test
            .retain(|&i| !train.iter().chain(val.iter()).any(|t| overlaps(t, &all[i])));
        let test: Vec<_> = manifest_out.test.iter().map(|&i| all[i].clone()).collect();
        Ok(SplitWindows { train, val, test, manifest: manifest_out })
    }
}

/// Generates `n_events` synthetic events (seeds `cfg.seed + i`) and writes them to `dir`.
pub fn write_synthetic(dir: impl AsRef<Path>, cfg: &SynthConfig, n_events: usize) -> Result<Dataset> {
    let sequences = (0..n_events)
        .map(|i| synthesize_advection(&SynthConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let meta = DatasetMeta {
        dataset_id: "synthetic".into(),
        cadence_minutes: 5.0,
        native_range: NativeRange { lo: 0.0, hi: 1.0 },
        events: (0..n_events).map(|i| format!("event_{i:04}.rft")).collect(),
    };
    let ds = Dataset { meta, sequences };
    ds.save(dir)?;
    Ok(ds)
}

pub fn sidecar_path(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join(SIDECAR)
}
