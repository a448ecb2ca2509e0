//! Synthetic advection-diffusion echoes for desk-scale experiments.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NativeRange, RadarSequence};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_blobs: usize,
    /// Pixels per frame along (x, y).
    pub velocity: (f64, f64),
    /// Variance added per frame, in pixels squared per unit, as in `sigma^2 += 2 * diffusion`.
    pub diffusion: f64,
    /// Amplitude multiplier per frame.
    pub decay: f64,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub sigma_range: (f64, f64),
    pub amplitude_range: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_blobs: 4,
            velocity: (1.0, 0.5),
            diffusion: 0.05,
            decay: 0.99,
            t: 15,
            h: 64,
            w: 64,
            sigma_range: (3.0, 7.0),
            amplitude_range: (0.5, 1.0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t < 1 || self.h < 8 || self.w < 8 {
            return Err(Error::Invalid(format!("synthetic size must be at least 1x8x8, got {}x{}x{}", self.t, self.h, self.w)));
        }
        if !(self.diffusion >= 0.0) {
            return Err(Error::Invalid(format!("diffusion must be >= 0, got {}", self.diffusion)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Invalid(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        let (s0, s1) = self.sigma_range;
        let (a0, a1) = self.amplitude_range;
        if !(s0 > 0.0 && s0 <= s1 && a0 >= 0.0 && a0 <= a1) {
            return Err(Error::Invalid("sigma/amplitude ranges must be ordered and positive".into()));
        }
        Ok(())
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    sigma2: f64,
    amp: f64,
}

/// Gaussian blobs advected by a constant velocity, spread by diffusion and damped by `decay`.
///
/// Values are in native range `(0, 1)` and clipped at 1 where blobs overlap.
pub fn synthesize_advection(cfg: &SynthConfig) -> Result<RadarSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let blobs: Vec<Blob> = (0..cfg.n_blobs)
        .map(|_| {
            let sigma = sample(&mut rng, cfg.sigma_range);
            Blob {
                cx: rng.random_range(0.0..cfg.w as f64),
                cy: rng.random_range(0.0..cfg.h as f64),
                sigma2: sigma * sigma,
                amp: sample(&mut rng, cfg.amplitude_range),
            }
        })
        .collect();
    let (vx, vy) = cfg.velocity;
    let mut frames = Array3::<f32>::zeros((cfg.t, cfg.h, cfg.w));
    for f in 0..cfg.t {
        let tf = f as f64;
        for b in &blobs {
            let s2 = b.sigma2 + 2.0 * cfg.diffusion * tf;
            // mass-preserving spread: peak falls as the variance grows
            let peak = b.amp * cfg.decay.powi(f as i32) * b.sigma2 / s2;
            let (cx, cy) = (b.cx + vx * tf, b.cy + vy * tf);
            for y in 0..cfg.h {
                let dy = y as f64 - cy;
                for x in 0..cfg.w {
                    let dx = x as f64 - cx;
                    frames[[f, y, x]] += (peak * (-(dx * dx + dy * dy) / (2.0 * s2)).exp()) as f32;
                }
            }
        }
    }
    frames.mapv_inplace(|v| v.min(1.0));
    RadarSequence::new(frames, 5.0, NativeRange { lo: 0.0, hi: 1.0 }, "synthetic")
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}
