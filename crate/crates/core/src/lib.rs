//! Rectified-flow radar nowcasting.
//!
//! The velocity network couples a conditional encoder with a U-shaped
//! backbone; cross-scale feature communication, condition-guided warping,
//! wavelet-gated skips and linear-time token mixing are separate modules
//! that can each be switched off to recover the plain baseline wiring.

pub mod cgstf;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fcm;
pub mod kan;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;
pub mod vrwkv;
pub mod wgsc;

pub use error::{Error, Result};
