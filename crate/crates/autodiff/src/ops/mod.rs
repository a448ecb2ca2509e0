//! Differentiable operations, grouped by kind. All are methods on [`crate::Var`].

pub mod conv;
pub mod elementwise;
pub mod matmul;
pub mod norm;
pub mod resample;
pub mod shape;

pub use conv::{col2im, im2col, Conv2dGeom};
pub use elementwise::sigmoid;
pub use norm::BatchStats;
pub use shape::permute_tensor;
