//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every op of one forward pass; [`Var`] handles are cheap
//! copies that index into it. Ops with hand-written adjoints are added with
//! [`Tape::custom_op`]. Everything is generic over `f32` and `f64`, so the same
//! model code serves training and double-precision gradient checks.

pub mod element;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use element::{gemm, Element};
pub use ops::{sigmoid, BatchStats};
pub use params::{Ctx, ParamId, ParamKind, ParamStore};
pub use tape::{BackwardCtx, BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
