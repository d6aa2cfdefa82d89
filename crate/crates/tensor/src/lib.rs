//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! Values are immutable [`Tensor`]s; computations are recorded on a
//! [`Tape`] and differentiated with [`Tape::backward`]. Every primitive
//! rejects non-finite outputs with [`TensorError::NonFinite`].

mod attention;
mod error;
mod float;
pub mod gradcheck;
mod ops;
mod primitive;
mod tape;
mod tensor;

pub use attention::{mhsa, AttentionVars};
pub use error::{Result, TensorError};
pub use float::{DType, Float};
pub use gradcheck::{directional_check, gradient_check, gradient_check_multi, relative_error};
pub use ops::loss::focal_term;
pub use ops::norm::NORM_EPS;
pub use ops::sample::RoiAlignCfg;
pub use primitive::Primitive;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{numel, Tensor};
