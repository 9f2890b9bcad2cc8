//! Tensor container, parameter store and differentiable layer primitives.
//!
//! There is no autodiff graph: every layer exposes a forward function and a
//! hand-written backward function, and the blocks above chain them.

mod gradcheck;
pub mod ops;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_filtered, relative_error, DEFAULT_STEP};
pub use ops::Mode;
pub use params::{round_to_f32, Initializer, ParamId, ParamKind, ParamStore, Parameter};
pub use tensor::{Segments, Tensor};
