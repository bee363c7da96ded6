//! Dense tensors and reverse-mode differentiation, limited to what the CCT
//! forward pass needs.
//!
//! Values live in [`Tensor`]s; computations are traced on a [`Tape`] whose
//! methods are the differentiable ops (`matmul`, `conv2d`, `maxpool2d`,
//! `relu`, `gelu`, `softmax`, `layer_norm`, `dropout`, `cross_entropy`, plus
//! the shape plumbing attention needs). Setting `CCT_NAN_CHECK=1` makes every
//! op assert that its output is finite.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

use std::sync::OnceLock;

pub use gradcheck::{
    finite_difference_check, finite_difference_check_filtered, finite_difference_check_many, relative_error, GradCheckReport,
};
pub use tape::{window_output_extent, GeluForm, Tape, Var};
pub use tensor::{Element, Tensor};

/// Name of the environment variable that turns on per-op finiteness checks.
pub const NAN_CHECK_ENV: &str = "CCT_NAN_CHECK";

pub(crate) fn nan_check_enabled() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| std::env::var(NAN_CHECK_ENV).map(|v| v == "1").unwrap_or(false))
}
