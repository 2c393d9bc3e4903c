// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense tensor arithmetic, reverse-mode autodiff and Adam.

mod adam;
pub mod ops;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{gemm, Real, Tensor, View, ViewMut};
