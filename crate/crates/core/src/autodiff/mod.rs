//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor) values.
//!
//! A [`Tape`] is rebuilt for every forward pass. Ops are methods on [`Var`]
//! handles and record a backward closure; [`Tape::backward`] replays them in
//! reverse, summing gradients across fan-out.

mod batchnorm;
mod ops;
mod tape;

pub use batchnorm::{batch_norm, NormMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use ops::{custom_grad, set_conv_backward_fault};
pub use tape::{BackwardArgs, BackwardFn, Tape, Var};
