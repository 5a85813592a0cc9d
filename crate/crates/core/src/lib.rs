//! Spiking transformer with a temporal interaction module on the query path.
//!
//! The crate carries its own reverse-mode autodiff ([`autodiff`]), LIF neurons
//! with a surrogate gradient ([`neuron`]), spiking self-attention with the
//! temporal interaction recurrence ([`attention`]), the classifier backbone
//! ([`model`]), event-stream data handling ([`events`], [`synth`]), and the
//! training/evaluation loop ([`train`]).

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod events;
pub mod gradcheck;
mod kernels;
pub mod model;
pub mod neuron;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
