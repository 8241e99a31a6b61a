//! framecast: flow-based video frame extrapolation on plain CPU kernels,
//! with exact FLOPs accounting and a network-latency compensation simulator.
//!
//! The crate is organised around a small differentiable kernel ([`tensor`]),
//! declarative residual blocks ([`blocks`]), a coarse-to-fine flow model
//! ([`model`]), frame synthesis and prediction strategies ([`predict`]),
//! desk-scale training on synthetic scenes ([`train`]), quality and cost
//! metrics ([`metrics`]) and the latency simulator ([`latsim`]).

pub mod blocks;
pub mod error;
pub mod frames;
pub mod model;
pub mod predict;
pub mod tensor;
pub mod train;

#[doc(hidden)]
pub mod testsupport;

pub use error::{Error, Result};
