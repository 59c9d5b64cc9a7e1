// `!(x > 0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ar;
pub mod config;
pub mod detector;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod partition;
pub mod pipeline;
pub mod pulse;
pub mod sampler;
pub mod scalar;
pub mod signal;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases used by the binary and most callers.
pub type Signal = signal::Signal<f64>;
pub type ArModel = ar::ArModel<f64>;
pub type ShapeTailParams = pulse::ShapeTailParams<f64>;
pub type GpHyper = pulse::GpHyper<f64>;
pub type Chain = sampler::Chain<f64>;

/// Single-precision variants for memory-bound batch work.
pub mod f32 {
    pub type Signal = crate::signal::Signal<f32>;
    pub type ArModel = crate::ar::ArModel<f32>;
    pub type ShapeTailParams = crate::pulse::ShapeTailParams<f32>;
    pub type GpHyper = crate::pulse::GpHyper<f32>;
    pub type Chain = crate::sampler::Chain<f32>;
}
