#![cfg_attr(not(test), no_std)]
extern crate alloc;

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod adam;
pub mod autodiff;
pub mod encoder;
pub mod fft;
pub mod metrics;
pub mod physics;
pub mod sim;
pub mod so3;
pub mod tensor;
pub mod training;
