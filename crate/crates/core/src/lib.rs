//! Trainable multiplication layers (TML) for auto-correlation and co-occurrence
//! extraction, with the supporting pieces needed to train and inspect them:
//!
//! - [`tensor`]: dense `rows x cols x channels` volumes
//! - [`tml`]: the multiplication layer, its gradients and the clip/rescale projection
//! - [`hlac`]: classic higher-order local auto-correlation features
//! - [`nn`]: small CNN building blocks and the network topologies that host a TML
//! - [`train`]: L1-regularized SGD with kernel projection after every step
//! - [`data`]: IDX files and the synthetic stripe-texture generator
//! - [`viz`]: PGM rendering of kernels, feature maps and co-occurrence overlays
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64` aliases
//! below fix the scalar to `f64`, which every tolerance in the test suite assumes.

mod binio;
pub mod error;
pub mod scalar;
pub mod tensor;
pub mod hlac;
pub mod tml;
pub mod nn;
pub mod gradcheck;
pub mod data;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
pub use tml::{TmlConfig, TmlKernels};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type TmlKernels64 = TmlKernels<f64>;
pub type TmlKernels32 = TmlKernels<f32>;
pub type Network64 = nn::Network<f64>;
pub type Network32 = nn::Network<f32>;
