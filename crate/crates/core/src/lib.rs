//! Overall-survival prediction from multi-modal brain MRI with a binned,
//! post-hoc survival head.
//!
//! A 3D convolutional encoder maps the four co-registered sequences to a
//! saliency volume with one channel per survival bin. LSE pooling and a
//! sigmoid turn each channel into a bin probability, and the prediction is
//! the probability-weighted sum of bin widths. The saliency volume doubles
//! as a weak tumor localization.

// Validation writes `!(a <= b)` on purpose so NaN fails it; the numeric
// kernels index several parallel buffers per loop.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod survival;
pub mod tensor;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use network::{HeadKind, NetworkConfig, PosthocModel};
pub use tensor::{Mode, Parameter, Tensor};
