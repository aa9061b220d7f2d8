//! A small dense neural-network engine with hand-written backpropagation.
//!
//! The layer set is fixed: grouped 2-D convolution, channel shuffle, PReLU,
//! fully connected, and L2 normalization, trained with an additive-margin
//! softmax loss and momentum SGD. All layers are generic over the element type
//! so gradients can be checked in 64-bit against finite differences while the
//! production path runs in 32-bit.

mod activation;
mod conv;
mod linear;
mod loss;
mod network;
mod norm;
mod scalar;
mod sgd;
mod shuffle;
mod tensor;

pub use activation::{prelu, PRelu};
pub use conv::{conv2d_grouped, Conv2d, ConvSpec};
pub use linear::{fully_connected, Linear};
pub use loss::{am_softmax_loss, LossConfig, LossOutput};
pub use network::{Layer, Network};
pub use norm::{l2_normalize, L2Normalize, MIN_NORM};
pub use scalar::Scalar;
pub use sgd::Sgd;
pub use shuffle::{channel_shuffle, shuffle_permutation, ChannelShuffle};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("cannot normalize a vector with norm {0:e}")]
    ZeroVector(f64),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("state error: {0}")]
    State(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> NnError {
    NnError::Shape(msg.into())
}
