//! Primate face identification: landmark alignment, a compact grouped
//! convolution embedding network, template matching, and biometric
//! evaluation protocols.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod embedding;
pub mod eval;
pub mod gallery;
pub mod matcher;
pub mod model;
pub mod nnet;
pub mod pipeline;
pub mod synth;
