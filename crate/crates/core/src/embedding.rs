use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnet::l2_normalize;

/// Allowed deviation from unit norm for stored embeddings.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding has norm {0}, expected 1")]
    NotUnitNorm(f64),
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("cannot normalize a near-zero vector")]
    ZeroVector,
}

/// L2-normalized feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Wraps a vector that is already unit norm.
    pub fn from_unit(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = values.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(EmbeddingError::NotUnitNorm(norm));
        }
        Ok(Self(values))
    }

    pub fn normalized(values: &[f32]) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        l2_normalize(values)
            .map(Self)
            .map_err(|_| EmbeddingError::ZeroVector)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = EmbeddingError;

    fn try_from(v: Vec<f32>) -> Result<Self, Self::Error> {
        Self::from_unit(v)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}
