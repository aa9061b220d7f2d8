use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use primid_core::align::AlignError;
use primid_core::gallery::GalleryError;
use primid_core::matcher::MatchError;
use primid_core::pipeline::PipelineError;
use serde_json::json;
use thiserror::Error;

use crate::SCHEMA_VERSION;

/// An error returned to clients as `{schema_version, error: {code, message}}`.
#[derive(Debug, Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(code = self.code, "{}", self.message);
        }
        let body = json!({
            "schema_version": SCHEMA_VERSION,
            "error": { "code": self.code, "message": self.message },
        });
        (self.status, Json(body)).into_response()
    }
}

impl From<AlignError> for ApiError {
    fn from(e: AlignError) -> Self {
        match e {
            AlignError::DegenerateLandmarks { .. }
            | AlignError::OutOfBounds { .. }
            | AlignError::SingularSystem
            | AlignError::InvalidParams(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_landmarks", e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Align(e) => e.into(),
            PipelineError::NotACrop { .. } | PipelineError::Image { .. } => {
                Self::new(StatusCode::BAD_REQUEST, "invalid_image", e.to_string())
            }
            _ => Self::internal(e.to_string()),
        }
    }
}

impl From<GalleryError> for ApiError {
    fn from(e: GalleryError) -> Self {
        match e {
            GalleryError::SpeciesConflict { .. } => Self::new(StatusCode::CONFLICT, "species_conflict", e.to_string()),
            GalleryError::NotFound(_) => Self::not_found(e.to_string()),
            GalleryError::Invalid(_) => Self::bad_request(e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}

impl From<MatchError> for ApiError {
    fn from(e: MatchError) -> Self {
        match e {
            MatchError::EmptyGallery => Self::new(StatusCode::NOT_FOUND, "empty_gallery", e.to_string()),
            MatchError::InvalidK | MatchError::InvalidThreshold(_) => Self::bad_request(e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}
