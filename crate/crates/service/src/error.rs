use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

/// Error body `{"error": code, "detail": text}` with an HTTP status.
#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub detail: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status,
            code,
            detail: detail.into(),
        }
    }

    pub fn invalid(code: &'static str, detail: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, detail)
    }

    pub fn not_found(code: &'static str, detail: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, detail)
    }

    pub fn internal(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", detail)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(code = self.code, "{}", self.detail);
        }
        (self.status, Json(json!({ "error": self.code, "detail": self.detail }))).into_response()
    }
}

impl From<facecomp_core::networks::NetworkError> for ApiError {
    fn from(e: facecomp_core::networks::NetworkError) -> Self {
        Self::internal(e.to_string())
    }
}

impl From<facecomp_core::reasoning::ReasoningError> for ApiError {
    fn from(e: facecomp_core::reasoning::ReasoningError) -> Self {
        Self::invalid("reasoning_failed", e.to_string())
    }
}

impl From<facecomp_core::imaging::ImageError> for ApiError {
    fn from(e: facecomp_core::imaging::ImageError) -> Self {
        Self::invalid("invalid_image", e.to_string())
    }
}
