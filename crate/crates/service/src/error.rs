use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use dynsplat_core::Error;

/// An error response: the status plus a JSON body `{"error": message}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    pub fn no_model() -> Self {
        Self::not_found("no model loaded")
    }

    /// Unknown ids in a read request are a malformed request, not a
    /// missing resource.
    pub fn unknown_as_bad_request(e: Error) -> Self {
        match e {
            Error::UnknownSegment(id) => Self::bad_request(format!("unknown segment id {id}")),
            other => other.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownSegment(_) => StatusCode::NOT_FOUND,
            Error::InvalidArgument(_) | Error::InvalidCamera(_) | Error::ShapeMismatch(_) | Error::Config(_) => StatusCode::BAD_REQUEST,
            Error::NoSupervision => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}
