use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use bi33_core::api::ErrorBody;
use bi33_core::error::{FieldError, ValidationError};

/// Error returned by a handler, rendered as an [`ErrorBody`].
#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    Inconsistent(String),
    Validation(String, Vec<FieldError>),
    Unauthorized,
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Inconsistent(_) => StatusCode::CONFLICT,
            ApiError::Validation(..) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn body(self) -> ErrorBody {
        match self {
            ApiError::NotFound(id) => ErrorBody::new("not_found", format!("no session {id:?}"), vec![]),
            ApiError::Inconsistent(msg) => ErrorBody::new("inconsistent_event", msg, vec![]),
            ApiError::Validation(msg, fields) => ErrorBody::new("validation", msg, fields),
            ApiError::Unauthorized => ErrorBody::new("unauthorized", "missing or wrong bearer token", vec![]),
            ApiError::Internal(msg) => ErrorBody::new("internal", msg, vec![]),
        }
    }

    pub fn field(field: &str, message: impl Into<String>) -> Self {
        let e = ValidationError::single(field, message);
        ApiError::from(e)
    }
}

impl From<ValidationError> for ApiError {
    fn from(e: ValidationError) -> Self {
        ApiError::Validation(e.to_string(), e.0)
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::Internal(format!("storage error: {e}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::error!(?self, "request failed");
        }
        (status, Json(self.body())).into_response()
    }
}
