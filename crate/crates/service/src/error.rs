use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use dosefind::DoseError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    Invalid(String),
    #[error("session {0} not found")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error(transparent)]
    Engine(#[from] DoseError),
    #[error("event log: {0}")]
    Log(String),
}

impl ApiError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        ApiError::Invalid(msg.into())
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) | ApiError::Engine(DoseError::StoppedTrial) => StatusCode::CONFLICT,
            ApiError::Engine(
                DoseError::InvalidConfig(_)
                | DoseError::InvalidPolicy(_)
                | DoseError::DoseOutOfRange { .. }
                | DoseError::Parse(_)
                | DoseError::InvalidCohortCount(_),
            ) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Engine(_) | ApiError::Log(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::Log(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}
