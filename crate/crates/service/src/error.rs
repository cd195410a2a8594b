use anchorloop_core::rollout::RolloutError;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), field: None }
    }
    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
    pub fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }
    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }

    pub fn with_field(mut self, field: impl Into<String>) -> Self {
        self.field = Some(field.into());
        self
    }

    /// Input problems map to 422, state problems to 409.
    pub fn from_rollout(e: RolloutError) -> Self {
        let field = match &e {
            RolloutError::Config(_) => Some("config"),
            RolloutError::Script(_) => Some("camera"),
            RolloutError::NoObjectNearClick { .. }
            | RolloutError::ObjectAlreadyCommanded { .. }
            | RolloutError::DuplicateTrack(_)
            | RolloutError::TrajectoryStart { .. }
            | RolloutError::ClickMissesPlane
            | RolloutError::Nwt(_) => Some("trajectory"),
            _ => None,
        };
        let status = match &e {
            RolloutError::Finished(_) | RolloutError::MemoryOrder { .. } | RolloutError::OpenEvent(_) => StatusCode::CONFLICT,
            RolloutError::NoSuchFrame(_) => StatusCode::NOT_FOUND,
            RolloutError::MissingPosition { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self { status, message: e.to_string(), field: field.map(String::from) }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = match &self.field {
            Some(f) => json!({ "error": self.message, "field": f }),
            None => json!({ "error": self.message }),
        };
        (self.status, Json(body)).into_response()
    }
}
