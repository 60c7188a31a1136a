use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use plotnpolish_core::backend::BackendError;
use plotnpolish_core::grid::GridError;
use plotnpolish_core::perception::PerceptionError;
use plotnpolish_core::pipeline::PipelineError;
use plotnpolish_core::planner::PlannerError;
use plotnpolish_core::schema::SchemaError;
use serde::{Deserialize, Serialize};

/// Machine-readable error payload: `{"error": {"code": ..., "message": ...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }

    pub fn not_found(kind: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {kind} {id}"))
    }

    pub fn busy(project: &str) -> Self {
        Self::new(
            StatusCode::CONFLICT,
            "project_busy",
            format!("project {project} already has a mutation in progress"),
        )
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.body }))).into_response()
    }
}

impl From<SchemaError> for ApiError {
    fn from(e: SchemaError) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "schema_error", e.to_string())
    }
}

impl From<BackendError> for ApiError {
    fn from(e: BackendError) -> Self {
        let (status, code) = match &e {
            BackendError::Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "backend_unavailable"),
            BackendError::UnsupportedByBackend(_) => (StatusCode::BAD_REQUEST, "unsupported_by_backend"),
            BackendError::WeightsNotFound(_) => (StatusCode::BAD_REQUEST, "weights_not_found"),
            BackendError::Shape(_) | BackendError::InvalidArgument(_) => (StatusCode::BAD_REQUEST, "backend_error"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<PerceptionError> for ApiError {
    fn from(e: PerceptionError) -> Self {
        match e {
            PerceptionError::Backend(b) => b.into(),
            PerceptionError::EstimatorUnavailable(_) => {
                Self::new(StatusCode::SERVICE_UNAVAILABLE, "estimator_unavailable", e.to_string())
            }
            _ => Self::new(StatusCode::BAD_REQUEST, "perception_error", e.to_string()),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Schema(s) => s.into(),
            PipelineError::Backend(b) | PipelineError::Grid(GridError::Backend(b)) => b.into(),
            PipelineError::Perception(p) => p.into(),
            PipelineError::NotFound { kind, id } => Self::not_found(kind, &id),
            PipelineError::ReplayDivergence { .. } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "replay_divergence", e.to_string())
            }
            PipelineError::Io { .. } | PipelineError::Corrupt(_) => Self::internal(e.to_string()),
            PipelineError::Image(_) => Self::new(StatusCode::BAD_REQUEST, "unreadable_image", e.to_string()),
            _ => Self::bad_request(e.to_string()),
        }
    }
}

impl From<PlannerError> for ApiError {
    fn from(e: PlannerError) -> Self {
        match e {
            PlannerError::LlmUnavailable(_) => Self::new(StatusCode::SERVICE_UNAVAILABLE, "llm_unavailable", e.to_string()),
            PlannerError::PlanRejected { .. } => Self::new(StatusCode::BAD_GATEWAY, "plan_rejected", e.to_string()),
            PlannerError::Validation(_) => Self::bad_request(e.to_string()),
        }
    }
}
