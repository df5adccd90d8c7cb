use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::{json, Value};

use crate::improve::ImproveError;
use crate::ingest::{IngestError, WebhookError};
use crate::metrics::alerts::AlertError;
use crate::metrics::MetricsError;
use crate::store::StoreError;
use crate::whatif::WhatIfError;

/// The uniform error envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            details: json!({}),
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BAD_REQUEST", message)
    }

    pub fn unauthorized(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "UNAUTHORIZED", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NOT_FOUND", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", message)
    }

    pub fn body(&self) -> Value {
        json!({ "code": self.code, "message": self.message, "details": self.details })
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}

impl From<WebhookError> for ApiError {
    fn from(e: WebhookError) -> Self {
        match e {
            WebhookError::Unauthorized => ApiError::unauthorized(e.to_string()),
            WebhookError::Malformed(_) => {
                ApiError::new(StatusCode::BAD_REQUEST, "MALFORMED_EVENT", e.to_string())
            }
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match &e {
            StoreError::NotFound(_) => ApiError::not_found(e.to_string()),
            StoreError::InvalidQuery(_) => {
                ApiError::new(StatusCode::BAD_REQUEST, "INVALID_QUERY", e.to_string())
            }
            StoreError::Validation { job_ids, .. } => ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "VALIDATION_FAILED",
                e.to_string(),
            )
            .with_details(json!({ "job_ids": job_ids })),
            StoreError::Unavailable(_) | StoreError::Corrupt(_) => ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "STORE_UNAVAILABLE",
                e.to_string(),
            ),
        }
    }
}

impl From<MetricsError> for ApiError {
    fn from(e: MetricsError) -> Self {
        let code = match e {
            MetricsError::UnalignedWindow(..) => "UNALIGNED_WINDOW",
            MetricsError::InvertedRange => "INVERTED_RANGE",
            MetricsError::TooManyWindows => "TOO_MANY_WINDOWS",
        };
        ApiError::new(StatusCode::BAD_REQUEST, code, e.to_string())
    }
}

impl From<AlertError> for ApiError {
    fn from(e: AlertError) -> Self {
        match e {
            AlertError::InvalidRule(_) => {
                ApiError::new(StatusCode::BAD_REQUEST, "INVALID_RULE", e.to_string())
            }
            AlertError::NotFound(_) => ApiError::not_found(e.to_string()),
            AlertError::Store(s) => s.into(),
        }
    }
}

impl From<WhatIfError> for ApiError {
    fn from(e: WhatIfError) -> Self {
        match &e {
            WhatIfError::EmptySample => ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "EMPTY_SAMPLE",
                e.to_string(),
            ),
            WhatIfError::UnknownFeature(name) => {
                ApiError::new(StatusCode::BAD_REQUEST, "UNKNOWN_FEATURE", e.to_string())
                    .with_details(json!({ "feature": name }))
            }
        }
    }
}

impl From<ImproveError> for ApiError {
    fn from(e: ImproveError) -> Self {
        match e {
            ImproveError::NotFound(_) => ApiError::not_found(e.to_string()),
            ImproveError::IllegalTransition { from, to } => {
                ApiError::new(StatusCode::CONFLICT, "ILLEGAL_TRANSITION", e.to_string())
                    .with_details(json!({ "from": from, "to": to }))
            }
            ImproveError::WriterRejected { ref action } => {
                let details = json!({ "action": action });
                ApiError::new(StatusCode::BAD_GATEWAY, "WRITER_REJECTED", e.to_string())
                    .with_details(details)
            }
            ImproveError::NoWriter => {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "NO_WRITER", e.to_string())
            }
            ImproveError::Store(s) => s.into(),
        }
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        let details = e.partial().map_or(json!({}), |p| json!({ "partial": p }));
        let (status, code) = match &e {
            IngestError::Unreachable { .. } => (StatusCode::BAD_GATEWAY, "UPSTREAM_UNREACHABLE"),
            IngestError::RateLimited { .. } => (StatusCode::TOO_MANY_REQUESTS, "RATE_LIMITED"),
            IngestError::Adapter { .. } => (StatusCode::BAD_GATEWAY, "UPSTREAM_ERROR"),
            IngestError::InvalidConfig(_) => (StatusCode::BAD_REQUEST, "INVALID_CONFIG"),
            IngestError::Bus(_) => (StatusCode::SERVICE_UNAVAILABLE, "BUS_UNAVAILABLE"),
            IngestError::Store(_) => {
                let IngestError::Store(s) = e else {
                    unreachable!()
                };
                return s.into();
            }
        };
        ApiError::new(status, code, e.to_string()).with_details(details)
    }
}
