//! Webhook authentication and job-event parsing.

use serde_json::Value;
use subtle::ConstantTimeEq;

/// Header carrying the shared secret, as sent by GitLab.
pub const TOKEN_HEADER: &str = "X-Gitlab-Token";

#[derive(Clone)]
pub struct WebhookAuth {
    shared_token: Vec<u8>,
}

impl std::fmt::Debug for WebhookAuth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("WebhookAuth(..)")
    }
}

impl WebhookAuth {
    pub fn new(shared_token: &str) -> Self {
        WebhookAuth {
            shared_token: shared_token.as_bytes().to_vec(),
        }
    }

    /// Constant-time comparison; an empty configured token accepts nothing.
    pub fn verify(&self, presented: Option<&[u8]>) -> bool {
        match presented {
            Some(p) if !self.shared_token.is_empty() => {
                bool::from(self.shared_token.as_slice().ct_eq(p))
            }
            _ => false,
        }
    }
}

/// The identifying part of a job event.
#[derive(Debug, Clone, PartialEq)]
pub struct JobEvent {
    pub project_id: u64,
    pub job_id: u64,
    pub pipeline_id: u64,
    pub status: String,
    pub body: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WebhookError {
    #[error("missing or invalid webhook token")]
    Unauthorized,
    #[error("malformed job event: {0}")]
    Malformed(String),
}

fn required_u64(v: &Value, key: &str) -> Result<u64, WebhookError> {
    v.get(key)
        .and_then(Value::as_u64)
        .ok_or_else(|| WebhookError::Malformed(format!("{key} missing or not an integer")))
}

fn required_str<'a>(v: &'a Value, key: &str) -> Result<&'a str, WebhookError> {
    v.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| WebhookError::Malformed(format!("{key} missing or not a string")))
}

pub fn parse_job_event(body: &[u8]) -> Result<JobEvent, WebhookError> {
    let v: Value =
        serde_json::from_slice(body).map_err(|e| WebhookError::Malformed(e.to_string()))?;
    let kind = required_str(&v, "object_kind")?;
    if kind != "build" {
        return Err(WebhookError::Malformed(format!(
            "object_kind {kind:?} is not a job event"
        )));
    }
    required_str(&v, "build_name")?;
    Ok(JobEvent {
        project_id: required_u64(&v, "project_id")?,
        job_id: required_u64(&v, "build_id")?,
        pipeline_id: required_u64(&v, "pipeline_id")?,
        status: required_str(&v, "build_status")?.to_string(),
        body: v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_comparison() {
        let auth = WebhookAuth::new("s3cret");
        assert!(auth.verify(Some(b"s3cret")));
        assert!(!auth.verify(Some(b"s3cre")));
        assert!(!auth.verify(Some(b"s3cret ")));
        assert!(!auth.verify(Some(b"")));
        assert!(!auth.verify(None));
        assert!(!WebhookAuth::new("").verify(Some(b"")));
    }

    #[test]
    fn event_fields() {
        let body = br#"{"object_kind":"build","build_id":7,"build_name":"t","build_status":"failed","project_id":1,"pipeline_id":2}"#;
        let e = parse_job_event(body).unwrap();
        assert_eq!((e.project_id, e.job_id, e.pipeline_id), (1, 7, 2));
        assert!(parse_job_event(b"{not json").is_err());
        assert!(parse_job_event(br#"{"object_kind":"pipeline"}"#).is_err());
        assert!(parse_job_event(br#"{"object_kind":"build","build_id":7}"#).is_err());
    }
}
