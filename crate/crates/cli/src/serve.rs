//! HTTP service: `POST /v1/feedback` and `GET /health`.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use peerfeedback_core::gateway::{Gateway, GatewayError};
use peerfeedback_core::model::{Conversation, Feedback};
use peerfeedback_core::segmenter::{segment_embeddings, Segmentation, SegmenterConfig};
use peerfeedback_core::selfimprove::{SelfImproveError, Target};

use crate::error::CliError;
use crate::stages;

/// Upper bound on `samples` per request.
pub const MAX_SAMPLES: usize = 16;

pub struct AppState {
    pub gateway: Gateway,
    /// Clients must send `Authorization: Bearer <token>` when set.
    pub token: Option<String>,
    pub segmenter: SegmenterConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRequest {
    pub conversation: Conversation,
    /// Index of the helper utterance to give feedback on.
    pub target: usize,
    /// Segment starts; segmented on the fly when absent.
    #[serde(default)]
    pub boundaries: Option<Vec<usize>>,
    #[serde(default = "one")]
    pub samples: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub conversation_id: String,
    pub utterance_index: usize,
    pub boundaries: Vec<usize>,
    /// First sample.
    pub feedback: Feedback,
    /// All samples, when more than one was requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<Feedback>,
}

#[derive(Debug)]
struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1}))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        let status = match e {
            GatewayError::Precondition(_) => StatusCode::BAD_REQUEST,
            GatewayError::RateLimited { .. } => StatusCode::TOO_MANY_REQUESTS,
            _ => StatusCode::BAD_GATEWAY,
        };
        ApiError(status, e.to_string())
    }
}

impl From<SelfImproveError> for ApiError {
    fn from(e: SelfImproveError) -> Self {
        match e {
            SelfImproveError::Gateway(g) => g.into(),
            other => bad_request(other.to_string()),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/feedback", post(feedback))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

fn authorized(state: &AppState, headers: &HeaderMap) -> bool {
    let Some(token) = &state.token else { return true };
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == token)
}

async fn feedback(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let start = Instant::now();
    let result = if authorized(&state, &headers) {
        handle(state, body).await
    } else {
        Err(ApiError(StatusCode::UNAUTHORIZED, "missing or wrong bearer token".into()))
    };
    let response = match result {
        Ok(r) => (StatusCode::OK, Json(r)).into_response(),
        Err(e) => e.into_response(),
    };
    tracing::info!(
        path = "/v1/feedback",
        status = response.status().as_u16(),
        elapsed_ms = start.elapsed().as_secs_f64() * 1e3,
        "request"
    );
    response
}

async fn handle(state: Arc<AppState>, body: Bytes) -> Result<FeedbackResponse, ApiError> {
    let req: FeedbackRequest =
        serde_json::from_slice(&body).map_err(|e| bad_request(format!("invalid request body: {e}")))?;
    req.conversation.validate().map_err(|e| bad_request(format!("invalid conversation: {e}")))?;
    if req.samples == 0 || req.samples > MAX_SAMPLES {
        return Err(bad_request(format!("samples must be in 1..={MAX_SAMPLES}")));
    }
    tokio::task::spawn_blocking(move || respond(&state, req))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn respond(state: &AppState, req: FeedbackRequest) -> Result<FeedbackResponse, ApiError> {
    let conv = &req.conversation;
    if req.target >= conv.len() {
        return Err(bad_request(format!("target {} out of range for {} utterances", req.target, conv.len())));
    }
    let seg = match req.boundaries {
        Some(boundaries) => {
            let seg = Segmentation { boundaries };
            seg.validate(conv.len()).map_err(|e| bad_request(format!("invalid boundaries: {e}")))?;
            seg
        }
        None => {
            let texts: Vec<String> = conv.utterances.iter().map(|u| u.text.clone()).collect();
            let e = state.gateway.embed(&texts)?;
            segment_embeddings(&e, &state.segmenter).map_err(|e| bad_request(e.to_string()))?
        }
    };
    let target = Target::new(conv, &seg, req.target)?;
    let mut samples = state.gateway.sample_feedback(&target.key(), &target.input(), req.samples)?;
    let feedback = samples[0].clone();
    if samples.len() == 1 {
        samples.clear();
    }
    Ok(FeedbackResponse {
        conversation_id: conv.id.clone(),
        utterance_index: req.target,
        boundaries: seg.boundaries,
        feedback,
        samples,
    })
}

pub fn serve_blocking(profile: &Path, addr: &str, token: Option<String>) -> Result<(), CliError> {
    let gateway = stages::gateway(Some(profile), None)?;
    let state = Arc::new(AppState { gateway, token, segmenter: SegmenterConfig::default() });
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Usage(format!("cannot start runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Usage(format!("cannot bind {addr}: {e}")))?;
        tracing::info!(addr, "listening");
        eprintln!("listening on {addr}");
        axum::serve(listener, router(state)).await.map_err(|e| CliError::Backend(e.to_string()))
    })
}
