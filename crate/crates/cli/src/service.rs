//! HTTP API for the drawing canvas.
//!
//! Every response is a function of the request and the loaded checkpoint.
//! Generation runs on the blocking pool while holding a read lock on the
//! model, so [`AppState::replace`] waits for in-flight requests to finish.

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use strokerig_core::json::{skeleton_from_value, stroke_from_value, Mode};
use strokerig_core::validate::validate_stroke;
use strokerig_core::{ParseError, SkeletonGraph, StrokeGraph2D, ValidationReport, View, Violation};
use strokerig_model::pipeline::{Job, Pipeline};
use strokerig_model::skdit::SamplerConfig;
use tokio::sync::RwLock;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::timeout::TimeoutLayer;

use crate::config::ServiceConfig;

pub struct LoadedModel {
    pub pipeline: Pipeline,
    pub version: String,
}

#[derive(Clone)]
pub struct AppState {
    model: Arc<RwLock<Option<Arc<LoadedModel>>>>,
    /// Seed used when a request does not carry one.
    pub default_seed: u64,
}

impl AppState {
    pub fn new(model: Option<LoadedModel>, default_seed: u64) -> Self {
        Self { model: Arc::new(RwLock::new(model.map(Arc::new))), default_seed }
    }

    /// Swaps the model once every in-flight generation has finished.
    pub async fn replace(&self, model: Option<LoadedModel>) {
        *self.model.write().await = model.map(Arc::new);
    }
}

/// Error body: a validation report plus a human-readable summary.
#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(flatten)]
    report: ValidationReport,
}

fn error(status: StatusCode, error: String, report: ValidationReport) -> Response {
    (status, Json(ErrorBody { error, report })).into_response()
}

fn bad_request(msg: impl Into<String>) -> Response {
    error(StatusCode::BAD_REQUEST, msg.into(), ValidationReport::default())
}

fn parse_error(field: &str, e: ParseError) -> Response {
    let mut report = ValidationReport::default();
    if let Some(code) = e.code {
        report.violations.push(Violation { code, message: e.message.clone(), joints: vec![] });
    }
    error(StatusCode::BAD_REQUEST, format!("{field}: {e}"), report)
}

fn no_model() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "no model loaded".into(), ValidationReport::default())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRequest {
    stroke: Value,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    guidance: Option<f64>,
    #[serde(default)]
    steps: Option<usize>,
}

#[derive(Debug, Serialize)]
struct Timings {
    total_ms: f64,
}

#[derive(Debug, Serialize)]
struct GenerateMeta {
    seed: u64,
    model_version: String,
    guidance: f64,
    steps: usize,
    timings: Timings,
}

#[derive(Debug, Serialize)]
struct GenerateResponse {
    skeleton: SkeletonGraph,
    /// Canonical-frame Z of every joint.
    depth: Vec<f64>,
    meta: GenerateMeta,
}

fn body_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| bad_request(format!("request body: {e}")))
}

async fn generate(State(state): State<AppState>, body: Bytes) -> Response {
    let start = Instant::now();
    let req: GenerateRequest = match body_json(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let stroke = match stroke_from_value(&req.stroke, Mode::Strict) {
        Ok(s) => s,
        Err(e) => return parse_error("stroke", e),
    };
    let report = validate_stroke(&stroke);
    if !report.is_valid() {
        let codes: Vec<&str> = report.violations.iter().map(|v| v.code.as_str()).collect();
        return error(StatusCode::BAD_REQUEST, format!("stroke failed validation: {}", codes.join(", ")), report);
    }
    let guard = state.model.clone().read_owned().await;
    let Some(model) = guard.as_ref().cloned() else {
        return no_model();
    };
    let defaults = &model.pipeline.sampler;
    let total = model.pipeline.dit.config.timesteps;
    let sampler = SamplerConfig { guidance: req.guidance.unwrap_or(defaults.guidance), steps: req.steps.or(defaults.steps) };
    if !sampler.guidance.is_finite() {
        return bad_request("guidance must be a finite number");
    }
    if let Some(s) = sampler.steps {
        if s == 0 || s > total {
            return bad_request(format!("steps must lie in 1..={total}"));
        }
    }
    let seed = req.seed.unwrap_or(state.default_seed);
    let prompt = req.text.or_else(|| stroke.text.clone());
    let job = Job { stroke, prompt, seed };
    let cfg = sampler.clone();
    let worker = tokio::task::spawn_blocking(move || {
        let out = model.pipeline.generate_batch_with(std::slice::from_ref(&job), &cfg);
        drop(guard);
        out.map(|mut v| (v.remove(0), model.version.clone()))
    });
    match worker.await {
        Ok(Ok((out, version))) => {
            let depth = out.skeleton.joints.iter().map(|j| j[2]).collect();
            let meta = GenerateMeta {
                seed,
                model_version: version,
                guidance: sampler.guidance,
                steps: sampler.steps.unwrap_or(total),
                timings: Timings { total_ms: start.elapsed().as_secs_f64() * 1e3 },
            };
            Json(GenerateResponse { skeleton: out.skeleton, depth, meta }).into_response()
        }
        Ok(Err(strokerig_model::ModelError::Invalid(report))) => {
            error(StatusCode::BAD_REQUEST, "input failed validation".into(), report)
        }
        Ok(Err(e @ strokerig_model::ModelError::Config(_))) => bad_request(e.to_string()),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), ValidationReport::default()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), ValidationReport::default()),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectRequest {
    skeleton: Value,
    view: String,
}

async fn project(body: Bytes) -> Response {
    let req: ProjectRequest = match body_json(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let view = match req.view.as_str() {
        "front" => View::Front,
        "side" => View::Side,
        "top" => View::Top,
        other => return bad_request(format!("view must be front, side or top, not {other:?}")),
    };
    let skeleton = match skeleton_from_value(&req.skeleton, Mode::Strict) {
        Ok(s) => s,
        Err(e) => return parse_error("skeleton", e),
    };
    match skeleton.project(view) {
        Ok(stroke) => Json::<StrokeGraph2D>(stroke).into_response(),
        Err(e) => bad_request(e.to_string()),
    }
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    match state.model.read().await.as_ref() {
        Some(m) => Json(json!({ "status": "ok", "model_version": m.version })),
        None => Json(json!({ "status": "no_model", "model_version": null })),
    }
}

async fn config(State(state): State<AppState>) -> Response {
    match state.model.read().await.as_ref() {
        Some(m) => Json(json!({
            "guidance": m.pipeline.sampler.guidance,
            "steps": m.pipeline.sampler.steps.unwrap_or(m.pipeline.dit.config.timesteps),
            "timesteps": m.pipeline.dit.config.timesteps,
            "seed": state.default_seed,
            "text_width": m.pipeline.embedder.width(),
            "model_version": m.version,
        }))
        .into_response(),
        None => no_model(),
    }
}

pub fn router(state: AppState, cfg: &ServiceConfig) -> Router {
    let origins = if cfg.cors_origins.is_empty() {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(cfg.cors_origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    let cors = CorsLayer::new()
        .allow_origin(origins)
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    Router::new()
        .route("/api/generate", post(generate))
        .route("/api/project", post(project))
        .route("/api/health", get(health))
        .route("/api/config", get(config))
        .with_state(state)
        .layer(TimeoutLayer::with_status_code(StatusCode::REQUEST_TIMEOUT, Duration::from_secs(cfg.timeout_secs)))
        .layer(cors)
}

pub async fn serve(state: AppState, cfg: &ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(&cfg.bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, cfg)).await
}
