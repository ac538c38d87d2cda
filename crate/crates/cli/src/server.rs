//! HTTP service over the shared pipeline.
//!
//! | route          | body                 | reply                    |
//! |----------------|----------------------|--------------------------|
//! | `POST /v1/plan`| `{query}`            | strict plan JSON         |
//! | `POST /v1/run` | `{plan, query?}`     | execution trace JSON     |
//! | `POST /v1/ask` | `{query}`            | `{response, run_id}`     |
//! | `GET /v1/models`|                     | model cards              |
//! | `GET /healthz` |                      | `ok`                     |
//!
//! Errors reply `{error, stage}`; plan violations add `violations`.
//! Pipeline calls block, so they run on the blocking pool, one isolated run
//! per request.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;
use urbanplan::config::Config;
use urbanplan::pipeline::{persist_run, Pipeline, PipelineError, PipelineRun};
use urbanplan::{serialize_strict, Plan};

use crate::{ask_body, status_for};

pub struct AppState {
    pub pipeline: Pipeline,
    /// Where `/v1/ask` records runs, if anywhere.
    pub runs_dir: Option<PathBuf>,
}

impl AppState {
    pub fn from_config(cfg: &Config) -> anyhow::Result<Self> {
        Ok(AppState { pipeline: Pipeline::from_config(cfg)?, runs_dir: cfg.paths.runs_dir.clone() })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryBody {
    query: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunBody {
    plan: Plan,
    #[serde(default)]
    query: String,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/v1/models", get(models))
        .route("/v1/plan", post(plan))
        .route("/v1/run", post(run))
        .route("/v1/ask", post(ask))
        .with_state(state)
}

/// Binds `cfg.server` and serves until the process is stopped.
pub fn serve_blocking(cfg: &Config) -> anyhow::Result<()> {
    let state = Arc::new(AppState::from_config(cfg)?);
    let addr = format!("{}:{}", cfg.server.host, cfg.server.port);
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        tracing::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state)).await.context("server stopped")
    })
}

fn json_text(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn error(status: StatusCode, stage: &str, message: impl ToString) -> Response {
    json_text(status, json!({ "error": message.to_string(), "stage": stage }).to_string())
}

fn pipeline_error(e: &PipelineError) -> Response {
    let status = StatusCode::from_u16(status_for(e.kind())).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    let mut body = json!({ "error": e.failure.message, "stage": e.stage().to_string(), "kind": e.kind() });
    if !e.failure.violations.is_empty() {
        body["violations"] = json!(e.failure.violations);
    }
    json_text(status, body.to_string())
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, "request", format!("malformed body: {e}")))
}

/// Runs `f` on the blocking pool and maps pipeline failures to replies.
async fn blocking<F>(state: Arc<AppState>, f: F) -> Result<PipelineRun, Response>
where
    F: FnOnce(&AppState) -> Result<PipelineRun, PipelineError> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&state)).await {
        Ok(Ok(run)) => Ok(run),
        Ok(Err(e)) => Err(pipeline_error(&e)),
        Err(e) => Err(error(StatusCode::INTERNAL_SERVER_ERROR, "request", e)),
    }
}

async fn models(State(state): State<Arc<AppState>>) -> Response {
    json_text(StatusCode::OK, serde_json::to_string(state.pipeline.registry.cards()).expect("cards serialize"))
}

async fn plan(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: QueryBody = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    match blocking(state, move |s| s.pipeline.plan_query(&req.query)).await {
        Ok(run) => json_text(StatusCode::OK, serialize_strict(run.plan.as_ref().expect("planned"))),
        Err(resp) => resp,
    }
}

async fn run(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: RunBody = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    match blocking(state, move |s| s.pipeline.run_plan(&req.query, req.plan, false)).await {
        Ok(run) => json_text(StatusCode::OK, run.trace.as_ref().expect("executed").to_json_pretty()),
        Err(resp) => resp,
    }
}

async fn ask(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: QueryBody = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let result = blocking(state, move |s| {
        let outcome = s.pipeline.run_query(&req.query);
        if let Some(dir) = &s.runs_dir {
            let run = match &outcome {
                Ok(r) => r,
                Err(e) => &e.run,
            };
            if let Err(e) = persist_run(dir, run) {
                tracing::warn!("could not record run in {}: {e}", dir.display());
            }
        }
        outcome
    })
    .await;
    match result {
        Ok(run) => json_text(StatusCode::OK, ask_body(&run).to_string()),
        Err(resp) => resp,
    }
}
