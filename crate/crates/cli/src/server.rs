//! JSON-over-HTTP inference service.
//!
//! | route             | body              | reply                         |
//! |-------------------|-------------------|-------------------------------|
//! | `GET /health`     |                   | load status and checkpoint ids |
//! | `GET /model`      |                   | window shape and checkpoint metadata |
//! | `POST /generate`  | `GenerateRequest` | `GenerateResponse`            |
//! | `POST /render`    | `{"measures", "tempo"?}` | `audio/midi` bytes     |
//!
//! Models load in the background after the socket is bound; until then
//! `/generate` and `/model` answer 503.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{error, info};
use serde::Serialize;
use serde_json::json;

use sketchfill::checkpoint::CheckpointMeta;
use sketchfill::codec::export_midi;
use sketchfill::config::Stage;
use sketchfill::pipeline::{GenerateRequest, ModelStack};
use sketchfill::{Error, Result};

use crate::commands::measures_from_json;
use crate::{exit_code, EXIT_VALIDATION};

pub enum ModelState {
    Loading,
    Ready(Arc<ModelStack>),
    Failed(String),
}

pub struct AppState {
    pub dir: PathBuf,
    models: RwLock<ModelState>,
}

impl AppState {
    pub fn new(dir: PathBuf) -> Arc<Self> {
        Arc::new(Self {
            dir,
            models: RwLock::new(ModelState::Loading),
        })
    }

    /// Loads the three checkpoints and publishes the result.
    pub fn load(&self) {
        let next = match ModelStack::load(&self.dir) {
            Ok(stack) => {
                info!("models loaded from {}", self.dir.display());
                ModelState::Ready(Arc::new(stack))
            }
            Err(e) => {
                error!("cannot load models from {}: {e}", self.dir.display());
                ModelState::Failed(e.to_string())
            }
        };
        *self.models.write().expect("model lock") = next;
    }

    fn stack(&self) -> Result<Arc<ModelStack>> {
        match &*self.models.read().expect("model lock") {
            ModelState::Ready(s) => Ok(s.clone()),
            ModelState::Loading => Err(Error::ModelNotLoaded("checkpoints are still loading".into())),
            ModelState::Failed(e) => Err(Error::ModelNotLoaded(e.clone())),
        }
    }
}

struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            Error::ModelNotLoaded(_) => (StatusCode::SERVICE_UNAVAILABLE, "not_loaded"),
            e if exit_code(e) == EXIT_VALIDATION => (StatusCode::BAD_REQUEST, "validation"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        (status, Json(json!({ "error": self.0.to_string(), "kind": kind }))).into_response()
    }
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    checkpoints: BTreeMap<Stage, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let guard = state.models.read().expect("model lock");
    Json(match &*guard {
        ModelState::Ready(s) => Health {
            status: "ready",
            checkpoints: s.ids(),
            error: None,
        },
        ModelState::Loading => Health {
            status: "loading",
            checkpoints: BTreeMap::new(),
            error: None,
        },
        ModelState::Failed(e) => Health {
            status: "failed",
            checkpoints: BTreeMap::new(),
            error: Some(e.clone()),
        },
    })
}

async fn model(State(state): State<Arc<AppState>>) -> Result<Json<serde_json::Value>, ApiError> {
    let stack = state.stack()?;
    let metas: BTreeMap<Stage, &CheckpointMeta> = BTreeMap::from([
        (Stage::Vae, &stack.vae.meta),
        (Stage::Inpainter, &stack.inpainter.meta),
        (Stage::Connector, &stack.connector.meta),
    ]);
    Ok(Json(json!({
        "version": env!("CARGO_PKG_VERSION"),
        "window": stack.shape,
        "checkpoints": metas,
    })))
}

async fn generate(State(state): State<Arc<AppState>>, body: String) -> Result<Response, ApiError> {
    let req = GenerateRequest::from_json(&body)?;
    let stack = state.stack()?;
    let resp = tokio::task::spawn_blocking(move || stack.generate(&req))
        .await
        .map_err(|e| Error::ModelNotLoaded(format!("generation task failed: {e}")))??;
    Ok(Json(resp).into_response())
}

async fn render(body: String) -> Result<Response, ApiError> {
    let (measures, tempo) = measures_from_json(&body)?;
    let bytes = export_midi(&measures, tempo.unwrap_or(120.0));
    Ok(([(header::CONTENT_TYPE, "audio/midi")], bytes).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/model", get(model))
        .route("/generate", post(generate))
        .route("/render", post(render))
        .with_state(state)
}

/// Binds `host:port` (port 0 picks a free one), prints `listening on <addr>`
/// to stdout, then loads the models and serves until interrupted.
pub fn serve(host: &str, port: u16, dir: PathBuf) -> Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port)).await?;
        let addr = listener.local_addr()?;
        println!("listening on {addr}");
        std::io::stdout().flush()?;
        let state = AppState::new(dir);
        let loader = state.clone();
        tokio::task::spawn_blocking(move || loader.load());
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
