//! Long-running generation service. Every request runs against an immutable
//! model snapshot; replacing the snapshot swaps one `Arc` under a lock.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;
use tracing::{info, warn};

use layout_mcl_core::api::{self, CategoriesResponse, ErrorBody, GenerateRequest, HealthResponse};
use layout_mcl_core::mcl::PairReport;
use layout_mcl_core::model::Model;
use layout_mcl_core::Error;

/// Parameters, vocabulary and pairing diagnostics of one loaded checkpoint.
#[derive(Debug)]
pub struct Snapshot {
    pub model: Model,
    pub pairing: Option<PairReport>,
    pub checkpoint: String,
}

impl Snapshot {
    pub fn new(model: Model, pairing: Option<PairReport>) -> Self {
        let checkpoint = model.manifest().checkpoint_sha256;
        Snapshot {
            model,
            pairing,
            checkpoint,
        }
    }

    pub fn load(dir: &Path) -> layout_mcl_core::Result<Self> {
        let (model, manifest) = Model::load_dir(dir)?;
        Ok(Snapshot {
            model,
            pairing: manifest.pairing,
            checkpoint: manifest.checkpoint_sha256,
        })
    }
}

pub struct AppState {
    snapshot: RwLock<Arc<Snapshot>>,
    requests: AtomicU64,
}

impl AppState {
    pub fn new(snapshot: Snapshot) -> Arc<Self> {
        Arc::new(AppState {
            snapshot: RwLock::new(Arc::new(snapshot)),
            requests: AtomicU64::new(0),
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock poisoned").clone()
    }

    /// Replaces the whole snapshot; in-flight requests keep the old one.
    pub fn swap(&self, snapshot: Snapshot) {
        *self.snapshot.write().expect("snapshot lock poisoned") = Arc::new(snapshot);
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Request { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            body: ErrorBody::from_error(&e),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                error: r.body_text(),
                field: None,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/categories", get(categories))
        .route("/api/generate", post(generate))
        .route("/api/health", get(health))
        .with_state(state)
}

async fn categories(State(state): State<Arc<AppState>>) -> Json<CategoriesResponse> {
    Json(CategoriesResponse {
        categories: state.snapshot().model.vocab.names().to_vec(),
    })
}

async fn health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        checkpoint: state.snapshot().checkpoint.clone(),
    })
}

async fn generate(
    State(state): State<Arc<AppState>>,
    body: Result<Json<GenerateRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(request) = body?;
    let n = state.requests.fetch_add(1, Ordering::Relaxed) + 1;
    let snapshot = state.snapshot();
    // decoding is CPU-bound; keep it off the async workers
    let result = tokio::task::spawn_blocking(move || {
        api::generate(&snapshot.model, snapshot.pairing.as_ref(), &request)
    })
    .await;
    match result {
        Ok(Ok(response)) => {
            info!(request = n, candidates = response.candidates.len(), "generated");
            Ok(Json(response).into_response())
        }
        Ok(Err(e)) => {
            warn!(request = n, error = %e, "generate failed");
            Err(e.into())
        }
        Err(join) => Err(ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ErrorBody {
                error: format!("generation task failed: {join}"),
                field: None,
            },
        }),
    }
}

pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}
