//! HTTP/JSON service for conducting Bi3+3 trials.
//!
//! Every session is an append-only event log on disk; the in-memory state is
//! always the replay of that log. Routes:
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/sessions` | create a session |
//! | GET | `/sessions/{id}` | parameters and current state |
//! | POST | `/sessions/{id}/events` | apply coordinator events, returns the decision bundle |
//! | GET | `/sessions/{id}/decision` | current decision bundle |
//! | GET | `/sessions/{id}/estimates` | interim or final estimates |
//! | GET | `/sessions/{id}/export` | the event log as NDJSON |

mod error;
pub mod store;

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Json;
use bi33_core::api::{CreateSession, PostEvents, SessionView};
use bi33_core::conduct::{DecisionBundle, PosteriorSummary};
use tokio::net::TcpListener;

pub use axum::Router;
pub use error::ApiError;
pub use store::Store;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// When set, every request must carry `Authorization: Bearer <token>`.
    pub bearer_token: Option<String>,
}

#[derive(Clone)]
struct AppState {
    store: Arc<Store>,
    token: Option<Arc<str>>,
}

/// JSON body extractor whose rejections use the service's error format.
struct ApiJson<T>(T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    Json<T>: FromRequest<S, Rejection = JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(ApiJson(v)),
            Err(e) => Err(ApiError::field("body", e.body_text())),
        }
    }
}

async fn require_token(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == &**token);
        if !ok {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

async fn create_session(
    State(app): State<AppState>,
    ApiJson(req): ApiJson<CreateSession>,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let store = app.store.clone();
    let snapshot = tokio::task::spawn_blocking(move || store.create(req))
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))??;
    tracing::info!(session = %snapshot.view.session_id, "session created");
    Ok((StatusCode::CREATED, Json(snapshot.view.clone())))
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    Ok(Json(app.store.get(&id)?.snapshot().view.clone()))
}

async fn post_events(
    State(app): State<AppState>,
    Path(id): Path<String>,
    ApiJson(req): ApiJson<PostEvents>,
) -> Result<Json<DecisionBundle>, ApiError> {
    let session = app.store.get(&id)?;
    let snapshot = store::submit(session, req.events).await?;
    Ok(Json(snapshot.bundle.clone()))
}

async fn get_decision(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<DecisionBundle>, ApiError> {
    Ok(Json(app.store.get(&id)?.snapshot().bundle.clone()))
}

async fn get_estimates(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<PosteriorSummary>, ApiError> {
    Ok(Json(app.store.get(&id)?.snapshot().estimates.clone()))
}

async fn export_log(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = app.store.get(&id)?;
    let body = store::export(&session).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

/// The service's routes over an opened store.
pub fn router(store: Arc<Store>, bearer_token: Option<String>) -> Router {
    let app = AppState { store, token: bearer_token.map(Arc::from) };
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/events", post(post_events))
        .route("/sessions/{id}/decision", get(get_decision))
        .route("/sessions/{id}/estimates", get(get_estimates))
        .route("/sessions/{id}/export", get(export_log))
        .layer(middleware::from_fn_with_state(app.clone(), require_token))
        .with_state(app)
}

/// Open the data directory and build the router.
pub async fn build(config: &ServiceConfig) -> anyhow::Result<Router> {
    let dir = config.data_dir.clone();
    let store = tokio::task::spawn_blocking(move || Store::open(dir)).await??;
    Ok(router(Arc::new(store), config.bearer_token.clone()))
}

/// Serve on `listener` until Ctrl-C.
pub async fn serve(listener: TcpListener, config: &ServiceConfig) -> anyhow::Result<()> {
    serve_router(listener, build(config).await?).await
}

/// Serve an already built router on `listener` until Ctrl-C.
pub async fn serve_router(listener: TcpListener, app: Router) -> anyhow::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
