//! HTTP+JSON surface.
//!
//! | verb | path                                         | body              |
//! |------|----------------------------------------------|-------------------|
//! | POST | `/sessions`                                  | `{query, user_context?}` |
//! | GET  | `/sessions/{id}`                             |                   |
//! | POST | `/sessions/{id}/nodes/{node_id}/expand`      | `?force=true`     |
//! | PUT  | `/sessions/{id}/nodes/{node_id}/selection`   | `{indices}`       |
//! | PUT  | `/sessions/{id}/preferences`                 | `{text}`          |
//! | POST | `/sessions/{id}/summary`                     |                   |
//! | GET  | `/healthz`                                   |                   |
//!
//! Errors are `{"error": code, "message": text}`; failed generations also
//! carry the current `session` where one exists.

use std::collections::BTreeSet;
use std::future::Future;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tasktree_core::{ModelError, NodeId, SessionState};
use tokio::net::TcpListener;

use crate::service::{ServiceError, SessionService};

type Shared = Arc<SessionService>;

pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": code, "message": message.into() }),
        }
    }

    fn with_session(mut self, state: &SessionState) -> Self {
        self.body["session"] = serde_json::to_value(state).expect("state serializes");
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, axum::Json(self.body)).into_response()
    }
}

pub fn status_for(err: &ServiceError) -> StatusCode {
    match err {
        ServiceError::EmptyQuery => StatusCode::BAD_REQUEST,
        ServiceError::UnknownSession(_) => StatusCode::NOT_FOUND,
        ServiceError::Model(e) => match e {
            ModelError::UnknownNode(_) => StatusCode::NOT_FOUND,
            ModelError::OptionsNotReady(_) => StatusCode::CONFLICT,
            _ => StatusCode::BAD_REQUEST,
        },
        ServiceError::Busy(_) | ServiceError::Superseded(_) => StatusCode::CONFLICT,
        ServiceError::DecompositionFailed { .. } | ServiceError::GenerationFailed { .. } => {
            StatusCode::BAD_GATEWAY
        }
        ServiceError::Storage(_) | ServiceError::Prompt(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<ServiceError> for ApiError {
    fn from(err: ServiceError) -> Self {
        let api = ApiError::new(status_for(&err), err.code(), err.to_string());
        match &err {
            ServiceError::DecompositionFailed { state, .. } => api.with_session(state),
            _ => api,
        }
    }
}

/// `axum::Json` with rejections mapped onto the error body.
pub struct Json<T>(pub T);

impl<T, S> FromRequest<S> for Json<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match axum::Json::<T>::from_request(req, state).await {
            Ok(axum::Json(v)) => Ok(Json(v)),
            Err(rejection) => Err(rejection_error(rejection)),
        }
    }
}

fn rejection_error(rejection: JsonRejection) -> ApiError {
    ApiError::new(rejection.status(), "invalid_body", rejection.body_text())
}

impl<T: Serialize> IntoResponse for Json<T> {
    fn into_response(self) -> Response {
        axum::Json(self.0).into_response()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub query: String,
    #[serde(default)]
    pub user_context: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionBody {
    pub indices: BTreeSet<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencesBody {
    pub text: String,
}

#[derive(Debug, Default, Deserialize)]
pub struct ExpandQuery {
    #[serde(default)]
    pub force: bool,
}

fn node_id(raw: &str) -> Result<NodeId, ApiError> {
    NodeId::parse(raw).map_err(|e| ServiceError::Model(e).into())
}

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn create_session(
    State(svc): State<Shared>,
    Json(body): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionState>), ApiError> {
    let state = svc
        .create_session(&body.query, body.user_context.as_deref())
        .await?;
    Ok((StatusCode::CREATED, Json(state)))
}

async fn get_session(
    State(svc): State<Shared>,
    Path(id): Path<String>,
) -> Result<Json<SessionState>, ApiError> {
    Ok(Json(svc.get_session(&id)?))
}

async fn expand(
    State(svc): State<Shared>,
    Path((id, node)): Path<(String, String)>,
    Query(q): Query<ExpandQuery>,
) -> Result<Json<Value>, ApiError> {
    let node = node_id(&node)?;
    match svc.expand_node(&id, &node, q.force).await {
        Ok(expansion) => Ok(Json(serde_json::to_value(expansion).expect("serializes"))),
        Err(err @ ServiceError::GenerationFailed { .. }) => {
            let state = svc.get_session(&id)?;
            Err(ApiError::from(err).with_session(&state))
        }
        Err(err) => Err(err.into()),
    }
}

async fn select(
    State(svc): State<Shared>,
    Path((id, node)): Path<(String, String)>,
    Json(body): Json<SelectionBody>,
) -> Result<Json<Value>, ApiError> {
    let node = node_id(&node)?;
    let view = svc.set_node_selection(&id, &node, body.indices)?;
    Ok(Json(serde_json::to_value(view).expect("serializes")))
}

async fn preferences(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<PreferencesBody>,
) -> Result<Json<SessionState>, ApiError> {
    Ok(Json(svc.update_preferences(&id, &body.text).await?))
}

async fn summary(
    State(svc): State<Shared>,
    Path(id): Path<String>,
) -> Result<Json<Value>, ApiError> {
    match svc.summarize(&id).await {
        Ok(s) => Ok(Json(json!({
            "summary": s.summary,
            "node_id": NodeId::root(),
            "session": s.state,
        }))),
        Err(err @ ServiceError::GenerationFailed { .. }) => {
            let state = svc.get_session(&id)?;
            Err(ApiError::from(err).with_session(&state))
        }
        Err(err) => Err(err.into()),
    }
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/nodes/{node_id}/expand", post(expand))
        .route("/sessions/{id}/nodes/{node_id}/selection", put(select))
        .route("/sessions/{id}/preferences", put(preferences))
        .route("/sessions/{id}/summary", post(summary))
        .fallback(not_found)
        .with_state(service)
}

pub async fn serve(
    listener: TcpListener,
    service: Shared,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service))
        .with_graceful_shutdown(shutdown)
        .await
}
