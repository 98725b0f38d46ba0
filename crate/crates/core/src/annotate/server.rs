use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use super::{ApiError, Service, SCHEMA};

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, field) = match &self {
            ApiError::UnknownAnnotator => (StatusCode::FORBIDDEN, None),
            ApiError::UnassignedSample(_) => (StatusCode::CONFLICT, None),
            ApiError::InvalidField { field, .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, Some(field.clone()))
            }
            ApiError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, None),
        };
        (
            status,
            Json(json!({ "error": self.to_string(), "field": field })),
        )
            .into_response()
    }
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

async fn next(
    State(svc): State<Arc<Service>>,
    Query(q): Query<NextQuery>,
) -> Result<Response, ApiError> {
    Ok(Json(svc.next_sample(&q.annotator)?).into_response())
}

async fn submit(
    State(svc): State<Arc<Service>>,
    body: Option<Json<serde_json::Value>>,
) -> Result<Response, ApiError> {
    let Some(Json(body)) = body else {
        return Err(ApiError::InvalidField {
            field: "body".into(),
            message: "expected a JSON object".into(),
        });
    };
    // The journal fsync blocks; keep it off the async workers.
    let ack = tokio::task::spawn_blocking(move || svc.submit(&body))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(ack)).into_response())
}

async fn stats(State(svc): State<Arc<Service>>) -> Result<Response, ApiError> {
    Ok(Json(svc.stats()?).into_response())
}

async fn export(State(svc): State<Arc<Service>>) -> Response {
    (
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        svc.export_jsonl(),
    )
        .into_response()
}

async fn schema() -> Response {
    ([(header::CONTENT_TYPE, "application/schema+json")], SCHEMA).into_response()
}

/// API routes, plus the UI bundle from `static_dir` for every other path.
pub fn router(svc: Arc<Service>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/next", get(next))
        .route("/api/annotations", post(submit))
        .route("/api/stats", get(stats))
        .route("/api/export", get(export))
        .route("/api/schema", get(schema))
        .with_state(svc);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    if let Some(a) = addr {
        tracing::info!("annotation service listening on http://{a}");
    }
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
}
