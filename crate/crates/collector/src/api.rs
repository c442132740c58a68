//! HTTP routes.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use hiq_core::control::agent::ConfigResponse;
use hiq_core::control::ControlBlock;
use hiq_core::tree::{tree_to_wire_value, wire_value_to_tree, SpanRecord};
use serde_json::{json, Value};

use crate::store::{Ingest, Store, StoreError, TreeFilter};

pub const DEFAULT_LIMIT: usize = 100;
pub const MAX_LIMIT: usize = 1000;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub ui_dir: Option<PathBuf>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/trees", get(list_trees).post(ingest_trees))
        .route("/v1/trees/{tree_id}", get(get_tree))
        .route("/v1/spans", axum::routing::post(ingest_spans))
        .route("/v1/traces/{trace_id}", get(get_trace))
        .route("/v1/config", get(get_config).put(put_config))
        .route("/v1/healthz", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/ui", get(ui_index))
        .route("/ui/{*path}", get(ui_file))
        .layer(middleware::from_fn(log_request))
        .with_state(state)
}

async fn log_request(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let uri = req.uri().clone();
    let resp = next.run(req).await;
    tracing::info!(%method, %uri, status = resp.status().as_u16(), "request");
    resp
}

/// Error responses carry `{"error": ..}` plus optional detail fields.
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        tracing::error!(error = %e, "store failure");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

fn require_json(headers: &HeaderMap) -> Result<(), ApiError> {
    let ct = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("");
    if ct
        .split(';')
        .next()
        .unwrap_or("")
        .trim()
        .eq_ignore_ascii_case("application/json")
    {
        Ok(())
    } else {
        Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "expected content type application/json",
        ))
    }
}

fn parse_body(body: &Bytes) -> Result<Value, ApiError> {
    let mut de = serde_json::Deserializer::from_slice(body);
    de.disable_recursion_limit();
    let v =
        serde::Deserialize::deserialize(&mut de).map_err(|e| ApiError::bad_request(format!("malformed JSON: {e}")))?;
    de.end()
        .map_err(|e| ApiError::bad_request(format!("malformed JSON: {e}")))?;
    Ok(v)
}

async fn ingest_trees(State(st): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Json<Value>, ApiError> {
    require_json(&headers)?;
    let envelope = parse_body(&body)?;
    let obj = envelope
        .as_object()
        .ok_or_else(|| ApiError::bad_request("batch must be a JSON object"))?;
    let host = obj
        .get("host")
        .and_then(Value::as_str)
        .ok_or_else(|| ApiError::bad_request("batch field \"host\" must be a string"))?
        .to_string();
    if let Some(id) = obj.get("batch_id") {
        if !id.is_string() {
            return Err(ApiError::bad_request("batch field \"batch_id\" must be a string"));
        }
    }
    let trees = obj
        .get("trees")
        .and_then(Value::as_array)
        .ok_or_else(|| ApiError::bad_request("batch field \"trees\" must be an array"))?;

    let store = st.store.clone();
    let trees = trees.clone();
    let result = tokio::task::spawn_blocking(move || -> Result<Value, StoreError> {
        let (mut accepted, mut duplicates) = (0, 0);
        let mut errors = Vec::new();
        for (i, raw) in trees.iter().enumerate() {
            match wire_value_to_tree(raw) {
                Ok(tree) => {
                    accepted += 1;
                    if store.ingest_tree(&host, tree)? == Ingest::Duplicate {
                        duplicates += 1;
                    }
                }
                Err(e) => errors.push(json!({"index": i, "error": e.to_string()})),
            }
        }
        Ok(json!({
            "accepted": accepted,
            "rejected": errors.len(),
            "duplicates": duplicates,
            "errors": errors,
        }))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(result))
}

async fn ingest_spans(State(st): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Json<Value>, ApiError> {
    require_json(&headers)?;
    let value = parse_body(&body)?;
    let items = value
        .as_array()
        .ok_or_else(|| ApiError::bad_request("body must be a JSON array of spans"))?;
    let mut spans = Vec::with_capacity(items.len());
    let mut invalid = Vec::new();
    for (i, item) in items.iter().enumerate() {
        match serde_json::from_value::<SpanRecord>(item.clone()) {
            Ok(span) => match span.validate() {
                Ok(()) => spans.push(span),
                Err(fields) => invalid.push(json!({"index": i, "violations": fields})),
            },
            Err(e) => invalid.push(json!({"index": i, "error": e.to_string()})),
        }
    }
    if !invalid.is_empty() {
        return Err(ApiError {
            status: StatusCode::BAD_REQUEST,
            body: json!({"error": "invalid spans", "spans": invalid}),
        });
    }
    let received = spans.len();
    let store = st.store.clone();
    let stored = tokio::task::spawn_blocking(move || store.ingest_spans(spans))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(json!({"accepted": received, "duplicates": received - stored})))
}

fn parse_filter(q: &HashMap<String, String>) -> Result<TreeFilter, ApiError> {
    let non_empty = |k: &str| -> Result<Option<String>, ApiError> {
        match q.get(k) {
            Some(v) if v.is_empty() => Err(ApiError::bad_request(format!("filter {k} must not be empty"))),
            other => Ok(other.cloned()),
        }
    };
    let since_us = q
        .get("since_us")
        .map(|v| v.parse::<u64>())
        .transpose()
        .map_err(|_| ApiError::bad_request("filter since_us must be a non-negative integer"))?;
    let limit = match q.get("limit") {
        None => DEFAULT_LIMIT,
        Some(v) => match v.parse::<usize>() {
            Ok(n) if (1..=MAX_LIMIT).contains(&n) => n,
            _ => {
                return Err(ApiError::bad_request(format!(
                    "limit must be an integer in 1..={MAX_LIMIT}"
                )))
            }
        },
    };
    Ok(TreeFilter {
        host: non_empty("host")?,
        metric: non_empty("metric")?,
        since_us,
        limit,
    })
}

async fn list_trees(
    State(st): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<Value>, ApiError> {
    let filter = parse_filter(&q)?;
    let trees = st.store.list_trees(&filter);
    Ok(Json(json!({ "trees": trees })))
}

async fn get_tree(State(st): State<AppState>, Path(tree_id): Path<String>) -> Result<Json<Value>, ApiError> {
    let stored = st
        .store
        .get_tree(&tree_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown tree {tree_id}")))?;
    Ok(Json(json!({
        "host": stored.host,
        "received_at_us": stored.received_at_us,
        "tree": tree_to_wire_value(&stored.tree),
    })))
}

async fn get_trace(State(st): State<AppState>, Path(trace_id): Path<String>) -> Result<Response, ApiError> {
    match st.store.trace(&trace_id) {
        None => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("unknown trace {trace_id}"),
        )),
        Some(Ok(tree)) => Ok(Json(tree).into_response()),
        Some(Err(e)) => Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())),
    }
}

fn host_param(q: &HashMap<String, String>) -> Result<String, ApiError> {
    match q.get("host") {
        Some(h) if !h.is_empty() => Ok(h.clone()),
        _ => Err(ApiError::bad_request("query parameter host is required")),
    }
}

async fn get_config(
    State(st): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<ConfigResponse>, ApiError> {
    let host = host_param(&q)?;
    let (revision, block) = st.store.get_config(&host);
    Ok(Json(ConfigResponse { host, revision, block }))
}

async fn put_config(
    State(st): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let host = host_param(&q)?;
    require_json(&headers)?;
    let value = parse_body(&body)?;
    let block: ControlBlock =
        serde_json::from_value(value).map_err(|e| ApiError::bad_request(format!("not a control block: {e}")))?;
    let store = st.store.clone();
    let outcome = tokio::task::spawn_blocking(move || store.put_config(&host, block))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    match outcome {
        Ok(revision) => Ok(Json(json!({ "revision": revision }))),
        Err(violations) => Err(ApiError {
            status: StatusCode::BAD_REQUEST,
            body: json!({"error": "invalid control block", "violations": violations}),
        }),
    }
}

async fn ui_index(State(st): State<AppState>) -> Response {
    serve_ui(&st, "index.html").await
}

async fn ui_file(State(st): State<AppState>, Path(path): Path<String>) -> Response {
    serve_ui(&st, &path).await
}

async fn serve_ui(st: &AppState, rel: &str) -> Response {
    let Some(dir) = &st.ui_dir else {
        return ApiError::new(StatusCode::NOT_FOUND, "console not configured (start with --ui DIR)").into_response();
    };
    let rel = if rel.is_empty() || rel.ends_with('/') {
        format!("{rel}index.html")
    } else {
        rel.to_string()
    };
    let safe = std::path::Path::new(&rel)
        .components()
        .all(|c| matches!(c, std::path::Component::Normal(_)));
    if !safe {
        return ApiError::new(StatusCode::NOT_FOUND, "not found").into_response();
    }
    match tokio::fs::read(dir.join(&rel)).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&rel))], bytes).into_response(),
        Err(_) => ApiError::new(StatusCode::NOT_FOUND, "not found").into_response(),
    }
}

fn content_type(path: &str) -> &'static str {
    match path.rsplit('.').next().unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" | "map" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        _ => "application/octet-stream",
    }
}
