use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::oneshot;
use tower_http::services::ServeDir;

use super::{AnnotationService, Label, ServiceError};
use crate::error::{Error, Result};

type Shared = Arc<AnnotationService>;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::UnknownAnnotator(_) | ServiceError::UnknownPair(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict { .. } => StatusCode::CONFLICT,
            ServiceError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{self}");
        }
        (status, Json(json!({"error": self.to_string()}))).into_response()
    }
}

#[derive(Deserialize)]
struct Submission {
    annotator_id: String,
    pair_id: String,
    label: Label,
}

async fn next(State(svc): State<Shared>, Path(id): Path<String>) -> Response {
    match svc.next_task(&id) {
        Ok(t) => Json(t).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn submit(State(svc): State<Shared>, Json(s): Json<Submission>) -> Response {
    // The store fsyncs before acknowledging.
    let res = tokio::task::spawn_blocking(move || svc.submit_label(&s.annotator_id, &s.pair_id, s.label)).await;
    match res {
        Ok(Ok(ack)) => Json(ack).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

async fn progress(State(svc): State<Shared>) -> Response {
    Json(svc.progress()).into_response()
}

async fn export(State(svc): State<Shared>) -> Response {
    match tokio::task::spawn_blocking(move || svc.export_jsonl()).await {
        Ok(Ok(body)) => ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

async fn no_ui() -> Response {
    (
        StatusCode::NOT_FOUND,
        "no annotation UI bundle configured; start with --ui-dir <path> to serve one\n",
    )
        .into_response()
}

/// JSON API under `/api`, plus the static UI bundle from `ui_dir` at every
/// other path.
pub fn router(service: Shared, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/annotators/{id}/next", get(next))
        .route("/api/labels", post(submit))
        .route("/api/progress", get(progress))
        .route("/api/export", get(export))
        .with_state(service);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(no_ui),
    }
}

/// Runs the service on `addr` until Ctrl-C.
pub fn serve(service: Shared, addr: SocketAddr, ui_dir: Option<PathBuf>) -> Result<()> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Config(format!("tokio runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::Config(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| Error::Config(e.to_string()))?;
        log::info!("annotation server listening on http://{local}");
        println!("listening on http://{local}");
        axum::serve(listener, router(service, ui_dir))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::Config(format!("server error: {e}")))
    })
}

/// A server on its own thread and runtime; stopped on drop.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn spawn_background(service: Shared, addr: SocketAddr, ui_dir: Option<PathBuf>) -> Result<BackgroundServer> {
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = match tokio::runtime::Runtime::new() {
            Ok(rt) => rt,
            Err(e) => {
                let _ = addr_tx.send(Err(e.to_string()));
                return;
            }
        };
        rt.block_on(async move {
            let listener = match tokio::net::TcpListener::bind(addr).await {
                Ok(l) => l,
                Err(e) => {
                    let _ = addr_tx.send(Err(e.to_string()));
                    return;
                }
            };
            let _ = addr_tx.send(listener.local_addr().map_err(|e| e.to_string()));
            let _ = axum::serve(listener, router(service, ui_dir))
                .with_graceful_shutdown(async {
                    let _ = stop_rx.await;
                })
                .await;
        });
    });
    let addr = addr_rx
        .recv()
        .map_err(|e| Error::Config(e.to_string()))?
        .map_err(|e| Error::Config(format!("cannot bind {addr}: {e}")))?;
    Ok(BackgroundServer {
        addr,
        shutdown: Some(stop_tx),
        thread: Some(thread),
    })
}
