use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::oneshot;
use tower_http::services::ServeDir;

use super::session::{BridgeError, SessionStore};

#[derive(Clone)]
struct AppState {
    store: SessionStore,
    token: Option<Arc<str>>,
}

#[derive(Debug, Deserialize)]
pub struct AnswerBody {
    pub answer: String,
}

impl IntoResponse for BridgeError {
    fn into_response(self) -> Response {
        let status = match self {
            BridgeError::NotFound(_) => StatusCode::NOT_FOUND,
            BridgeError::NoPendingQuestion(_) | BridgeError::AlreadyPending(_) | BridgeError::Closed(_) => {
                StatusCode::CONFLICT
            }
            BridgeError::EmptyAnswer => StatusCode::UNPROCESSABLE_ENTITY,
            BridgeError::Timeout => StatusCode::GATEWAY_TIMEOUT,
        };
        (status, Json(json!({"error": self.to_string()}))).into_response()
    }
}

async fn list(State(st): State<AppState>) -> impl IntoResponse {
    Json(st.store.list())
}

async fn view(State(st): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, BridgeError> {
    Ok(Json(st.store.view(&id)?))
}

async fn answer(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<AnswerBody>,
) -> Result<impl IntoResponse, BridgeError> {
    st.store.submit(&id, &body.answer)?;
    Ok(Json(st.store.view(&id)?))
}

async fn target(State(st): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, BridgeError> {
    let png = st.store.target_png(&id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png))
}

fn token_ok(expected: &str, headers: &HeaderMap, query: &HashMap<String, String>) -> bool {
    let bearer = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    bearer == Some(expected) || query.get("token").map(String::as_str) == Some(expected)
}

async fn require_token(
    State(st): State<AppState>,
    Query(query): Query<HashMap<String, String>>,
    headers: HeaderMap,
    req: Request,
    next: Next,
) -> Response {
    match &st.token {
        Some(t) if !token_ok(t, &headers, &query) => {
            (StatusCode::UNAUTHORIZED, Json(json!({"error": "missing or wrong token"}))).into_response()
        }
        _ => next.run(req).await,
    }
}

/// The console API, plus the console bundle when `static_dir` is set.
pub fn router(store: SessionStore, token: Option<String>, static_dir: Option<PathBuf>) -> Router {
    let state = AppState {
        store,
        token: token.map(Into::into),
    };
    let api = Router::new()
        .route("/api/sessions", get(list))
        .route("/api/sessions/{id}", get(view))
        .route("/api/sessions/{id}/answer", post(answer))
        .route("/api/sessions/{id}/target.png", get(target))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// A bridge server running on its own thread until dropped.
pub struct BridgeServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl BridgeServer {
    pub fn start(addr: &str, app: Router) -> std::io::Result<BridgeServer> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let thread = thread::spawn(move || {
            rt.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        log::error!("bridge listener: {e}");
                        return;
                    }
                };
                let served = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
                if let Err(e) = served {
                    log::error!("bridge server: {e}");
                }
            });
        });
        Ok(BridgeServer {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for BridgeServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
