use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use mirror_core::backends::Backends;
use mirror_core::config::{BackendMode, Config};
use mirror_core::loop_engine::{Engine, ImageEncoding, LoopError, Termination};
use serde::Deserialize;
use serde_json::json;

use crate::ServeArgs;

struct AppState {
    cfg: Config,
    /// HTTP backends are shared; mock backends are rebuilt per request.
    shared: Option<Backends>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReflectRequest {
    /// Base64 or a `data:` URI.
    image: String,
    question: String,
    #[serde(default)]
    max_rounds: Option<u32>,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

fn decode_image_field(field: &str) -> Result<Vec<u8>, String> {
    let data = match field.strip_prefix("data:") {
        Some(rest) => rest.split_once(";base64,").map(|(_, d)| d).ok_or("data URI is not base64")?,
        None => field,
    };
    base64::engine::general_purpose::STANDARD
        .decode(data.trim())
        .map_err(|e| format!("image is not valid base64: {e}"))
}

fn reflect_blocking(state: &AppState, req: ReflectRequest) -> Response {
    let image = match decode_image_field(&req.image) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let mut loop_cfg = state.cfg.loop_config();
    if let Some(n) = req.max_rounds {
        loop_cfg.max_rounds = n;
    }
    let backends = match &state.shared {
        Some(b) => b.clone(),
        None => match state.cfg.backends() {
            Ok(b) => b,
            Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        },
    };
    let engine = match Engine::new(backends, loop_cfg, state.cfg.prompts.clone()) {
        Ok(e) => e,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let trajectory = match engine.run_trajectory(&image, &req.question) {
        Ok(t) => t,
        Err(e @ (LoopError::ImageDecode(_) | LoopError::EmptyQuestion)) => {
            return error(StatusCode::BAD_REQUEST, e.to_string())
        }
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    match trajectory.to_document(ImageEncoding::Inline) {
        Ok((doc, _)) => {
            let status = if doc.termination == Termination::BackendError { StatusCode::BAD_GATEWAY } else { StatusCode::OK };
            (status, Json(doc)).into_response()
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn reflect(State(state): State<Arc<AppState>>, body: Result<Json<ReflectRequest>, JsonRejection>) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    match tokio::task::spawn_blocking(move || reflect_blocking(&state, req)).await {
        Ok(resp) => resp,
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

pub fn router(cfg: Config, shared: Option<Backends>) -> Router {
    Router::new()
        .route("/v1/reflect", post(reflect))
        .route("/healthz", get(healthz))
        .with_state(Arc::new(AppState { cfg, shared }))
}

pub fn cmd_serve(args: ServeArgs) -> u8 {
    let cfg = match Config::resolve(args.config.as_deref()) {
        Ok((cfg, _)) => cfg,
        Err(e) => {
            eprintln!("error: --config: {e}");
            return 1;
        }
    };
    let shared = match cfg.endpoints.mode {
        BackendMode::Mock => None,
        BackendMode::Http => match cfg.backends() {
            Ok(b) => Some(b),
            Err(e) => {
                eprintln!("error: --config: {e}");
                return 1;
            }
        },
    };
    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    rt.block_on(async move {
        let listener = match tokio::net::TcpListener::bind(&args.bind).await {
            Ok(l) => l,
            Err(e) => {
                eprintln!("error: cannot bind {}: {e}", args.bind);
                return 2;
            }
        };
        match listener.local_addr() {
            Ok(addr) => println!("listening on http://{addr}"),
            Err(_) => println!("listening on http://{}", args.bind),
        }
        let served = axum::serve(listener, router(cfg, shared))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await;
        match served {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        }
    })
}
