//! HTTP exploration service over a loaded session.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::ensemble::Normalization;
use crate::error::Error;
use crate::pipeline::{Provenance, Session};
use crate::render::{Camera, TransferFunction};
use crate::view::ViewConfig;

pub struct AppState {
    pub session: Session,
    pub permits: Semaphore,
    failures: AtomicU64,
}

impl AppState {
    pub fn new(session: Session, concurrency: usize) -> Arc<Self> {
        Arc::new(Self { session, permits: Semaphore::new(concurrency.max(1)), failures: AtomicU64::new(0) })
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    id: Option<String>,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: message.into(), id: None }
    }

    fn from_error(state: &AppState, e: Error) -> Self {
        match e {
            Error::Invalid(_) | Error::Shape(_) => Self::bad_request(e.to_string()),
            other => {
                let n = state.failures.fetch_add(1, Ordering::Relaxed);
                let id = format!("vdls-{}-{n}", std::process::id());
                tracing::error!(diagnostic = %id, "{other}");
                Self { status: StatusCode::INTERNAL_SERVER_ERROR, message: other.to_string(), id: Some(id) }
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message, "diagnostic_id": self.id });
        (self.status, Json(body)).into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

async fn run_blocking<T: Send + 'static>(
    state: Arc<AppState>,
    f: impl FnOnce(&Session) -> crate::Result<T> + Send + 'static,
) -> Result<T, ApiError> {
    let _permit = state.permits.acquire().await.map_err(|_| ApiError::bad_request("service is shutting down"))?;
    let st = state.clone();
    let out = tokio::task::spawn_blocking(move || f(&st.session)).await;
    match out {
        Ok(r) => r.map_err(|e| ApiError::from_error(&state, e)),
        Err(e) => Err(ApiError::from_error(&state, Error::Format(format!("worker failed: {e}")))),
    }
}

#[derive(Serialize)]
struct ParamMeta {
    name: String,
    min: f64,
    max: f64,
    default: f64,
}

#[derive(Serialize)]
struct MetaResponse {
    parameters: Vec<ParamMeta>,
    extents: [usize; 3],
    normalization: Normalization,
    views: Vec<ViewConfig>,
    image: [usize; 2],
    config_hash: String,
    provenance: Provenance,
}

async fn meta(State(state): State<Arc<AppState>>) -> Json<MetaResponse> {
    let s = &state.session;
    let space = s.space();
    let defaults = crate::pipeline::Run::default_params(space);
    let r = &s.run.config.render;
    Json(MetaResponse {
        parameters: space
            .names
            .iter()
            .zip(&space.ranges)
            .zip(defaults)
            .map(|((n, (lo, hi)), d)| ParamMeta { name: n.clone(), min: *lo, max: *hi, default: d })
            .collect(),
        extents: s.extents,
        normalization: s.surrogate.normalization(),
        views: s.surrogate.axes.iter().map(|(p, _)| p.view).collect(),
        image: [r.width, r.height],
        config_hash: s.run.config.stage_hash(crate::pipeline::Stage::Predictor),
        provenance: s.provenance(&defaults_of(s)),
    })
}

fn defaults_of(s: &Session) -> Vec<f64> {
    crate::pipeline::Run::default_params(s.space())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InferRequest {
    params: Vec<f64>,
    #[serde(default)]
    viewpoint: Option<[f64; 3]>,
}

async fn infer(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: InferRequest = parse(&body)?;
    let vp = req.viewpoint.unwrap_or(state.session.run.config.evaluate.viewpoint);
    let out = run_blocking(state, move |s| s.infer(&req.params, vp)).await?;
    Ok(Json(out).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RenderRequest {
    params: Vec<f64>,
    #[serde(default)]
    camera: Option<Camera>,
    /// Orbit direction used when no camera is given.
    #[serde(default)]
    viewpoint: Option<[f64; 3]>,
    #[serde(default)]
    tf: Option<TransferFunction>,
    #[serde(default)]
    step: Option<f64>,
    #[serde(default)]
    background: Option<[f32; 3]>,
}

async fn render(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: RenderRequest = parse(&body)?;
    let run = &state.session.run;
    let camera = match req.camera {
        Some(c) => c,
        None => run
            .camera(req.viewpoint.unwrap_or(run.config.evaluate.viewpoint))
            .map_err(|e| ApiError::bad_request(e.to_string()))?,
    };
    let tf = req.tf.unwrap_or_else(TransferFunction::high_opacity);
    let mut settings = run.render_settings();
    if req.step.is_some() {
        settings.step = req.step;
    }
    if let Some(b) = req.background {
        settings.background = b;
    }
    let params = req.params.clone();
    let png = run_blocking(state.clone(), move |s| s.render(&params, &camera, &tf, &settings)?.to_png()).await?;
    let prov = state.session.provenance(&req.params);
    Ok(Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "image/png")
        .header("x-vdls-predictors", prov.predictor_ids.join(","))
        .header("x-vdls-autoencoders", prov.rae_ids.join(","))
        .header("x-vdls-out-of-range", prov.out_of_range.join(","))
        .body(Body::from(png))
        .expect("valid response"))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SensitivityRequest {
    #[serde(default)]
    params: Option<Vec<f64>>,
    index: usize,
    n: usize,
    #[serde(default)]
    format: Option<String>,
}

#[derive(Serialize)]
struct SensitivityRow {
    value: f64,
    sensitivity: f64,
}

async fn sensitivity(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: SensitivityRequest = parse(&body)?;
    let csv = match req.format.as_deref() {
        None | Some("json") => false,
        Some("csv") => true,
        Some(f) => return Err(ApiError::bad_request(format!("unknown format `{f}`; use json or csv"))),
    };
    let params = req.params.clone().unwrap_or_else(|| defaults_of(&state.session));
    let (index, n) = (req.index, req.n);
    let curve = run_blocking(state.clone(), move |s| s.sensitivity(&params, index, n)).await?;
    if csv {
        return Ok(([(header::CONTENT_TYPE, "text/csv")], curve.to_csv()).into_response());
    }
    let rows: Vec<SensitivityRow> =
        curve.values.iter().zip(&curve.sensitivities).map(|(&value, &sensitivity)| SensitivityRow { value, sensitivity }).collect();
    Ok(Json(serde_json::json!({
        "parameter": curve.name,
        "index": curve.index,
        "rows": rows,
        "mean": curve.mean(),
        "provenance": state.session.provenance(req.params.as_deref().unwrap_or(&defaults_of(&state.session))),
    }))
    .into_response())
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/meta", get(meta))
        .route("/infer", post(infer))
        .route("/render", post(render))
        .route("/sensitivity", post(sensitivity))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state, static_dir)).await
}
