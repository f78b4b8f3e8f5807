//! HTTP inference service: `POST /infer` turns a sketch PNG into a mesh and
//! a viewpoint, `GET /health` reports the loaded checkpoint.

use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use sketchmesh::checkpoint::Checkpoint;
use sketchmesh::dataset::fill_sketch;
use sketchmesh::geometry::obj::to_obj_string;
use sketchmesh::geometry::CameraPose;
use sketchmesh::networks::Networks;
use sketchmesh::pipeline::{infer, round_trip_iou};
use sketchmesh::rasterizer::SilhouetteMap;
use tower_http::cors::{Any, CorsLayer};

pub const DEFAULT_PORT: u16 = 8472;

/// Sketches with fewer ink pixels are rejected.
pub const MIN_INK_PIXELS: usize = 10;

pub struct Model {
    pub nets: Networks,
    pub digest: String,
}

/// Shared state; the model slot is filled once loading completes.
#[derive(Clone, Default)]
pub struct AppState {
    model: Arc<OnceLock<Model>>,
}

impl AppState {
    pub fn new() -> AppState {
        AppState::default()
    }

    pub fn set_model(&self, model: Model) -> Result<(), Model> {
        self.model.set(model)
    }

    /// Loads a checkpoint file into the model slot.
    pub fn load(&self, path: impl AsRef<Path>) -> sketchmesh::Result<()> {
        let (ck, digest) = Checkpoint::load(path)?;
        let nets = ck.restore()?;
        self.set_model(Model { nets, digest })
            .map_err(|_| sketchmesh::Error::Config("a model is already loaded".into()))
    }

    pub fn model(&self) -> Option<&Model> {
        self.model.get()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferRequest {
    pub sketch_png_base64: String,
    #[serde(default)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferResponse {
    pub mesh_obj: String,
    pub pose: CameraPose,
    pub iou_preview: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_resolution: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_resolution: Option<usize>,
}

fn fail(status: StatusCode, error: impl Into<String>, expected_resolution: Option<usize>) -> Response {
    (status, Json(ErrorBody { error: error.into(), expected_resolution })).into_response()
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new().route("/health", get(health)).route("/infer", post(infer_handler)).layer(cors).with_state(state)
}

async fn health(State(state): State<AppState>) -> Response {
    match state.model() {
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(Health { status: "loading".into(), checkpoint_digest: None, model_resolution: None }))
            .into_response(),
        Some(m) => Json(Health {
            status: "ready".into(),
            checkpoint_digest: Some(m.digest.clone()),
            model_resolution: Some(m.nets.config.resolution),
        })
        .into_response(),
    }
}

/// Grayscale image thresholded at half intensity: bright pixels are ink.
pub fn decode_sketch(bytes: &[u8]) -> Result<(Vec<bool>, u32, u32), String> {
    let img = image::load_from_memory(bytes).map_err(|e| format!("undecodable image: {e}"))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((img.pixels().map(|p| f64::from(p.0[0]) / 255.0 >= 0.5).collect(), w, h))
}

async fn infer_handler(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let Some(model) = state.model() else {
        return fail(StatusCode::SERVICE_UNAVAILABLE, "model is still loading", None);
    };
    let res = model.nets.config.resolution;
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    let (png, requested) = if is_json {
        let req: InferRequest = match serde_json::from_slice(&body) {
            Ok(r) => r,
            Err(e) => return fail(StatusCode::BAD_REQUEST, format!("invalid request body: {e}"), None),
        };
        match base64::engine::general_purpose::STANDARD.decode(req.sketch_png_base64.trim()) {
            Ok(b) => (b, req.resolution),
            Err(e) => return fail(StatusCode::BAD_REQUEST, format!("invalid base64: {e}"), None),
        }
    } else {
        (body.to_vec(), None)
    };
    let (mask, w, h) = match decode_sketch(&png) {
        Ok(x) => x,
        Err(e) => return fail(StatusCode::BAD_REQUEST, e, None),
    };
    if w != h || w as usize != res || requested.is_some_and(|r| r != res) {
        return fail(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("sketch is {w}x{h}, the model expects {res}x{res}"),
            Some(res),
        );
    }
    if mask.iter().filter(|&&m| m).count() < MIN_INK_PIXELS {
        return fail(StatusCode::UNPROCESSABLE_ENTITY, "empty sketch", None);
    }
    let model = state.clone();
    let result = tokio::task::spawn_blocking(move || -> sketchmesh::Result<InferResponse> {
        let nets = &model.model().expect("model loaded").nets;
        let sketch = SilhouetteMap::from_mask(&mask, res)?;
        let (mesh, pose) = infer(nets, &sketch)?;
        let iou_preview = round_trip_iou(&mesh, &pose, &fill_sketch(&sketch))?;
        Ok(InferResponse { mesh_obj: to_obj_string(&mesh), pose, iou_preview })
    })
    .await;
    match result {
        Ok(Ok(r)) if r.iou_preview.is_finite() && r.pose.elevation.is_finite() && r.pose.azimuth.is_finite() => Json(r).into_response(),
        Ok(Ok(_)) => fail(StatusCode::INTERNAL_SERVER_ERROR, "numerical failure: non-finite output", None),
        Ok(Err(e)) => fail(StatusCode::INTERNAL_SERVER_ERROR, format!("numerical failure: {e}"), None),
        Err(e) => fail(StatusCode::INTERNAL_SERVER_ERROR, format!("inference task failed: {e}"), None),
    }
}
