//! HTTP inference service over an immutable checkpoint.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use smgeo_core::fusion::ClickPrompt;
use smgeo_core::head::BBox;
use smgeo_core::model::{Model, ModelState};

use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::imaging::{decode_png, encode_png};
use crate::synth::CrossViewSample;
use crate::train::make_batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    /// Largest accepted PNG payload per image, after base64 decoding.
    pub max_image_bytes: usize,
    pub max_body_bytes: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self { max_image_bytes: 2 << 20, max_body_bytes: 8 << 20 }
    }
}

pub struct AppState {
    pub model: Model,
    pub state: ModelState,
    pub dataset: Option<Dataset>,
    pub limits: Limits,
}

impl AppState {
    pub fn from_checkpoint(ck: Checkpoint, dataset: Option<Dataset>, limits: Limits) -> Result<Self> {
        Ok(Self { model: ck.model()?, state: ck.state, dataset, limits })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug)]
struct Failure(StatusCode, ApiError);

impl Failure {
    fn bad(field: &str, msg: impl Into<String>) -> Self {
        Failure(StatusCode::BAD_REQUEST, ApiError { error: format!("{field}: {}", msg.into()), field: Some(field.into()) })
    }

    fn too_large(field: &str, msg: impl Into<String>) -> Self {
        Failure(StatusCode::PAYLOAD_TOO_LARGE, ApiError { error: format!("{field}: {}", msg.into()), field: Some(field.into()) })
    }

    fn not_found(msg: impl Into<String>) -> Self {
        Failure(StatusCode::NOT_FOUND, ApiError { error: msg.into(), field: None })
    }

    fn internal(msg: impl Into<String>) -> Self {
        Failure(StatusCode::INTERNAL_SERVER_ERROR, ApiError { error: msg.into(), field: None })
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResponse {
    pub id: String,
    /// Base64 PNG.
    pub query_image: String,
    pub reference_image: String,
    pub gt: [f64; 4],
    pub click: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub bbox: [f64; 4],
    pub score: f64,
    pub center: [f64; 2],
    /// Heatmap rows at feature resolution.
    pub heatmap: Vec<Vec<f64>>,
    pub latency_ms: f64,
}

pub fn router(app: Arc<AppState>) -> Router {
    let limit = app.limits.max_body_bytes;
    Router::new()
        .route("/health", get(health))
        .route("/samples", get(samples))
        .route("/sample/{id}", get(sample))
        .route("/predict", post(predict))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(app)
}

pub async fn serve(app: Arc<AppState>, bind: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| Error::Config(format!("cannot bind {bind}: {e}")))?;
    log::info!("listening on http://{}", listener.local_addr().map_err(|e| Error::Config(e.to_string()))?);
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::Config(format!("server error: {e}")))
}

async fn health() -> Json<Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn samples(State(app): State<Arc<AppState>>) -> Json<Value> {
    let ids: Vec<&str> = app.dataset.iter().flat_map(|d| d.records.iter().map(|r| r.id.as_str())).collect();
    Json(serde_json::json!({ "ids": ids }))
}

fn load_sample(app: &AppState, id: &str) -> std::result::Result<CrossViewSample, Failure> {
    let ds = app.dataset.as_ref().ok_or_else(|| Failure::not_found(format!("unknown sample id {id}")))?;
    let rec = ds.get(id).ok_or_else(|| Failure::not_found(format!("unknown sample id {id}")))?;
    ds.load_sample(rec).map_err(|e| Failure::internal(e.to_string()))
}

async fn sample(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> std::result::Result<Json<SampleResponse>, Failure> {
    let s = load_sample(&app, &id)?;
    Ok(Json(SampleResponse {
        id: s.id,
        query_image: B64.encode(encode_png(&s.query)),
        reference_image: B64.encode(encode_png(&s.reference)),
        gt: s.gt.to_array(),
        click: [s.click.u, s.click.v],
    }))
}

fn decode_image(app: &AppState, field: &str, v: &Value, extent: (usize, usize)) -> std::result::Result<RgbImage, Failure> {
    let text = v.as_str().ok_or_else(|| Failure::bad(field, "expected a base64 PNG string"))?;
    if text.len() / 4 * 3 > app.limits.max_image_bytes + 3 {
        return Err(Failure::too_large(field, format!("image exceeds {} bytes", app.limits.max_image_bytes)));
    }
    let bytes = B64.decode(text).map_err(|e| Failure::bad(field, format!("invalid base64: {e}")))?;
    if bytes.len() > app.limits.max_image_bytes {
        return Err(Failure::too_large(field, format!("image exceeds {} bytes", app.limits.max_image_bytes)));
    }
    let img = decode_png(&bytes).map_err(|e| Failure::bad(field, e))?;
    if (img.height() as usize, img.width() as usize) != extent {
        return Err(Failure::bad(
            field,
            format!("expected {}x{} pixels, got {}x{}", extent.1, extent.0, img.width(), img.height()),
        ));
    }
    Ok(img)
}

fn parse_click(v: Option<&Value>, extent: (usize, usize)) -> std::result::Result<ClickPrompt, Failure> {
    let arr = v.and_then(Value::as_array).ok_or_else(|| Failure::bad("click", "expected [u, v]"))?;
    let coords: Vec<f64> = arr.iter().filter_map(Value::as_f64).collect();
    if arr.len() != 2 || coords.len() != 2 {
        return Err(Failure::bad("click", "expected two numbers [u, v]"));
    }
    let click = ClickPrompt::at(coords[0], coords[1]);
    click.validate(extent.0, extent.1).map_err(|e| Failure::bad("click", e.to_string()))?;
    Ok(click)
}

const PREDICT_FIELDS: [&str; 4] = ["query_image", "reference_image", "sample_id", "click"];

async fn predict(State(app): State<Arc<AppState>>, body: Bytes) -> std::result::Result<Json<PredictResponse>, Failure> {
    let start = Instant::now();
    let req: Value = serde_json::from_slice(&body).map_err(|e| Failure::bad("body", format!("invalid JSON: {e}")))?;
    let obj = req.as_object().ok_or_else(|| Failure::bad("body", "expected a JSON object"))?;
    if let Some(k) = obj.keys().find(|k| !PREDICT_FIELDS.contains(&k.as_str())) {
        return Err(Failure::bad(k, "unknown field"));
    }
    let cfg = &app.model.cfg.backbone;
    let base = match obj.get("sample_id") {
        None | Some(Value::Null) => None,
        Some(Value::String(id)) => Some(load_sample(&app, id)?),
        Some(_) => return Err(Failure::bad("sample_id", "expected a string")),
    };
    let image = |field: &str, extent, fallback: Option<&RgbImage>| match obj.get(field) {
        Some(v) if !v.is_null() => decode_image(&app, field, v, extent),
        _ => fallback.cloned().ok_or_else(|| Failure::bad(field, "required unless sample_id is given")),
    };
    let query = image("query_image", cfg.query_extent, base.as_ref().map(|s| &s.query))?;
    let reference = image("reference_image", cfg.reference_extent, base.as_ref().map(|s| &s.reference))?;
    let click = parse_click(obj.get("click"), cfg.query_extent)?;

    let app2 = app.clone();
    let pred = tokio::task::spawn_blocking(move || -> Result<_> {
        let s = CrossViewSample { id: String::new(), scene_seed: 0, reference, query, click, gt: BBox { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 } };
        let (batch, _) = make_batch(std::slice::from_ref(&s))?;
        Ok(app2.model.predict(&app2.state, &batch, false)?.predictions.remove(0))
    })
    .await
    .map_err(|e| Failure::internal(e.to_string()))?
    .map_err(|e| Failure::internal(e.to_string()))?;

    Ok(Json(PredictResponse {
        bbox: pred.bbox.to_array(),
        score: pred.score,
        center: [pred.center.0, pred.center.1],
        heatmap: pred.heatmap.chunks(pred.feat.1).map(<[f64]>::to_vec).collect(),
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    }))
}
