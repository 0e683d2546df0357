//! HTTP front end for interactive reconstruction.
//!
//! `POST /reconstruct` samples the submitted image with the served operator,
//! reconstructs it in evaluation mode under the requested μ code and returns
//! the reconstruction with its execution path. `GET /presets` describes what
//! is being served. Models are loaded once at startup and shared read-only.

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use unfoldcs::checkpoint::Checkpoint;
use unfoldcs::evaluation::benchmark::ratio_label;
use unfoldcs::evaluation::{psnr, ssim};
use unfoldcs::imaging::{decode_luma, encode_png};
use unfoldcs::network::{Mode, Network, Variant};
use unfoldcs::selector::ModulationInput;
use unfoldcs::sensing::{sample, BlockLayout, MeasurementMatrix, BLOCK_SIZE};
use unfoldcs::Error;

/// Response header carrying the server-side processing time.
pub const LATENCY_HEADER: &str = "x-latency-ms";
/// Default cap on submitted image size.
pub const DEFAULT_MAX_PIXELS: usize = 1 << 20;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("no checkpoints found in {0}")]
    NoModels(PathBuf),
    #[error("two checkpoints serve ratio {0}")]
    DuplicateRatio(String),
    #[error(transparent)]
    Model(#[from] Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// A loaded network together with its operator.
#[derive(Debug)]
pub struct ServedModel {
    pub id: String,
    pub checkpoint: Checkpoint,
    pub phi: MeasurementMatrix,
}

impl ServedModel {
    pub fn from_checkpoint(id: impl Into<String>, checkpoint: Checkpoint) -> Result<Self, Error> {
        let phi = checkpoint.meta.phi()?;
        Ok(ServedModel {
            id: id.into(),
            checkpoint,
            phi,
        })
    }

    pub fn network(&self) -> &Network {
        &self.checkpoint.network
    }
}

/// Served models keyed by ratio label (`"30"` for 30 %).
#[derive(Debug, Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, ServedModel>,
}

impl ModelRegistry {
    pub fn insert(&mut self, model: ServedModel) -> Result<(), ServiceError> {
        let key = ratio_label(model.checkpoint.meta.ratio);
        if self.models.contains_key(&key) {
            return Err(ServiceError::DuplicateRatio(key));
        }
        self.models.insert(key, model);
        Ok(())
    }

    /// Loads every `*.safetensors` file in `dir`; fails when there is none.
    pub fn load_dir(dir: &Path) -> Result<Self, ServiceError> {
        let entries = fs::read_dir(dir).map_err(|source| ServiceError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "safetensors"))
            .collect();
        paths.sort();
        let mut registry = ModelRegistry::default();
        for path in paths {
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let ckpt = Checkpoint::load(&path)?;
            log::info!("serving {id} (ratio {})", ckpt.meta.ratio);
            registry.insert(ServedModel::from_checkpoint(id, ckpt)?)?;
        }
        if registry.is_empty() {
            return Err(ServiceError::NoModels(dir.to_path_buf()));
        }
        Ok(registry)
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn get(&self, ratio: f64) -> Option<&ServedModel> {
        self.models.get(&ratio_label(ratio))
    }

    pub fn models(&self) -> impl Iterator<Item = &ServedModel> {
        self.models.values()
    }
}

/// Shared, immutable server state.
#[derive(Debug)]
pub struct AppState {
    pub registry: ModelRegistry,
    pub max_pixels: usize,
}

/// Submitted image: a base64 PNG (or any decodable format) or a row-major
/// array of rows with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageInput {
    Encoded(String),
    Raw(Vec<Vec<f64>>),
}

/// μ code as a bit array or a bit string such as `"010100"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EncodingInput {
    Bits(Vec<u8>),
    Text(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructRequest {
    pub image: ImageInput,
    pub ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoding: Option<EncodingInput>,
    #[serde(default)]
    pub return_truth_metrics: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructResponse {
    /// Base64 8-bit grayscale PNG.
    pub reconstruction: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    /// Per stage: (gradient step executed, proximal module executed).
    pub path_mask: Vec<[bool; 2]>,
    pub n_am: [usize; 2],
    pub dynamic_gflops: f64,
    pub static_gflops: f64,
    pub model_id: String,
    /// The code the selectors were driven with, echoed verbatim.
    pub encoding: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetsResponse {
    pub ratios: Vec<f64>,
    pub mu_values: Vec<f64>,
    #[serde(rename = "K")]
    pub stages: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    pub encoding_len: usize,
    pub model_ids: Vec<String>,
    pub max_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<usize>,
}

/// A failed request: status plus message.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                error: message.into(),
                stage: None,
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric { stage, .. } => ApiError {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                body: ErrorBody {
                    error: e.to_string(),
                    stage: Some(stage),
                },
            },
            Error::Domain(_) | Error::Format { .. } => ApiError::bad_request(e.to_string()),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn decode_image(input: &ImageInput, max_pixels: usize) -> Result<Array2<f64>, ApiError> {
    let too_large = |h: usize, w: usize| {
        ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image is {h}x{w} = {} pixels, the limit is {max_pixels}", h * w),
        )
    };
    let img = match input {
        ImageInput::Encoded(text) => {
            let payload = text.split_once("base64,").map_or(text.as_str(), |(_, p)| p);
            let bytes = BASE64
                .decode(payload.trim())
                .map_err(|e| ApiError::bad_request(format!("image is not valid base64: {e}")))?;
            let img = decode_luma(&bytes)?;
            if img.len() > max_pixels {
                return Err(too_large(img.nrows(), img.ncols()));
            }
            img
        }
        ImageInput::Raw(rows) => {
            let h = rows.len();
            let w = rows.first().map_or(0, Vec::len);
            if h * w > max_pixels {
                return Err(too_large(h, w));
            }
            if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
                return Err(ApiError::bad_request("raw image rows must be non-empty and equal length"));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(ApiError::bad_request("raw image contains non-finite values"));
            }
            Array2::from_shape_vec((h, w), flat).expect("shape checked")
        }
    };
    Ok(img)
}

fn resolve_modulation(
    req: &ReconstructRequest,
    model: &ServedModel,
) -> Result<ModulationInput, ApiError> {
    let meta = &model.checkpoint.meta;
    let modulation = match (&req.mu, &req.encoding) {
        (Some(_), Some(_)) | (None, None) => {
            return Err(ApiError::bad_request("give exactly one of mu or encoding"));
        }
        (Some(mu), None) => match meta.variant {
            Variant::DpcDun => ModulationInput::preset_in(*mu, &meta.mu_set)?,
            Variant::DpDun => ModulationInput::zeros(0),
        },
        (None, Some(enc)) => {
            let m = match enc {
                EncodingInput::Bits(bits) => ModulationInput::from_bits(bits)?,
                EncodingInput::Text(text) => ModulationInput::from_bitstring(text)?,
            };
            if m.bits().len() != meta.encoding_len {
                return Err(ApiError::bad_request(format!(
                    "encoding has {} bits, the model expects {}",
                    m.bits().len(),
                    meta.encoding_len
                )));
            }
            m
        }
    };
    Ok(modulation)
}

/// Runs one request synchronously. Deterministic in (image, ratio, code).
pub fn reconstruct(state: &AppState, req: &ReconstructRequest) -> Result<ReconstructResponse, ApiError> {
    let model = state.registry.get(req.ratio).ok_or_else(|| {
        let served: Vec<String> = state
            .registry
            .models()
            .map(|m| m.checkpoint.meta.ratio.to_string())
            .collect();
        ApiError::bad_request(format!(
            "ratio {} is not served (available: {})",
            req.ratio,
            served.join(", ")
        ))
    })?;
    let modulation = resolve_modulation(req, model)?;
    let truth = decode_image(&req.image, state.max_pixels)?;
    let (h, w) = truth.dim();
    let layout = BlockLayout::new(h, w, BLOCK_SIZE, model.checkpoint.meta.eval_stride.min(BLOCK_SIZE))?;
    let meas = sample(truth.view(), &model.phi, &layout)?;
    let (recon, trace) = model
        .network()
        .recover(&meas, &model.phi, &modulation, Mode::Eval)?;
    let clipped = recon.mapv(|v| v.clamp(0.0, 1.0));
    let (psnr_db, ssim_value) = if req.return_truth_metrics {
        (
            Some(psnr(truth.view(), clipped.view(), 1.0)?),
            ssim(truth.view(), clipped.view()).ok(),
        )
    } else {
        (None, None)
    };
    let mask = trace.path_mask();
    Ok(ReconstructResponse {
        reconstruction: BASE64.encode(encode_png(&clipped)?),
        psnr_db,
        ssim: ssim_value,
        n_am: [trace.n_am_g, trace.n_am_p],
        path_mask: mask,
        dynamic_gflops: trace.dynamic_flops / 1e9,
        static_gflops: trace.static_flops / 1e9,
        model_id: model.id.clone(),
        encoding: modulation.bitstring(),
        mu: modulation.mu().or(req.mu),
    })
}

/// Capability document for the client.
pub fn presets(state: &AppState) -> PresetsResponse {
    let first = state.registry.models().next().map(|m| &m.checkpoint.meta);
    PresetsResponse {
        ratios: state.registry.models().map(|m| m.checkpoint.meta.ratio).collect(),
        mu_values: first.map(|m| m.mu_set.clone()).unwrap_or_default(),
        stages: first.map_or(0, |m| m.stages),
        channels: first.map_or(0, |m| m.channels),
        encoding_len: first.map_or(0, |m| m.encoding_len),
        model_ids: state.registry.models().map(|m| m.id.clone()).collect(),
        max_pixels: state.max_pixels,
    }
}

async fn reconstruct_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let start = Instant::now();
    let req: ReconstructRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return ApiError::bad_request(format!("malformed request: {e}")).into_response(),
    };
    let result = tokio::task::spawn_blocking(move || reconstruct(&state, &req)).await;
    let mut response = match result {
        Ok(Ok(body)) => Json(body).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    };
    let ms = format!("{:.3}", start.elapsed().as_secs_f64() * 1e3);
    response
        .headers_mut()
        .insert(LATENCY_HEADER, HeaderValue::from_str(&ms).expect("ascii header"));
    response
}

async fn presets_handler(State(state): State<Arc<AppState>>) -> Json<PresetsResponse> {
    Json(presets(&state))
}

pub fn router(state: Arc<AppState>) -> Router {
    let body_limit = state.max_pixels.saturating_mul(24).max(1 << 20);
    Router::new()
        .route("/reconstruct", post(reconstruct_handler))
        .route("/presets", get(presets_handler))
        .layer(DefaultBodyLimit::max(body_limit))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds `addr` and serves until interrupted.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
