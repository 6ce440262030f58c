//! JSON-over-HTTP explanation service.
//!
//! Routes:
//! - `GET /api/classes` -> `[{id, name}]`
//! - `POST /api/classify` -> top-k probabilities for a base64 PNG
//! - `POST /api/explain` -> mask, preserved/destroyed renderings, salient crop and metric
//!
//! Errors are always `{code, message}` with a 4xx/5xx status.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::blackbox::{classify, Classifier};
use crate::error::Error;
use crate::eval::{crop_for_classifier, salient_crop, saliency_metric, BBox, DEFAULT_THRESHOLD};
use crate::evidence::{apply_mask_image, make_alternative, AlternativeMode, AlternativeSpec};
use crate::image::Image;
use crate::masker::MaskSource;

/// Environment variable holding the default port for `serve`.
pub const PORT_ENV: &str = "FASTSAL_PORT";
pub const DEFAULT_PORT: u16 = 8080;
/// Default limit on the decoded PNG size.
pub const DEFAULT_MAX_IMAGE_BYTES: usize = 4 * 1024 * 1024;

pub fn default_port() -> u16 {
    std::env::var(PORT_ENV).ok().and_then(|v| v.parse().ok()).unwrap_or(DEFAULT_PORT)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainRequest {
    /// Base64-encoded PNG.
    pub image: String,
    #[serde(default)]
    pub class_id: Option<i64>,
    #[serde(default)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainResponse {
    pub class_id: usize,
    pub class_name: String,
    pub width: usize,
    pub height: usize,
    pub threshold: f64,
    /// 8-bit grayscale PNG, `round(mask * 255)`.
    pub mask: String,
    /// The image with everything outside the mask blurred away.
    pub preserved: String,
    /// The image with the masked region blurred away.
    pub destroyed: String,
    pub crop: BBox,
    /// False when nothing exceeded the threshold and the whole image was used.
    pub crop_found: bool,
    pub area_fraction: f64,
    pub saliency_metric: f64,
    pub class_prob_full: f64,
    pub class_prob_crop: f64,
    pub timing_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub image: String,
    #[serde(default)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub id: usize,
    pub name: String,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub top: Vec<ClassScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
}

/// A structured API error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status: status.as_u16(), code: code.into(), message: message.into() }
    }

    fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn unprocessable(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Image(_) | Error::Format(_) => Self::bad_request("invalid_image", "image could not be decoded"),
            Error::Contract(m) | Error::Config(m) => Self::unprocessable("invalid_request", m),
            other => {
                tracing::error!("request failed: {other}");
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "internal error")
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

/// Models and limits shared by all requests. Read-only.
pub struct ServiceState {
    pub masker: Arc<dyn MaskSource>,
    pub model: Arc<dyn Classifier>,
    pub class_names: Vec<String>,
    pub max_image_bytes: usize,
}

impl ServiceState {
    pub fn new(masker: Arc<dyn MaskSource>, model: Arc<dyn Classifier>, class_names: Vec<String>) -> crate::Result<Self> {
        if masker.input_size() != model.input_size() || masker.num_classes() != model.num_classes() {
            return Err(Error::Config(format!(
                "masker ({:?}, {} classes) and classifier ({:?}, {} classes) disagree",
                masker.input_size(),
                masker.num_classes(),
                model.input_size(),
                model.num_classes()
            )));
        }
        if class_names.len() != model.num_classes() {
            return Err(Error::Config("one class name per class is required".into()));
        }
        Ok(Self { masker, model, class_names, max_image_bytes: DEFAULT_MAX_IMAGE_BYTES })
    }

    pub fn with_max_image_bytes(mut self, n: usize) -> Self {
        self.max_image_bytes = n;
        self
    }
}

fn decode_image(b64: &str, limit: usize) -> Result<Image, ApiError> {
    // base64 is 4/3 the decoded size
    if b64.len() / 4 * 3 > limit + 3 {
        return Err(too_large(limit));
    }
    let bytes = STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::bad_request("invalid_image", format!("image is not valid base64: {e}")))?;
    if bytes.len() > limit {
        return Err(too_large(limit));
    }
    Ok(Image::decode(&bytes)?)
}

fn too_large(limit: usize) -> ApiError {
    ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "image_too_large", format!("image exceeds {limit} bytes"))
}

fn png_b64(bytes: crate::Result<Vec<u8>>) -> Result<String, ApiError> {
    Ok(STANDARD.encode(bytes?))
}

fn class_index(id: i64, k: usize) -> Result<usize, ApiError> {
    if id < 0 || id as u64 >= k as u64 {
        return Err(ApiError::unprocessable("class_out_of_range", format!("class_id {id} outside [0, {k})")));
    }
    Ok(id as usize)
}

/// Explains one image: one masker pass and exactly two classifier calls
/// (full image, then the salient crop).
pub fn handle_explain(req: &ExplainRequest, state: &ServiceState) -> Result<ExplainResponse, ApiError> {
    let start = Instant::now();
    let threshold = req.threshold.unwrap_or(DEFAULT_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ApiError::unprocessable("invalid_threshold", format!("threshold {threshold} outside [0, 1]")));
    }
    let k = state.model.num_classes();
    let requested = req.class_id.map(|c| class_index(c, k)).transpose()?;
    let image = decode_image(&req.image, state.max_image_bytes)?;
    let (h, w) = image.dims();
    let input = state.model.input_size();
    let resized = if (h, w) == input { image.clone() } else { image.resize(input.0, input.1) };

    let full = classify(state.model.as_ref(), &[&resized])?.remove(0);
    let class = requested.unwrap_or_else(|| full.argmax());

    let mask = state.masker.mask(&resized, class)?;
    let mask = if (h, w) == input { mask } else { mask.resize(h, w) };
    let found = salient_crop(&mask, threshold);
    let crop = found.unwrap_or(BBox::full(h, w));
    let crop_img = crop_for_classifier(&image, &crop, input)?;
    let crop_prob = classify(state.model.as_ref(), &[&crop_img])?.remove(0).get(class);

    let alt = make_alternative(&image, &AlternativeSpec::for_height(AlternativeMode::Blur, h, 0))?;
    let preserved = apply_mask_image(&image, &mask, &alt)?;
    let destroyed = apply_mask_image(&image, &mask.inverted(), &alt)?;
    let area_fraction = crop.area_fraction(h, w);
    Ok(ExplainResponse {
        class_id: class,
        class_name: state.class_names[class].clone(),
        width: w,
        height: h,
        threshold,
        mask: png_b64(mask.encode_png())?,
        preserved: png_b64(preserved.encode_png())?,
        destroyed: png_b64(destroyed.encode_png())?,
        crop,
        crop_found: found.is_some(),
        area_fraction,
        saliency_metric: saliency_metric(area_fraction, crop_prob),
        class_prob_full: full.get(class),
        class_prob_crop: crop_prob,
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

pub fn handle_classify(req: &ClassifyRequest, state: &ServiceState) -> Result<ClassifyResponse, ApiError> {
    let image = decode_image(&req.image, state.max_image_bytes)?;
    let input = state.model.input_size();
    let resized = if image.dims() == input { image } else { image.resize(input.0, input.1) };
    let probs = classify(state.model.as_ref(), &[&resized])?.remove(0);
    let k = req.top_k.unwrap_or(5).max(1);
    let top = probs
        .top_k(k)
        .into_iter()
        .map(|(id, prob)| ClassScore { id, name: state.class_names[id].clone(), prob })
        .collect();
    Ok(ClassifyResponse { top })
}

fn parse_json<T: serde::de::DeserializeOwned>(body: Result<Bytes, BytesRejection>, limit: usize) -> Result<T, ApiError> {
    let body = body.map_err(|e| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            too_large(limit)
        } else {
            ApiError::bad_request("bad_body", e.body_text())
        }
    })?;
    serde_json::from_slice(&body).map_err(|e| ApiError::bad_request("malformed_json", e.to_string()))
}

async fn compute<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "internal error"))?
}

async fn classes(State(state): State<Arc<ServiceState>>) -> Json<Vec<ClassInfo>> {
    Json(
        state
            .class_names
            .iter()
            .enumerate()
            .map(|(id, name)| ClassInfo { id, name: name.clone() })
            .collect(),
    )
}

async fn classify_route(
    State(state): State<Arc<ServiceState>>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<ClassifyResponse>, ApiError> {
    let req: ClassifyRequest = parse_json(body, state.max_image_bytes)?;
    Ok(Json(compute(move || handle_classify(&req, &state)).await?))
}

async fn explain_route(
    State(state): State<Arc<ServiceState>>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<ExplainResponse>, ApiError> {
    let req: ExplainRequest = parse_json(body, state.max_image_bytes)?;
    Ok(Json(compute(move || handle_explain(&req, &state)).await?))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

pub fn router(state: Arc<ServiceState>) -> Router {
    // base64 inflates by 4/3; leave room for the JSON envelope
    let body_limit = state.max_image_bytes / 3 * 4 + 64 * 1024;
    Router::new()
        .route("/api/classes", get(classes))
        .route("/api/classify", post(classify_route))
        .route("/api/explain", post(explain_route))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

pub async fn serve(state: Arc<ServiceState>, addr: SocketAddr) -> crate::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
