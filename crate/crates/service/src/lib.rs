//! Read-only HTTP service over a trained scene: renders, geometry channels, open-vocabulary
//! queries and mesh download.

mod colormap;
mod snapshot;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use base64::Engine;
use gls_core::query::{self, QueryEmbedding};
use gls_core::{Camera, GlsError, Image};
use nalgebra::{Matrix3, Vector3};
use serde::Serialize;
use sha2::{Digest, Sha256};
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

pub use colormap::turbo;
pub use snapshot::SceneSnapshot;

pub const DEFAULT_FOV_DEG: f64 = 50.0;
pub const DEFAULT_SIZE: usize = 256;
pub const MAX_SIZE: usize = 2048;
pub const HISTOGRAM_BINS: usize = 20;
/// Pixels at or below this alpha are drawn black in the geometry and attention channels.
pub const COVERAGE_ALPHA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Color,
    Depth,
    Normal,
    Attention,
}

impl std::str::FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "color" => Ok(Channel::Color),
            "depth" => Ok(Channel::Depth),
            "normal" => Ok(Channel::Normal),
            "attention" => Ok(Channel::Attention),
            other => Err(format!("unknown channel {other:?} (expected color, depth, normal or attention)")),
        }
    }
}

/// An error with its HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad_request(m: impl Into<String>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, message: m.into() }
    }

    fn not_found(m: impl Into<String>) -> Self {
        ApiError { status: StatusCode::NOT_FOUND, message: m.into() }
    }

    fn internal(m: impl Into<String>) -> Self {
        ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message: m.into() }
    }
}

impl From<GlsError> for ApiError {
    fn from(e: GlsError) -> Self {
        ApiError::internal(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;
type Params = BTreeMap<String, String>;

/// Camera from a row-major 3×4 world-to-camera matrix and a horizontal field of view.
pub fn camera_from_pose(pose: &[f64; 12], fov_deg: f64, width: usize, height: usize) -> Result<Camera, String> {
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(format!("fov must lie in (0, 180) degrees, got {fov_deg}"));
    }
    if width == 0 || height == 0 || width > MAX_SIZE || height > MAX_SIZE {
        return Err(format!("image size must be between 1 and {MAX_SIZE}, got {width}x{height}"));
    }
    let rotation = Matrix3::new(pose[0], pose[1], pose[2], pose[4], pose[5], pose[6], pose[8], pose[9], pose[10]);
    let translation = Vector3::new(pose[3], pose[7], pose[11]);
    let f = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
    let camera = Camera {
        fx: f,
        fy: f,
        cx: (width as f64 - 1.0) * 0.5,
        cy: (height as f64 - 1.0) * 0.5,
        width,
        height,
        rotation,
        translation,
        near: 0.01,
        far: 1000.0,
    };
    camera.validate().map_err(|e| e.to_string())?;
    Ok(camera)
}

/// The row-major 3×4 pose of `camera` and its horizontal field of view in degrees.
pub fn pose_of(camera: &Camera) -> ([f64; 12], f64) {
    let (r, t) = (&camera.rotation, &camera.translation);
    let mut pose = [0.0; 12];
    for row in 0..3 {
        for col in 0..3 {
            pose[row * 4 + col] = r[(row, col)];
        }
        pose[row * 4 + 3] = t[row];
    }
    let fov = 2.0 * (camera.width as f64 / 2.0 / camera.fx).atan().to_degrees();
    (pose, fov)
}

fn parse_pose(s: &str) -> Result<[f64; 12], String> {
    let values: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| format!("pose entry {v:?} is not a number")))
        .collect::<Result<_, _>>()?;
    if values.len() != 12 || values.iter().any(|v| !v.is_finite()) {
        return Err(format!("pose needs 12 finite comma-separated numbers, got {}", values.len()));
    }
    let mut pose = [0.0; 12];
    pose.copy_from_slice(&values);
    Ok(pose)
}

fn param<T: std::str::FromStr>(params: &Params, key: &str) -> Result<Option<T>, ApiError> {
    match params.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse::<T>()
            .map(Some)
            .map_err(|_| ApiError::bad_request(format!("cannot parse {key}={v:?}"))),
    }
}

fn threshold_param(params: &Params) -> Result<Option<f64>, ApiError> {
    let t: Option<f64> = param(params, "threshold")?;
    if let Some(t) = t {
        if !(-1.0..=1.0).contains(&t) {
            return Err(ApiError::bad_request(format!("threshold must lie in [-1, 1], got {t}")));
        }
    }
    Ok(t)
}

fn lookup_query(snap: &SceneSnapshot, name: &str) -> Result<QueryEmbedding, ApiError> {
    snap.query(name).ok_or_else(|| ApiError::not_found(format!("unknown query {name:?}")))
}

/// Per-pixel cosine between the rendered feature and the query (0 where nothing was blended).
pub fn attention_values(snap: &SceneSnapshot, camera: &Camera, q: &QueryEmbedding) -> gls_core::Result<Image> {
    let out = gls_core::raster::render(&snap.scene, camera)?;
    query::attention_map(&out, q)
}

/// Renders one display channel as an RGB image in [0, 1]. With a threshold, only the primitives
/// the query selects are rendered.
pub fn render_channel(snap: &SceneSnapshot, camera: &Camera, channel: Channel, q: Option<&QueryEmbedding>, threshold: Option<f64>) -> gls_core::Result<Image> {
    let subset;
    let scene = match (q, threshold) {
        (Some(q), Some(t)) => {
            subset = snap.scene.subset(&query::select(&snap.scene, q, t)?.indices);
            &subset
        }
        _ => &snap.scene,
    };
    let out = gls_core::raster::render(scene, camera)?;
    let (w, h) = (camera.width, camera.height);
    let covered = |p: usize| out.alpha.data[p] > COVERAGE_ALPHA;
    let mut img = Image::zeros(w, h, 3);
    match channel {
        Channel::Color => img = out.color.clone(),
        Channel::Normal => {
            for (o, n) in img.data.iter_mut().zip(&out.normal.data) {
                *o = n * 0.5 + 0.5;
            }
        }
        Channel::Depth => {
            let z = out.unbiased_z_depth();
            let valid: Vec<f64> = (0..w * h).filter(|&p| covered(p)).map(|p| z.data[p]).collect();
            let lo = valid.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = valid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-9);
            for p in (0..w * h).filter(|&p| covered(p)) {
                img.data[3 * p..3 * p + 3].copy_from_slice(&turbo((z.data[p] - lo) / span));
            }
        }
        Channel::Attention => {
            let q = q.ok_or_else(|| GlsError::InvalidParameter("the attention channel needs a query".into()))?;
            let att = query::attention_map(&out, q)?;
            for p in (0..w * h).filter(|&p| covered(p)) {
                img.data[3 * p..3 * p + 3].copy_from_slice(&turbo((att.data[p] + 1.0) / 2.0));
            }
        }
    }
    Ok(img)
}

/// Deterministic tag of the snapshot and the canonical (sorted) request parameters.
pub fn etag(snapshot_hash: &str, path: &str, params: &Params) -> String {
    let mut h = Sha256::new();
    h.update(snapshot_hash.as_bytes());
    h.update(b"\n");
    h.update(path.as_bytes());
    for (k, v) in params {
        h.update(b"\n");
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
    }
    format!("\"{}\"", hex::encode(&h.finalize()[..16]))
}

fn respond(headers: &HeaderMap, tag: String, content_type: &'static str, body: Vec<u8>) -> Response {
    let not_modified = headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == tag));
    let tag = HeaderValue::from_str(&tag).expect("hex etag");
    if not_modified {
        return (StatusCode::NOT_MODIFIED, [(header::ETAG, tag)]).into_response();
    }
    (StatusCode::OK, [(header::CONTENT_TYPE, HeaderValue::from_static(content_type)), (header::ETAG, tag)], body).into_response()
}

fn json_body(v: &impl Serialize) -> Result<Vec<u8>, ApiError> {
    serde_json::to_vec(v).map_err(|e| ApiError::internal(e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

#[derive(Serialize)]
struct ViewInfo {
    pose: [f64; 12],
    fov_deg: f64,
    width: usize,
    height: usize,
}

#[derive(Serialize)]
struct Info<'a> {
    snapshot: &'a str,
    primitives: usize,
    feature_dim: usize,
    sh_degree: usize,
    classes: usize,
    class_names: &'a BTreeMap<u16, String>,
    palette: Vec<&'a str>,
    views: Vec<ViewInfo>,
    has_mesh: bool,
}

async fn info(State(snap): State<Arc<SceneSnapshot>>, headers: HeaderMap, Query(params): Query<Params>) -> ApiResult {
    let body = Info {
        snapshot: snap.hash(),
        primitives: snap.scene.len(),
        feature_dim: snap.scene.feature_dim,
        sh_degree: snap.scene.sh_degree,
        classes: snap.head.classes,
        class_names: &snap.class_names,
        palette: snap.palette.keys().map(String::as_str).collect(),
        views: snap
            .cameras
            .iter()
            .map(|c| {
                let (pose, fov_deg) = pose_of(c);
                ViewInfo { pose, fov_deg, width: c.width, height: c.height }
            })
            .collect(),
        has_mesh: !snap.cameras.is_empty(),
    };
    Ok(respond(&headers, etag(snap.hash(), "/api/info", &params), "application/json", json_body(&body)?))
}

async fn render(State(snap): State<Arc<SceneSnapshot>>, headers: HeaderMap, Query(params): Query<Params>) -> ApiResult {
    let pose = parse_pose(params.get("pose").ok_or_else(|| ApiError::bad_request("missing pose"))?).map_err(ApiError::bad_request)?;
    let fov = param(&params, "fov")?.unwrap_or(DEFAULT_FOV_DEG);
    let w = param(&params, "w")?.unwrap_or(DEFAULT_SIZE);
    let h = param(&params, "h")?.unwrap_or(DEFAULT_SIZE);
    let channel: Channel = params
        .get("channel")
        .map(|c| c.parse())
        .transpose()
        .map_err(ApiError::bad_request)?
        .unwrap_or(Channel::Color);
    let camera = camera_from_pose(&pose, fov, w, h).map_err(ApiError::bad_request)?;
    let threshold = threshold_param(&params)?;
    let q = params.get("query").map(|n| lookup_query(&snap, n)).transpose()?;
    if channel == Channel::Attention && q.is_none() {
        return Err(ApiError::bad_request("the attention channel needs a query"));
    }
    if threshold.is_some() && q.is_none() {
        return Err(ApiError::bad_request("a threshold needs a query"));
    }
    let tag = etag(snap.hash(), "/api/render", &params);
    let snap2 = snap.clone();
    let png = blocking(move || {
        let img = render_channel(&snap2, &camera, channel, q.as_ref(), threshold)?;
        Ok(gls_core::io::encode_png(&img)?)
    })
    .await?;
    Ok(respond(&headers, tag, "image/png", png))
}

#[derive(Serialize)]
struct QueryResponse {
    name: String,
    threshold: f64,
    selected: usize,
    total: usize,
    /// Score counts over [-1, 1] in equal bins.
    histogram: Vec<usize>,
    view: Option<usize>,
    mask_pixels: Option<usize>,
    /// Base64 PNG of the selection mask at the stored view.
    mask_png: Option<String>,
}

async fn query_handler(State(snap): State<Arc<SceneSnapshot>>, headers: HeaderMap, Query(params): Query<Params>) -> ApiResult {
    let name = params.get("name").ok_or_else(|| ApiError::bad_request("missing name"))?.clone();
    let q = lookup_query(&snap, &name)?;
    let threshold = threshold_param(&params)?.unwrap_or(query::DEFAULT_THRESHOLD);
    let view: usize = param(&params, "view")?.unwrap_or(0);
    if !snap.cameras.is_empty() && view >= snap.cameras.len() {
        return Err(ApiError::bad_request(format!("view {view} out of range (snapshot has {})", snap.cameras.len())));
    }
    let tag = etag(snap.hash(), "/api/query", &params);
    let snap2 = snap.clone();
    let body = blocking(move || {
        let scores = query::score_gaussians(&snap2.scene, &q)?;
        let mut histogram = vec![0; HISTOGRAM_BINS];
        for s in &scores {
            let b = (((s + 1.0) / 2.0) * HISTOGRAM_BINS as f64).floor().clamp(0.0, (HISTOGRAM_BINS - 1) as f64) as usize;
            histogram[b] += 1;
        }
        let selection = query::select(&snap2.scene, &q, threshold)?;
        let (view, mask_pixels, mask_png) = match snap2.cameras.get(view) {
            Some(cam) => {
                let r = query::select_and_render(&snap2.scene, &q, threshold, std::slice::from_ref(cam))?;
                let m = &r.masks[0];
                let bytes: Vec<u8> = m.data.iter().map(|b| if *b { 255 } else { 0 }).collect();
                let png = gls_core::io::encode_gray8_png(m.width, m.height, &bytes)?;
                (Some(view), Some(m.count()), Some(base64::engine::general_purpose::STANDARD.encode(png)))
            }
            None => (None, None, None),
        };
        json_body(&QueryResponse {
            name,
            threshold,
            selected: selection.indices.len(),
            total: scores.len(),
            histogram,
            view,
            mask_pixels,
            mask_png,
        })
    })
    .await?;
    Ok(respond(&headers, tag, "application/json", body))
}

async fn mesh_handler(State(snap): State<Arc<SceneSnapshot>>, headers: HeaderMap, Query(params): Query<Params>) -> ApiResult {
    let semantic = match params.get("semantic").map(String::as_str) {
        None | Some("0") | Some("false") => false,
        Some("1") | Some("true") => true,
        Some(other) => return Err(ApiError::bad_request(format!("semantic must be 0 or 1, got {other:?}"))),
    };
    if snap.cameras.is_empty() {
        return Err(ApiError::not_found("snapshot has no views to fuse a mesh from"));
    }
    let tag = etag(snap.hash(), "/api/mesh", &params);
    let snap2 = snap.clone();
    let ply = blocking(move || snap2.mesh_ply(semantic).map_err(ApiError::internal)).await?;
    Ok(respond(&headers, tag, "application/octet-stream", ply.to_vec()))
}

/// The API routes, plus static files from `ui_dir` for everything else.
pub fn router(snapshot: Arc<SceneSnapshot>, ui_dir: Option<PathBuf>) -> Router {
    let cors = CorsLayer::new().allow_origin(Any).allow_methods([axum::http::Method::GET]).expose_headers([header::ETAG]);
    let api = Router::new()
        .route("/api/info", get(info))
        .route("/api/render", get(render))
        .route("/api/query", get(query_handler))
        .route("/api/mesh", get(mesh_handler))
        .with_state(snapshot);
    let app = match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(cors)
}

/// Serves until the process is stopped.
pub async fn serve(snapshot: Arc<SceneSnapshot>, addr: SocketAddr, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving {} primitives on http://{}", snapshot.scene.len(), listener.local_addr()?);
    axum::serve(listener, router(snapshot, ui_dir)).await
}

/// [`serve`] on a fresh multi-threaded runtime.
pub fn serve_blocking(snapshot: Arc<SceneSnapshot>, addr: SocketAddr, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()?.block_on(serve(snapshot, addr, ui_dir))
}
