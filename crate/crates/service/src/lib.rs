//! HTTP editing service over a trained checkpoint.
//!
//! Every edit decodes into a new immutable session whose parent is the edited
//! code, so undo is re-referencing the parent. Inference runs on a blocking
//! thread against a single shared model.

mod error;
mod sessions;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path as UrlPath, Request, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use facecomp_core::checkpoint::{load_checkpoint, CheckpointError, Manifest};
use facecomp_core::code::{FaceCode, LayeredCode};
use facecomp_core::geometry::ComponentId;
use facecomp_core::imaging::Image;
use facecomp_core::networks::FaceModel;
use facecomp_core::reasoning::{
    dataset_hash, direction_meandiff, direction_svm, edit_attribute, intervene_zero, pca_edit, transfer_components,
    AttributeDirection, LevelRange, PcaBasis, SvmOptions,
};
use facecomp_core::sprites::{load_folder, split_indices, LabeledImage, SpriteError};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;

pub use error::ApiError;
pub use sessions::{Lookup, Session, SessionStore};

pub const DEFAULT_SESSION_CAPACITY: usize = 1000;
pub const PCA_PREFIX: &str = "pca_";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub checkpoint: PathBuf,
    /// Images served by `/images` and used to fit directions.
    pub dataset: Option<PathBuf>,
    /// Directory of direction and PCA JSON files; defaults to
    /// `<checkpoint parent>/directions`.
    pub sidecar_dir: Option<PathBuf>,
    pub session_dir: Option<PathBuf>,
    pub session_capacity: usize,
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
}

impl ServiceConfig {
    pub fn new(checkpoint: impl Into<PathBuf>) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            dataset: None,
            sidecar_dir: None,
            session_dir: None,
            session_capacity: DEFAULT_SESSION_CAPACITY,
            split_ratios: [0.9, 0.05, 0.05],
            split_seed: 0,
        }
    }

    fn sidecar(&self) -> PathBuf {
        self.sidecar_dir.clone().unwrap_or_else(|| {
            self.checkpoint
                .parent()
                .map(|p| p.join("directions"))
                .unwrap_or_else(|| PathBuf::from("directions"))
        })
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot load checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("cannot load dataset: {0}")]
    Dataset(#[from] SpriteError),
    #[error("bad sidecar file {path}: {detail}")]
    Sidecar { path: PathBuf, detail: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

struct Inner {
    model: Arc<Mutex<FaceModel>>,
    manifest: Manifest,
    checkpoint_id: String,
    sessions: Mutex<SessionStore>,
    directions: RwLock<BTreeMap<String, AttributeDirection>>,
    pca: RwLock<BTreeMap<ComponentId, PcaBasis>>,
    images: Arc<Vec<LabeledImage>>,
    sidecar: PathBuf,
    split_ratios: [f64; 3],
    split_seed: u64,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Load the checkpoint, dataset and sidecar files.
    pub fn load(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let loaded = load_checkpoint(&config.checkpoint).map_err(|source| ServiceError::Checkpoint {
            path: config.checkpoint.clone(),
            source,
        })?;
        let manifest = loaded.manifest;
        let checkpoint_id = manifest
            .blobs
            .iter()
            .find(|b| b.file == facecomp_core::checkpoint::GENERATOR_BLOB)
            .map(|b| b.sha256.clone())
            .unwrap_or_else(|| manifest.config_hash.clone());
        let res = manifest.config.image_resolution();
        let images = match &config.dataset {
            Some(d) => load_folder(d, res)?,
            None => Vec::new(),
        };
        let sidecar = config.sidecar();
        let (directions, pca) = load_sidecar(&sidecar)?;
        tracing::info!(
            "loaded checkpoint {} (iteration {}), {} images, {} directions, {} PCA bases",
            config.checkpoint.display(),
            manifest.iteration,
            images.len(),
            directions.len(),
            pca.len()
        );
        Ok(Self(Arc::new(Inner {
            model: Arc::new(Mutex::new(loaded.model)),
            manifest,
            checkpoint_id,
            sessions: Mutex::new(SessionStore::new(config.session_capacity, config.session_dir.clone())?),
            directions: RwLock::new(directions),
            pca: RwLock::new(pca),
            images: Arc::new(images),
            sidecar,
            split_ratios: config.split_ratios,
            split_seed: config.split_seed,
        })))
    }

    pub fn manifest(&self) -> &Manifest {
        &self.0.manifest
    }
}

type Sidecar = (BTreeMap<String, AttributeDirection>, BTreeMap<ComponentId, PcaBasis>);

fn load_sidecar(dir: &Path) -> Result<Sidecar, ServiceError> {
    let mut directions = BTreeMap::new();
    let mut pca = BTreeMap::new();
    if !dir.is_dir() {
        return Ok((directions, pca));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for path in paths {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let bad = |detail: String| ServiceError::Sidecar {
            path: path.clone(),
            detail,
        };
        if stem.starts_with(PCA_PREFIX) {
            let b = PcaBasis::load(&path).map_err(|e| bad(e.to_string()))?;
            pca.insert(b.component, b);
        } else {
            let d = AttributeDirection::load(&path).map_err(|e| bad(e.to_string()))?;
            directions.insert(d.name.clone(), d);
        }
    }
    Ok((directions, pca))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/images", get(images))
        .route("/api/encode", post(encode))
        .route("/api/edit/attribute", post(edit_attr))
        .route("/api/edit/transfer", post(edit_transfer))
        .route("/api/edit/pca", post(edit_pca))
        .route("/api/edit/zero", post(edit_zero))
        .route("/api/directions", get(list_directions).post(fit_direction))
        .route("/api/pca/{component}", get(get_pca))
        .route("/api/code/{code_id}", get(get_code))
        .fallback(|| async { ApiError::not_found("not_found", "no such endpoint") })
        .with_state(state)
}

/// Load everything, bind and serve until ctrl-c.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> Result<(), ServiceError> {
    let state = AppState::load(&config)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// JSON body extractor whose rejections use the API error format.
pub struct ApiJson<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for ApiJson<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Self(v)),
            Err(JsonRejection::MissingJsonContentType(e)) => Err(ApiError::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                "unsupported_media_type",
                e.body_text(),
            )),
            Err(e) => Err(ApiError::invalid("invalid_request", e.body_text())),
        }
    }
}

async fn with_model<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&FaceModel) -> Result<T, ApiError> + Send + 'static,
{
    let model = state.0.model.clone();
    tokio::task::spawn_blocking(move || {
        let guard = model.lock().map_err(|_| ApiError::internal("model lock poisoned"))?;
        f(&guard)
    })
    .await
    .map_err(|e| ApiError::internal(format!("inference task failed: {e}")))?
}

fn png_base64(img: &Image) -> Result<String, ApiError> {
    Ok(B64.encode(img.to_png_bytes().map_err(|e| ApiError::internal(e.to_string()))?))
}

fn decode_layered(model: &FaceModel, code: &LayeredCode) -> Result<Image, ApiError> {
    let uniform = code.layers.windows(2).all(|w| w[0] == w[1]);
    Ok(if uniform {
        model.decode(&FaceCode {
            icon: code.icon.clone(),
            components: code.layers[0].clone(),
        })?
    } else {
        model.decode_layered(code)?
    })
}

fn session(state: &AppState, id: &str) -> Result<Arc<Session>, ApiError> {
    let mut store = state.0.sessions.lock().map_err(|_| ApiError::internal("session lock poisoned"))?;
    store.get(id).map_err(|e| match e {
        Lookup::Expired => ApiError::new(StatusCode::GONE, "expired_session", format!("code {id} was evicted")),
        Lookup::Missing => ApiError::not_found("unknown_code", format!("no code {id}")),
    })
}

/// Decode `code`, store it as a child of `parent` and build the response.
async fn commit(state: &AppState, code: LayeredCode, parent: Option<Arc<Session>>, operation: Value) -> Result<Json<Value>, ApiError> {
    let for_decode = code.clone();
    let img = with_model(state, move |m| decode_layered(m, &for_decode)).await?;
    let png = png_base64(&img)?;
    let child = state
        .0
        .sessions
        .lock()
        .map_err(|_| ApiError::internal("session lock poisoned"))?
        .insert(code, parent.as_deref(), operation);
    Ok(Json(json!({
        "code_id": child.code_id,
        "image_png_base64": png,
        "preview_png_base64": png,
        "lineage": child.lineage,
    })))
}

fn map_layers(s: &Session, f: impl Fn(&FaceCode) -> Result<FaceCode, ApiError>) -> Result<LayeredCode, ApiError> {
    let layers = (0..s.code.layers.len())
        .map(|k| f(&s.layer(k)).map(|c| c.components))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LayeredCode {
        icon: s.code.icon.clone(),
        layers,
    })
}

fn parse_components(names: &[String], allow_empty: bool) -> Result<Vec<ComponentId>, ApiError> {
    if names.is_empty() && !allow_empty {
        return Err(ApiError::invalid("invalid_components", "at least one component is required"));
    }
    let mut out = Vec::new();
    for n in names {
        let c: ComponentId = n
            .parse()
            .map_err(|_| ApiError::invalid("invalid_components", format!("unknown component `{n}`")))?;
        if !out.contains(&c) {
            out.push(c);
        }
    }
    Ok(out)
}

fn finite(name: &'static str, v: f64) -> Result<f64, ApiError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ApiError::invalid(name, format!("{name} must be finite")))
    }
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    let m = &state.0.manifest;
    Json(json!({
        "status": "ok",
        "checkpoint": state.0.checkpoint_id,
        "mode": m.config.decoder.mode.as_str(),
        "resolution": m.config.image_resolution(),
        "iteration": m.iteration,
        "num_layers": m.config.num_styled_layers(),
    }))
}

async fn images(State(state): State<AppState>) -> Result<Json<Value>, ApiError> {
    let list = state
        .0
        .images
        .iter()
        .enumerate()
        .map(|(id, item)| {
            Ok(json!({
                "id": id,
                "name": item.name,
                "labels": item.labels,
                "thumbnail_png_base64": png_base64(&item.pixels)?,
            }))
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    Ok(Json(Value::Array(list)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodeRequest {
    image_id: Option<usize>,
    png_base64: Option<String>,
}

async fn encode(State(state): State<AppState>, ApiJson(req): ApiJson<EncodeRequest>) -> Result<Json<Value>, ApiError> {
    let res = state.0.manifest.config.image_resolution();
    let (image, source) = match (req.image_id, req.png_base64) {
        (Some(id), None) => {
            let item = state
                .0
                .images
                .get(id)
                .ok_or_else(|| ApiError::not_found("unknown_image", format!("no image {id}")))?;
            (item.pixels.clone(), json!({ "image_id": id, "name": item.name }))
        }
        (None, Some(b64)) => {
            let bytes = B64
                .decode(b64.trim())
                .map_err(|e| ApiError::invalid("invalid_image", format!("bad base64: {e}")))?;
            (Image::from_png_bytes(&bytes, Some(res))?, json!({ "upload": true }))
        }
        _ => return Err(ApiError::invalid("invalid_request", "give exactly one of image_id and png_base64")),
    };
    let n = state.0.manifest.config.num_styled_layers();
    let code = with_model(&state, move |m| Ok(m.encode(&image)?)).await?;
    commit(&state, LayeredCode::uniform(&code, n), None, json!({ "op": "encode", "source": source })).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AttributeRequest {
    code_id: String,
    direction_id: String,
    alpha: f64,
}

async fn edit_attr(State(state): State<AppState>, ApiJson(req): ApiJson<AttributeRequest>) -> Result<Json<Value>, ApiError> {
    let alpha = finite("invalid_alpha", req.alpha)?;
    let parent = session(&state, &req.code_id)?;
    let dir = state
        .0
        .directions
        .read()
        .map_err(|_| ApiError::internal("direction lock poisoned"))?
        .get(&req.direction_id)
        .cloned()
        .ok_or_else(|| ApiError::not_found("unknown_direction", format!("no direction `{}`", req.direction_id)))?;
    let code = map_layers(&parent, |c| Ok(edit_attribute(c, &dir, alpha)?))?;
    let op = json!({ "op": "attribute", "direction_id": req.direction_id, "alpha": alpha });
    commit(&state, code, Some(parent), op).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TransferRequest {
    target_code_id: String,
    reference_code_id: String,
    components: Vec<String>,
    level_range: Option<String>,
}

async fn edit_transfer(State(state): State<AppState>, ApiJson(req): ApiJson<TransferRequest>) -> Result<Json<Value>, ApiError> {
    let comps = parse_components(&req.components, false)?;
    let range = match &req.level_range {
        None => None,
        Some(s) => Some(
            s.parse::<LevelRange>()
                .map_err(|e| ApiError::invalid("invalid_level_range", e.to_string()))?,
        ),
    };
    let target = session(&state, &req.target_code_id)?;
    let reference = session(&state, &req.reference_code_id)?;
    let layers = range.unwrap_or(LevelRange::All).layers(&state.0.manifest.config);
    let mut code = target.code.clone();
    for k in layers {
        code.layers[k] = transfer_components(&target.layer(k), &reference.layer(k), &comps)?.components;
    }
    let op = json!({
        "op": "transfer",
        "reference_code_id": req.reference_code_id,
        "components": comps,
        "level_range": range,
    });
    commit(&state, code, Some(target), op).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PcaRequest {
    code_id: String,
    component: String,
    index: usize,
    delta: f64,
}

async fn edit_pca(State(state): State<AppState>, ApiJson(req): ApiJson<PcaRequest>) -> Result<Json<Value>, ApiError> {
    let delta = finite("invalid_delta", req.delta)?;
    let comp = parse_components(std::slice::from_ref(&req.component), false)?[0];
    let parent = session(&state, &req.code_id)?;
    let basis = pca_basis(&state, comp)?;
    if req.index >= basis.k() {
        return Err(ApiError::invalid(
            "invalid_index",
            format!("index {} out of range for {} directions", req.index, basis.k()),
        ));
    }
    let code = map_layers(&parent, |c| Ok(pca_edit(c, &basis, req.index, delta)?))?;
    let op = json!({ "op": "pca", "component": comp, "index": req.index, "delta": delta });
    commit(&state, code, Some(parent), op).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ZeroRequest {
    code_id: String,
    components: Vec<String>,
}

async fn edit_zero(State(state): State<AppState>, ApiJson(req): ApiJson<ZeroRequest>) -> Result<Json<Value>, ApiError> {
    let comps = parse_components(&req.components, true)?;
    let parent = session(&state, &req.code_id)?;
    let code = map_layers(&parent, |c| Ok(intervene_zero(c, &comps)))?;
    commit(&state, code, Some(parent), json!({ "op": "zero", "components": comps })).await
}

fn direction_summary(d: &AttributeDirection) -> Value {
    json!({
        "id": d.name,
        "name": d.name,
        "method": d.to_json()["method"],
        "relevant_components": d.relevant,
        "norm": d.norm,
        "block_norms": ComponentId::ALL.iter().map(|&c| (c.name(), d.block_norm(c))).collect::<BTreeMap<_, _>>(),
        "source_dataset_hash": d.source_dataset_hash,
    })
}

async fn list_directions(State(state): State<AppState>) -> Result<Json<Value>, ApiError> {
    let dirs = state.0.directions.read().map_err(|_| ApiError::internal("direction lock poisoned"))?;
    Ok(Json(Value::Array(dirs.values().map(direction_summary).collect())))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DirectionRequest {
    name: String,
    method: String,
    relevant_components: Vec<String>,
    dataset_split: String,
    /// Label column; defaults to `name`.
    attribute: Option<String>,
    /// Box constraint for the SVM; hard margin when absent.
    c: Option<f64>,
}

async fn fit_direction(State(state): State<AppState>, ApiJson(req): ApiJson<DirectionRequest>) -> Result<Json<Value>, ApiError> {
    if req.name.is_empty() || !req.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-') {
        return Err(ApiError::invalid("invalid_name", "names use letters, digits, '_' and '-'"));
    }
    let relevant = parse_components(&req.relevant_components, false)?.into_iter().collect();
    let images = state.0.images.clone();
    if images.is_empty() {
        return Err(ApiError::new(StatusCode::CONFLICT, "no_dataset", "the service was started without a dataset"));
    }
    let split = split_indices(images.len(), state.0.split_ratios, state.0.split_seed)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let pool: Vec<usize> = match req.dataset_split.as_str() {
        "train" => split.train,
        "val" => split.val,
        "test" => split.test,
        "all" => (0..images.len()).collect(),
        other => return Err(ApiError::invalid("invalid_split", format!("unknown split `{other}` (train, val, test, all)"))),
    };
    let attribute = req.attribute.clone().unwrap_or_else(|| req.name.clone());
    let (idx, labels): (Vec<usize>, Vec<i8>) = pool
        .into_iter()
        .filter_map(|i| images[i].labels.get(&attribute).map(|&l| (i, l)))
        .unzip();
    if !labels.contains(&1) || !labels.contains(&-1) {
        return Err(ApiError::invalid(
            "single_class",
            format!("split `{}` has no two-class labels for `{attribute}`", req.dataset_split),
        ));
    }
    let codes = with_model(&state, move |m| {
        let refs: Vec<&Image> = idx.iter().map(|&i| &images[i].pixels).collect();
        Ok(m.encode_batch(&refs)?)
    })
    .await?;
    let name = req.name.clone();
    let method = req.method.clone();
    let c = req.c;
    let dir = tokio::task::spawn_blocking(move || -> Result<AttributeDirection, ApiError> {
        let d = match method.as_str() {
            "meandiff" => direction_meandiff(&name, &codes, &labels, &relevant)?,
            "svm" => direction_svm(&name, &codes, &labels, &relevant, &SvmOptions { c, ..Default::default() })?,
            other => return Err(ApiError::invalid("invalid_method", format!("unknown method `{other}` (meandiff, svm)"))),
        };
        Ok(d.with_dataset_hash(dataset_hash(&codes)))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;

    std::fs::create_dir_all(&state.0.sidecar).map_err(|e| ApiError::internal(e.to_string()))?;
    dir.save(&state.0.sidecar.join(format!("{}.json", dir.name)))
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let summary = direction_summary(&dir);
    state
        .0
        .directions
        .write()
        .map_err(|_| ApiError::internal("direction lock poisoned"))?
        .insert(dir.name.clone(), dir);
    Ok(Json(summary))
}

fn pca_basis(state: &AppState, comp: ComponentId) -> Result<PcaBasis, ApiError> {
    state
        .0
        .pca
        .read()
        .map_err(|_| ApiError::internal("pca lock poisoned"))?
        .get(&comp)
        .cloned()
        .ok_or_else(|| {
            ApiError::not_found(
                "missing_pca_basis",
                format!("no PCA basis for {comp}; fit one with `facecomp pca`"),
            )
        })
}

async fn get_pca(State(state): State<AppState>, UrlPath(component): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let comp = parse_components(std::slice::from_ref(&component), false)?[0];
    let b = pca_basis(&state, comp)?;
    Ok(Json(json!({
        "component": comp,
        "k": b.k(),
        "variances": b.variances,
    })))
}

async fn get_code(State(state): State<AppState>, UrlPath(code_id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    Ok(Json(session(&state, &code_id)?.to_json()))
}
