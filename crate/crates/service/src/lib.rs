//! JSON HTTP API over the alignment, embedding and gallery matching pipeline.
//!
//! Every response body carries `schema_version`. Images are sent either as
//! base64 strings in a JSON body or as `image` parts of a multipart form.

mod error;
mod payload;

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::{ImageFormat, RgbImage};
use primid_core::embedding::Embedding;
use primid_core::gallery::{save_gallery, Gallery, Individual, Record, Species};
use primid_core::matcher;
use primid_core::pipeline::Recognizer;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::RwLock;
use tower_http::services::ServeDir;

pub use error::ApiError;
pub use payload::{ImageInput, Payload};

pub const SCHEMA_VERSION: u32 = 1;
pub const BODY_LIMIT: usize = 32 * 1024 * 1024;
pub const DEFAULT_K: usize = 3;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server: {0}")]
    Serve(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    /// Directory of static web assets served at unmatched paths.
    pub static_dir: Option<PathBuf>,
    /// Threshold used by `/verify` when the request does not give one.
    pub verify_threshold: f32,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            static_dir: None,
            verify_threshold: 0.5,
        }
    }
}

pub struct AppState {
    recognizer: Arc<Recognizer>,
    gallery: RwLock<Gallery>,
    gallery_path: Option<PathBuf>,
    verify_threshold: f32,
    model_hash: String,
}

impl AppState {
    /// `gallery_path`, when set, receives the gallery after every mutation.
    pub fn new(recognizer: Recognizer, gallery: Gallery, gallery_path: Option<PathBuf>, verify_threshold: f32) -> Self {
        let mut bytes = Vec::new();
        recognizer
            .model()
            .weights()
            .write_to(&mut bytes)
            .expect("writing to memory cannot fail");
        let model_hash = hex(&Sha256::digest(&bytes));
        Self {
            recognizer: Arc::new(recognizer),
            gallery: RwLock::new(gallery),
            gallery_path,
            verify_threshold,
            model_hash,
        }
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub async fn gallery_snapshot(&self) -> Gallery {
        self.gallery.read().await.clone()
    }
}

type Shared = Arc<AppState>;

pub fn router(state: Shared, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/align", post(align))
        .route("/identify", post(identify))
        .route("/verify", post(verify))
        .route("/enroll", post(enroll))
        .route("/gallery", get(gallery))
        .route("/individuals/{id}", get(individual).delete(delete_individual))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(state: Shared, config: &ServiceConfig) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: config.bind,
            source,
        })?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state, config.static_dir.as_deref())).await?;
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn reply(mut body: Value) -> Json<Value> {
    body["schema_version"] = json!(SCHEMA_VERSION);
    Json(body)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker task failed: {e}")))?
}

async fn embed_one(state: &Shared, input: ImageInput) -> Result<Embedding, ApiError> {
    let recognizer = Arc::clone(&state.recognizer);
    blocking(move || {
        let img = input.decode()?;
        let lm = input.landmark_set()?;
        Ok(recognizer.embed(&img, lm.as_ref(), &input.resolved_ref())?)
    })
    .await
}

fn species_param(raw: Option<&String>) -> Result<Option<Species>, ApiError> {
    raw.map(|s| s.parse::<Species>().map_err(|e| ApiError::bad_request(format!("species: {e}"))))
        .transpose()
}

fn individual_json(record: &Record) -> Value {
    json!({
        "individual_id": record.individual.id,
        "name": record.individual.name,
        "species": record.individual.species,
        "template_size": record.template.len(),
    })
}

async fn health(State(state): State<Shared>) -> Json<Value> {
    let gallery = state.gallery.read().await;
    let mut by_species: BTreeMap<&str, usize> = Species::ALL.iter().map(|s| (s.as_str(), 0)).collect();
    let mut entries = 0;
    for (id, template) in gallery.templates(None) {
        let species = gallery.get(id).expect("listed id exists").individual.species;
        *by_species.entry(species.as_str()).or_default() += 1;
        entries += template.len();
    }
    reply(json!({
        "status": "ok",
        "model_hash": state.model_hash,
        "embed_dim": state.recognizer.model().config().embed_dim,
        "gallery": {
            "individuals": gallery.len(),
            "entries": entries,
            "by_species": by_species,
        },
    }))
}

fn png_base64(img: &RgbImage) -> Result<String, ApiError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| ApiError::internal(format!("png encoding: {e}")))?;
    Ok(STANDARD.encode(buf.into_inner()))
}

async fn align(State(state): State<Shared>, payload: Payload) -> Result<Json<Value>, ApiError> {
    let input = payload.single_image()?.clone();
    if input.landmarks.is_none() {
        return Err(ApiError::bad_request("align requires landmarks"));
    }
    let recognizer = Arc::clone(&state.recognizer);
    let (crop, params) = blocking(move || {
        let img = input.decode()?;
        let lm = input.landmark_set()?;
        let (crop, params) = recognizer.crop(&img, lm.as_ref(), &input.resolved_ref())?;
        let params = params.ok_or_else(|| ApiError::internal("alignment produced no transform"))?;
        Ok((crop, params))
    })
    .await?;
    Ok(reply(json!({
        "aligned_image": png_base64(&crop)?,
        "width": crop.width(),
        "height": crop.height(),
        "transform": {
            "s": params.scale(),
            "theta": params.rotation(),
            "mx": params.m_x,
            "my": params.m_y,
        },
    })))
}

#[derive(Deserialize)]
struct IdentifyParams {
    species: Option<Species>,
    k: Option<usize>,
    threshold: Option<f32>,
}

async fn identify(State(state): State<Shared>, payload: Payload) -> Result<Json<Value>, ApiError> {
    let params: IdentifyParams = payload.params()?;
    let probe = embed_one(&state, payload.single_image()?.clone()).await?;
    let gallery = state.gallery.read().await;
    let templates: Vec<_> = gallery
        .templates(params.species)
        .map(|(id, t)| (id, t.embeddings()))
        .collect();
    let searched = templates.len();
    let results = matcher::identify(&probe, templates, params.k.unwrap_or(DEFAULT_K), params.threshold)?;
    let candidates: Vec<Value> = results
        .iter()
        .map(|r| {
            let individual = &gallery.get(&r.individual_id).expect("ranked id exists").individual;
            json!({
                "individual_id": r.individual_id,
                "name": individual.name,
                "species": individual.species,
                "score": r.score,
                "rank": r.rank,
                "accepted": r.accepted,
            })
        })
        .collect();
    Ok(reply(json!({
        "open_set": params.threshold.is_some(),
        "threshold": params.threshold,
        "gallery_size": searched,
        "candidates": candidates,
    })))
}

#[derive(Deserialize)]
struct VerifyParams {
    individual_id: String,
    threshold: Option<f32>,
}

async fn verify(State(state): State<Shared>, payload: Payload) -> Result<Json<Value>, ApiError> {
    let params: VerifyParams = payload.params()?;
    if state.gallery.read().await.get(&params.individual_id).is_none() {
        return Err(ApiError::not_found(format!("unknown individual {}", params.individual_id)));
    }
    let probe = embed_one(&state, payload.single_image()?.clone()).await?;
    let threshold = params.threshold.unwrap_or(state.verify_threshold);
    let gallery = state.gallery.read().await;
    let record = gallery
        .get(&params.individual_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown individual {}", params.individual_id)))?;
    let v = matcher::verify(&probe, record.template.embeddings(), threshold)?;
    Ok(reply(json!({
        "individual_id": params.individual_id,
        "score": v.score,
        "threshold": threshold,
        "accept": v.accept,
    })))
}

#[derive(Deserialize)]
struct EnrollParams {
    individual_id: String,
    name: Option<String>,
    species: Species,
}

async fn enroll(State(state): State<Shared>, payload: Payload) -> Result<Json<Value>, ApiError> {
    let params: EnrollParams = payload.params()?;
    if payload.images.is_empty() {
        return Err(ApiError::bad_request("enroll requires at least one image"));
    }
    let recognizer = Arc::clone(&state.recognizer);
    let images = payload.images;
    let entries = blocking(move || {
        images
            .iter()
            .map(|input| {
                let image_ref = input.resolved_ref();
                let img = input.decode()?;
                let lm = input.landmark_set()?;
                Ok((recognizer.embed(&img, lm.as_ref(), &image_ref)?, image_ref))
            })
            .collect::<Result<Vec<_>, ApiError>>()
    })
    .await?;

    let mut guard = state.gallery.write().await;
    let mut next = guard.clone();
    let created = next.get(&params.individual_id).is_none();
    let individual = Individual {
        name: params.name.unwrap_or_else(|| params.individual_id.clone()),
        id: params.individual_id.clone(),
        species: params.species,
    };
    let added = next.enroll(individual, entries, now_secs())?;
    if let Some(path) = state.gallery_path.clone() {
        let snapshot = next.clone();
        blocking(move || save_gallery(&snapshot, &path).map_err(ApiError::from)).await?;
    }
    *guard = next;
    let record = guard.get(&params.individual_id).expect("just enrolled");
    let mut body = individual_json(record);
    body["added"] = json!(added);
    body["created"] = json!(created);
    Ok(reply(body))
}

async fn gallery(
    State(state): State<Shared>,
    Query(query): Query<HashMap<String, String>>,
) -> Result<Json<Value>, ApiError> {
    let species = species_param(query.get("species"))?;
    let gallery = state.gallery.read().await;
    let individuals: Vec<Value> = gallery
        .list_individuals(species)
        .into_iter()
        .map(|i| individual_json(gallery.get(&i.id).expect("listed id exists")))
        .collect();
    Ok(reply(json!({
        "count": individuals.len(),
        "individuals": individuals,
    })))
}

async fn individual(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let gallery = state.gallery.read().await;
    let record = gallery
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown individual {id}")))?;
    let mut body = individual_json(record);
    body["entries"] = record
        .template
        .entries
        .iter()
        .map(|e| json!({ "image_ref": e.image_ref, "enrolled_at": e.enrolled_at }))
        .collect();
    Ok(reply(body))
}

async fn delete_individual(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Value>, ApiError> {
    let mut guard = state.gallery.write().await;
    let mut next = guard.clone();
    let removed = next.remove_individual(&id)?;
    if let Some(path) = state.gallery_path.clone() {
        let snapshot = next.clone();
        blocking(move || save_gallery(&snapshot, &path).map_err(ApiError::from)).await?;
    }
    *guard = next;
    Ok(reply(json!({
        "deleted": id,
        "removed_entries": removed.template.len(),
    })))
}
