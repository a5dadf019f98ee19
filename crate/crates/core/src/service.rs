//! HTTP synthesis service over a loaded checkpoint.
//!
//! The model is read-only. Latent bundles live in a bounded LRU session
//! store keyed by server-issued ids. Images travel as base64 PNG.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Model;
use crate::coords::GridTransform;
use crate::error::Error;
use crate::generator::GenerateOptions;
use crate::image_io::{labels_to_rgb, png_base64, tensor_to_rgb};
use crate::latent::{parse_slots, slot_kind, slot_names, LatentBundle, SlotKind};
use crate::schema::SemanticSchema;

pub const DEFAULT_CAPACITY: usize = 1024;
pub const MAX_COUNT: usize = 64;
pub const OPENAPI: &str = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../openapi.json"));

/// Capacity-bounded store of named bundles with least-recently-used
/// eviction. Both reads and writes count as uses.
#[derive(Debug)]
pub struct SessionStore {
    entries: IndexMap<String, LatentBundle>,
    capacity: usize,
}

impl SessionStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: IndexMap::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn insert(&mut self, id: String, bundle: LatentBundle) {
        self.entries.shift_remove(&id);
        self.entries.insert(id, bundle);
        while self.entries.len() > self.capacity {
            self.entries.shift_remove_index(0);
        }
    }

    pub fn get(&mut self, id: &str) -> Option<LatentBundle> {
        let bundle = self.entries.shift_remove(id)?;
        self.entries.insert(id.to_string(), bundle.clone());
        Some(bundle)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }
}

pub struct ServiceState {
    model: Option<Mutex<Model>>,
    store: Mutex<SessionStore>,
    next_id: AtomicU64,
}

impl ServiceState {
    pub fn new(model: Option<Model>, capacity: usize) -> Arc<Self> {
        Arc::new(Self {
            model: model.map(Mutex::new),
            store: Mutex::new(SessionStore::new(capacity)),
            next_id: AtomicU64::new(0),
        })
    }

    fn fresh_id(&self) -> String {
        format!("s{:08x}", self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    fn store(&self) -> std::sync::MutexGuard<'_, SessionStore> {
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn lookup(&self, id: &str) -> Result<LatentBundle, ApiError> {
        self.store()
            .get(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown id `{id}`")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::UnknownSlot(_)
            | Error::SlotOutOfRange { .. }
            | Error::UnknownClass(_)
            | Error::InvalidArgument(_)
            | Error::Shape(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}

/// Runs `f` with the model on the blocking pool.
async fn with_model<T, F>(state: &Arc<ServiceState>, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Model, &ServiceState) -> Result<T, ApiError> + Send + 'static,
{
    if state.model.is_none() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"));
    }
    let state = Arc::clone(state);
    tokio::task::spawn_blocking(move || {
        let model = state.model.as_ref().expect("checked above");
        let model = model.lock().unwrap_or_else(|e| e.into_inner());
        f(&model, &state)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Rendering {
    /// Base64 PNG of the image.
    pub image: String,
    /// Base64 PNG of the per-pixel argmax labels in schema colors.
    pub segmentation: String,
}

fn render(model: &Model, bundle: &LatentBundle, options: &GenerateOptions) -> Result<Rendering, ApiError> {
    let out = model.generator.generate(std::slice::from_ref(bundle), options, None)?;
    let image = tensor_to_rgb(&out.render.image.get(0))?;
    let labels = labels_to_rgb(&out.labels().get(0), &model.generator.schema.palette())?;
    Ok(Rendering {
        image: png_base64(&image),
        segmentation: png_base64(&labels),
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SlotInfo {
    pub index: usize,
    pub name: String,
    pub kind: String,
    pub class: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SchemaResponse {
    pub schema: SemanticSchema,
    pub slots: Vec<SlotInfo>,
    pub resolution: usize,
    pub coarse_resolution: usize,
    pub latent_dim: usize,
    pub step: u64,
}

async fn handle_schema(State(state): State<Arc<ServiceState>>) -> ApiResult<SchemaResponse> {
    with_model(&state, |model, _| {
        let g = &model.generator;
        let slots = slot_names(&g.schema)
            .into_iter()
            .enumerate()
            .map(|(index, name)| {
                let (kind, class) = match slot_kind(index) {
                    SlotKind::Base => ("base", None),
                    SlotKind::Shape(k) => ("shape", Some(k)),
                    SlotKind::Texture(k) => ("texture", Some(k)),
                };
                SlotInfo {
                    index,
                    name,
                    kind: kind.to_string(),
                    class,
                }
            })
            .collect();
        Ok(SchemaResponse {
            schema: g.schema.clone(),
            slots,
            resolution: g.config.image_resolution,
            coarse_resolution: g.config.coarse_resolution,
            latent_dim: g.config.latent_dim,
            step: model.step,
        })
    })
    .await
    .map(Json)
}

fn default_psi() -> f64 {
    1.0
}

fn default_count() -> usize {
    1
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleRequest {
    pub seed: u64,
    #[serde(default = "default_psi")]
    pub psi: f64,
    #[serde(default = "default_count")]
    pub count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleResponse {
    pub ids: Vec<String>,
    pub images: Vec<String>,
    pub segmentations: Vec<String>,
}

async fn handle_sample(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<SampleResponse> {
    let req: SampleRequest = parse_body(&body)?;
    if req.count == 0 || req.count > MAX_COUNT {
        return Err(ApiError::bad_request(format!("count must lie in 1..={MAX_COUNT}")));
    }
    with_model(&state, move |model, state| {
        let g = &model.generator;
        let raw = g.sample_bundles(&mut ChaCha8Rng::seed_from_u64(req.seed), req.count)?;
        let mut out = SampleResponse {
            ids: vec![],
            images: vec![],
            segmentations: vec![],
        };
        for bundle in raw {
            let bundle = bundle.truncate(req.psi, &model.stats)?;
            let r = render(model, &bundle, &GenerateOptions::default())?;
            let id = state.fresh_id();
            state.store().insert(id.clone(), bundle);
            out.ids.push(id);
            out.images.push(r.image);
            out.segmentations.push(r.segmentation);
        }
        Ok(out)
    })
    .await
    .map(Json)
}

/// A slot change: a full vector added to the slot, or a scalar moving the
/// slot along that slot's fixed unit axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Delta {
    Scalar(f32),
    Vector(Vec<f32>),
}

/// The fixed unit axis used by scalar deltas on `slot`.
pub fn slider_axis(slot: usize, dim: usize) -> Vec<f32> {
    let v = crate::nn::randn(&mut ChaCha8Rng::seed_from_u64(0x736c_6964 + slot as u64), &[dim as i64]);
    let v = &v / v.norm();
    Vec::<f32>::try_from(v).expect("axis is a float vector")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixSpec {
    pub source: String,
    pub slots: Vec<String>,
}

/// A class given by id or by name.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassRef {
    Id(usize),
    Name(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditRequest {
    pub id: String,
    #[serde(default)]
    pub deltas: BTreeMap<String, Delta>,
    #[serde(default)]
    pub mix: Option<MixSpec>,
    #[serde(default)]
    pub transform: Option<GridTransform>,
    #[serde(default)]
    pub active_classes: Option<Vec<ClassRef>>,
    #[serde(default)]
    pub commit: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditResponse {
    pub id: String,
    pub committed: bool,
    #[serde(flatten)]
    pub rendering: Rendering,
}

fn resolve_slots(names: &[String], schema: &SemanticSchema) -> Result<BTreeSet<usize>, ApiError> {
    let mut out = BTreeSet::new();
    for name in names {
        out.extend(parse_slots(name, schema)?);
    }
    Ok(out)
}

fn resolve_classes(refs: &[ClassRef], schema: &SemanticSchema) -> Result<BTreeSet<usize>, ApiError> {
    refs.iter()
        .map(|r| match r {
            ClassRef::Id(id) if *id < schema.num_classes() => Ok(*id),
            ClassRef::Id(id) => Err(ApiError::bad_request(format!("unknown class id {id}"))),
            ClassRef::Name(name) => schema
                .class_id(name)
                .ok_or_else(|| ApiError::bad_request(format!("unknown class `{name}`"))),
        })
        .collect()
}

fn apply_deltas(
    bundle: &mut LatentBundle,
    deltas: &BTreeMap<String, Delta>,
    schema: &SemanticSchema,
) -> Result<(), ApiError> {
    let dim = bundle.latent_dim();
    for (name, delta) in deltas {
        for slot in parse_slots(name, schema)? {
            let step: Vec<f32> = match delta {
                Delta::Scalar(s) => slider_axis(slot, dim).iter().map(|v| v * s).collect(),
                Delta::Vector(v) if v.len() == dim => v.clone(),
                Delta::Vector(v) => {
                    return Err(ApiError::bad_request(format!(
                        "delta for `{name}` has {} entries, expected {dim}",
                        v.len()
                    )))
                }
            };
            for (w, d) in bundle.slot_mut(slot)?.iter_mut().zip(step) {
                *w += d;
            }
        }
    }
    Ok(())
}

async fn handle_edit(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<EditResponse> {
    let req: EditRequest = parse_body(&body)?;
    with_model(&state, move |model, state| {
        let schema = &model.generator.schema;
        let mut bundle = state.lookup(&req.id)?;
        if let Some(mix) = &req.mix {
            let source = state.lookup(&mix.source)?;
            bundle = bundle.mix(&source, &resolve_slots(&mix.slots, schema)?)?;
        }
        apply_deltas(&mut bundle, &req.deltas, schema)?;
        let mut options = GenerateOptions::default();
        if let Some(t) = req.transform {
            t.validate()?;
            options.transform = t;
        }
        if let Some(classes) = &req.active_classes {
            options.active_classes = Some(resolve_classes(classes, schema)?);
        }
        let rendering = render(model, &bundle, &options)?;
        if req.commit {
            state.store().insert(req.id.clone(), bundle);
        }
        Ok(EditResponse {
            id: req.id,
            committed: req.commit,
            rendering,
        })
    })
    .await
    .map(Json)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LerpRequest {
    pub a: String,
    pub b: String,
    pub t: f32,
    /// Slot names; all slots when absent.
    #[serde(default)]
    pub slots: Option<Vec<String>>,
    /// Store the result under a fresh id.
    #[serde(default)]
    pub store: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LerpResponse {
    pub id: Option<String>,
    #[serde(flatten)]
    pub rendering: Rendering,
}

async fn handle_lerp(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<LerpResponse> {
    let req: LerpRequest = parse_body(&body)?;
    if !req.t.is_finite() {
        return Err(ApiError::bad_request("t must be finite"));
    }
    with_model(&state, move |model, state| {
        let a = state.lookup(&req.a)?;
        let b = state.lookup(&req.b)?;
        let slots = match &req.slots {
            Some(names) => resolve_slots(names, &model.generator.schema)?,
            None => a.all_slots(),
        };
        let bundle = a.lerp(&b, req.t, &slots)?;
        let rendering = render(model, &bundle, &GenerateOptions::default())?;
        let id = req.store.then(|| {
            let id = state.fresh_id();
            state.store().insert(id.clone(), bundle);
            id
        });
        Ok(LerpResponse { id, rendering })
    })
    .await
    .map(Json)
}

async fn handle_health(State(state): State<Arc<ServiceState>>) -> Json<serde_json::Value> {
    let store = state.store();
    Json(json!({
        "status": "ok",
        "model_loaded": state.model.is_some(),
        "sessions": store.len(),
        "capacity": store.capacity(),
    }))
}

async fn handle_openapi() -> impl IntoResponse {
    ([(axum::http::header::CONTENT_TYPE, "application/json")], OPENAPI)
}

/// Builds the router. Static editor assets are served under `/app` when
/// `app_dir` is given.
pub fn router(state: Arc<ServiceState>, app_dir: Option<PathBuf>) -> Router {
    let mut router = Router::new()
        .route("/healthz", get(handle_health))
        .route("/schema", get(handle_schema))
        .route("/sample", post(handle_sample))
        .route("/edit", post(handle_edit))
        .route("/lerp", post(handle_lerp))
        .route("/openapi.json", get(handle_openapi));
    if let Some(dir) = app_dir {
        router = router.nest_service("/app", tower_http::services::ServeDir::new(dir));
    }
    router.with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: Arc<ServiceState>, app_dir: Option<PathBuf>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, app_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(v: f32) -> LatentBundle {
        LatentBundle::from_slots(1, 2, vec![v; 6]).unwrap()
    }

    #[test]
    fn store_evicts_least_recently_used() {
        let mut store = SessionStore::new(2);
        store.insert("a".into(), bundle(1.0));
        store.insert("b".into(), bundle(2.0));
        assert!(store.get("a").is_some());
        store.insert("c".into(), bundle(3.0));
        assert!(store.contains("a"));
        assert!(!store.contains("b"));
        assert!(store.get("b").is_none());
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn slider_axes_are_unit_and_fixed() {
        let a = slider_axis(3, 16);
        let norm: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        assert_eq!(a, slider_axis(3, 16));
        assert_ne!(a, slider_axis(4, 16));
    }
}
