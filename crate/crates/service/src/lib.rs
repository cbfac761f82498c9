//! HTTP access to a trained model: manifest, topology, encode, decode and
//! pose transfer over JSON.

use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use dhbr_core::checkpoint::load_trained;
use dhbr_core::dataset::{load_dataset, Dataset};
use dhbr_core::mesh::Mesh;
use dhbr_core::model::{DhbrModel, LatentCode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub beta_dim: usize,
    pub theta_dim: usize,
    pub k: usize,
    pub group_names: Vec<String>,
    pub vertex_count: usize,
    pub face_count: usize,
    /// SHA-256 of the checkpoint file.
    pub checkpoint_hash: String,
    /// Mesh ids accepted by `/encode` and `/transfer`.
    pub mesh_ids: Vec<String>,
}

/// Immutable state behind a ready server.
pub struct Loaded {
    pub model: DhbrModel,
    pub dataset: Dataset,
    pub manifest: ModelManifest,
    faces: Vec<u32>,
}

impl Loaded {
    pub fn new(model: DhbrModel, dataset: Dataset, checkpoint_hash: String) -> Self {
        let template = model.template();
        let manifest = ModelManifest {
            beta_dim: model.config().beta_dim,
            theta_dim: model.config().theta_dim,
            k: model.k(),
            group_names: model.skeleton().group_names(),
            vertex_count: template.vertex_count(),
            face_count: template.face_count(),
            checkpoint_hash,
            mesh_ids: dataset.names.clone(),
        };
        let faces = template.faces.iter().flat_map(|f| f.iter().map(|&i| i as u32)).collect();
        Loaded {
            model,
            dataset,
            manifest,
            faces,
        }
    }

    /// Reads the dataset directory and the checkpoint it was trained on.
    pub fn from_paths(checkpoint: &Path, dataset_dir: &Path) -> dhbr_core::Result<Self> {
        let dataset = load_dataset(dataset_dir)?;
        let (model, _config, hash) = load_trained(checkpoint, &dataset)?;
        Ok(Loaded::new(model, dataset, hash))
    }
}

/// Shared handle; empty until the model finishes loading.
#[derive(Clone, Default)]
pub struct AppState {
    slot: Arc<OnceLock<Loaded>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ready(loaded: Loaded) -> Self {
        let s = Self::new();
        s.install(loaded);
        s
    }

    /// Makes the server ready. Only the first call has any effect.
    pub fn install(&self, loaded: Loaded) -> bool {
        self.slot.set(loaded).is_ok()
    }

    pub fn get(&self) -> Option<&Loaded> {
        self.slot.get()
    }
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        ApiError {
            status,
            error: error.into(),
            field: None,
        }
    }

    fn field(field: &str, error: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            error: error.into(),
            field: Some(field.to_string()),
        }
    }

    fn internal(e: dhbr_core::Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, r.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn loaded(state: &AppState) -> Result<&Loaded, ApiError> {
    state
        .get()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model is still loading"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshPayload {
    pub vertices: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub faces: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Topology {
    pub faces: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeRequest {
    pub beta: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
    #[serde(default)]
    pub omit_faces: bool,
}

#[derive(Debug, Default, Deserialize)]
pub struct FaceQuery {
    #[serde(default)]
    pub omit_faces: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodeRequest {
    #[serde(default)]
    pub mesh_id: Option<String>,
    /// Flat xyz positions in template vertex order.
    #[serde(default)]
    pub vertices: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodePayload {
    pub beta: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
}

impl From<LatentCode> for CodePayload {
    fn from(c: LatentCode) -> Self {
        CodePayload {
            beta: c.beta,
            thetas: c.thetas,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeResponse {
    /// Full codes: base plus residual.
    pub beta: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
    pub residuals: CodePayload,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferRequest {
    pub shape_mesh_id: String,
    pub pose_mesh_id: String,
    #[serde(default)]
    pub omit_faces: bool,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/manifest", get(manifest))
        .route("/topology", get(topology))
        .route("/decode", post(decode))
        .route("/encode", post(encode))
        .route("/transfer", post(transfer))
        .with_state(state)
}

async fn manifest(State(state): State<AppState>) -> ApiResult<ModelManifest> {
    Ok(Json(loaded(&state)?.manifest.clone()))
}

async fn topology(State(state): State<AppState>) -> ApiResult<Topology> {
    Ok(Json(Topology {
        faces: loaded(&state)?.faces.clone(),
    }))
}

fn mesh_payload(l: &Loaded, mesh: &Mesh, omit_faces: bool) -> MeshPayload {
    MeshPayload {
        vertices: mesh.flat_positions(),
        faces: (!omit_faces).then(|| l.faces.clone()),
    }
}

fn check_code(m: &ModelManifest, beta: &[f64], thetas: &[Vec<f64>]) -> Result<(), ApiError> {
    if beta.len() != m.beta_dim {
        return Err(ApiError::field(
            "beta",
            format!("expected {} values, got {}", m.beta_dim, beta.len()),
        ));
    }
    if thetas.len() != m.k {
        return Err(ApiError::field("thetas", format!("expected {} groups, got {}", m.k, thetas.len())));
    }
    if let Some((g, t)) = thetas.iter().enumerate().find(|(_, t)| t.len() != m.theta_dim) {
        return Err(ApiError::field(
            &format!("thetas[{g}]"),
            format!("expected {} values, got {}", m.theta_dim, t.len()),
        ));
    }
    if beta.iter().chain(thetas.iter().flatten()).any(|x| !x.is_finite()) {
        return Err(ApiError::field("beta", "codes must be finite"));
    }
    Ok(())
}

async fn decode(
    State(state): State<AppState>,
    Query(q): Query<FaceQuery>,
    body: Result<Json<DecodeRequest>, JsonRejection>,
) -> ApiResult<MeshPayload> {
    let l = loaded(&state)?;
    let Json(req) = body?;
    check_code(&l.manifest, &req.beta, &req.thetas)?;
    let code = LatentCode {
        beta: req.beta,
        thetas: req.thetas,
    };
    let mesh = l.model.decode(&code).map_err(ApiError::internal)?;
    Ok(Json(mesh_payload(l, &mesh, req.omit_faces || q.omit_faces)))
}

fn mesh_by_id<'a>(l: &'a Loaded, field: &str, id: &str) -> Result<&'a Mesh, ApiError> {
    l.dataset
        .index_of(id)
        .map(|i| &l.dataset.meshes[i])
        .ok_or_else(|| ApiError {
            status: StatusCode::NOT_FOUND,
            error: format!("unknown mesh id {id:?}"),
            field: Some(field.to_string()),
        })
}

async fn encode(
    State(state): State<AppState>,
    body: Result<Json<EncodeRequest>, JsonRejection>,
) -> ApiResult<EncodeResponse> {
    let l = loaded(&state)?;
    let Json(req) = body?;
    let inline;
    let mesh = match (&req.mesh_id, &req.vertices) {
        (Some(id), None) => mesh_by_id(l, "mesh_id", id)?,
        (None, Some(v)) => {
            let want = 3 * l.manifest.vertex_count;
            if v.len() != want {
                return Err(ApiError::field(
                    "vertices",
                    format!("expected {want} values ({} vertices), got {}", l.manifest.vertex_count, v.len()),
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ApiError::field("vertices", "positions must be finite"));
            }
            inline = l.model.template().from_flat(v).map_err(ApiError::internal)?;
            &inline
        }
        _ => {
            return Err(ApiError::field("mesh_id", "give exactly one of mesh_id or vertices"));
        }
    };
    let residual = l.model.encode(mesh).map_err(ApiError::internal)?;
    let full = l.model.encode_full(mesh).map_err(ApiError::internal)?;
    Ok(Json(EncodeResponse {
        beta: full.beta,
        thetas: full.thetas,
        residuals: residual.into(),
    }))
}

async fn transfer(
    State(state): State<AppState>,
    Query(q): Query<FaceQuery>,
    body: Result<Json<TransferRequest>, JsonRejection>,
) -> ApiResult<MeshPayload> {
    let l = loaded(&state)?;
    let Json(req) = body?;
    let shape = mesh_by_id(l, "shape_mesh_id", &req.shape_mesh_id)?;
    let pose = mesh_by_id(l, "pose_mesh_id", &req.pose_mesh_id)?;
    let mesh = l.model.pose_transfer(shape, pose).map_err(ApiError::internal)?;
    Ok(Json(mesh_payload(l, &mesh, req.omit_faces || q.omit_faces)))
}

/// Binds `addr` and serves until shutdown. The model loads in the
/// background; requests before then get 503. A failed load stops the
/// server with that error.
pub async fn serve(
    addr: std::net::SocketAddr,
    checkpoint: std::path::PathBuf,
    dataset_dir: std::path::PathBuf,
) -> std::io::Result<()> {
    let state = AppState::new();
    let loader = state.clone();
    let (tx, rx) = tokio::sync::oneshot::channel::<String>();
    tokio::task::spawn_blocking(move || match Loaded::from_paths(&checkpoint, &dataset_dir) {
        Ok(l) => {
            loader.install(l);
            log::info!("model loaded");
        }
        Err(e) => {
            let _ = tx.send(e.to_string());
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let failure = Arc::new(std::sync::Mutex::new(None));
    let slot = failure.clone();
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async move {
            match rx.await {
                Ok(msg) => *slot.lock().expect("not poisoned") = Some(msg),
                // Loaded fine: the sender was dropped. Run until killed.
                Err(_) => std::future::pending::<()>().await,
            }
        })
        .await?;
    let msg = failure.lock().expect("not poisoned").take();
    match msg {
        Some(msg) => Err(std::io::Error::other(format!("loading model: {msg}"))),
        None => Ok(()),
    }
}
