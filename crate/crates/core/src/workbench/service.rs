//! HTTP API over a workspace for the labelling and re-labelling workflows.
//!
//! Models and score tables are loaded once and shared read-only; label
//! appends go through one mutex-guarded writer.

use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::correct::{correct, CorrectionConfig, CorrectionMode, LayerTables, UnitBudget};
use crate::error::{Error, Result};
use crate::explain::{gradcam_mask, ArtifactClass, ClassifierModel};
use crate::genmodel::{GeneratorModel, LatentCode};
use crate::identify::{UnitScore, DEFAULT_THETA};
use crate::imageio::{gray_png, rgb_png};
use crate::mask::ExplanationMask;

use super::cli::CAM_LAYER;
use super::labels::{partition_by_majority, Label, LabelRecord, LabelStore};
use super::manifest::config_hash;
use super::workspace::{
    corrected_id, generated_id, parse_corrected_id, parse_generated_id, tables_hash, Provenance, Workspace,
};

pub const RATER_HEADER: &str = "x-rater-id";
pub const PROVENANCE_HEADER: &str = "x-provenance";

pub struct AppState {
    pub ws: Workspace,
    pub model: GeneratorModel,
    pub classifier: Option<ClassifierModel>,
    pub tables: LayerTables,
    /// Seeds offered for labelling, in queue order.
    pub queue_seeds: Vec<u64>,
    labels: Mutex<LabelStore>,
}

impl AppState {
    /// Loads the planted generator, optional classifier, score tables,
    /// samples and label store from `ws`.
    pub fn load(ws: Workspace) -> Result<Self> {
        let model = ws.planted()?;
        let classifier = if ws.has_classifier() { Some(ws.classifier()?) } else { None };
        let tables = ws.score_tables()?;
        let queue_seeds = match ws.samples() {
            Ok(s) => s.seeds,
            Err(Error::NotFound(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        let labels = LabelStore::open(&ws.path(Workspace::labels_path()))?;
        Ok(Self::new(ws, model, classifier, tables, queue_seeds, labels))
    }

    pub fn new(
        ws: Workspace,
        model: GeneratorModel,
        classifier: Option<ClassifierModel>,
        tables: LayerTables,
        queue_seeds: Vec<u64>,
        labels: LabelStore,
    ) -> Self {
        Self {
            ws,
            model,
            classifier,
            tables,
            queue_seeds,
            labels: Mutex::new(labels),
        }
    }

    fn latent(&self, seed: u64) -> LatentCode {
        LatentCode::from_seed(seed, self.model.latent_dim())
    }

    fn mask(&self, seed: u64) -> Result<ExplanationMask> {
        if self.ws.path(Workspace::mask_path(seed)).exists() {
            return self.ws.mask(seed);
        }
        let clf = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::NotFound(format!("no mask for {} and no classifier", generated_id(seed))))?;
        gradcam_mask(clf, &self.model.image(&self.latent(seed))?, ArtifactClass::Artifact, CAM_LAYER, DEFAULT_THETA)
    }

    fn has_masks(&self) -> bool {
        self.classifier.is_some() || self.ws.path("masks").exists()
    }
}

struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::InvalidInput(_)
            | Error::InvalidPlan(_)
            | Error::Config(_)
            | Error::Json(_)
            | Error::Parse { .. }
            | Error::Usage(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = json!({"error": {"kind": self.0.kind(), "message": self.0.to_string()}});
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, HeaderValue::from_static("image/png"))], bytes).into_response()
}

/// Parses a JSON body, mapping every failure to a 400.
fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError(Error::InvalidInput(format!("bad request body: {e}"))))
}

#[derive(Debug, Deserialize)]
pub struct QueueQuery {
    pub kind: Option<String>,
    pub rater: Option<String>,
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub image_id: String,
    pub latent_seed: u64,
    pub image_url: String,
    pub mask_url: Option<String>,
    pub phase: String,
    /// Original generation of a relabel item.
    pub original_id: Option<String>,
    pub prior_label: Option<Label>,
}

async fn queue(State(st): State<Arc<AppState>>, headers: HeaderMap, Query(q): Query<QueueQuery>) -> ApiResult<Response> {
    let rater = q.rater.or_else(|| headers.get(RATER_HEADER).and_then(|v| v.to_str().ok()).map(String::from));
    let limit = q.limit.unwrap_or(20);
    let store = st.labels.lock().expect("label store lock");
    let done = |id: &str| match &rater {
        Some(r) => store.contains(id, r),
        None => store.records().iter().any(|x| x.image_id == id),
    };
    let majority = partition_by_majority(store.records());
    let prior = |seed: u64| {
        if majority.artifact.contains(&seed) {
            Some(Label::Artifact)
        } else if majority.normal.contains(&seed) {
            Some(Label::Normal)
        } else {
            None
        }
    };
    let items: Vec<QueueItem> = match q.kind.as_deref().unwrap_or("label") {
        "label" => st
            .queue_seeds
            .iter()
            .map(|s| (s, generated_id(*s)))
            .filter(|(_, id)| !done(id))
            .take(limit)
            .map(|(s, id)| QueueItem {
                image_url: format!("/api/image/{id}"),
                mask_url: st.has_masks().then(|| format!("/api/mask/{id}")),
                image_id: id,
                latent_seed: *s,
                phase: "label".into(),
                original_id: None,
                prior_label: None,
            })
            .collect(),
        "relabel" => corrected_ids(&st.ws)?
            .into_iter()
            .filter(|(id, _)| !done(id))
            .take(limit)
            .map(|(id, s)| QueueItem {
                image_url: format!("/api/image/{id}"),
                mask_url: None,
                image_id: id,
                latent_seed: s,
                phase: "relabel".into(),
                original_id: Some(generated_id(s)),
                prior_label: prior(s),
            })
            .collect(),
        other => return Err(Error::InvalidInput(format!("unknown queue kind {other}")).into()),
    };
    Ok(Json(json!({"items": items})).into_response())
}

/// Every corrected image on disk, sorted by id.
fn corrected_ids(ws: &Workspace) -> Result<Vec<(String, u64)>> {
    let root = ws.path("corrected");
    let mut out = Vec::new();
    if !root.exists() {
        return Ok(out);
    }
    for dir in std::fs::read_dir(root)? {
        let dir = dir?.path();
        if !dir.is_dir() {
            continue;
        }
        for f in std::fs::read_dir(dir)? {
            let p = f?.path();
            if p.extension().is_some_and(|e| e == "png") {
                let stem = p.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
                if let Some((seed, _)) = parse_corrected_id(&stem) {
                    out.push((stem, seed));
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

async fn post_label(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let rec: LabelRecord = parse_body(&body)?;
    if let Some(h) = headers.get(RATER_HEADER).and_then(|v| v.to_str().ok()) {
        if h != rec.rater {
            return Err(Error::InvalidInput(format!("rater {} does not match header {h}", rec.rater)).into());
        }
    }
    let seed = parse_generated_id(&rec.image_id).or_else(|| parse_corrected_id(&rec.image_id).map(|(s, _)| s));
    match seed {
        Some(s) if s == rec.latent_seed => {}
        Some(_) => return Err(Error::InvalidInput("latent seed does not match the image id".into()).into()),
        None => return Err(Error::InvalidInput(format!("malformed image id {}", rec.image_id)).into()),
    }
    if let Some((s, h)) = parse_corrected_id(&rec.image_id) {
        if !st.ws.path(Workspace::corrected_path(s, h, "png")).exists() {
            return Err(Error::NotFound(rec.image_id.clone()).into());
        }
    }
    st.labels.lock().expect("label store lock").append(rec.clone())?;
    Ok((StatusCode::CREATED, Json(json!({"ok": true, "record": rec}))).into_response())
}

async fn image(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    if let Some(seed) = parse_generated_id(&id) {
        let st2 = st.clone();
        let png = tokio::task::spawn_blocking(move || rgb_png(&st2.model.image(&st2.latent(seed))?))
            .await
            .map_err(|e| Error::InvalidInput(e.to_string()))??;
        return Ok(png_response(png));
    }
    if let Some((seed, hash)) = parse_corrected_id(&id) {
        let p = st.ws.path(Workspace::corrected_path(seed, hash, "png"));
        if p.exists() {
            return Ok(png_response(std::fs::read(p).map_err(Error::from)?));
        }
    }
    Err(Error::NotFound(format!("image {id}")).into())
}

/// Body of `POST /api/correct`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectRequest {
    pub latent_seed: u64,
    pub mode: CorrectionMode,
    pub l: usize,
    pub n: UnitBudget,
    pub lambda: f32,
}

async fn post_correct(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: CorrectRequest = parse_body(&body)?;
    let config = CorrectionConfig {
        mode: req.mode,
        l: req.l,
        n: req.n,
        lambda: req.lambda,
    };
    config.validate(&st.model)?;
    for l in 1..=config.l {
        if !st.tables.contains_key(&l) {
            return Err(Error::NotFound(format!("no score table for layer {l}")).into());
        }
    }
    let st2 = st.clone();
    let cfg = config.clone();
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>> {
        let mask = match cfg.mode {
            CorrectionMode::Local => Some(st2.mask(req.latent_seed).map_err(|e| match e {
                Error::NotFound(m) => Error::InvalidInput(format!("local mode needs a mask: {m}")),
                e => e,
            })?),
            _ => None,
        };
        rgb_png(&correct(&st2.model, &st2.latent(req.latent_seed), &st2.tables, &cfg, mask.as_ref())?)
    })
    .await
    .map_err(|e| Error::InvalidInput(e.to_string()))??;
    let chash = config_hash(&config);
    let prov = Provenance {
        image_id: corrected_id(req.latent_seed, &chash),
        latent_seed: req.latent_seed,
        table_hash: tables_hash(&st.tables, config.l),
        config,
        config_hash: chash,
        image_sha256: super::manifest::sha256_hex(&png),
    };
    let mut resp = png_response(png);
    let value = HeaderValue::from_str(&serde_json::to_string(&prov).map_err(Error::from)?)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    resp.headers_mut().insert(PROVENANCE_HEADER, value);
    Ok(resp)
}

#[derive(Debug, Deserialize)]
pub struct UnitsQuery {
    pub layer: Option<String>,
}

async fn units(State(st): State<Arc<AppState>>, Query(q): Query<UnitsQuery>) -> ApiResult<Response> {
    let layer: usize = q
        .layer
        .as_deref()
        .ok_or_else(|| Error::InvalidInput("missing layer".into()))?
        .parse()
        .map_err(|_| Error::InvalidInput("layer must be an integer".into()))?;
    let table = st
        .tables
        .get(&layer)
        .ok_or_else(|| Error::NotFound(format!("no score table for layer {layer}")))?;
    let sorted: Vec<UnitScore> = table.sorted();
    Ok(Json(json!({
        "layer": layer,
        "artifact_count": table.artifact_count,
        "artifact_set": table.artifact_set,
        "units": sorted,
    }))
    .into_response())
}

async fn mask(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let seed = parse_generated_id(&id).ok_or_else(|| Error::NotFound(format!("mask {id}")))?;
    let st2 = st.clone();
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>> {
        let m = st2.mask(seed)?;
        gray_png(&m.values, m.width, m.height)
    })
    .await
    .map_err(|e| Error::InvalidInput(e.to_string()))??;
    Ok(png_response(png))
}

async fn report(State(st): State<Arc<AppState>>) -> ApiResult<Response> {
    let p = st.ws.path(Workspace::report_path("eval.json"));
    if !p.exists() {
        return Err(Error::NotFound("no evaluation report yet".into()).into());
    }
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(p).map_err(Error::from)?).map_err(Error::from)?;
    Ok(Json(v).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/label", post(post_label))
        .route("/api/image/{id}", get(image))
        .route("/api/correct", post(post_correct))
        .route("/api/units", get(units))
        .route("/api/mask/{id}", get(mask))
        .route("/api/report", get(report))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: &str) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await?;
    Ok(())
}
