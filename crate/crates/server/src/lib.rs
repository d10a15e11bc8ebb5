//! HTTP/JSON API over one live experiment directory.
//!
//! Readers get immutable snapshots of the experiment state; mutations go
//! through a single writer, and round advancement runs on a blocking worker.

pub mod api;

use std::future::Future;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock, TryLockError};

use airwayal::morphology::skeletonize;
use airwayal::orchestrator::{
    centerline_tree, Advance, Annotation, Annotator, Experiment, ExperimentState, OracleKind, OrchestratorError,
};
use airwayal::query::SampleId;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use thiserror::Error;
use tower_http::cors::{Any, CorsLayer};

use api::{
    decode_runs, decode_voxels, encode_runs, restrict, slice_image, AdvanceResponse, AnnotationSubmission, Axis,
    RoundSummary, SampleSummary, SliceResponse, StateResponse, OVERLAYS,
};

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::UnknownSample(_) => ApiError::NotFound(e.to_string()),
            OrchestratorError::NotPending(_) | OrchestratorError::PendingHumanAnnotations(_) => {
                ApiError::Conflict(e.to_string())
            }
            OrchestratorError::InvalidAnnotation(_) => ApiError::Unprocessable(e.to_string()),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Shared server state: the single writer plus the published snapshot.
pub struct Shared {
    writer: Mutex<Experiment>,
    snapshot: RwLock<Arc<ExperimentState>>,
    training: AtomicBool,
    last_error: Mutex<Option<String>>,
}

pub type AppState = Arc<Shared>;

impl Shared {
    pub fn new(exp: Experiment) -> AppState {
        let snapshot = RwLock::new(Arc::new(exp.state.clone()));
        Arc::new(Self {
            writer: Mutex::new(exp),
            snapshot,
            training: AtomicBool::new(false),
            last_error: Mutex::new(None),
        })
    }

    pub fn open(dir: &Path) -> Result<AppState, OrchestratorError> {
        Ok(Self::new(Experiment::open(dir)?))
    }

    pub fn snapshot(&self) -> Arc<ExperimentState> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn is_training(&self) -> bool {
        self.training.load(Ordering::SeqCst)
    }

    fn publish(&self, exp: &Experiment) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(exp.state.clone());
    }

    fn set_error(&self, e: Option<String>) {
        *self.last_error.lock().expect("error lock") = e;
    }

    /// Runs one advance step on the calling thread; used by the worker.
    fn advance_blocking(&self) {
        let mut exp = self.writer.lock().expect("writer lock");
        let outcome = exp.advance().and_then(|a| {
            if matches!(a, Advance::Trained(_)) && exp.state.finished() {
                exp.finish()?;
            }
            Ok(())
        });
        self.publish(&exp);
        self.set_error(outcome.err().map(|e| e.to_string()));
        self.training.store(false, Ordering::SeqCst);
    }
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/api/state", get(get_state))
        .route("/api/rounds", get(get_rounds))
        .route("/api/rounds/advance", post(post_advance))
        .route("/api/samples", get(get_samples))
        .route("/api/samples/{id}/slice", get(get_slice))
        .route(
            "/api/samples/{id}/annotation",
            get(get_annotation).post(post_annotation),
        )
        .route("/api/samples/{id}/tree", get(get_tree))
        .layer(cors)
        .with_state(state)
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

fn state_response(s: &ExperimentState, training: bool, last_error: Option<String>) -> StateResponse {
    StateResponse {
        round: s.records.len().saturating_sub(1),
        strategy: s.config.strategy.name().to_string(),
        oracle: match s.config.oracle {
            OracleKind::Simulated => "simulated".into(),
            OracleKind::Human => "human".into(),
        },
        labeled: s.labeled_ids().len(),
        unlabeled: s.unlabeled_ids().len(),
        pending_annotations: s.pending_count(),
        pending: s
            .pending
            .iter()
            .copied()
            .filter(|id| !s.submitted.contains_key(id))
            .collect(),
        training,
        finished: s.finished(),
        last_error,
    }
}

async fn get_state(State(app): State<AppState>) -> Json<StateResponse> {
    let snap = app.snapshot();
    let err = app.last_error.lock().expect("error lock").clone();
    Json(state_response(&snap, app.is_training(), err))
}

async fn get_rounds(State(app): State<AppState>) -> Json<Vec<RoundSummary>> {
    Json(app.snapshot().records.iter().map(RoundSummary::from).collect())
}

async fn get_samples(State(app): State<AppState>) -> Json<Vec<SampleSummary>> {
    let snap = app.snapshot();
    Json(
        snap.samples
            .iter()
            .map(|s| SampleSummary {
                id: s.id,
                role: s.role(),
                provenance: s.provenance,
                labeled: s.labeled,
                pending: snap.pending.contains(&s.id),
                dims: s.image.dims().as_array(),
            })
            .collect(),
    )
}

#[derive(Debug, Deserialize)]
struct SliceQuery {
    axis: String,
    index: usize,
    /// Comma-separated overlay names; all overlays when absent.
    overlays: Option<String>,
}

fn unknown(id: SampleId) -> ApiError {
    ApiError::NotFound(format!("unknown sample {id}"))
}

async fn get_slice(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<SampleId>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Json<SliceResponse>> {
    let snap = app.snapshot();
    let s = snap.sample(id).ok_or_else(|| unknown(id))?;
    let axis =
        Axis::parse(&q.axis).ok_or_else(|| ApiError::Unprocessable(format!("axis {:?} is not x|y|z", q.axis)))?;
    let extent = axis.extent(s.image.dims());
    if q.index >= extent {
        return Err(ApiError::Unprocessable(format!(
            "index {} out of range 0..{extent}",
            q.index
        )));
    }
    let names: Vec<&str> = match &q.overlays {
        None => OVERLAYS.to_vec(),
        Some(list) => list.split(',').map(str::trim).filter(|n| !n.is_empty()).collect(),
    };
    let mut overlays = std::collections::BTreeMap::new();
    for name in names {
        let mask = match name {
            "pred" => snap.predicted_mask(id),
            "gt" => s.gt_mask.clone(),
            "machine_centerline" => s.machine_centerline.clone(),
            "corrected_centerline" => s.corrected_centerline.clone(),
            other => return Err(ApiError::Unprocessable(format!("unknown overlay {other:?}"))),
        };
        let voxels = mask.map(|m| restrict(&m, axis, q.index)).unwrap_or_default();
        overlays.insert(name.to_string(), voxels);
    }
    let (width, height, image) = slice_image(&s.image, axis, q.index);
    Ok(Json(SliceResponse {
        axis,
        index: q.index,
        width,
        height,
        image,
        overlays,
    }))
}

fn submission_of(
    ann_mask: &airwayal::volume::BinaryMask,
    cl: &airwayal::volume::BinaryMask,
    who: Option<&Annotator>,
    id: SampleId,
) -> AnnotationSubmission {
    AnnotationSubmission {
        sample_id: Some(id),
        mask_runs: encode_runs(ann_mask),
        centerline: cl.voxels().collect(),
        annotator: match who {
            Some(Annotator::Human(name)) => Some(name.clone()),
            _ => None,
        },
    }
}

/// The stored annotation: a queued submission, or the one applied at labeling.
async fn get_annotation(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<SampleId>,
) -> ApiResult<Json<AnnotationSubmission>> {
    let snap = app.snapshot();
    let s = snap.sample(id).ok_or_else(|| unknown(id))?;
    if let Some(a) = snap.submitted.get(&id) {
        return Ok(Json(submission_of(&a.mask, &a.centerline, Some(&a.annotator), id)));
    }
    match (&s.annotation_mask, &s.corrected_centerline) {
        (Some(m), Some(cl)) => Ok(Json(submission_of(m, cl, s.annotator.as_ref(), id))),
        _ => Err(ApiError::NotFound(format!("sample {id} has no annotation"))),
    }
}

async fn post_annotation(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<SampleId>,
    Json(sub): Json<AnnotationSubmission>,
) -> ApiResult<StatusCode> {
    let dims = {
        let snap = app.snapshot();
        snap.sample(id).ok_or_else(|| unknown(id))?.image.dims()
    };
    if sub.sample_id.is_some_and(|s| s != id) {
        return Err(ApiError::Unprocessable(format!(
            "body sample id differs from path id {id}"
        )));
    }
    let mask = decode_runs(dims, &sub.mask_runs).map_err(ApiError::Unprocessable)?;
    let centerline = decode_voxels(dims, &sub.centerline).map_err(ApiError::Unprocessable)?;
    let busy = || ApiError::Conflict("training already running".into());
    if app.is_training() {
        return Err(busy());
    }
    let mut exp = match app.writer.try_lock() {
        Ok(g) => g,
        Err(TryLockError::WouldBlock) => return Err(busy()),
        Err(TryLockError::Poisoned(_)) => return Err(ApiError::Internal("writer lock poisoned".into())),
    };
    exp.submit_annotation(Annotation {
        sample_id: id,
        mask,
        centerline,
        annotator: Annotator::Human(sub.annotator.unwrap_or_else(|| "annotator".into())),
    })?;
    app.publish(&exp);
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
struct TreeQuery {
    /// corrected | machine | gt | pred; defaults to corrected, else machine.
    source: Option<String>,
}

async fn get_tree(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<SampleId>,
    Query(q): Query<TreeQuery>,
) -> ApiResult<Json<airwayal::tree::AirwayTree>> {
    let snap = app.snapshot();
    let s = snap.sample(id).ok_or_else(|| unknown(id))?;
    let cl = match q.source.as_deref() {
        None => s.corrected_centerline.clone().or_else(|| s.machine_centerline.clone()),
        Some("corrected") => s.corrected_centerline.clone(),
        Some("machine") => s.machine_centerline.clone(),
        Some("gt") => s.gt_mask.as_ref().map(skeletonize),
        Some("pred") => snap.predicted_mask(id).map(|m| skeletonize(&m)),
        Some(other) => return Err(ApiError::Unprocessable(format!("unknown tree source {other:?}"))),
    };
    let cl = cl.ok_or_else(|| ApiError::NotFound(format!("sample {id} has no such centerline")))?;
    centerline_tree(&cl)
        .map(Json)
        .ok_or_else(|| ApiError::NotFound(format!("sample {id}: centerline is empty")))
}

async fn post_advance(State(app): State<AppState>) -> ApiResult<(StatusCode, Json<AdvanceResponse>)> {
    if app
        .training
        .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
        .is_err()
    {
        return Err(ApiError::Conflict("training already running".into()));
    }
    let snap = app.snapshot();
    let refuse = |e: ApiError| {
        app.training.store(false, Ordering::SeqCst);
        Err(e)
    };
    if snap.finished() {
        return refuse(ApiError::Conflict("the round budget is spent".into()));
    }
    if !snap.pending.is_empty() && snap.pending_count() > 0 {
        return refuse(ApiError::Conflict(format!(
            "{} queued samples still await annotation",
            snap.pending_count()
        )));
    }
    let round = snap.next_round();
    let worker = app.clone();
    tokio::task::spawn_blocking(move || worker.advance_blocking());
    Ok((StatusCode::ACCEPTED, Json(AdvanceResponse { round })))
}
