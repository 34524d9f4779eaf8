use std::collections::HashMap;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::body_model::BodyModel;
use crate::pipeline::{with_jobs, DatasetManifest, Status};

use super::verdicts::{replay, verdict_log_path, Verdict, VerdictLog, VerdictRequest};
use super::{now_ms, prepare_review_assets, AssetStore, Lease, ReviewError, ReviewItem};

#[derive(Debug, Clone)]
pub struct ReviewConfig {
    pub manifest: PathBuf,
    pub asset_cache: PathBuf,
    pub lease_ttl: Duration,
    pub jobs: Option<usize>,
}

impl ReviewConfig {
    pub fn new(manifest: impl Into<PathBuf>, asset_cache: impl Into<PathBuf>) -> Self {
        ReviewConfig {
            manifest: manifest.into(),
            asset_cache: asset_cache.into(),
            lease_ttl: Duration::from_secs(300),
            jobs: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub unreviewed: usize,
    pub accepted: usize,
    pub rejected: usize,
}

impl Stats {
    fn of(m: &DatasetManifest) -> Self {
        Stats {
            unreviewed: m.count(Status::Unreviewed),
            accepted: m.count(Status::Accepted),
            rejected: m.count(Status::Rejected),
        }
    }
}

/// Immutable view handed to readers; replaced wholesale after each verdict.
struct Snapshot {
    manifest: DatasetManifest,
    /// Prepared items by sample id. Fits do not change while serving, so
    /// this is shared by every snapshot.
    items: Arc<HashMap<String, ReviewItem>>,
}

struct Core {
    snapshot: RwLock<Arc<Snapshot>>,
    leases: Mutex<HashMap<String, Lease>>,
    store: AssetStore,
    lease_ttl_ms: u64,
}

impl Core {
    fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn item(&self, snap: &Snapshot, id: &str, leases: &HashMap<String, Lease>, now: u64) -> Option<ReviewItem> {
        let s = snap.manifest.sample(id)?;
        let mut item = snap.items.get(id)?.clone();
        item.status = s.status;
        item.lease = leases.get(id).filter(|l| l.expires_ms > now).cloned();
        Some(item)
    }

    /// Leases `id` to `annotator` unless someone else holds a live lease.
    fn try_lease(&self, leases: &mut HashMap<String, Lease>, id: &str, annotator: &str, now: u64) -> Result<Lease, ReviewError> {
        if let Some(l) = leases.get(id) {
            if l.expires_ms > now && l.annotator != annotator {
                return Err(ReviewError::Leased { id: id.to_string(), holder: l.annotator.clone() });
            }
        }
        let lease = Lease { annotator: annotator.to_string(), expires_ms: now + self.lease_ttl_ms };
        leases.insert(id.to_string(), lease.clone());
        Ok(lease)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictOutcome {
    pub verdict: Verdict,
    pub status: Status,
    /// The request id was seen before; nothing was written.
    pub duplicate: bool,
}

type Reply = oneshot::Sender<Result<VerdictOutcome, ReviewError>>;

struct VerdictCommand {
    id: String,
    req: VerdictRequest,
    reply: Reply,
}

/// Owns the log and the manifest file; the only code that writes either.
struct Writer {
    core: Arc<Core>,
    log: VerdictLog,
    manifest_path: PathBuf,
    manifest: DatasetManifest,
    by_request: HashMap<(String, String), Verdict>,
}

impl Writer {
    fn run(mut self, rx: mpsc::Receiver<VerdictCommand>) {
        for cmd in rx {
            let r = self.apply(&cmd.id, cmd.req);
            let _ = cmd.reply.send(r);
        }
    }

    fn apply(&mut self, id: &str, req: VerdictRequest) -> Result<VerdictOutcome, ReviewError> {
        let sample = self.manifest.sample(id).ok_or_else(|| ReviewError::UnknownSample(id.to_string()))?;
        let fit = sample.fit.clone().ok_or_else(|| ReviewError::MissingFit(id.to_string()))?;
        if let Some(rid) = &req.request_id {
            if let Some(v) = self.by_request.get(&(id.to_string(), rid.clone())) {
                return Ok(VerdictOutcome { verdict: v.clone(), status: sample.status, duplicate: true });
            }
        }
        if req.fit.as_ref().is_some_and(|f| *f != fit) {
            return Err(ReviewError::Malformed(format!("verdict is for fit {}, current fit is {fit}", req.fit.unwrap())));
        }
        let now = now_ms();
        let mut leases = self.core.leases.lock().expect("lease lock");
        if let Some(l) = leases.get(id) {
            if l.expires_ms > now && l.annotator != req.annotator {
                return Err(ReviewError::Leased { id: id.to_string(), holder: l.annotator.clone() });
            }
        }
        let verdict = Verdict {
            id: id.to_string(),
            fit,
            decision: req.decision,
            annotator: req.annotator,
            timestamp_ms: now,
            note: req.note,
            request_id: req.request_id,
        };
        self.log.append(&verdict)?;
        leases.remove(id);
        drop(leases);
        if let Some(rid) = &verdict.request_id {
            self.by_request.insert((id.to_string(), rid.clone()), verdict.clone());
        }
        let status = verdict.decision.status();
        let s = self.manifest.samples.iter_mut().find(|s| s.id == id).expect("sample checked above");
        s.status = status;
        // the log is authoritative; a failed manifest write is repaired by
        // replay on the next start
        if let Err(e) = self.manifest.save(&self.manifest_path) {
            log::error!("saving {}: {e}", self.manifest_path.display());
        }
        let items = self.core.snapshot().items.clone();
        *self.core.snapshot.write().expect("snapshot lock") =
            Arc::new(Snapshot { manifest: self.manifest.clone(), items });
        Ok(VerdictOutcome { verdict, status, duplicate: false })
    }
}

#[derive(Clone)]
struct AppState {
    core: Arc<Core>,
    tx: mpsc::Sender<VerdictCommand>,
}

/// A running review backend: prepared assets, replayed verdicts and the
/// writer thread. HTTP routing is obtained with [`ReviewService::router`].
pub struct ReviewService {
    state: AppState,
    log_path: PathBuf,
}

impl ReviewService {
    /// Loads the manifest, replays the verdict log into it, saves it and
    /// renders the assets of every fitted sample.
    pub fn open(cfg: &ReviewConfig, model: &BodyModel) -> Result<Self, ReviewError> {
        let mut manifest = DatasetManifest::load(&cfg.manifest)?;
        let log_path = verdict_log_path(&cfg.manifest);
        let (log, verdicts) = VerdictLog::open(&log_path)?;
        if replay(&mut manifest, &verdicts) {
            manifest.save(&cfg.manifest)?;
        }
        let store = AssetStore::open(&cfg.asset_cache)?;
        let fitted: Vec<_> = manifest.samples.iter().filter(|s| s.fit.is_some()).collect();
        let prepared: Vec<_> = with_jobs(cfg.jobs, || {
            fitted.par_iter().map(|s| (s.id.clone(), prepare_review_assets(&manifest, s, model, &store))).collect()
        });
        let mut items = HashMap::new();
        for (id, r) in prepared {
            match r {
                Ok(item) => {
                    items.insert(id, item);
                }
                Err(e) => log::warn!("sample {id} is not served: {e}"),
            }
        }
        let by_request = verdicts
            .iter()
            .filter_map(|v| v.request_id.as_ref().map(|r| ((v.id.clone(), r.clone()), v.clone())))
            .collect();
        let core = Arc::new(Core {
            snapshot: RwLock::new(Arc::new(Snapshot { manifest: manifest.clone(), items: Arc::new(items) })),
            leases: Mutex::new(HashMap::new()),
            store,
            lease_ttl_ms: cfg.lease_ttl.as_millis() as u64,
        });
        let (tx, rx) = mpsc::channel();
        let writer = Writer { core: core.clone(), log, manifest_path: cfg.manifest.clone(), manifest, by_request };
        std::thread::Builder::new()
            .name("verdict-writer".into())
            .spawn(move || writer.run(rx))
            .map_err(|e| ReviewError::io(&log_path, e))?;
        Ok(ReviewService { state: AppState { core, tx }, log_path })
    }

    pub fn router(&self) -> Router {
        router(self.state.clone())
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn stats(&self) -> Stats {
        Stats::of(&self.state.core.snapshot().manifest)
    }

    /// The manifest as currently served.
    pub fn manifest(&self) -> DatasetManifest {
        self.state.core.snapshot().manifest.clone()
    }

    pub fn n_items(&self) -> usize {
        self.state.core.snapshot().items.len()
    }

    pub async fn serve(self, listener: tokio::net::TcpListener, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
        axum::serve(listener, self.router()).with_graceful_shutdown(shutdown).await
    }
}

struct ApiError(StatusCode, String);

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let code = match &e {
            ReviewError::UnknownSample(_) | ReviewError::MissingFit(_) => StatusCode::NOT_FOUND,
            ReviewError::Malformed(_) | ReviewError::Leased { .. } => StatusCode::CONFLICT,
            ReviewError::Closed => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn parse_status(s: Option<&str>, default: Option<Status>) -> Result<Option<Status>, ApiError> {
    match s {
        None => Ok(default),
        Some("all") => Ok(None),
        Some(s) => Status::parse(s)
            .map(Some)
            .ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, format!("unknown status {s:?}"))),
    }
}

fn not_found(id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("unknown item {id}"))
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<String>,
    limit: Option<usize>,
    /// Lease the returned items to this annotator, skipping items others hold.
    annotator: Option<String>,
}

async fn list_items(State(st): State<AppState>, Query(q): Query<ListQuery>) -> Result<Json<Vec<ReviewItem>>, ApiError> {
    let status = parse_status(q.status.as_deref(), Some(Status::Unreviewed))?;
    let limit = q.limit.unwrap_or(50);
    let snap = st.core.snapshot();
    let now = now_ms();
    let mut leases = st.core.leases.lock().expect("lease lock");
    let mut out = Vec::new();
    for s in &snap.manifest.samples {
        if out.len() >= limit {
            break;
        }
        if !snap.items.contains_key(&s.id) || status.is_some_and(|st| st != s.status) {
            continue;
        }
        if let Some(a) = q.annotator.as_deref().filter(|a| !a.is_empty()) {
            if st.core.try_lease(&mut leases, &s.id, a, now).is_err() {
                continue;
            }
        }
        out.extend(st.core.item(&snap, &s.id, &leases, now));
    }
    Ok(Json(out))
}

async fn get_item(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<ReviewItem>, ApiError> {
    let snap = st.core.snapshot();
    let leases = st.core.leases.lock().expect("lease lock");
    st.core.item(&snap, &id, &leases, now_ms()).map(Json).ok_or_else(|| not_found(&id))
}

#[derive(Debug, Deserialize)]
struct LeaseRequest {
    annotator: String,
}

async fn lease_item(State(st): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Json<Lease>, ApiError> {
    if !st.core.snapshot().items.contains_key(&id) {
        return Err(not_found(&id));
    }
    let req: LeaseRequest = serde_json::from_slice(&body)
        .ok()
        .filter(|r: &LeaseRequest| !r.annotator.trim().is_empty())
        .ok_or_else(|| ApiError(StatusCode::CONFLICT, "malformed lease request".into()))?;
    let mut leases = st.core.leases.lock().expect("lease lock");
    Ok(Json(st.core.try_lease(&mut leases, &id, &req.annotator, now_ms())?))
}

async fn post_verdict(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<VerdictOutcome>, ApiError> {
    if !st.core.snapshot().items.contains_key(&id) {
        return Err(not_found(&id));
    }
    let req = VerdictRequest::parse(&body)?;
    let (reply, rx) = oneshot::channel();
    st.tx.send(VerdictCommand { id, req, reply }).map_err(|_| ReviewError::Closed)?;
    Ok(Json(rx.await.map_err(|_| ReviewError::Closed)??))
}

async fn stats(State(st): State<AppState>) -> Json<Stats> {
    Json(Stats::of(&st.core.snapshot().manifest))
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    status: Option<String>,
}

async fn export(State(st): State<AppState>, Query(q): Query<ExportQuery>) -> Result<Response, ApiError> {
    let status = parse_status(q.status.as_deref(), Some(Status::Accepted))?
        .ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, "export needs a single status".into()))?;
    let body = st.core.snapshot().manifest.subset(status).to_json();
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

async fn asset(State(st): State<AppState>, UrlPath(hash): UrlPath<String>) -> Result<Response, ApiError> {
    let bytes = st.core.store.get(&hash).ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown asset {hash}")))?;
    Ok((
        [(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "public, max-age=31536000, immutable")],
        bytes,
    )
        .into_response())
}

fn router(state: AppState) -> Router {
    Router::new()
        .route("/items", get(list_items))
        .route("/items/:id", get(get_item))
        .route("/items/:id/lease", post(lease_item))
        .route("/items/:id/verdict", post(post_verdict))
        .route("/assets/:hash", get(asset))
        .route("/stats", get(stats))
        .route("/export", get(export))
        .with_state(state)
}
