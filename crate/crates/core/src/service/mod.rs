//! HTTP service.
//!
//! Blocking work (model calls, index builds, file i/o) runs on the blocking
//! pool. Builds take the knowledge base's exclusive write lock; readers
//! work on an `Arc` snapshot and never wait for a build. Runs, synthesis
//! jobs and evaluations share a worker pool of `workers` permits.

mod error;

pub use error::{ApiError, ApiJson};

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{OwnedSemaphorePermit, Semaphore};

use crate::config::AppConfig;
use crate::dataset::{parse_records, read_records, DocFormat, Metadata, QAExample, ValidationOptions};
use crate::eval::{evaluate_generation, evaluate_retrieval, EvalReport, GenerationMetric, ReportStore, RetrievalEval};
use crate::gateway::{Gateway, ModelSpec};
use crate::knowledge::{BuildOptions, ChunkingConfig, IndexState, IngestOptions, KbStore, KnowledgeBase, KnowledgeError};
use crate::retrieval::{search, search_then_rerank, IvfConfig, IvfIndex, SearchBackend};
use crate::synth::{
    build_ddr_preferences, build_kbalign_sft, mine_hard_negatives, render_training_lines, synthesize_queries,
    ExportFormat, SynthesisConfig, TrainingRecord,
};
use crate::templates::TemplateSet;
use crate::workflow::{new_run_id, stream_run, RunContext, StreamEvent, TraceStore, WorkflowConfig, WorkflowKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobState {
    pub job_id: String,
    pub status: JobStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct KbEntry {
    kb: RwLock<Arc<KnowledgeBase>>,
    /// Held by mutations (uploads, builds) for their whole duration.
    write: tokio::sync::Mutex<()>,
    build: Mutex<Option<JobState>>,
    ivf: Mutex<Option<Arc<IvfIndex>>>,
}

impl KbEntry {
    fn new(kb: KnowledgeBase) -> Self {
        Self { kb: RwLock::new(Arc::new(kb)), write: Default::default(), build: Mutex::new(None), ivf: Mutex::new(None) }
    }

    fn snapshot(&self) -> Arc<KnowledgeBase> {
        self.kb.read().expect("kb lock poisoned").clone()
    }

    fn replace(&self, kb: KnowledgeBase) {
        *self.kb.write().expect("kb lock poisoned") = Arc::new(kb);
        *self.ivf.lock().expect("ivf lock poisoned") = None;
    }

    fn set_build(&self, job: JobState) {
        *self.build.lock().expect("build lock poisoned") = Some(job);
    }
}

pub struct AppState {
    pub cfg: AppConfig,
    pub gw: Gateway,
    pub templates: TemplateSet,
    store: KbStore,
    traces: TraceStore,
    reports: ReportStore,
    kbs: Mutex<HashMap<String, Arc<KbEntry>>>,
    evals: Mutex<HashMap<String, JobState>>,
    pool: Arc<Semaphore>,
}

impl AppState {
    /// Loads the model registry and templates named by `cfg`.
    pub fn from_config(cfg: AppConfig) -> Result<Self, String> {
        let gw = match &cfg.models {
            Some(path) => Gateway::from_registry_file(path).map_err(|e| e.to_string())?,
            None => Gateway::new(),
        };
        let templates = match &cfg.templates_dir {
            Some(dir) => TemplateSet::with_overrides(dir).map_err(|e| e.to_string())?,
            None => TemplateSet::builtin(),
        };
        Ok(Self::new(cfg, gw, templates))
    }

    pub fn new(cfg: AppConfig, gw: Gateway, templates: TemplateSet) -> Self {
        Self {
            store: KbStore::new(cfg.kb_dir()),
            traces: TraceStore::new(cfg.traces_dir()),
            reports: ReportStore::new(cfg.reports_dir()),
            pool: Arc::new(Semaphore::new(cfg.workers)),
            kbs: Mutex::new(HashMap::new()),
            evals: Mutex::new(HashMap::new()),
            cfg,
            gw,
            templates,
        }
    }

    fn entry(&self, kb_id: &str) -> Result<Arc<KbEntry>, ApiError> {
        let mut kbs = self.kbs.lock().expect("kb map poisoned");
        if let Some(e) = kbs.get(kb_id) {
            return Ok(e.clone());
        }
        if !valid_id(kb_id) {
            return Err(ApiError::not_found("knowledge base", kb_id));
        }
        let kb = self.store.load(kb_id)?;
        let e = Arc::new(KbEntry::new(kb));
        kbs.insert(kb_id.to_string(), e.clone());
        Ok(e)
    }

    fn kb(&self, kb_id: &str) -> Result<Arc<KnowledgeBase>, ApiError> {
        Ok(self.entry(kb_id)?.snapshot())
    }

    async fn permit(&self) -> OwnedSemaphorePermit {
        self.pool.clone().acquire_owned().await.expect("worker pool closed")
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) && !id.starts_with('.')
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

type AppResult<T> = Result<T, ApiError>;
type Shared = State<Arc<AppState>>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/v1/kb", post(create_kb).get(list_kbs))
        .route("/v1/kb/{id}", get(kb_status))
        .route("/v1/kb/{id}/documents", post(add_documents))
        .route("/v1/kb/{id}/build", post(build_kb))
        .route("/v1/models", get(list_models).post(register_model))
        .route("/v1/search", post(search_kb))
        .route("/v1/runs", post(start_run))
        .route("/v1/runs/{id}/trace", get(get_trace))
        .route("/v1/synth/{kind}", post(synth))
        .route("/v1/eval", post(start_eval))
        .route("/v1/eval/{id}", get(get_eval))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

async fn auth(State(state): Shared, req: Request, next: Next) -> Response {
    if let Some(token) = &state.cfg.auth_token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token").into_response();
        }
    }
    next.run(req).await
}

/// Binds `listener` and serves until the process ends.
pub async fn serve(state: Arc<AppState>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

#[derive(Deserialize)]
struct CreateKb {
    kb_id: String,
    #[serde(default)]
    chunk_size: Option<usize>,
    #[serde(default)]
    overlap_fraction: Option<f64>,
    #[serde(default)]
    embedder_id: Option<String>,
    #[serde(default)]
    tokenizer_id: Option<String>,
}

async fn create_kb(State(st): Shared, ApiJson(body): ApiJson<CreateKb>) -> AppResult<(StatusCode, Json<Value>)> {
    if !valid_id(&body.kb_id) {
        return Err(ApiError::bad_request(format!("invalid kb_id `{}`", body.kb_id)));
    }
    let mut chunking = ChunkingConfig::default();
    if let Some(n) = body.chunk_size {
        chunking.chunk_size = n;
    }
    if let Some(f) = body.overlap_fraction {
        chunking.overlap_fraction = f;
    }
    if let Some(t) = body.tokenizer_id {
        chunking.tokenizer_id = t;
    }
    let embedder_id = match body.embedder_id {
        Some(e) => e,
        None => st
            .gw
            .list()
            .into_iter()
            .find(|s| s.role == crate::gateway::ModelRole::Embedder)
            .map(|s| s.model_id)
            .ok_or_else(|| ApiError::bad_request("no embedder_id given and no embedder registered"))?,
    };
    let dim = st.gw.embedding_dim(&embedder_id)?;
    let kb = KnowledgeBase::new(&body.kb_id, chunking.clone(), &embedder_id, dim)?;
    let st2 = st.clone();
    blocking(move || {
        let mut kbs = st2.kbs.lock().expect("kb map poisoned");
        if kbs.contains_key(kb.kb_id()) || st2.store.exists(kb.kb_id()) {
            return Err(KnowledgeError::AlreadyExists(kb.kb_id().to_string()).into());
        }
        st2.store.save(&kb)?;
        kbs.insert(kb.kb_id().to_string(), Arc::new(KbEntry::new(kb)));
        Ok(())
    })
    .await?;
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "kb_id": body.kb_id,
            "chunk_size": chunking.chunk_size,
            "overlap_fraction": chunking.overlap_fraction,
            "tokenizer_id": chunking.tokenizer_id,
            "embedder_id": embedder_id,
            "embedding_dim": dim,
        })),
    ))
}

async fn list_kbs(State(st): Shared) -> Json<Value> {
    Json(json!({ "kb_ids": st.store.list() }))
}

fn status_json(entry: &KbEntry) -> Value {
    let kb = entry.snapshot();
    let mut v = serde_json::to_value(kb.status()).expect("status serializes");
    let build = entry.build.lock().expect("build lock poisoned").clone();
    if let Some(job) = &build {
        if matches!(job.status, JobStatus::Pending | JobStatus::Running) {
            v["index_state"] = json!(IndexState::Building);
        }
        v["build"] = serde_json::to_value(job).expect("job serializes");
    }
    v
}

async fn kb_status(State(st): Shared, UrlPath(id): UrlPath<String>) -> AppResult<Json<Value>> {
    let entry = st.entry(&id)?;
    Ok(Json(status_json(&entry)))
}

#[derive(Deserialize)]
struct DocumentIn {
    #[serde(default)]
    doc_id: Option<String>,
    text: String,
    #[serde(default)]
    format: Option<DocFormat>,
    #[serde(default)]
    filename: Option<String>,
    #[serde(default)]
    metadata: Metadata,
    /// jsonl/csv: field holding document text.
    #[serde(default)]
    text_column: Option<String>,
    #[serde(default)]
    id_column: Option<String>,
}

#[derive(Deserialize)]
struct UploadBody {
    documents: Vec<DocumentIn>,
}

async fn add_documents(
    State(st): Shared,
    UrlPath(id): UrlPath<String>,
    ApiJson(body): ApiJson<UploadBody>,
) -> AppResult<(StatusCode, Json<Value>)> {
    let entry = st.entry(&id)?;
    let _guard = entry.write.lock().await;
    let upload_dir = st.cfg.data_dir.join("uploads").join(uuid::Uuid::new_v4().to_string());
    let (st2, entry2) = (st.clone(), entry.clone());
    let added = blocking(move || {
        let mut kb = (*entry2.snapshot()).clone();
        let mut added = Vec::new();
        for (i, d) in body.documents.into_iter().enumerate() {
            let format = d.format.unwrap_or(DocFormat::Txt);
            match format {
                DocFormat::Txt | DocFormat::Markdown => {
                    let doc_id = d.doc_id.unwrap_or_else(|| format!("doc-{}", kb.documents().len() + 1));
                    let source = d.filename.unwrap_or_else(|| "upload".to_string());
                    added.push(kb.add_document(&doc_id, &source, format, &d.text, d.metadata)?);
                }
                DocFormat::Jsonl | DocFormat::Csv => {
                    let ext = if format == DocFormat::Csv { "csv" } else { "jsonl" };
                    let name = d.filename.unwrap_or_else(|| format!("upload-{}.{ext}", i + 1));
                    if !valid_id(&name) {
                        return Err(ApiError::bad_request(format!("invalid filename `{name}`")));
                    }
                    std::fs::create_dir_all(&upload_dir).map_err(|e| ApiError::internal(e.to_string()))?;
                    let path = upload_dir.join(name);
                    std::fs::write(&path, &d.text).map_err(|e| ApiError::internal(e.to_string()))?;
                    let opts = IngestOptions { text_column: d.text_column, id_column: d.id_column };
                    added.extend(kb.ingest(&path, format, &opts)?);
                }
            }
        }
        st2.store.save(&kb)?;
        entry2.replace(kb);
        Ok(added)
    })
    .await?;
    let status = status_json(&entry);
    Ok((StatusCode::CREATED, Json(json!({ "kb_id": id, "added": added, "status": status }))))
}

async fn build_kb(State(st): Shared, UrlPath(id): UrlPath<String>) -> AppResult<(StatusCode, Json<JobState>)> {
    let entry = st.entry(&id)?;
    let job = JobState { job_id: new_run_id(), status: JobStatus::Pending, error: None };
    {
        let mut b = entry.build.lock().expect("build lock poisoned");
        if b.as_ref().is_some_and(|j| matches!(j.status, JobStatus::Pending | JobStatus::Running)) {
            return Err(ApiError::new(StatusCode::CONFLICT, "build_in_progress", format!("knowledge base {id} is building")));
        }
        *b = Some(job.clone());
    }
    let job_id = job.job_id.clone();
    tokio::spawn(async move {
        let _guard = entry.write.lock().await;
        entry.set_build(JobState { job_id: job_id.clone(), status: JobStatus::Running, error: None });
        let entry2 = entry.clone();
        let result = tokio::task::spawn_blocking(move || {
            let mut kb = (*entry2.snapshot()).clone();
            let opts = BuildOptions { batch_size: st.cfg.build_batch_size, parallelism: st.cfg.build_parallelism };
            let built = kb.build_index(&st.gw, &opts);
            // committed batches are kept so a later build resumes
            let saved = st.store.save(&kb);
            entry2.replace(kb);
            built.map(|_| ()).and(saved).map_err(|e| e.to_string())
        })
        .await
        .unwrap_or_else(|e| Err(e.to_string()));
        let (status, error) = match result {
            Ok(()) => (JobStatus::Done, None),
            Err(e) => (JobStatus::Failed, Some(e)),
        };
        entry.set_build(JobState { job_id, status, error });
    });
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn list_models(State(st): Shared) -> Json<Value> {
    Json(json!({ "models": st.gw.list() }))
}

async fn register_model(State(st): Shared, ApiJson(spec): ApiJson<ModelSpec>) -> AppResult<(StatusCode, Json<ModelSpec>)> {
    st.gw.register(spec.clone())?;
    Ok((StatusCode::CREATED, Json(spec)))
}

#[derive(Deserialize)]
struct SearchBody {
    kb_id: String,
    query: String,
    #[serde(default = "default_search_k")]
    k: usize,
    #[serde(default)]
    approx: bool,
    #[serde(default)]
    reranker_id: Option<String>,
    #[serde(default)]
    k_retrieve: Option<usize>,
}

fn default_search_k() -> usize {
    10
}

async fn search_kb(State(st): Shared, ApiJson(body): ApiJson<SearchBody>) -> AppResult<Json<Value>> {
    let entry = st.entry(&body.kb_id)?;
    let kb = entry.snapshot();
    kb.ensure_ready()?;
    let hits = blocking(move || {
        let hits = match (&body.reranker_id, body.approx) {
            (Some(r), _) => search_then_rerank(&kb, &st.gw, &body.query, body.k_retrieve.unwrap_or(body.k * 4).max(body.k), body.k, r)?,
            (None, true) => {
                let ivf = {
                    let mut slot = entry.ivf.lock().expect("ivf lock poisoned");
                    match slot.as_ref() {
                        Some(i) => i.clone(),
                        None => {
                            let built = Arc::new(IvfIndex::build(&kb, &IvfConfig::default())?);
                            *slot = Some(built.clone());
                            built
                        }
                    }
                };
                search(&kb, &st.gw, &body.query, body.k, &SearchBackend::Approx(&ivf))?
            }
            (None, false) => search(&kb, &st.gw, &body.query, body.k, &SearchBackend::Exact)?,
        };
        Ok(hits
            .into_iter()
            .map(|h| {
                let c = kb.chunk(&h.chunk_id);
                json!({
                    "chunk_id": h.chunk_id,
                    "doc_id": c.map(|c| c.doc_id.as_str()),
                    "score": h.score,
                    "rank": h.rank,
                    "text": c.map(|c| c.text.as_str()),
                })
            })
            .collect::<Vec<_>>())
    })
    .await?;
    Ok(Json(json!({ "hits": hits })))
}

#[derive(Deserialize)]
struct RunBody {
    #[serde(flatten)]
    config: WorkflowConfig,
    query: String,
    #[serde(default)]
    stream: bool,
    #[serde(default)]
    run_id: Option<String>,
}

async fn start_run(State(st): Shared, ApiJson(body): ApiJson<RunBody>) -> AppResult<Response> {
    let mut cfg = body.config;
    cfg.fill_defaults();
    cfg.validate()?;
    let run_id = body.run_id.unwrap_or_else(new_run_id);
    if !valid_id(&run_id) {
        return Err(ApiError::bad_request(format!("invalid run_id `{run_id}`")));
    }
    let kb = st.kb(&cfg.kb_id)?;
    kb.ensure_ready()?;
    let permit = st.permit().await;
    let query = body.query;
    if !body.stream {
        let trace = blocking(move || {
            let _permit = permit;
            let ctx = RunContext { kb: &kb, gw: &st.gw, templates: &st.templates };
            Ok(stream_run(&cfg, &ctx, &query, &run_id, Some(&st.traces), &mut |_| {})?)
        })
        .await?;
        return Ok(Json(json!({ "run_id": trace.run_id, "final_answer": trace.final_answer, "trace": trace })).into_response());
    }
    let (tx, rx) = tokio::sync::mpsc::unbounded_channel::<StreamEvent>();
    // the run owns its side of the channel; a vanished client only makes
    // sends fail, the run still completes and persists its trace
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let ctx = RunContext { kb: &kb, gw: &st.gw, templates: &st.templates };
        let _ = stream_run(&cfg, &ctx, &query, &run_id, Some(&st.traces), &mut |e| {
            let _ = tx.send(e.clone());
        });
    });
    let events = futures::stream::unfold(rx, |mut rx| async move {
        let e = rx.recv().await?;
        let ev = Event::default().event(e.name()).json_data(e.data()).expect("event data serializes");
        Some((Ok::<_, Infallible>(ev), rx))
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()).into_response())
}

async fn get_trace(State(st): Shared, UrlPath(id): UrlPath<String>) -> AppResult<Json<Value>> {
    let trace = blocking(move || Ok(st.traces.load(&id)?)).await?;
    Ok(Json(serde_json::to_value(trace).expect("trace serializes")))
}

#[derive(Deserialize)]
struct PairIn {
    query: String,
    positive_chunk_ids: Vec<String>,
}

#[derive(Deserialize)]
struct SynthBody {
    kb_id: String,
    #[serde(default)]
    generator_id: Option<String>,
    #[serde(default)]
    config: Option<SynthesisConfig>,
    #[serde(default)]
    pairs: Vec<PairIn>,
    #[serde(default)]
    examples: Vec<Value>,
}

fn parse_qa(values: &[Value], opts: &ValidationOptions) -> AppResult<Vec<QAExample>> {
    let text: String = values.iter().map(|v| format!("{v}\n")).collect();
    Ok(parse_records(&text, opts)?)
}

async fn synth(State(st): Shared, UrlPath(kind): UrlPath<String>, ApiJson(body): ApiJson<SynthBody>) -> AppResult<Json<Value>> {
    if !matches!(kind.as_str(), "queries" | "negatives" | "ddr" | "kbalign") {
        return Err(ApiError::not_found("synthesis kind", &kind));
    }
    let cfg = body.config.unwrap_or_default();
    cfg.validate()?;
    let kb = st.kb(&body.kb_id)?;
    let generator = || body.generator_id.clone().ok_or_else(|| ApiError::bad_request("generator_id is required"));
    let permit = st.permit().await;
    let out = match kind.as_str() {
        "queries" => {
            let g = generator()?;
            blocking(move || {
                let _permit = permit;
                let r = synthesize_queries(&kb, &st.gw, &g, &cfg, &st.templates)?;
                Ok(serde_json::to_value(r).expect("serializes"))
            })
            .await?
        }
        "negatives" => {
            kb.ensure_ready()?;
            let unknown: Vec<&str> = body
                .pairs
                .iter()
                .flat_map(|p| p.positive_chunk_ids.iter())
                .filter(|id| kb.chunk(id).is_none())
                .map(String::as_str)
                .collect();
            if !unknown.is_empty() {
                return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "unresolved_chunks", "unknown positive chunk ids")
                    .with_detail("chunk_ids", unknown));
            }
            let pairs: Vec<(String, Vec<String>)> = body.pairs.into_iter().map(|p| (p.query, p.positive_chunk_ids)).collect();
            blocking(move || {
                let _permit = permit;
                let examples = mine_hard_negatives(&kb, &st.gw, &pairs, &cfg)?;
                let records: Vec<TrainingRecord> = examples.iter().cloned().map(TrainingRecord::RetrievalPair).collect();
                let export = render_training_lines(&records, ExportFormat::RetrievalJsonl, Some(&kb))?;
                Ok(json!({ "examples": examples, "export": export }))
            })
            .await?
        }
        "ddr" => {
            let g = generator()?;
            let qa = parse_qa(&body.examples, &ValidationOptions::default())?;
            blocking(move || {
                let _permit = permit;
                let r = build_ddr_preferences(&kb, &st.gw, &qa, &g, &cfg, &st.templates)?;
                let records: Vec<TrainingRecord> = r.pairs.iter().cloned().map(TrainingRecord::Preference).collect();
                let export = render_training_lines(&records, ExportFormat::DpoJsonl, None)?;
                let mut v = serde_json::to_value(r).expect("serializes");
                v["export"] = json!(export);
                Ok(v)
            })
            .await?
        }
        _ => {
            let g = generator()?;
            blocking(move || {
                let _permit = permit;
                let r = build_kbalign_sft(&kb, &st.gw, &g, &cfg, &st.templates)?;
                let records: Vec<TrainingRecord> = r.examples.iter().cloned().map(TrainingRecord::Sft).collect();
                let export = render_training_lines(&records, ExportFormat::SftJsonl, None)?;
                let mut v = serde_json::to_value(r).expect("serializes");
                v["export"] = json!(export);
                Ok(v)
            })
            .await?
        }
    };
    Ok(Json(out))
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
enum EvalKind {
    Retrieval,
    Generation,
}

#[derive(Deserialize)]
struct EvalBody {
    kind: EvalKind,
    kb_id: String,
    #[serde(default)]
    dataset_id: Option<String>,
    #[serde(default)]
    examples: Vec<Value>,
    /// Server-side JSONL dataset, used when `examples` is empty.
    #[serde(default)]
    dataset_path: Option<PathBuf>,
    #[serde(default = "default_search_k")]
    k: usize,
    #[serde(default)]
    workflow: Option<WorkflowConfig>,
    #[serde(default)]
    metrics: Vec<GenerationMetric>,
    #[serde(default)]
    run_id: Option<String>,
}

async fn start_eval(State(st): Shared, ApiJson(body): ApiJson<EvalBody>) -> AppResult<(StatusCode, Json<Value>)> {
    let run_id = body.run_id.clone().unwrap_or_else(new_run_id);
    if !valid_id(&run_id) {
        return Err(ApiError::bad_request(format!("invalid run_id `{run_id}`")));
    }
    let opts = ValidationOptions::default();
    let (dataset, dataset_id) = match (&body.dataset_path, body.examples.is_empty()) {
        (Some(p), true) => {
            let id = body.dataset_id.clone().unwrap_or_else(|| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            (read_records::<QAExample>(p, &opts)?, id)
        }
        (None, true) => return Err(ApiError::bad_request("examples or dataset_path is required")),
        _ => (parse_qa(&body.examples, &opts)?, body.dataset_id.clone().unwrap_or_else(|| "inline".into())),
    };
    let kb = st.kb(&body.kb_id)?;
    kb.ensure_ready()?;
    let workflow = match body.kind {
        EvalKind::Retrieval => {
            if body.k == 0 {
                return Err(ApiError::bad_request("k must be at least 1"));
            }
            None
        }
        EvalKind::Generation => {
            let mut w = body.workflow.clone().unwrap_or_else(|| WorkflowConfig::new(WorkflowKind::Vanilla, &body.kb_id, ""));
            if w.kb_id.is_empty() {
                w.kb_id = body.kb_id.clone();
            }
            w.fill_defaults();
            w.validate()?;
            Some(w)
        }
    };
    {
        let mut evals = st.evals.lock().expect("eval map poisoned");
        if evals.contains_key(&run_id) || st.reports.load(&run_id).is_ok() {
            return Err(ApiError::new(StatusCode::CONFLICT, "already_exists", format!("evaluation {run_id} exists")));
        }
        evals.insert(run_id.clone(), JobState { job_id: run_id.clone(), status: JobStatus::Pending, error: None });
    }
    let metrics = if body.metrics.is_empty() { GenerationMetric::ALL.to_vec() } else { body.metrics.clone() };
    let (k, rid) = (body.k, run_id.clone());
    tokio::spawn(async move {
        let permit = st.permit().await;
        st.evals
            .lock()
            .expect("eval map poisoned")
            .insert(rid.clone(), JobState { job_id: rid.clone(), status: JobStatus::Running, error: None });
        let st2 = st.clone();
        let rid2 = rid.clone();
        let result = tokio::task::spawn_blocking(move || -> Result<EvalReport, String> {
            let _permit = permit;
            let workers = st2.cfg.workers;
            let report = match workflow {
                None => evaluate_retrieval(&RetrievalEval { kb: &kb, gw: &st2.gw, k, workers }, &dataset, &dataset_id, &rid2),
                Some(w) => {
                    let ctx = RunContext { kb: &kb, gw: &st2.gw, templates: &st2.templates };
                    evaluate_generation(&w, &ctx, &dataset, &metrics, &dataset_id, &rid2, workers)
                }
            }
            .map_err(|e| e.to_string())?;
            st2.reports.save(&report).map_err(|e| e.to_string())?;
            Ok(report)
        })
        .await
        .unwrap_or_else(|e| Err(e.to_string()));
        let state = match result {
            Ok(_) => JobState { job_id: rid.clone(), status: JobStatus::Done, error: None },
            Err(e) => JobState { job_id: rid.clone(), status: JobStatus::Failed, error: Some(e) },
        };
        st.evals.lock().expect("eval map poisoned").insert(rid, state);
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "run_id": run_id, "status": JobStatus::Pending }))))
}

async fn get_eval(State(st): Shared, UrlPath(id): UrlPath<String>) -> AppResult<Json<Value>> {
    let job = st.evals.lock().expect("eval map poisoned").get(&id).cloned();
    match job {
        Some(j) if j.status != JobStatus::Done => Ok(Json(json!({ "run_id": id, "status": j.status, "error": j.error }))),
        _ => {
            let report = blocking(move || Ok(st.reports.load(&id)?)).await?;
            Ok(Json(json!({ "run_id": report.run_id, "status": JobStatus::Done, "report": report })))
        }
    }
}
