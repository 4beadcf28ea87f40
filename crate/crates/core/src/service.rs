//! HTTP API under `/v1`, plus optional static hosting of the operator console.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use crate::config::Runtime;
use crate::corpus::{CommandClass, Dataset, Example, Split};
use crate::eval::{evaluate, EvalError, EvalOptions, EvalReport, PrecisionMode};
use crate::grammar;
use crate::llm::Health;
use crate::pipeline::{GenerationResult, Pipeline, PipelineConfig, PipelineError, RunError, Step};
use crate::retriever::IndexedCorpus;
use crate::store::{AuditKind, Decision, InteractionEntry, SessionView, Store, StoreError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub details: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.to_string(),
            message: message.into(),
            details: Value::Null,
        }
    }

    fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::UnknownEntry(_) | StoreError::UnknownSession(_) => StatusCode::NOT_FOUND,
            StoreError::AlreadyDecided { .. } => StatusCode::CONFLICT,
            StoreError::Io { .. } | StoreError::Corrupt { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let code = match &e {
            StoreError::UnknownEntry(_) => "unknown_entry",
            StoreError::UnknownSession(_) => "unknown_session",
            StoreError::AlreadyDecided { .. } => "already_decided",
            _ => "store_failure",
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Everything the handlers share.
pub struct AppState {
    pub pipeline: Pipeline,
    pub store: Store,
    pub config: PipelineConfig,
    /// Where accepted corpus additions are written back, if anywhere.
    pub corpus_path: Option<PathBuf>,
    pub precision_mode: PrecisionMode,
    pub eval_concurrency: usize,
    corpus_write: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn new(pipeline: Pipeline, store: Store, config: PipelineConfig) -> Self {
        Self {
            pipeline,
            store,
            config,
            corpus_path: None,
            precision_mode: PrecisionMode::Set,
            eval_concurrency: 1,
            corpus_write: tokio::sync::Mutex::new(()),
        }
    }

    pub fn from_runtime(rt: Runtime, store: Store) -> Self {
        let mut s = Self::new(rt.pipeline, store, rt.settings.pipeline_config());
        s.corpus_path = rt.settings.corpus.clone();
        s.precision_mode = rt.settings.precision_mode;
        s.eval_concurrency = rt.settings.eval_concurrency;
        s
    }
}

pub fn router(state: Arc<AppState>, console_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/classes", get(classes))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/interpret", post(interpret))
        .route("/v1/entries/{id}", get(get_entry))
        .route("/v1/entries/{id}/decision", post(decide))
        .route("/v1/corpus/examples", get(list_examples).post(add_example))
        .route("/v1/eval", post(run_eval))
        .with_state(state);
    match console_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HealthBody {
    pub status: String,
    pub backend_id: String,
    pub backend: Health,
    pub corpus_size: usize,
    pub classes: usize,
}

async fn healthz(State(s): State<Arc<AppState>>) -> Json<HealthBody> {
    let backend = s.pipeline.backend().health().await;
    Json(HealthBody {
        status: if backend.is_healthy() {
            "ok"
        } else {
            "degraded"
        }
        .to_string(),
        backend_id: s.pipeline.backend().backend_id(),
        backend,
        corpus_size: s.pipeline.corpus().snapshot().dataset().len(),
        classes: s.pipeline.catalog().len(),
    })
}

async fn classes(State(s): State<Arc<AppState>>) -> Json<Vec<CommandClass>> {
    Json(s.pipeline.catalog().classes.clone())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

async fn create_session(State(s): State<Arc<AppState>>) -> ApiResult<SessionCreated> {
    let rec = s.store.create_session()?;
    Ok(Json(SessionCreated {
        session_id: rec.session_id,
    }))
}

async fn get_session(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<SessionView> {
    Ok(Json(s.store.session(&id)?))
}

async fn get_entry(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<InteractionEntry> {
    Ok(Json(s.store.entry(&id)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpretRequest {
    /// Existing session; a new one is created when absent.
    #[serde(default)]
    pub session_id: Option<String>,
    pub instruction: String,
    /// Overrides the configured retrieval setting for this request.
    #[serde(default)]
    pub rag: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpretResponse {
    pub session_id: String,
    pub entry_id: String,
    pub class_name: String,
    pub command: String,
    pub used_fallback: bool,
    pub retries_used: u32,
    pub result: GenerationResult,
}

fn run_error(e: &RunError, session_id: &str, entry_id: Option<&str>) -> ApiError {
    let (status, code) = match &e.error {
        PipelineError::EmptyInstruction => (StatusCode::BAD_REQUEST, "empty_instruction"),
        PipelineError::Backend(_) => (StatusCode::BAD_GATEWAY, "backend_unavailable"),
        PipelineError::Retrieval(_) => (StatusCode::BAD_GATEWAY, "retrieval_failed"),
        PipelineError::UnknownClass(_) | PipelineError::Unclassifiable { .. } => {
            (StatusCode::UNPROCESSABLE_ENTITY, "unclassifiable")
        }
        PipelineError::NoCandidate { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "no_command"),
        PipelineError::InvalidCommand { .. } => {
            (StatusCode::UNPROCESSABLE_ENTITY, "invalid_command")
        }
    };
    let mut raw: Vec<String> = e
        .classification
        .iter()
        .map(|c| c.raw_response.clone())
        .collect();
    if let PipelineError::Unclassifiable { raw_response } = &e.error {
        raw.push(raw_response.clone());
    }
    raw.extend(e.error.attempts().iter().map(|a| a.raw_response.clone()));
    let violations: Vec<_> = e
        .error
        .attempts()
        .iter()
        .flat_map(|a| a.violations.iter().cloned())
        .collect();
    ApiError::new(status, code, e.to_string()).with_details(json!({
        "step": e.step,
        "session_id": session_id,
        "entry_id": entry_id,
        "class_name": e.classification.as_ref().map(|c| c.class_name.clone()),
        "raw_responses": raw,
        "violations": violations,
    }))
}

async fn interpret(
    State(s): State<Arc<AppState>>,
    body: Result<Json<InterpretRequest>, JsonRejection>,
) -> ApiResult<InterpretResponse> {
    let Json(req) = body?;
    if req.instruction.trim().is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "empty_instruction",
            "instruction is empty",
        ));
    }
    let session_id = match req.session_id {
        Some(id) if s.store.has_session(&id) => id,
        Some(id) => return Err(StoreError::UnknownSession(id).into()),
        None => s.store.create_session()?.session_id,
    };
    let mut config = s.config.clone();
    if let Some(rag) = req.rag {
        config.rag_enabled = rag;
    }
    s.store.audit(
        AuditKind::Request,
        Some(&session_id),
        None,
        json!({"instruction": req.instruction, "rag": config.rag_enabled}),
    )?;

    match s.pipeline.run(&req.instruction, &config).await {
        Ok(result) => {
            let classification = result.trace.classification.clone();
            let entry = s.store.record_entry(
                &session_id,
                &req.instruction,
                classification.clone(),
                Some(result.clone()),
                None,
            )?;
            s.store.audit(
                AuditKind::Classify,
                Some(&session_id),
                Some(&entry.entry_id),
                json!({
                    "class_name": result.class_name,
                    "used_fallback": classification.as_ref().is_some_and(|c| c.used_fallback),
                }),
            )?;
            s.store.audit(
                AuditKind::Generate,
                Some(&session_id),
                Some(&entry.entry_id),
                json!({"command": result.command, "retries_used": result.retries_used}),
            )?;
            Ok(Json(InterpretResponse {
                session_id,
                entry_id: entry.entry_id,
                class_name: result.class_name.clone(),
                command: result.command.clone(),
                used_fallback: classification.is_some_and(|c| c.used_fallback),
                retries_used: result.retries_used,
                result,
            }))
        }
        Err(e) => {
            // Model outputs that could not be turned into a command are kept
            // for review; infrastructure failures are not entries.
            let keep = matches!(
                e.error,
                PipelineError::Unclassifiable { .. }
                    | PipelineError::UnknownClass(_)
                    | PipelineError::NoCandidate { .. }
                    | PipelineError::InvalidCommand { .. }
            );
            let entry_id = if keep {
                let entry = s.store.record_entry(
                    &session_id,
                    &req.instruction,
                    e.classification.clone(),
                    None,
                    Some(e.to_string()),
                )?;
                let kind = match e.step {
                    Step::Classify => AuditKind::Classify,
                    Step::Generate => AuditKind::Generate,
                };
                s.store.audit(
                    kind,
                    Some(&session_id),
                    Some(&entry.entry_id),
                    json!({"error": e.to_string()}),
                )?;
                Some(entry.entry_id)
            } else {
                None
            };
            Err(run_error(&e, &session_id, entry_id.as_deref()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionRequestKind {
    Approve,
    Reject,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub decision: DecisionRequestKind,
}

async fn decide(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<DecisionRequest>, JsonRejection>,
) -> ApiResult<InteractionEntry> {
    let Json(req) = body?;
    let entry = s.store.entry(&id)?;
    let decision = match req.decision {
        DecisionRequestKind::Approve => {
            let generation = entry.generation.as_ref().ok_or_else(|| {
                ApiError::new(
                    StatusCode::CONFLICT,
                    "nothing_to_approve",
                    format!("entry {id} has no generated command"),
                )
            })?;
            // Dry run: re-check the command against the current catalog.
            let class = s.pipeline.catalog().get(&generation.class_name);
            let verdict = class.map(|c| grammar::validate(&generation.command, c));
            if !verdict.as_ref().is_some_and(|v| v.is_ok()) {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "stale_command",
                    format!("entry {id} no longer validates"),
                )
                .with_details(json!({ "verdict": verdict })));
            }
            Decision::Approved
        }
        DecisionRequestKind::Reject => Decision::Rejected,
    };
    let updated = s.store.decide(&id, decision)?;
    let kind = match decision {
        Decision::Approved => AuditKind::Approve,
        _ => AuditKind::Reject,
    };
    s.store.audit(
        kind,
        Some(&updated.session_id),
        Some(&id),
        json!({
            "command": updated.generation.as_ref().map(|g| g.command.clone()),
            "dry_run": true,
        }),
    )?;
    Ok(Json(updated))
}

async fn list_examples(State(s): State<Arc<AppState>>) -> Json<Vec<Example>> {
    Json(s.pipeline.corpus().snapshot().dataset().examples.clone())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NewExample {
    #[serde(default)]
    pub id: Option<String>,
    pub input: String,
    pub command: String,
    pub class: String,
}

async fn add_example(
    State(s): State<Arc<AppState>>,
    body: Result<Json<NewExample>, JsonRejection>,
) -> ApiResult<Example> {
    let Json(req) = body?;
    let _guard = s.corpus_write.lock().await;
    let current = s.pipeline.corpus().snapshot();
    let id = req
        .id
        .unwrap_or_else(|| format!("u{}", &uuid::Uuid::new_v4().simple().to_string()[..12]));
    let example = Example::new(id, req.input, req.command, req.class);
    let next = current
        .dataset()
        .add_example(example.clone(), s.pipeline.catalog())
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_example", e.to_string()))?;
    let rebuilt = IndexedCorpus::build(next, s.pipeline.embedder())
        .await
        .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, "retrieval_failed", e.to_string()))?;
    if let Some(p) = &s.corpus_path {
        rebuilt.dataset().save(p).map_err(|e| {
            ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "store_failure",
                e.to_string(),
            )
        })?;
    }
    s.pipeline.corpus().replace(rebuilt);
    Ok(Json(example))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRequest {
    #[serde(default)]
    pub name: Option<String>,
    pub examples: Vec<Example>,
    #[serde(default)]
    pub rag: Option<bool>,
    #[serde(default)]
    pub precision_mode: Option<PrecisionMode>,
}

async fn run_eval(
    State(s): State<Arc<AppState>>,
    body: Result<Json<EvalRequest>, JsonRejection>,
) -> ApiResult<EvalReport> {
    let Json(req) = body?;
    let mut dataset = Dataset::new(req.name.unwrap_or_else(|| "eval".into()), Split::Eval);
    for ex in req.examples {
        dataset = dataset.add_example(ex, s.pipeline.catalog()).map_err(|e| {
            ApiError::new(StatusCode::BAD_REQUEST, "invalid_example", e.to_string())
        })?;
    }
    let mut config = s.config.clone();
    if let Some(rag) = req.rag {
        config.rag_enabled = rag;
    }
    let options = EvalOptions {
        precision_mode: req.precision_mode.unwrap_or(s.precision_mode),
        concurrency: s.eval_concurrency,
    };
    let report = evaluate(&dataset, &s.pipeline, &config, &options)
        .await
        .map_err(|e| {
            let (status, code) = match &e {
                EvalError::EmptyDataset => (StatusCode::BAD_REQUEST, "empty_dataset"),
                EvalError::Overlap(_) => (StatusCode::CONFLICT, "overlap"),
                EvalError::BackendUnavailable(_) => {
                    (StatusCode::BAD_GATEWAY, "backend_unavailable")
                }
                EvalError::Parse(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            };
            ApiError::new(status, code, e.to_string())
        })?;
    s.store.audit(
        AuditKind::Eval,
        None,
        None,
        json!({
            "dataset": report.dataset,
            "n": report.n,
            "accuracy": report.accuracy,
            "mean_unigram_precision": report.mean_unigram_precision,
            "rag": config.rag_enabled,
        }),
    )?;
    Ok(Json(report))
}
