#![allow(dead_code)]

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use axum::extract::State;
use axum::routing::{get, post};
use axum::{Json, Router};
use netword::corpus::{ClassCatalog, Dataset, Example, Split};
use netword::embedding::Embedder;
use netword::llm::{
    BackendError, GenerationRequest, GenerationResponse, Health, LlmBackend, ScriptRule,
    ScriptedBackend, CLASSIFIER_MARKER,
};
use netword::pipeline::Pipeline;
use netword::prompting::{
    build_classifier_prompt, build_generator_prompt, PromptBundle, PromptTemplates, SampleBlock,
};
use netword::retriever::{CorpusHandle, IndexedCorpus};
use serde_json::{json, Value};
use tokio::net::TcpListener;

pub const DEMO_INSTRUCTION: &str =
    "Could you please give me the list of active users since 2 March.";
pub const DEMO_COMMAND: &str = "list users --active 20240301 now";
pub const CLASSIFY_INSTRUCTION: &str = "Could you please give me the list of active users";

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn catalog() -> ClassCatalog {
    ClassCatalog::default_catalog()
}

pub fn shipped_corpus() -> Dataset {
    Dataset::load(
        manifest_dir().join("data/corpus.jsonl"),
        &catalog(),
        Split::TrainCorpus,
    )
    .expect("shipped corpus loads")
}

pub fn eval25() -> Dataset {
    Dataset::load(
        manifest_dir().join("tests/fixtures/eval25.jsonl"),
        &catalog(),
        Split::Eval,
    )
    .expect("fixture loads")
}

pub async fn pipeline_with(corpus: Dataset, backend: Arc<dyn LlmBackend>) -> Pipeline {
    let embedder = Arc::new(Embedder::fallback(256));
    let indexed = IndexedCorpus::build(corpus, &embedder)
        .await
        .expect("index builds");
    Pipeline::new(
        Arc::new(catalog()),
        CorpusHandle::new(indexed),
        embedder,
        backend,
    )
}

pub async fn pipeline(backend: Arc<dyn LlmBackend>) -> Pipeline {
    pipeline_with(shipped_corpus(), backend).await
}

/// Answers the active-users scenario: "list" to the classifier, the command
/// (after an `Answer:` cue) to the generator.
pub fn demo_backend() -> ScriptedBackend {
    ScriptedBackend::new(
        vec![
            ScriptRule {
                contains: vec!["active users since 2 March".into()],
                system_contains: vec![CLASSIFIER_MARKER.into()],
                response: "list".into(),
            },
            ScriptRule::new(
                "active users since 2 March",
                format!("Answer:\n{DEMO_COMMAND}"),
            ),
        ],
        "",
    )
}

/// Correct only when the prompt carries retrieved samples; otherwise it
/// rambles. Models the effect retrieval has on a small model.
pub struct SamplesGated {
    pub oracle: ScriptedBackend,
    pub calls: AtomicUsize,
}

impl SamplesGated {
    pub fn new<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Self {
        Self {
            oracle: ScriptedBackend::ground_truth(examples),
            calls: AtomicUsize::new(0),
        }
    }
}

#[async_trait]
impl LlmBackend for SamplesGated {
    fn backend_id(&self) -> String {
        "samples-gated".into()
    }

    async fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<GenerationResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = if request.user_text.contains("Samples:\n1. Input:") {
            self.oracle.respond(request).to_string()
        } else {
            "Sure! I think you want to see some users.".to_string()
        };
        Ok(GenerationResponse {
            text,
            latency_ms: 0,
            backend_id: self.backend_id(),
        })
    }

    async fn health(&self) -> Health {
        Health::Healthy
    }
}

/// Local stand-in for an inference server speaking the generate/tags API.
pub struct MockLlm {
    pub addr: SocketAddr,
    pub requests: Arc<Mutex<Vec<Value>>>,
    pub connections: Arc<AtomicUsize>,
}

impl MockLlm {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

#[derive(Clone)]
struct MockState {
    requests: Arc<Mutex<Vec<Value>>>,
    models: Vec<String>,
    respond: Arc<dyn Fn(&Value) -> String + Send + Sync>,
    connections: Arc<AtomicUsize>,
}

async fn mock_generate(State(s): State<MockState>, Json(body): Json<Value>) -> Json<Value> {
    s.connections.fetch_add(1, Ordering::SeqCst);
    let text = (s.respond)(&body);
    s.requests.lock().unwrap().push(body);
    Json(json!({"model": "mock", "response": text, "done": true}))
}

async fn mock_tags(State(s): State<MockState>) -> Json<Value> {
    s.connections.fetch_add(1, Ordering::SeqCst);
    let models: Vec<Value> = s.models.iter().map(|m| json!({"name": m})).collect();
    Json(json!({ "models": models }))
}

pub async fn mock_llm(
    models: &[&str],
    respond: impl Fn(&Value) -> String + Send + Sync + 'static,
) -> MockLlm {
    let state = MockState {
        requests: Arc::new(Mutex::new(Vec::new())),
        models: models.iter().map(|s| s.to_string()).collect(),
        respond: Arc::new(respond),
        connections: Arc::new(AtomicUsize::new(0)),
    };
    let app = Router::new()
        .route("/api/generate", post(mock_generate))
        .route("/api/tags", get(mock_tags))
        .with_state(state.clone());
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    MockLlm {
        addr,
        requests: state.requests,
        connections: state.connections,
    }
}

/// Mock server answering the active-users scenario by inspecting the prompt.
pub async fn demo_mock_llm(models: &[&str]) -> MockLlm {
    mock_llm(models, |body| {
        let system = body["system"].as_str().unwrap_or_default();
        if system.contains(CLASSIFIER_MARKER) {
            "Answer: list".to_string()
        } else {
            DEMO_COMMAND.to_string()
        }
    })
    .await
}

/// A listener that only counts accepted connections.
pub async fn tripwire() -> (SocketAddr, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let h = hits.clone();
    tokio::spawn(async move {
        while let Ok((_sock, _)) = listener.accept().await {
            h.fetch_add(1, Ordering::SeqCst);
        }
    });
    (addr, hits)
}

/// A port nothing listens on.
pub fn closed_port() -> u16 {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = l.local_addr().unwrap().port();
    drop(l);
    port
}

/// The prompts pinned by golden files, keyed by file name.
pub fn golden_prompts() -> Vec<(&'static str, PromptBundle)> {
    let t = PromptTemplates::default();
    let cat = catalog();
    let list = cat.get("list").unwrap().clone();
    let classifier_samples: SampleBlock = [
        ("I want list of active users", "list"),
        ("add a user with imsi 208930000000001", "user"),
    ]
    .into_iter()
    .collect();
    let generator_samples: SampleBlock = [
        (
            "Could you kindly offer me a the list of active users since 2024/08/10 ?",
            "list users --active 20240810 now",
        ),
        ("I want list of active users", "list users --active now"),
        (
            "which users were active from 2024/8/1 to 2024/9/1",
            "list users --active 20240801 20240901",
        ),
    ]
    .into_iter()
    .collect();
    vec![
        (
            "classifier_rag.txt",
            build_classifier_prompt(&t, &cat, CLASSIFY_INSTRUCTION, &classifier_samples, true),
        ),
        (
            "classifier_norag.txt",
            build_classifier_prompt(&t, &cat, CLASSIFY_INSTRUCTION, &classifier_samples, false),
        ),
        (
            "generator_rag.txt",
            build_generator_prompt(&t, &list, DEMO_INSTRUCTION, &generator_samples, true, false),
        ),
        (
            "generator_norag.txt",
            build_generator_prompt(
                &t,
                &list,
                DEMO_INSTRUCTION,
                &generator_samples,
                false,
                false,
            ),
        ),
        (
            "generator_rag_retry.txt",
            build_generator_prompt(&t, &list, DEMO_INSTRUCTION, &generator_samples, true, true),
        ),
    ]
}

pub fn render_golden(p: &PromptBundle) -> String {
    format!("=== system\n{}\n=== user\n{}", p.system_text, p.user_text)
}

/// Compares each prompt to its golden file, or rewrites the files when
/// `UPDATE_GOLDENS=1`. Returns the names that differ.
pub fn check_goldens() -> Vec<String> {
    let dir = manifest_dir().join("tests/goldens");
    let bless = std::env::var("UPDATE_GOLDENS").is_ok_and(|v| v == "1");
    let mut mismatched = Vec::new();
    for (name, prompt) in golden_prompts() {
        let path = dir.join(name);
        let rendered = render_golden(&prompt);
        if bless {
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(&path, &rendered).unwrap();
            continue;
        }
        match std::fs::read_to_string(&path) {
            Ok(stored) if stored == rendered => {}
            _ => mismatched.push(name.to_string()),
        }
    }
    mismatched
}

pub fn by_id(d: &Dataset) -> HashMap<String, Example> {
    d.examples
        .iter()
        .map(|e| (e.id.clone(), e.clone()))
        .collect()
}
