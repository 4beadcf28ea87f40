//! Score the shipped smoke set with and without retrieval and print a
//! comparison table. The stand-in model only answers correctly when the
//! prompt carries samples, which makes the retrieval effect visible offline.

use std::sync::Arc;

use async_trait::async_trait;
use netword::config::{Runtime, Settings};
use netword::corpus::{Dataset, Split};
use netword::eval::{comparison_table, evaluate, EvalOptions};
use netword::llm::{
    BackendError, GenerationRequest, GenerationResponse, Health, LlmBackend, ScriptedBackend,
};

struct NeedsSamples(ScriptedBackend);

#[async_trait]
impl LlmBackend for NeedsSamples {
    fn backend_id(&self) -> String {
        "needs-samples".into()
    }

    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        let text = if req.user_text.contains("Samples:\n1.") {
            self.0.respond(req).to_string()
        } else {
            "I would list the users for you.".to_string()
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

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let settings = Settings::default();
    let catalog = settings.load_catalog()?;
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/smoke_eval.jsonl");
    let dataset = Dataset::load(path, &catalog, Split::Eval)?;

    let backend = Arc::new(NeedsSamples(ScriptedBackend::ground_truth(
        &dataset.examples,
    )));
    let rt = Runtime::with_backend(settings, backend, None).await?;
    let on = rt.settings.pipeline_config();
    let off = on.clone().without_rag();
    let opts = EvalOptions::default();
    let with = evaluate(&dataset, &rt.pipeline, &on, &opts).await?;
    let without = evaluate(&dataset, &rt.pipeline, &off, &opts).await?;
    print!("{}", comparison_table(&[&with, &without]));
    Ok(())
}
