//! Talk to a real local inference server.
//!
//!     NETWORD_LLM_URL=http://localhost:11434 NETWORD_LLM_MODEL=llama3:8b-instruct-q4_0 \
//!         cargo run --example remote_backend -- "show the active users"

use netword::config::{Runtime, Settings};
use netword::llm::Health;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let instruction = std::env::args().nth(1).unwrap_or_else(|| {
        "Could you please give me the list of active users since 2 March.".into()
    });
    let settings = Settings::load(None)?;
    println!("server {} model {}", settings.llm.url, settings.llm.model);
    let rt = Runtime::from_settings(settings).await?;
    if let Health::Unhealthy(reason) = rt.pipeline.backend().health().await {
        eprintln!("backend not ready: {reason}");
        std::process::exit(1);
    }
    let result = rt
        .pipeline
        .run(&instruction, &rt.settings.pipeline_config())
        .await?;
    for (i, raw) in result.trace.raw_responses().iter().enumerate() {
        println!("--- completion {}\n{raw}", i + 1);
    }
    println!("--- command\n{}", result.command);
    println!("outbound requests: {}", rt.http.attempts().len());
    Ok(())
}
