//! Both pipeline steps end to end, with a scripted model standing in for
//! the inference server so the run is offline and repeatable.

use std::sync::Arc;

use netword::config::{Runtime, Settings};
use netword::llm::{ScriptRule, ScriptedBackend, CLASSIFIER_MARKER};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let instruction = "Could you please give me the list of active users since 2 March.";
    let backend = Arc::new(ScriptedBackend::new(
        vec![
            ScriptRule {
                contains: vec!["since 2 March".into()],
                system_contains: vec![CLASSIFIER_MARKER.into()],
                response: "Answer: list".into(),
            },
            ScriptRule::new(
                "since 2 March",
                "Sure.\n```\nlist users \u{2013}active 20240301 now\n```",
            ),
        ],
        "",
    ));
    let rt = Runtime::with_backend(Settings::default(), backend.clone(), None).await?;
    let result = rt
        .pipeline
        .run(instruction, &rt.settings.pipeline_config())
        .await?;

    let classification = result
        .trace
        .classification
        .as_ref()
        .expect("run classifies");
    println!("instruction: {instruction}");
    println!(
        "class:       {} (fallback: {})",
        result.class_name, classification.used_fallback
    );
    println!("evidence:");
    let corpus = rt.pipeline.corpus().snapshot();
    for hit in &result.retrieved {
        let ex = corpus.example(&hit.id).expect("hit is in corpus");
        println!("  {:.3}  {}  ->  {}", hit.score, ex.input_text, ex.command);
    }
    println!("raw model output: {:?}", result.raw_response);
    println!("command:     {}", result.command);
    println!("model calls: {}", backend.calls());
    Ok(())
}
