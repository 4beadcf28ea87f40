//! Run the HTTP service in-process on an ephemeral port, submit one request,
//! approve it and print the audit trail.

use std::future::IntoFuture;
use std::sync::Arc;

use netword::config::{Runtime, Settings};
use netword::llm::{ScriptRule, ScriptedBackend, CLASSIFIER_MARKER};
use netword::service::{router, AppState};
use netword::store::Store;
use serde_json::{json, Value};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let backend = Arc::new(ScriptedBackend::new(
        vec![
            ScriptRule {
                contains: vec![],
                system_contains: vec![CLASSIFIER_MARKER.into()],
                response: "list".into(),
            },
            ScriptRule::new("", "list users --active 20240301 now"),
        ],
        "",
    ));
    let dir = std::env::temp_dir().join(format!("netword-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let store = Store::open(dir.join("store.jsonl"))?;
    let rt = Runtime::with_backend(Settings::default(), backend, None).await?;
    let state = Arc::new(AppState::from_runtime(rt, store));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let base = format!("http://{}", listener.local_addr()?);
    tokio::spawn(axum::serve(listener, router(state.clone(), None)).into_future());
    println!("listening on {base}");

    let client = reqwest::Client::builder().no_proxy().build()?;
    let v: Value = client
        .post(format!("{base}/v1/interpret"))
        .json(&json!({"instruction": "Could you please give me the list of active users since 2 March."}))
        .send()
        .await?
        .json()
        .await?;
    println!("interpret -> {} [{}]", v["command"], v["class_name"]);
    let entry = v["entry_id"].as_str().unwrap_or_default();
    let v: Value = client
        .post(format!("{base}/v1/entries/{entry}/decision"))
        .json(&json!({"decision": "approve"}))
        .send()
        .await?
        .json()
        .await?;
    println!("decision  -> {} (dry run: {})", v["decision"], v["dry_run"]);
    for ev in state.store.audit_log() {
        println!("audit #{} {:?} {}", ev.seq, ev.kind, ev.payload);
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
