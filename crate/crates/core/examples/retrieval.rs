//! Embed the shipped corpus and show the nearest examples for a query.
//!
//!     cargo run --example retrieval -- "who has been active since march"

use netword::corpus::{ClassCatalog, Dataset, Split};
use netword::embedding::Embedder;
use netword::retriever::IndexedCorpus;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let query = std::env::args().nth(1).unwrap_or_else(|| {
        "Could you please give me the list of active users since 2 March.".into()
    });
    let catalog = ClassCatalog::default_catalog();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/corpus.jsonl");
    let dataset = Dataset::load(path, &catalog, Split::TrainCorpus)?;
    let embedder = Embedder::fallback(256);
    let corpus = IndexedCorpus::build(dataset, &embedder).await?;

    println!("query: {query}\n\nall classes:");
    for hit in corpus.search(&embedder, &query, 5, None).await? {
        let ex = corpus.example(&hit.id).expect("hit is in corpus");
        println!("  {:.3}  [{}] {}", hit.score, ex.class_label, ex.input_text);
    }
    println!("\nclass \"list\" only:");
    for hit in corpus.search(&embedder, &query, 3, Some("list")).await? {
        let ex = corpus.example(&hit.id).expect("hit is in corpus");
        println!("  {:.3}  {}  ->  {}", hit.score, ex.input_text, ex.command);
    }
    Ok(())
}
