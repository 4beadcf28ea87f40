//! Exact top-k retrieval over an embedded corpus.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Dataset, Example};
use crate::embedding::{cosine, EmbedError, Embedder, EmbeddingVector};

#[derive(Debug, Error)]
pub enum RetrieverError {
    #[error("embedding example {id:?}: {source}")]
    Embedding {
        id: String,
        #[source]
        source: EmbedError,
    },
    #[error("embedding query: {0}")]
    Query(#[source] EmbedError),
    #[error("index cache {path}: {message}")]
    Cache { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverConfig {
    pub k_classifier: usize,
    pub k_generator: usize,
    pub class_filter: Option<String>,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self {
            k_classifier: 8,
            k_generator: 8,
            class_filter: None,
        }
    }
}

impl RetrieverConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.k_classifier == 0 || self.k_generator == 0 {
            return Err("k_classifier and k_generator must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub vector: EmbeddingVector,
    pub class_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// Content hash of a dataset's records, in order.
pub fn fingerprint(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    for ex in &dataset.examples {
        for field in [&ex.id, &ex.input_text, &ex.command, &ex.class_label] {
            h.update(field.as_bytes());
            h.update([0u8]);
        }
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorIndex {
    pub dim: usize,
    pub corpus_fingerprint: String,
    pub embedder_signature: String,
    pub entries: Vec<IndexEntry>,
}

impl VectorIndex {
    pub async fn build(
        dataset: &Dataset,
        embedder: &Embedder,
    ) -> Result<VectorIndex, RetrieverError> {
        let texts: Vec<String> = dataset
            .examples
            .iter()
            .map(|e| e.input_text.clone())
            .collect();
        let vectors =
            embedder
                .embed_batch(&texts)
                .await
                .map_err(|source| RetrieverError::Embedding {
                    id: dataset
                        .examples
                        .first()
                        .map(|e| e.id.clone())
                        .unwrap_or_default(),
                    source,
                })?;
        let dim = vectors.first().map(EmbeddingVector::dim).unwrap_or(0);
        let mut entries = Vec::with_capacity(vectors.len());
        for (ex, vector) in dataset.examples.iter().zip(vectors) {
            if vector.dim() != dim {
                return Err(RetrieverError::Embedding {
                    id: ex.id.clone(),
                    source: EmbedError::DimMismatch {
                        left: dim,
                        right: vector.dim(),
                    },
                });
            }
            entries.push(IndexEntry {
                id: ex.id.clone(),
                vector,
                class_label: ex.class_label.clone(),
            });
        }
        Ok(VectorIndex {
            dim,
            corpus_fingerprint: fingerprint(dataset),
            embedder_signature: embedder.signature(),
            entries,
        })
    }

    /// Reuses `cache` when it was built from the same corpus and embedder,
    /// otherwise rebuilds and rewrites it.
    pub async fn load_or_build(
        cache: &Path,
        dataset: &Dataset,
        embedder: &Embedder,
    ) -> Result<VectorIndex, RetrieverError> {
        if let Ok(text) = fs::read_to_string(cache) {
            if let Ok(index) = serde_json::from_str::<VectorIndex>(&text) {
                if index.corpus_fingerprint == fingerprint(dataset)
                    && index.embedder_signature == embedder.signature()
                    && index.entries.len() == dataset.len()
                {
                    return Ok(index);
                }
            }
        }
        let index = Self::build(dataset, embedder).await?;
        index.save(cache)?;
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrieverError> {
        let err = |message: String| RetrieverError::Cache {
            path: path.display().to_string(),
            message,
        };
        let json = serde_json::to_string(self).map_err(|e| err(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, json).map_err(|e| err(e.to_string()))?;
        fs::rename(&tmp, path).map_err(|e| err(e.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The `k` entries most similar to `query`, best first. Ties go to the
    /// entry inserted earlier. With `class_filter`, only entries of that
    /// class are ranked.
    pub fn top_k(
        &self,
        query: &EmbeddingVector,
        k: usize,
        class_filter: Option<&str>,
    ) -> Result<Vec<Hit>, EmbedError> {
        if k == 0 || self.entries.is_empty() {
            return Ok(Vec::new());
        }
        let mut scored: Vec<(usize, f64)> = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if class_filter.is_some_and(|c| c != e.class_label) {
                continue;
            }
            scored.push((i, cosine(&e.vector, query)?));
        }
        let by_rank = |a: &(usize, f64), b: &(usize, f64)| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_rank);
        Ok(scored
            .into_iter()
            .map(|(i, score)| Hit {
                id: self.entries[i].id.clone(),
                score,
            })
            .collect())
    }
}

/// A dataset together with its index, searched as one unit.
#[derive(Debug)]
pub struct IndexedCorpus {
    dataset: Dataset,
    index: VectorIndex,
    by_id: HashMap<String, usize>,
    searches: AtomicUsize,
}

impl IndexedCorpus {
    pub fn new(dataset: Dataset, index: VectorIndex) -> Self {
        let by_id = dataset
            .examples
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i))
            .collect();
        Self {
            dataset,
            index,
            by_id,
            searches: AtomicUsize::new(0),
        }
    }

    pub async fn build(dataset: Dataset, embedder: &Embedder) -> Result<Self, RetrieverError> {
        let index = VectorIndex::build(&dataset, embedder).await?;
        Ok(Self::new(dataset, index))
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn example(&self, id: &str) -> Option<&Example> {
        self.by_id.get(id).map(|&i| &self.dataset.examples[i])
    }

    /// Number of searches served so far.
    pub fn searches(&self) -> usize {
        self.searches.load(AtomicOrdering::Relaxed)
    }

    pub async fn search(
        &self,
        embedder: &Embedder,
        query: &str,
        k: usize,
        class_filter: Option<&str>,
    ) -> Result<Vec<Hit>, RetrieverError> {
        self.searches.fetch_add(1, AtomicOrdering::Relaxed);
        if self.index.is_empty() {
            return Ok(Vec::new());
        }
        let q = embedder
            .embed_query(query)
            .await
            .map_err(RetrieverError::Query)?;
        self.index
            .top_k(&q, k, class_filter)
            .map_err(RetrieverError::Query)
    }
}

/// Shared, atomically replaceable corpus. Readers take a snapshot and keep
/// using it even if a writer swaps in a rebuilt corpus meanwhile.
#[derive(Debug, Clone)]
pub struct CorpusHandle {
    current: Arc<RwLock<Arc<IndexedCorpus>>>,
}

impl CorpusHandle {
    pub fn new(corpus: IndexedCorpus) -> Self {
        Self {
            current: Arc::new(RwLock::new(Arc::new(corpus))),
        }
    }

    pub fn snapshot(&self) -> Arc<IndexedCorpus> {
        self.current.read().expect("corpus lock").clone()
    }

    pub fn replace(&self, corpus: IndexedCorpus) {
        *self.current.write().expect("corpus lock") = Arc::new(corpus);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;

    fn dataset(inputs: &[(&str, &str)]) -> Dataset {
        let mut ds = Dataset::new("t", Split::TrainCorpus);
        for (i, (input, class)) in inputs.iter().enumerate() {
            ds.examples
                .push(Example::new(format!("e{i}"), *input, "list users", *class));
        }
        ds
    }

    #[tokio::test]
    async fn build_preserves_order_and_fingerprint() {
        let emb = Embedder::fallback(64);
        let ds = dataset(&[("a b", "list"), ("c d", "list"), ("e f", "user")]);
        let idx = VectorIndex::build(&ds, &emb).await.unwrap();
        let ids: Vec<&str> = idx.entries.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["e0", "e1", "e2"]);
        let again = VectorIndex::build(&ds, &emb).await.unwrap();
        assert_eq!(idx.corpus_fingerprint, again.corpus_fingerprint);
        let empty = VectorIndex::build(&dataset(&[]), &emb).await.unwrap();
        assert!(empty.is_empty());
    }

    #[tokio::test]
    async fn self_similarity_ranks_first() {
        let emb = Embedder::fallback(256);
        let ds = dataset(&[
            ("list the nodes", "list"),
            ("I want list of active users", "list"),
            ("add a user", "user"),
        ]);
        let c = IndexedCorpus::build(ds, &emb).await.unwrap();
        let hits = c
            .search(&emb, "I want list of active users", 10, None)
            .await
            .unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].id, "e1");
        assert!((hits[0].score - 1.0).abs() < 1e-9);
    }

    #[tokio::test]
    async fn duplicate_texts_tie_break_by_insertion() {
        let emb = Embedder::fallback(256);
        let ds = dataset(&[
            ("something else", "list"),
            ("stop the core", "stop"),
            ("stop the core", "stop"),
        ]);
        let c = IndexedCorpus::build(ds, &emb).await.unwrap();
        let hits = c.search(&emb, "stop the core", 2, None).await.unwrap();
        assert_eq!(hits[0].id, "e1");
        assert_eq!(hits[1].id, "e2");
        assert_eq!(hits[0].score, hits[1].score);
    }

    #[tokio::test]
    async fn class_filter_applies_before_ranking() {
        let emb = Embedder::fallback(256);
        let ds = dataset(&[("stop the core", "stop"), ("start the core", "start")]);
        let c = IndexedCorpus::build(ds, &emb).await.unwrap();
        let hits = c
            .search(&emb, "stop the core", 5, Some("start"))
            .await
            .unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, "e1");
        assert_eq!(c.searches(), 1);
    }

    #[tokio::test]
    async fn cache_reused_when_fingerprint_matches() {
        let emb = Embedder::fallback(64);
        let ds = dataset(&[("a b", "list")]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.json");
        let built = VectorIndex::load_or_build(&p, &ds, &emb).await.unwrap();
        assert!(p.exists());
        let cached = VectorIndex::load_or_build(&p, &ds, &emb).await.unwrap();
        assert_eq!(built, cached);
        let other = dataset(&[("a b", "list"), ("c", "list")]);
        let rebuilt = VectorIndex::load_or_build(&p, &other, &emb).await.unwrap();
        assert_eq!(rebuilt.len(), 2);
    }

    #[test]
    fn k_zero_condemo_rejected() {
        let c = RetrieverConfig {
            k_classifier: 0,
            ..Default::default()
        };
        assert!(c.check().is_err());
    }
}
