//! Exact-match accuracy and uni-gram precision over a labelled dataset.
//!
//! Both metrics compare whitespace-collapsed, dash-canonical text and are
//! case-sensitive. Uni-gram precision is
//! `|output tokens ∩ truth tokens| / |output tokens|` over token *sets*
//! (duplicates collapse); an empty output scores 0.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Example};
use crate::grammar;
use crate::pipeline::{Pipeline, PipelineConfig, PipelineError};

pub const SCHEMA_VERSION: u32 = 1;

/// Whitespace tokens of the normalized text, as a set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBag {
    pub tokens: BTreeSet<String>,
}

impl TokenBag {
    pub fn from_text(text: &str) -> Self {
        Self {
            tokens: grammar::tokenize(text).into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn intersection_len(&self, other: &TokenBag) -> usize {
        self.tokens.intersection(&other.tokens).count()
    }
}

pub fn exact_match(output: &str, ground_truth: &str) -> bool {
    grammar::canonicalize(output) == grammar::canonicalize(ground_truth)
}

pub fn unigram_precision(output: &str, ground_truth: &str) -> f64 {
    let out = TokenBag::from_text(output);
    if out.is_empty() {
        return 0.0;
    }
    let truth = TokenBag::from_text(ground_truth);
    out.intersection_len(&truth) as f64 / out.len() as f64
}

/// Multiset variant: each output token is credited at most as many times as
/// it occurs in the truth, over the full output length.
pub fn clipped_unigram_precision(output: &str, ground_truth: &str) -> f64 {
    let out = grammar::tokenize(output);
    if out.is_empty() {
        return 0.0;
    }
    let mut budget: HashMap<String, usize> = HashMap::new();
    for t in grammar::tokenize(ground_truth) {
        *budget.entry(t).or_default() += 1;
    }
    let mut hits = 0usize;
    for t in &out {
        if let Some(n) = budget.get_mut(t) {
            if *n > 0 {
                *n -= 1;
                hits += 1;
            }
        }
    }
    hits as f64 / out.len() as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionMode {
    #[default]
    Set,
    Clipped,
}

impl PrecisionMode {
    pub fn score(self, output: &str, ground_truth: &str) -> f64 {
        match self {
            PrecisionMode::Set => unigram_precision(output, ground_truth),
            PrecisionMode::Clipped => clipped_unigram_precision(output, ground_truth),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub example_id: String,
    pub true_class: String,
    pub exact_match: bool,
    pub unigram_precision: f64,
    pub predicted_class: String,
    pub predicted_command: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCell {
    pub truth: String,
    pub predicted: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub pipeline: PipelineConfig,
    pub backend_id: String,
    pub model_name: String,
    pub precision_mode: PrecisionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub dataset: String,
    pub accuracy: f64,
    pub mean_unigram_precision: f64,
    pub n: usize,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub confusion: Vec<ConfusionCell>,
    pub condemo_snapshot: ConfigSnapshot,
    pub samples: Vec<SampleScore>,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation dataset is empty")]
    EmptyDataset,
    #[error("evaluation ids also present in the retrieval corpus: {}", .0.join(", "))]
    Overlap(Vec<String>),
    #[error("inference backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("report is not valid: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub precision_mode: PrecisionMode,
    /// Examples evaluated concurrently.
    pub concurrency: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            precision_mode: PrecisionMode::Set,
            concurrency: 1,
        }
    }
}

/// Placeholder class for examples that never got classified.
pub const NO_CLASS: &str = "(none)";

/// Sums a metric in example-id order so the result does not depend on the
/// order examples were evaluated in.
fn mean_by_id<'a>(
    scores: impl Iterator<Item = &'a SampleScore>,
    f: impl Fn(&SampleScore) -> f64,
) -> (f64, usize) {
    let mut v: Vec<&SampleScore> = scores.collect();
    v.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let n = v.len();
    if n == 0 {
        return (0.0, 0);
    }
    (v.iter().map(|s| f(s)).sum::<f64>() / n as f64, n)
}

/// Builds a report from per-example scores.
pub fn aggregate(
    dataset: &str,
    samples: Vec<SampleScore>,
    condemo_snapshot: ConfigSnapshot,
) -> EvalReport {
    let (accuracy, n) = mean_by_id(samples.iter(), |s| f64::from(u8::from(s.exact_match)));
    let (mean_unigram_precision, _) = mean_by_id(samples.iter(), |s| s.unigram_precision);

    let mut classes: BTreeMap<&str, Vec<&SampleScore>> = BTreeMap::new();
    let mut confusion: BTreeMap<(String, String), usize> = BTreeMap::new();
    for s in &samples {
        classes.entry(s.true_class.as_str()).or_default().push(s);
        *confusion
            .entry((s.true_class.clone(), s.predicted_class.clone()))
            .or_default() += 1;
    }
    let per_class = classes
        .into_iter()
        .map(|(c, v)| {
            let (accuracy, n) =
                mean_by_id(v.iter().copied(), |s| f64::from(u8::from(s.exact_match)));
            let (precision, _) = mean_by_id(v.iter().copied(), |s| s.unigram_precision);
            (
                c.to_string(),
                ClassMetrics {
                    accuracy,
                    precision,
                    n,
                },
            )
        })
        .collect();
    EvalReport {
        schema_version: SCHEMA_VERSION,
        dataset: dataset.to_string(),
        accuracy,
        mean_unigram_precision,
        n,
        per_class,
        confusion: confusion
            .into_iter()
            .map(|((truth, predicted), count)| ConfusionCell {
                truth,
                predicted,
                count,
            })
            .collect(),
        condemo_snapshot,
        samples,
    }
}

async fn score_one(
    i: usize,
    ex: &Example,
    pipeline: &Pipeline,
    config: &PipelineConfig,
    mode: PrecisionMode,
) -> (usize, Result<SampleScore, EvalError>) {
    let scored = match pipeline.run(&ex.input_text, config).await {
        Ok(r) => Ok(SampleScore {
            example_id: ex.id.clone(),
            true_class: ex.class_label.clone(),
            exact_match: exact_match(&r.command, &ex.command),
            unigram_precision: mode.score(&r.command, &ex.command),
            predicted_class: r.class_name,
            predicted_command: r.command,
            error: None,
        }),
        Err(e) => match &e.error {
            PipelineError::Backend(b) if b.is_unavailable() => {
                Err(EvalError::BackendUnavailable(b.to_string()))
            }
            _ => {
                let candidate = e.error.last_candidate().unwrap_or("").to_string();
                Ok(SampleScore {
                    example_id: ex.id.clone(),
                    true_class: ex.class_label.clone(),
                    exact_match: false,
                    unigram_precision: mode.score(&candidate, &ex.command),
                    predicted_class: e
                        .classification
                        .as_ref()
                        .map(|c| c.class_name.clone())
                        .unwrap_or_else(|| NO_CLASS.to_string()),
                    predicted_command: candidate,
                    error: Some(e.to_string()),
                })
            }
        },
    };
    (i, scored)
}

/// Runs the pipeline on every example and scores the outputs.
///
/// Failed runs score `exact_match = false`; their precision is computed on
/// the last extracted candidate when there is one, else 0.
pub async fn evaluate(
    dataset: &Dataset,
    pipeline: &Pipeline,
    config: &PipelineConfig,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut overlap = dataset.overlapping_ids(pipeline.corpus().snapshot().dataset());
    for id in dataset.overlapping_ids(pipeline.command_corpus().snapshot().dataset()) {
        if !overlap.contains(&id) {
            overlap.push(id);
        }
    }
    if !overlap.is_empty() {
        return Err(EvalError::Overlap(overlap));
    }
    let health = pipeline.backend().health().await;
    if let crate::llm::Health::Unhealthy(reason) = health {
        return Err(EvalError::BackendUnavailable(reason));
    }

    let mode = options.precision_mode;
    let jobs: Vec<_> = dataset
        .examples
        .iter()
        .enumerate()
        .map(|(i, ex)| score_one(i, ex, pipeline, config, mode))
        .collect();
    let results: Vec<(usize, Result<SampleScore, EvalError>)> = stream::iter(jobs)
        .buffer_unordered(options.concurrency.max(1))
        .collect()
        .await;

    let mut ordered: Vec<(usize, SampleScore)> = Vec::with_capacity(results.len());
    for (i, r) in results {
        ordered.push((i, r?));
    }
    ordered.sort_by_key(|(i, _)| *i);
    let snapshot = ConfigSnapshot {
        pipeline: config.clone(),
        backend_id: pipeline.backend().backend_id(),
        model_name: pipeline.decoding().model_name.clone(),
        precision_mode: mode,
    };
    Ok(aggregate(
        &dataset.name,
        ordered.into_iter().map(|(_, s)| s).collect(),
        snapshot,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Machine,
}

pub fn percent(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Side-by-side rows for several runs (e.g. RAG on and off).
pub fn comparison_table(reports: &[&EvalReport]) -> String {
    let mut s = String::from("| LLM Model | RAG | Accuracy | uni-gram precision |\n");
    s.push_str("|---|---|---|---|\n");
    for r in reports {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} |",
            r.condemo_snapshot.model_name,
            yes_no(r.condemo_snapshot.pipeline.rag_enabled),
            percent(r.accuracy),
            percent(r.mean_unigram_precision)
        );
    }
    s
}

pub fn emit_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Machine => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Table => {
            let mut s = comparison_table(&[report]);
            let _ = writeln!(s, "\nn = {} ({})", report.n, report.dataset);
            if !report.per_class.is_empty() {
                s.push_str("\nPer class:\n| Class | n | Accuracy | uni-gram precision |\n|---|---|---|---|\n");
                for (c, m) in &report.per_class {
                    let _ = writeln!(
                        s,
                        "| {c} | {} | {} | {} |",
                        m.n,
                        percent(m.accuracy),
                        percent(m.precision)
                    );
                }
            }
            let misclassified: Vec<&ConfusionCell> = report
                .confusion
                .iter()
                .filter(|c| c.truth != c.predicted)
                .collect();
            if !misclassified.is_empty() {
                s.push_str("\nClassifier confusions (truth -> predicted: count):\n");
                for c in misclassified {
                    let _ = writeln!(s, "  {} -> {}: {}", c.truth, c.predicted, c.count);
                }
            }
            s
        }
    }
}

pub fn parse_report(text: &str) -> Result<EvalReport, EvalError> {
    let report: EvalReport =
        serde_json::from_str(text).map_err(|e| EvalError::Parse(e.to_string()))?;
    if report.schema_version != SCHEMA_VERSION {
        return Err(EvalError::Parse(format!(
            "unsupported schema_version {}",
            report.schema_version
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_match_examples() {
        assert!(exact_match(
            "list users --active now",
            "list users --active now"
        ));
        assert!(!exact_match(
            "list users --active now",
            "list users --active 20240801 now"
        ));
        assert!(exact_match(
            "list  users   --active now",
            "list users --active now"
        ));
        assert!(exact_match(
            "list users \u{2013}active now",
            "list users --active now"
        ));
        assert!(!exact_match("List users", "list users"));
    }

    #[test]
    fn precision_examples() {
        assert_eq!(
            unigram_precision(
                "list users --active 20240801",
                "list users --active 20240801 20240901"
            ),
            1.0
        );
        assert_eq!(
            unigram_precision("list users --active now", "list users"),
            0.5
        );
        assert_eq!(unigram_precision("list users", "list users"), 1.0);
        assert_eq!(unigram_precision("", "list users"), 0.0);
        assert_eq!(unigram_precision("   ", ""), 0.0);
    }

    #[test]
    fn set_vs_clipped() {
        // set: {a} ⊂ {a, b} → 1.0; clipped: 1 of 2 "a" tokens credited → 0.5
        assert_eq!(unigram_precision("a a", "a b"), 1.0);
        assert_eq!(clipped_unigram_precision("a a", "a b"), 0.5);
        assert_eq!(clipped_unigram_precision("b a", "a b"), 1.0);
    }

    fn snap() -> ConfigSnapshot {
        ConfigSnapshot {
            pipeline: PipelineConfig::default(),
            backend_id: "scripted".into(),
            model_name: "llama3:8b".into(),
            precision_mode: PrecisionMode::Set,
        }
    }

    fn score(id: &str, class: &str, em: bool, p: f64) -> SampleScore {
        SampleScore {
            example_id: id.into(),
            true_class: class.into(),
            exact_match: em,
            unigram_precision: p,
            predicted_class: class.into(),
            predicted_command: String::new(),
            error: None,
        }
    }

    #[test]
    fn table_rendering() {
        let mut r = aggregate("d", vec![score("a", "list", true, 1.0)], snap());
        r.accuracy = 0.461;
        r.mean_unigram_precision = 0.681;
        let t = emit_report(&r, ReportFormat::Table);
        let row = t.lines().nth(2).unwrap();
        assert_eq!(row, "| llama3:8b | yes | 46.1% | 68.1% |");
        assert!(t.starts_with("| LLM Model | RAG | Accuracy | uni-gram precision |"));
        assert!(t.contains("Per class:"));
        r.per_class.clear();
        assert!(!emit_report(&r, ReportFormat::Table).contains("Per class:"));
    }

    #[test]
    fn machine_round_trip() {
        let r = aggregate(
            "d",
            vec![
                score("a", "list", true, 1.0),
                score("b", "user", false, 2.0 / 3.0),
                score("c", "user", false, 0.1),
            ],
            snap(),
        );
        let text = emit_report(&r, ReportFormat::Machine);
        assert_eq!(parse_report(&text).unwrap(), r);
        assert!(text.contains("\"schema_version\": 1"));
    }

    #[test]
    fn aggregate_invariants() {
        let r = aggregate(
            "d",
            vec![
                score("a", "list", true, 1.0),
                score("b", "list", false, 0.5),
                score("c", "user", true, 1.0),
                score("d", "user", false, 0.0),
            ],
            snap(),
        );
        assert_eq!(r.n, 4);
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.mean_unigram_precision, 0.625);
        assert_eq!(r.per_class.values().map(|m| m.n).sum::<usize>(), 4);
        assert_eq!(r.per_class["list"].precision, 0.75);
    }

    fn token_seq() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(0usize..20, 0..=12)
    }

    fn text(seq: &[usize]) -> String {
        seq.iter()
            .map(|t| format!("t{t}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    proptest! {
        #[test]
        fn precision_in_unit_interval(a in token_seq(), b in token_seq()) {
            let p = unigram_precision(&text(&a), &text(&b));
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn exact_implies_full_precision(a in token_seq()) {
            prop_assume!(!a.is_empty());
            let t = text(&a);
            let spaced = format!("  {}  ", t.replace(' ', "   "));
            prop_assert!(exact_match(&spaced, &t));
            prop_assert_eq!(unigram_precision(&spaced, &t), 1.0);
        }

        #[test]
        fn aggregation_is_order_independent(
            ps in prop::collection::vec((any::<bool>(), 0.0f64..=1.0), 1..30),
            seed in any::<u64>(),
        ) {
            let scores: Vec<SampleScore> = ps
                .iter()
                .enumerate()
                .map(|(i, (em, p))| score(&format!("id{i:03}"), if i % 2 == 0 { "list" } else { "user" }, *em, if *em { 1.0 } else { *p }))
                .collect();
            let mut shuffled = scores.clone();
            // deterministic shuffle driven by the seed
            let n = shuffled.len();
            for i in (1..n).rev() {
                let j = ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64)) % (i as u64 + 1)) as usize;
                shuffled.swap(i, j);
            }
            let a = aggregate("d", scores, snap());
            let b = aggregate("d", shuffled, snap());
            prop_assert_eq!(a.accuracy, b.accuracy);
            prop_assert_eq!(a.mean_unigram_precision, b.mean_unigram_precision);
            prop_assert_eq!(a.per_class, b.per_class);
            prop_assert_eq!(a.confusion, b.confusion);
        }
    }
}
