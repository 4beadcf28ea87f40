//! The two-step translation: classify the request, then generate a command
//! for that class and keep it only if it passes the class grammar.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ClassCatalog, CommandClass};
use crate::embedding::Embedder;
use crate::grammar::{self, CommandAst, Violation};
use crate::llm::{BackendError, GenerationRequest, LlmBackend, DEFAULT_MODEL};
use crate::prompting::{
    build_classifier_prompt, build_generator_prompt, PromptBundle, PromptTemplates, SampleBlock,
};
use crate::retriever::{CorpusHandle, Hit, IndexedCorpus, RetrieverConfig, RetrieverError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub retriever: RetrieverConfig,
    pub rag_enabled: bool,
    pub retry_on_invalid: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            retriever: RetrieverConfig::default(),
            rag_enabled: true,
            retry_on_invalid: true,
        }
    }
}

impl PipelineConfig {
    pub fn without_rag(mut self) -> Self {
        self.rag_enabled = false;
        self
    }
}

/// Decoding settings sent with every request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingOptions {
    pub model_name: String,
    pub temperature: f64,
    pub seed: Option<i64>,
    pub max_tokens: u32,
}

impl Default for DecodingOptions {
    fn default() -> Self {
        Self {
            model_name: DEFAULT_MODEL.to_string(),
            temperature: 0.0,
            seed: Some(42),
            max_tokens: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub class_name: String,
    pub retrieved: Vec<Hit>,
    pub raw_response: String,
    pub used_fallback: bool,
    pub prompt: PromptBundle,
}

/// One generator round trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationAttempt {
    pub prompt: PromptBundle,
    pub raw_response: String,
    pub candidate: Option<String>,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub classification: Option<ClassificationResult>,
    pub attempts: Vec<GenerationAttempt>,
}

impl Trace {
    /// Classifier completion first, then each generator completion.
    pub fn raw_responses(&self) -> Vec<String> {
        self.classification
            .iter()
            .map(|c| c.raw_response.clone())
            .chain(self.attempts.iter().map(|a| a.raw_response.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub command: String,
    pub ast: CommandAst,
    pub class_name: String,
    pub retrieved: Vec<Hit>,
    pub raw_response: String,
    pub retries_used: u32,
    pub trace: Trace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step {
    Classify,
    Generate,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Step::Classify => "classify",
            Step::Generate => "generate",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("class {0:?} is not in the catalog")]
    UnknownClass(String),
    #[error("classifier answered {raw_response:?}, which names no class, and no retrieved samples are available to fall back on")]
    Unclassifiable { raw_response: String },
    #[error("no command found in the model output")]
    NoCandidate { attempts: Vec<GenerationAttempt> },
    #[error("generated command is invalid: {}", first_violation(.attempts))]
    InvalidCommand { attempts: Vec<GenerationAttempt> },
    #[error(transparent)]
    Retrieval(#[from] RetrieverError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn first_violation(attempts: &[GenerationAttempt]) -> String {
    attempts
        .last()
        .and_then(|a| a.violations.first())
        .map(|v| v.message.clone())
        .unwrap_or_default()
}

impl PipelineError {
    pub fn attempts(&self) -> &[GenerationAttempt] {
        match self {
            PipelineError::NoCandidate { attempts }
            | PipelineError::InvalidCommand { attempts } => attempts,
            _ => &[],
        }
    }

    /// The most recent extracted (but rejected) command, if any.
    pub fn last_candidate(&self) -> Option<&str> {
        self.attempts()
            .iter()
            .rev()
            .find_map(|a| a.candidate.as_deref())
    }
}

/// A pipeline failure tagged with the step that produced it.
#[derive(Debug, Error)]
#[error("{step} step failed: {error}")]
pub struct RunError {
    pub step: Step,
    #[source]
    pub error: PipelineError,
    pub classification: Option<ClassificationResult>,
}

fn fence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```[^\n`]*\n(.*?)```").expect("fence regex"))
}

fn anchor_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)answer\s*:").expect("anchor regex"))
}

const QUOTES: &[char] = &[
    '"', '\'', '`', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}',
];

fn clean_line(line: &str) -> String {
    let line = line.trim();
    let line = line.strip_prefix("$ ").unwrap_or(line);
    grammar::canonicalize(line.trim_matches(QUOTES))
}

/// Text after the last `Answer:` anchor, if the response has one.
fn after_anchor(raw: &str) -> Option<&str> {
    anchor_re().find_iter(raw).last().map(|m| &raw[m.end()..])
}

/// Pulls the command out of a free-form completion.
///
/// Rules, in order: the first non-empty line of the first fenced code block;
/// the first non-empty line after the last `Answer:`; the last line that
/// starts with one of the class's verbs. Surrounding quotes are dropped and
/// typographic flag dashes become `--`.
pub fn extract_command(raw_response: &str, class: &CommandClass) -> Option<String> {
    if let Some(c) = fence_re().captures(raw_response) {
        if let Some(line) = c[1].lines().map(clean_line).find(|l| !l.is_empty()) {
            return Some(line);
        }
    }
    if let Some(rest) = after_anchor(raw_response) {
        if let Some(line) = rest.lines().map(clean_line).find(|l| !l.is_empty()) {
            return Some(line);
        }
    }
    let verbs = grammar::verbs(class);
    raw_response.lines().rev().map(clean_line).find(|l| {
        let first = l.split(' ').next().unwrap_or("");
        verbs.contains(&first)
    })
}

/// Normalizes a classifier completion to a bare class token.
pub fn normalize_class_answer(raw: &str) -> String {
    let tail = after_anchor(raw).unwrap_or(raw);
    let line = tail
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("");
    line.trim_matches(|c: char| {
        c.is_whitespace() || (c.is_ascii_punctuation() && c != '_') || QUOTES.contains(&c)
    })
    .to_lowercase()
}

/// Majority class among `hits`; ties go to the class seen at the best rank.
fn majority_class(hits: &[Hit], corpus: &IndexedCorpus) -> Option<String> {
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for (rank, hit) in hits.iter().enumerate() {
        if let Some(ex) = corpus.example(&hit.id) {
            let e = counts.entry(ex.class_label.as_str()).or_insert((0, rank));
            e.0 += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .map(|(c, _)| c.to_string())
}

/// Everything a pipeline run needs, shared across requests.
#[derive(Clone)]
pub struct Pipeline {
    catalog: Arc<ClassCatalog>,
    corpus: CorpusHandle,
    command_corpus: Option<CorpusHandle>,
    embedder: Arc<Embedder>,
    backend: Arc<dyn LlmBackend>,
    templates: Arc<PromptTemplates>,
    decoding: DecodingOptions,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline")
            .field("classes", &self.catalog.len())
            .field("backend", &self.backend.backend_id())
            .field("decoding", &self.decoding)
            .finish()
    }
}

impl Pipeline {
    pub fn new(
        catalog: Arc<ClassCatalog>,
        corpus: CorpusHandle,
        embedder: Arc<Embedder>,
        backend: Arc<dyn LlmBackend>,
    ) -> Self {
        Self {
            catalog,
            corpus,
            command_corpus: None,
            embedder,
            backend,
            templates: Arc::new(PromptTemplates::default()),
            decoding: DecodingOptions::default(),
        }
    }

    /// Uses a separate corpus for generator samples instead of the
    /// classifier corpus.
    pub fn with_command_corpus(mut self, corpus: CorpusHandle) -> Self {
        self.command_corpus = Some(corpus);
        self
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = Arc::new(templates);
        self
    }

    pub fn with_decoding(mut self, decoding: DecodingOptions) -> Self {
        self.decoding = decoding;
        self
    }

    pub fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    pub fn corpus(&self) -> &CorpusHandle {
        &self.corpus
    }

    pub fn command_corpus(&self) -> &CorpusHandle {
        self.command_corpus.as_ref().unwrap_or(&self.corpus)
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn backend(&self) -> &Arc<dyn LlmBackend> {
        &self.backend
    }

    pub fn decoding(&self) -> &DecodingOptions {
        &self.decoding
    }

    fn request(&self, prompt: &PromptBundle) -> GenerationRequest {
        GenerationRequest {
            model_name: self.decoding.model_name.clone(),
            system_text: prompt.system_text.clone(),
            user_text: prompt.user_text.clone(),
            temperature: self.decoding.temperature,
            seed: self.decoding.seed,
            max_tokens: self.decoding.max_tokens,
        }
    }

    pub async fn classify(
        &self,
        instruction: &str,
        config: &PipelineConfig,
    ) -> Result<ClassificationResult, PipelineError> {
        if instruction.trim().is_empty() {
            return Err(PipelineError::EmptyInstruction);
        }
        let corpus = self.corpus.snapshot();
        self.classify_in(&corpus, instruction, config).await
    }

    async fn classify_in(
        &self,
        corpus: &IndexedCorpus,
        instruction: &str,
        config: &PipelineConfig,
    ) -> Result<ClassificationResult, PipelineError> {
        let (retrieved, samples) = if config.rag_enabled {
            let hits = corpus
                .search(
                    &self.embedder,
                    instruction,
                    config.retriever.k_classifier,
                    None,
                )
                .await?;
            let samples: SampleBlock = hits
                .iter()
                .filter_map(|h| corpus.example(&h.id))
                .map(|e| (e.input_text.clone(), e.class_label.clone()))
                .collect();
            (hits, samples)
        } else {
            (Vec::new(), SampleBlock::new())
        };
        let prompt = build_classifier_prompt(
            &self.templates,
            &self.catalog,
            instruction,
            &samples,
            config.rag_enabled,
        );
        let response = self.backend.generate(&self.request(&prompt)).await?;
        let answer = normalize_class_answer(&response.text);
        let (class_name, used_fallback) = if self.catalog.contains(&answer) {
            (answer, false)
        } else {
            match majority_class(&retrieved, corpus) {
                Some(c) if self.catalog.contains(&c) => (c, true),
                _ => {
                    return Err(PipelineError::Unclassifiable {
                        raw_response: response.text,
                    })
                }
            }
        };
        Ok(ClassificationResult {
            class_name,
            retrieved,
            raw_response: response.text,
            used_fallback,
            prompt,
        })
    }

    pub async fn generate_command(
        &self,
        instruction: &str,
        class_name: &str,
        config: &PipelineConfig,
    ) -> Result<GenerationResult, PipelineError> {
        if instruction.trim().is_empty() {
            return Err(PipelineError::EmptyInstruction);
        }
        let corpus = self.command_corpus().snapshot();
        self.generate_in(&corpus, instruction, class_name, config)
            .await
    }

    async fn generate_in(
        &self,
        corpus: &IndexedCorpus,
        instruction: &str,
        class_name: &str,
        config: &PipelineConfig,
    ) -> Result<GenerationResult, PipelineError> {
        let class = self
            .catalog
            .get(class_name)
            .ok_or_else(|| PipelineError::UnknownClass(class_name.to_string()))?;
        let (retrieved, samples) = if config.rag_enabled {
            let hits = corpus
                .search(
                    &self.embedder,
                    instruction,
                    config.retriever.k_generator,
                    Some(class_name),
                )
                .await?;
            let samples: SampleBlock = hits
                .iter()
                .filter_map(|h| corpus.example(&h.id))
                .map(|e| (e.input_text.clone(), e.command.clone()))
                .collect();
            (hits, samples)
        } else {
            (Vec::new(), SampleBlock::new())
        };

        let max_attempts = if config.retry_on_invalid { 2 } else { 1 };
        let mut attempts: Vec<GenerationAttempt> = Vec::new();
        for attempt in 0..max_attempts {
            let prompt = build_generator_prompt(
                &self.templates,
                class,
                instruction,
                &samples,
                config.rag_enabled,
                attempt > 0,
            );
            let response = self.backend.generate(&self.request(&prompt)).await?;
            let candidate = extract_command(&response.text, class);
            let parsed = candidate.as_deref().map(|c| grammar::parse(c, class));
            let violations = match &candidate {
                Some(c) => grammar::validate(c, class).violations,
                None => Vec::new(),
            };
            attempts.push(GenerationAttempt {
                prompt,
                raw_response: response.text.clone(),
                candidate: candidate.clone(),
                violations,
            });
            if let Some(Ok(ast)) = parsed {
                return Ok(GenerationResult {
                    command: grammar::render(&ast),
                    ast,
                    class_name: class_name.to_string(),
                    retrieved,
                    raw_response: response.text,
                    retries_used: attempt,
                    trace: Trace {
                        classification: None,
                        attempts,
                    },
                });
            }
        }
        if attempts.last().is_some_and(|a| a.candidate.is_none()) {
            Err(PipelineError::NoCandidate { attempts })
        } else {
            Err(PipelineError::InvalidCommand { attempts })
        }
    }

    /// Classify, then generate, against one consistent corpus snapshot.
    pub async fn run(
        &self,
        instruction: &str,
        config: &PipelineConfig,
    ) -> Result<GenerationResult, RunError> {
        if instruction.trim().is_empty() {
            return Err(RunError {
                step: Step::Classify,
                error: PipelineError::EmptyInstruction,
                classification: None,
            });
        }
        let corpus = self.corpus.snapshot();
        let command_corpus = match &self.command_corpus {
            Some(h) => h.snapshot(),
            None => corpus.clone(),
        };
        let classification = self
            .classify_in(&corpus, instruction, config)
            .await
            .map_err(|error| RunError {
                step: Step::Classify,
                error,
                classification: None,
            })?;
        match self
            .generate_in(
                &command_corpus,
                instruction,
                &classification.class_name,
                config,
            )
            .await
        {
            Ok(mut result) => {
                result.trace.classification = Some(classification);
                Ok(result)
            }
            Err(error) => Err(RunError {
                step: Step::Generate,
                error,
                classification: Some(classification),
            }),
        }
    }
}
