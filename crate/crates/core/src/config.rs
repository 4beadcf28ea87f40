//! Settings shared by the CLI and the service, and the wiring that turns
//! them into a ready [`Pipeline`].
//!
//! Precedence: command-line flags > environment > config file > defaults.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::corpus::{ClassCatalog, CorpusError, Dataset, Split, DEFAULT_CLASS_COUNT};
use crate::egress::{parse_url, Allowlist, EgressError, LocalHttp};
use crate::embedding::{EmbedError, Embedder, EmbedderConfig};
use crate::eval::PrecisionMode;
use crate::llm::{
    LlmBackend, LocalServerBackend, Script, ScriptedBackend, DEFAULT_BASE_URL, DEFAULT_MODEL,
};
use crate::pipeline::{DecodingOptions, Pipeline, PipelineConfig};
use crate::prompting::{PromptTemplates, TemplateError};
use crate::retriever::{CorpusHandle, IndexedCorpus, RetrieverConfig, RetrieverError, VectorIndex};

pub const ENV_CONFIG: &str = "NETWORD_CONFIG";
pub const ENV_BIND: &str = "NETWORD_BIND";
pub const ENV_LLM_URL: &str = "NETWORD_LLM_URL";
pub const ENV_LLM_MODEL: &str = "NETWORD_LLM_MODEL";

const DEFAULT_CORPUS: &str = include_str!("../data/corpus.jsonl");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbedError),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Egress(#[from] EgressError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// A local inference server.
    Local,
    /// Canned responses from a script file.
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    pub backend: BackendKind,
    pub url: String,
    pub model: String,
    pub temperature: f64,
    pub seed: Option<i64>,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    /// Script file for the scripted backend (JSON `{rules, default_response}`).
    pub script: Option<PathBuf>,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            backend: BackendKind::Local,
            url: DEFAULT_BASE_URL.to_string(),
            model: DEFAULT_MODEL.to_string(),
            temperature: 0.0,
            seed: Some(42),
            max_tokens: 256,
            timeout_secs: 120,
            max_in_flight: 1,
            script: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub bind: String,
    /// Catalog file; the shipped 11-class catalog when unset.
    pub catalog: Option<PathBuf>,
    /// Required class count, checked at load. Defaults to 11 for the shipped
    /// catalog and to no check for custom catalogs.
    pub expected_classes: Option<usize>,
    /// Retrieval corpus; the shipped corpus when unset.
    pub corpus: Option<PathBuf>,
    /// Separate corpus for generator samples; the main corpus when unset.
    pub command_corpus: Option<PathBuf>,
    pub index_cache: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    pub store: PathBuf,
    pub console_dir: Option<PathBuf>,
    pub rag: bool,
    pub retry_on_invalid: bool,
    pub precision_mode: PrecisionMode,
    pub eval_concurrency: usize,
    /// Sending approved commands to real network functions. Not implemented;
    /// the service refuses to start when this is set.
    pub execute_on_network: bool,
    pub retriever: RetrieverConfig,
    pub llm: LlmSettings,
    pub embedding: EmbedderConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".to_string(),
            catalog: None,
            expected_classes: None,
            corpus: None,
            command_corpus: None,
            index_cache: None,
            templates_dir: None,
            store: PathBuf::from("netword-store.jsonl"),
            console_dir: None,
            rag: true,
            retry_on_invalid: true,
            precision_mode: PrecisionMode::Set,
            eval_concurrency: 1,
            execute_on_network: false,
            retriever: RetrieverConfig::default(),
            llm: LlmSettings::default(),
            embedding: EmbedderConfig::default(),
        }
    }
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Settings, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut s: Settings = toml::from_str(&text).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        // Relative paths in the file are relative to the file.
        if let Some(dir) = path.parent() {
            s.resolve_relative(dir);
        }
        Ok(s)
    }

    fn resolve_relative(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        for p in [
            &mut self.catalog,
            &mut self.corpus,
            &mut self.command_corpus,
            &mut self.index_cache,
            &mut self.templates_dir,
            &mut self.console_dir,
            &mut self.llm.script,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.store);
    }

    /// Loads the file named by `path` (or `$NETWORD_CONFIG`), then applies
    /// environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Settings, ConfigError> {
        let from_env = std::env::var_os(ENV_CONFIG).map(PathBuf::from);
        let mut s = match path.map(Path::to_path_buf).or(from_env) {
            Some(p) => Settings::from_file(&p)?,
            None => Settings::default(),
        };
        s.apply_env(|k| std::env::var(k).ok());
        Ok(s)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get(ENV_BIND) {
            self.bind = v;
        }
        if let Some(v) = get(ENV_LLM_URL) {
            self.llm.url = v;
        }
        if let Some(v) = get(ENV_LLM_MODEL) {
            self.llm.model = v;
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            retriever: self.retriever.clone(),
            rag_enabled: self.rag,
            retry_on_invalid: self.retry_on_invalid,
        }
    }

    pub fn decoding(&self) -> DecodingOptions {
        DecodingOptions {
            model_name: self.llm.model.clone(),
            temperature: self.llm.temperature,
            seed: self.llm.seed,
            max_tokens: self.llm.max_tokens,
        }
    }

    pub fn llm_url(&self) -> Result<Url, ConfigError> {
        Ok(parse_url(&self.llm.url)?)
    }

    /// Every origin the process may contact: the inference server and, in
    /// remote mode, the embedding endpoint.
    pub fn allowlist(&self) -> Result<Allowlist, ConfigError> {
        let mut urls = vec![self.llm_url()?];
        if let Some(u) = self.embedding.endpoint()? {
            urls.push(u);
        }
        Ok(Allowlist::new(urls.iter()))
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        self.retriever.check().map_err(ConfigError::Invalid)?;
        self.embedding.check()?;
        if !self.llm.temperature.is_finite() || self.llm.temperature < 0.0 {
            return Err(ConfigError::Invalid(
                "llm.temperature must be finite and >= 0".into(),
            ));
        }
        if self.llm.max_tokens == 0 {
            return Err(ConfigError::Invalid("llm.max_tokens must be >= 1".into()));
        }
        if self.llm.backend == BackendKind::Scripted && self.llm.script.is_none() {
            return Err(ConfigError::Invalid(
                "llm.backend = \"scripted\" needs llm.script".into(),
            ));
        }
        Ok(())
    }

    pub fn load_catalog(&self) -> Result<ClassCatalog, ConfigError> {
        let catalog = match &self.catalog {
            Some(p) => ClassCatalog::load(p)?,
            None => ClassCatalog::default_catalog(),
        };
        let expected = self
            .expected_classes
            .or(self.catalog.is_none().then_some(DEFAULT_CLASS_COUNT));
        if let Some(n) = expected {
            catalog.expect_count(n)?;
        }
        Ok(catalog)
    }

    pub fn load_corpus(&self, catalog: &ClassCatalog) -> Result<Dataset, ConfigError> {
        Ok(match &self.corpus {
            Some(p) => Dataset::load(p, catalog, Split::TrainCorpus)?,
            None => Dataset::from_jsonl(DEFAULT_CORPUS, "corpus", catalog, Split::TrainCorpus)?,
        })
    }

    pub fn build_backend(&self, http: &LocalHttp) -> Result<Arc<dyn LlmBackend>, ConfigError> {
        Ok(match self.llm.backend {
            BackendKind::Local => Arc::new(
                LocalServerBackend::new(self.llm_url()?, self.llm.model.clone(), http.clone())
                    .with_timeout(Duration::from_secs(self.llm.timeout_secs))
                    .with_max_in_flight(self.llm.max_in_flight),
            ),
            BackendKind::Scripted => {
                let path = self.llm.script.as_ref().ok_or_else(|| {
                    ConfigError::Invalid("scripted backend without script".into())
                })?;
                let text = fs::read_to_string(path).map_err(|e| ConfigError::File {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                let script: Script =
                    serde_json::from_str(&text).map_err(|e| ConfigError::File {
                        path: path.clone(),
                        message: e.to_string(),
                    })?;
                Arc::new(ScriptedBackend::from_script(script))
            }
        })
    }
}

/// A fully loaded pipeline plus what the service needs alongside it.
pub struct Runtime {
    pub settings: Settings,
    pub catalog: Arc<ClassCatalog>,
    pub http: LocalHttp,
    pub pipeline: Pipeline,
}

impl Runtime {
    /// Loads catalog and corpus, builds the index and connects the backend.
    pub async fn from_settings(settings: Settings) -> Result<Runtime, ConfigError> {
        let backend = {
            let http = LocalHttp::new(settings.allowlist()?);
            let backend = settings.build_backend(&http)?;
            (http, backend)
        };
        Self::with_backend(settings, backend.1, Some(backend.0)).await
    }

    /// As [`Runtime::from_settings`] but with a caller-supplied backend.
    pub async fn with_backend(
        settings: Settings,
        backend: Arc<dyn LlmBackend>,
        http: Option<LocalHttp>,
    ) -> Result<Runtime, ConfigError> {
        settings.check()?;
        let http = match http {
            Some(h) => h,
            None => LocalHttp::new(settings.allowlist()?),
        };
        let catalog = Arc::new(settings.load_catalog()?);
        let corpus = settings.load_corpus(&catalog)?;
        let embedder = Arc::new(Embedder::new(
            settings.embedding.clone(),
            Some(http.clone()),
        )?);
        let index = match &settings.index_cache {
            Some(p) => VectorIndex::load_or_build(p, &corpus, &embedder).await?,
            None => VectorIndex::build(&corpus, &embedder).await?,
        };
        let handle = CorpusHandle::new(IndexedCorpus::new(corpus, index));
        let mut pipeline = Pipeline::new(catalog.clone(), handle, embedder.clone(), backend)
            .with_decoding(settings.decoding());
        if let Some(dir) = &settings.templates_dir {
            pipeline = pipeline.with_templates(PromptTemplates::from_dir(dir)?);
        }
        if let Some(p) = &settings.command_corpus {
            let ds = Dataset::load(p, &catalog, Split::TrainCorpus)?;
            let c = IndexedCorpus::build(ds, &embedder).await?;
            pipeline = pipeline.with_command_corpus(CorpusHandle::new(c));
        }
        Ok(Runtime {
            settings,
            catalog,
            http,
            pipeline,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("netword.toml");
        fs::write(
            &p,
            "bind = \"0.0.0.0:9\"\ncorpus = \"c.jsonl\"\n[llm]\nmodel = \"file-model\"\n[retriever]\nk_classifier = 4\nk_generator = 2\n",
        )
        .unwrap();
        let mut s = Settings::from_file(&p).unwrap();
        assert_eq!(s.bind, "0.0.0.0:9");
        assert_eq!(
            s.corpus.as_deref(),
            Some(dir.path().join("c.jsonl").as_path())
        );
        assert_eq!(s.retriever.k_classifier, 4);
        s.apply_env(|k| match k {
            ENV_LLM_MODEL => Some("env-model".into()),
            ENV_LLM_URL => Some("http://127.0.0.1:9999".into()),
            _ => None,
        });
        assert_eq!(s.llm.model, "env-model");
        assert_eq!(s.llm.url, "http://127.0.0.1:9999");
        assert_eq!(s.bind, "0.0.0.0:9");
    }

    #[test]
    fn allowlist_is_llm_plus_embedding() {
        let mut s = Settings::default();
        assert_eq!(
            s.allowlist().unwrap().origins(),
            vec!["http://localhost:11434"]
        );
        s.embedding = EmbedderConfig::remote("http://127.0.0.1:7000/api/embed", "bge");
        assert_eq!(
            s.allowlist().unwrap().origins(),
            vec!["http://localhost:11434", "http://127.0.0.1:7000"]
        );
    }

    #[test]
    fn shipped_defaults_load() {
        let s = Settings::default();
        let cat = s.load_catalog().unwrap();
        let corpus = s.load_corpus(&cat).unwrap();
        assert_eq!(cat.len(), 11);
        assert!(corpus.len() >= 80);
    }

    #[test]
    fn invalid_settings_rejected() {
        let mut s = Settings::default();
        s.llm.backend = BackendKind::Scripted;
        assert!(s.check().is_err());
        let mut s = Settings::default();
        s.retriever.k_generator = 0;
        assert!(s.check().is_err());
    }
}
