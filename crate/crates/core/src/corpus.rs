//! Example corpus and command-class catalog.
//!
//! Corpus files hold one JSON record per line with the fields `id`, `input`,
//! `command` and `class`. Catalog files are TOML documents with one
//! `[[class]]` table per command class. Everything is validated strictly on
//! load: a corpus line whose command does not parse under its class grammar
//! is rejected with its line number.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{self, FlagSpec, Violation};

const DEFAULT_CATALOG: &str = include_str!("../data/catalog.toml");

/// Number of classes in the shipped catalog.
pub const DEFAULT_CLASS_COUNT: usize = 11;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}malformed record: {message}", at(*.line))]
    Malformed {
        line: Option<usize>,
        message: String,
    },
    #[error("{}field {field:?} is empty", at(*.line))]
    EmptyField {
        line: Option<usize>,
        field: &'static str,
    },
    #[error("{}unknown class {class:?}", at(*.line))]
    UnknownClass { line: Option<usize>, class: String },
    #[error("{}duplicate id {id:?}", at(*.line))]
    DuplicateId { line: Option<usize>, id: String },
    #[error("{}command {command:?} is invalid for class {class:?}: {violation}", at(*.line))]
    InvalidCommand {
        line: Option<usize>,
        class: String,
        command: String,
        violation: Box<Violation>,
    },
    #[error("catalog: {0}")]
    Catalog(String),
}

fn at(line: Option<usize>) -> String {
    line.map(|l| format!("line {l}: ")).unwrap_or_default()
}

impl CorpusError {
    pub fn line(&self) -> Option<usize> {
        match self {
            CorpusError::Malformed { line, .. }
            | CorpusError::EmptyField { line, .. }
            | CorpusError::UnknownClass { line, .. }
            | CorpusError::DuplicateId { line, .. }
            | CorpusError::InvalidCommand { line, .. } => *line,
            _ => None,
        }
    }
}

/// One `(input, command, class)` demonstration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    #[serde(rename = "input")]
    pub input_text: String,
    pub command: String,
    #[serde(rename = "class")]
    pub class_label: String,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        input_text: impl Into<String>,
        command: impl Into<String>,
        class_label: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            input_text: input_text.into(),
            command: command.into(),
            class_label: class_label.into(),
        }
    }

    /// Checks every record-level invariant against `catalog`.
    pub fn validate(&self, catalog: &ClassCatalog) -> Result<(), CorpusError> {
        self.validate_at(catalog, None)
    }

    fn validate_at(&self, catalog: &ClassCatalog, line: Option<usize>) -> Result<(), CorpusError> {
        for (field, value) in [
            ("id", &self.id),
            ("input", &self.input_text),
            ("command", &self.command),
        ] {
            if value.trim().is_empty() {
                return Err(CorpusError::EmptyField { line, field });
            }
        }
        let class = catalog
            .get(&self.class_label)
            .ok_or_else(|| CorpusError::UnknownClass {
                line,
                class: self.class_label.clone(),
            })?;
        grammar::parse(&self.command, class).map_err(|violation| CorpusError::InvalidCommand {
            line,
            class: self.class_label.clone(),
            command: self.command.clone(),
            violation: Box::new(violation),
        })?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandClass {
    pub name: String,
    pub description: String,
    pub system_prompt: String,
    pub base_commands: Vec<String>,
    #[serde(default)]
    pub flags: Vec<FlagSpec>,
}

impl CommandClass {
    pub fn flag(&self, name: &str) -> Option<&FlagSpec> {
        self.flags.iter().find(|f| f.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    #[serde(default = "default_version")]
    pub version: u64,
    #[serde(rename = "class", default)]
    pub classes: Vec<CommandClass>,
}

fn default_version() -> u64 {
    1
}

impl ClassCatalog {
    /// The catalog shipped with the crate (11 classes).
    pub fn default_catalog() -> ClassCatalog {
        static CATALOG: OnceLock<ClassCatalog> = OnceLock::new();
        CATALOG
            .get_or_init(|| {
                ClassCatalog::from_toml_str(DEFAULT_CATALOG).expect("shipped catalog is valid")
            })
            .clone()
    }

    pub fn default_catalog_source() -> &'static str {
        DEFAULT_CATALOG
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ClassCatalog, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<ClassCatalog, CorpusError> {
        let catalog: ClassCatalog =
            toml::from_str(text).map_err(|e| CorpusError::Catalog(e.to_string()))?;
        catalog.check()?;
        Ok(catalog)
    }

    pub fn from_classes(classes: Vec<CommandClass>) -> Result<ClassCatalog, CorpusError> {
        let catalog = ClassCatalog {
            version: 1,
            classes,
        };
        catalog.check()?;
        Ok(catalog)
    }

    fn check(&self) -> Result<(), CorpusError> {
        let mut names = HashSet::new();
        for class in &self.classes {
            let name = &class.name;
            if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
                return Err(CorpusError::Catalog(format!(
                    "class name {name:?} must be lowercase without whitespace"
                )));
            }
            if !names.insert(name.as_str()) {
                return Err(CorpusError::Catalog(format!(
                    "duplicate class name {name:?}"
                )));
            }
            if class.system_prompt.trim().is_empty() {
                return Err(CorpusError::Catalog(format!(
                    "class {name:?} has an empty system_prompt"
                )));
            }
            if class.base_commands.iter().all(|b| b.trim().is_empty()) {
                return Err(CorpusError::Catalog(format!(
                    "class {name:?} has no base commands"
                )));
            }
            let mut flag_names = HashSet::new();
            for flag in &class.flags {
                flag.check()
                    .map_err(|m| CorpusError::Catalog(format!("class {name:?}: {m}")))?;
                if !flag_names.insert(flag.name.as_str()) {
                    return Err(CorpusError::Catalog(format!(
                        "class {name:?} declares flag {} twice",
                        flag.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fails unless the catalog holds exactly `n` classes.
    pub fn expect_count(&self, n: usize) -> Result<(), CorpusError> {
        if self.classes.len() != n {
            return Err(CorpusError::Catalog(format!(
                "expected {n} classes, found {}",
                self.classes.len()
            )));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&CommandClass> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train-corpus")]
    TrainCorpus,
    #[serde(rename = "eval")]
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::TrainCorpus => "train-corpus",
            Split::Eval => "eval",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub examples: Vec<Example>,
}

/// A corpus line before validation; `id` may be absent when ingesting.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: Option<String>,
    input: String,
    command: String,
    class: String,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split) -> Self {
        Self {
            name: name.into(),
            split,
            examples: Vec::new(),
        }
    }

    /// Loads a corpus file, validating every record against `catalog`.
    pub fn load(
        path: impl AsRef<Path>,
        catalog: &ClassCatalog,
        split: Split,
    ) -> Result<Dataset, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string());
        Self::parse_str(&text, name, catalog, split, None)
    }

    /// Parses corpus text. Records without an id are rejected.
    pub fn from_jsonl(
        text: &str,
        name: impl Into<String>,
        catalog: &ClassCatalog,
        split: Split,
    ) -> Result<Dataset, CorpusError> {
        Self::parse_str(text, name.into(), catalog, split, None)
    }

    /// Like [`Dataset::from_jsonl`], but assigns `{prefix}{line}` ids to
    /// records that lack one.
    pub fn ingest(
        text: &str,
        name: impl Into<String>,
        catalog: &ClassCatalog,
        split: Split,
        id_prefix: &str,
    ) -> Result<Dataset, CorpusError> {
        Self::parse_str(text, name.into(), catalog, split, Some(id_prefix))
    }

    fn parse_str(
        text: &str,
        name: String,
        catalog: &ClassCatalog,
        split: Split,
        id_prefix: Option<&str>,
    ) -> Result<Dataset, CorpusError> {
        let mut examples = Vec::new();
        let mut ids = HashSet::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = Some(idx + 1);
            if raw_line.trim().is_empty() {
                continue;
            }
            let rec: RawRecord =
                serde_json::from_str(raw_line).map_err(|e| CorpusError::Malformed {
                    line,
                    message: e.to_string(),
                })?;
            let id = match (rec.id, id_prefix) {
                (Some(id), _) => id,
                (None, Some(prefix)) => format!("{prefix}{}", idx + 1),
                (None, None) => {
                    return Err(CorpusError::Malformed {
                        line,
                        message: "missing field `id`".to_string(),
                    })
                }
            };
            let example = Example {
                id,
                input_text: rec.input,
                command: rec.command,
                class_label: rec.class,
            };
            example.validate_at(catalog, line)?;
            if !ids.insert(example.id.clone()) {
                return Err(CorpusError::DuplicateId {
                    line,
                    id: example.id,
                });
            }
            examples.push(example);
        }
        Ok(Dataset {
            name,
            split,
            examples,
        })
    }

    /// Canonical line-delimited form: one compact JSON object per line with
    /// keys in `id, input, command, class` order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex).expect("example serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let tmp = path.with_extension("jsonl.tmp");
        let io = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        fs::write(&tmp, self.to_jsonl()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    /// Returns a new dataset with `example` appended.
    pub fn add_example(
        &self,
        example: Example,
        catalog: &ClassCatalog,
    ) -> Result<Dataset, CorpusError> {
        if self.get(&example.id).is_some() {
            return Err(CorpusError::DuplicateId {
                line: None,
                id: example.id,
            });
        }
        example.validate(catalog)?;
        let mut next = self.clone();
        next.examples.push(example);
        Ok(next)
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Ids present in both datasets, in `self` order.
    pub fn overlapping_ids(&self, other: &Dataset) -> Vec<String> {
        let theirs: HashSet<&str> = other.examples.iter().map(|e| e.id.as_str()).collect();
        self.examples
            .iter()
            .filter(|e| theirs.contains(e.id.as_str()))
            .map(|e| e.id.clone())
            .collect()
    }
}
