//! Classifier and generator prompt assembly.
//!
//! Prompts are rendered from plain-text templates with `{{name}}`
//! placeholders. The shipped templates live in `data/templates/`; a
//! deployment can point [`PromptTemplates::from_dir`] at its own copies.
//!
//! Rendered user text has this layout (the sample list is omitted entirely
//! when retrieval is disabled):
//!
//! ```text
//! ------------------------------------
//! Instruct:
//! <instruction>
//! Samples:
//! 1. Input: <sample input>
//!    Output: <class or command>
//! ------------------------------------
//! Answer:
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ClassCatalog, CommandClass};

pub const SEPARATOR: &str = "------------------------------------";
pub const RETRY_NOTE: &str = "Output only the command.";

const CLASSIFIER_SYSTEM: &str = include_str!("../data/templates/classifier_system.txt");
const CLASSIFIER_USER: &str = include_str!("../data/templates/classifier_user.txt");
const GENERATOR_USER: &str = include_str!("../data/templates/generator_user.txt");

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {name}: {source}")]
    Io {
        name: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template {name} is missing placeholder {{{{{placeholder}}}}}")]
    MissingPlaceholder { name: String, placeholder: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub classifier_system: String,
    pub classifier_user: String,
    pub generator_user: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            classifier_system: CLASSIFIER_SYSTEM.to_string(),
            classifier_user: CLASSIFIER_USER.to_string(),
            generator_user: GENERATOR_USER.to_string(),
        }
    }
}

impl PromptTemplates {
    /// Reads `classifier_system.txt`, `classifier_user.txt` and
    /// `generator_user.txt` from `dir`.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            fs::read_to_string(dir.join(name)).map_err(|source| TemplateError::Io {
                name: name.to_string(),
                source,
            })
        };
        let t = Self {
            classifier_system: read("classifier_system.txt")?,
            classifier_user: read("classifier_user.txt")?,
            generator_user: read("generator_user.txt")?,
        };
        t.check()?;
        Ok(t)
    }

    pub fn check(&self) -> Result<(), TemplateError> {
        let required: [(&str, &str, &[&str]); 3] = [
            ("classifier_system", &self.classifier_system, &["classes"]),
            (
                "classifier_user",
                &self.classifier_user,
                &["instruction", "samples", "note"],
            ),
            (
                "generator_user",
                &self.generator_user,
                &["instruction", "samples", "note"],
            ),
        ];
        for (name, text, placeholders) in required {
            for p in placeholders {
                if !text.contains(&format!("{{{{{p}}}}}")) {
                    return Err(TemplateError::MissingPlaceholder {
                        name: name.to_string(),
                        placeholder: p.to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Substitutes `{{name}}` placeholders in one pass; substituted text is never
/// re-expanded. Unknown placeholders are left as written.
pub fn fill(template: &str, values: &HashMap<&str, &str>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let key = &after[..end];
                match values.get(key) {
                    Some(v) => out.push_str(v),
                    None => {
                        out.push_str("{{");
                        out.push_str(key);
                        out.push_str("}}");
                    }
                }
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub rag_enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub input_text: String,
    pub output_text: String,
}

/// Retrieved demonstrations in rank order, most similar first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleBlock {
    pub entries: Vec<SampleEntry>,
}

impl SampleBlock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, input_text: impl Into<String>, output_text: impl Into<String>) {
        self.entries.push(SampleEntry {
            input_text: input_text.into(),
            output_text: output_text.into(),
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn render(&self) -> String {
        let mut s = String::from("Samples:\n");
        for (i, e) in self.entries.iter().enumerate() {
            let _ = writeln!(
                s,
                "{}. Input: {}\n   Output: {}",
                i + 1,
                e.input_text,
                e.output_text
            );
        }
        s
    }
}

impl<I: Into<String>, O: Into<String>> FromIterator<(I, O)> for SampleBlock {
    fn from_iter<T: IntoIterator<Item = (I, O)>>(iter: T) -> Self {
        let mut b = SampleBlock::new();
        for (i, o) in iter {
            b.push(i, o);
        }
        b
    }
}

fn user_text(
    template: &str,
    instruction: &str,
    samples: &SampleBlock,
    rag_enabled: bool,
    retry: bool,
) -> String {
    let rendered_samples = if rag_enabled {
        samples.render()
    } else {
        String::new()
    };
    let note = if retry {
        format!("{RETRY_NOTE}\n")
    } else {
        String::new()
    };
    let values = HashMap::from([
        ("instruction", instruction.trim()),
        ("samples", rendered_samples.as_str()),
        ("note", note.as_str()),
    ]);
    fill(template, &values)
}

/// Numbered `name: description` list of every class.
pub fn class_listing(catalog: &ClassCatalog) -> String {
    catalog
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {}: {}", i + 1, c.name, c.description))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_classifier_prompt(
    templates: &PromptTemplates,
    catalog: &ClassCatalog,
    instruction: &str,
    samples: &SampleBlock,
    rag_enabled: bool,
) -> PromptBundle {
    let listing = class_listing(catalog);
    let system_text = fill(
        &templates.classifier_system,
        &HashMap::from([("classes", listing.as_str())]),
    );
    PromptBundle {
        system_text,
        user_text: user_text(
            &templates.classifier_user,
            instruction,
            samples,
            rag_enabled,
            false,
        ),
        rag_enabled,
    }
}

/// Generator prompt; `retry` adds the corrective "output only the command"
/// line used when a first completion failed validation.
pub fn build_generator_prompt(
    templates: &PromptTemplates,
    class: &CommandClass,
    instruction: &str,
    samples: &SampleBlock,
    rag_enabled: bool,
    retry: bool,
) -> PromptBundle {
    PromptBundle {
        system_text: class.system_prompt.clone(),
        user_text: user_text(
            &templates.generator_user,
            instruction,
            samples,
            rag_enabled,
            retry,
        ),
        rag_enabled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t() -> PromptTemplates {
        PromptTemplates::default()
    }

    #[test]
    fn classifier_prompt_sections() {
        let cat = ClassCatalog::default_catalog();
        let samples: SampleBlock = [("I want list of active users", "list")]
            .into_iter()
            .collect();
        let p = build_classifier_prompt(
            &t(),
            &cat,
            "Could you please give me the list of active users",
            &samples,
            true,
        );
        assert!(p
            .system_text
            .starts_with("You are a classifier to classify the input command into the categories below:\n1. user: "));
        assert!(p
            .system_text
            .contains("\n2. list: List all of the users, gnode-bs, or nodes."));
        assert_eq!(p.user_text.matches("Instruct:").count(), 1);
        assert_eq!(p.user_text.matches("Samples:").count(), 1);
        assert!(p
            .user_text
            .contains("Could you please give me the list of active users\n"));
        assert!(p.user_text.contains("Output: list"));
        assert!(p.user_text.ends_with("Answer:\n"));
    }

    #[test]
    fn no_rag_has_no_samples() {
        let cat = ClassCatalog::default_catalog();
        let samples: SampleBlock = [("x", "list")].into_iter().collect();
        let p = build_classifier_prompt(&t(), &cat, "hello", &samples, false);
        assert!(!p.user_text.contains("Samples:"));
        assert!(!p.user_text.contains("Input: x"));
    }

    #[test]
    fn empty_samples_keep_header() {
        let cat = ClassCatalog::default_catalog();
        let p = build_classifier_prompt(&t(), &cat, "hello", &SampleBlock::new(), true);
        assert!(p
            .user_text
            .contains("hello\nSamples:\n------------------------------------\n"));
    }

    #[test]
    fn generator_numbers_in_rank_order() {
        let cat = ClassCatalog::default_catalog();
        let list = cat.get("list").unwrap();
        let samples: SampleBlock = [("a", "list users"), ("b", "list nodes")]
            .into_iter()
            .collect();
        let p = build_generator_prompt(&t(), list, "  keep Case  ", &samples, true, false);
        assert_eq!(p.system_text, list.system_prompt);
        assert!(p.user_text.contains(
            "Samples:\n1. Input: a\n   Output: list users\n2. Input: b\n   Output: list nodes\n"
        ));
        assert!(p.user_text.contains("Instruct:\nkeep Case\n"));
        let retry = build_generator_prompt(&t(), list, "x", &samples, true, true);
        assert!(retry.user_text.contains("Output only the command.\n------"));
    }

    #[test]
    fn fill_is_single_pass() {
        let v = HashMap::from([("a", "{{b}}"), ("b", "no")]);
        assert_eq!(fill("x{{a}}y{{c}}z{{", &v), "x{{b}}y{{c}}z{{");
    }

    #[test]
    fn templates_from_dir_checks_placeholders() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("classifier_system.txt"), "{{classes}}").unwrap();
        fs::write(
            dir.path().join("classifier_user.txt"),
            "{{instruction}}{{samples}}{{note}}",
        )
        .unwrap();
        fs::write(dir.path().join("generator_user.txt"), "{{instruction}}").unwrap();
        let err = PromptTemplates::from_dir(dir.path()).unwrap_err();
        assert!(matches!(err, TemplateError::MissingPlaceholder { .. }));
        fs::write(
            dir.path().join("generator_user.txt"),
            "{{instruction}}{{samples}}{{note}}",
        )
        .unwrap();
        assert!(PromptTemplates::from_dir(dir.path()).is_ok());
    }
}
