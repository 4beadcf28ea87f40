//! Translate natural-language network management requests into validated
//! commands with a locally hosted language model.
//!
//! A request goes through two model calls. The first picks a command class
//! from the [`corpus::ClassCatalog`]; the second writes the command for that
//! class. Both prompts can carry similar examples retrieved from a labelled
//! corpus ([`retriever`]). Output is checked against a per-class
//! [`grammar`] before it is returned.
//!
//! ```no_run
//! # async fn demo() -> Result<(), Box<dyn std::error::Error>> {
//! use netword::config::{Runtime, Settings};
//!
//! let rt = Runtime::from_settings(Settings::default()).await?;
//! let config = rt.settings.pipeline_config();
//! let out = rt.pipeline.run("show me the active users", &config).await?;
//! println!("{}", out.command);
//! # Ok(()) }
//! ```

pub mod cli;
pub mod config;
pub mod corpus;
pub mod egress;
pub mod embedding;
pub mod eval;
pub mod grammar;
pub mod llm;
pub mod pipeline;
pub mod prompting;
pub mod retriever;
pub mod service;
pub mod store;
