//! Command-line front end: `serve`, `ask`, `eval` and `corpus`.
//!
//! Exit codes: 0 on success, 1 when the pipeline, backend or data fails,
//! 2 on usage errors.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tokio::net::TcpListener;

use crate::config::{ConfigError, Runtime, Settings, ENV_BIND, ENV_LLM_MODEL, ENV_LLM_URL};
use crate::corpus::{Dataset, Example, Split};
use crate::eval::{
    comparison_table, emit_report, evaluate, EvalError, EvalOptions, PrecisionMode, ReportFormat,
};
use crate::pipeline::PipelineError;
use crate::service::{router, AppState};
use crate::store::Store;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "netword",
    version,
    about = "Natural-language to network-command translation with a local model"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML settings file.
    #[arg(long, global = true, env = "NETWORD_CONFIG")]
    pub config: Option<PathBuf>,
    /// Inference server base URL.
    #[arg(long, global = true, env = ENV_LLM_URL)]
    pub llm_url: Option<String>,
    /// Model name on the inference server.
    #[arg(long, global = true, env = ENV_LLM_MODEL)]
    pub model: Option<String>,
    /// Retrieval corpus (JSONL).
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Class catalog (TOML).
    #[arg(long, global = true)]
    pub catalog: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Copy)]
pub struct RagArgs {
    /// Retrieve samples into the prompts (default).
    #[arg(long, overrides_with = "no_rag")]
    pub rag: bool,
    /// Zero-shot prompts, no retrieval.
    #[arg(long)]
    pub no_rag: bool,
}

impl RagArgs {
    fn resolve(self, default: bool) -> bool {
        if self.no_rag {
            false
        } else if self.rag {
            true
        } else {
            default
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = ENV_BIND)]
        bind: Option<String>,
        /// Interaction and audit store (JSONL).
        #[arg(long)]
        store: Option<PathBuf>,
        /// Directory of built console assets to serve at `/`.
        #[arg(long)]
        console_dir: Option<PathBuf>,
    },
    /// Translate one instruction and print the command.
    Ask {
        instruction: String,
        #[command(flatten)]
        rag: RagArgs,
        /// Print prompts, retrieved samples and raw model output to stderr.
        #[arg(long)]
        show_trace: bool,
    },
    /// Score the pipeline on a labelled JSONL dataset.
    Eval {
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Table)]
        format: FormatArg,
        #[command(flatten)]
        rag: RagArgs,
        /// Run with and without retrieval and print both rows.
        #[arg(long, conflicts_with_all = ["rag", "no_rag"])]
        compare: bool,
        #[arg(long, value_enum)]
        precision: Option<PrecisionArg>,
        #[arg(long)]
        concurrency: Option<usize>,
        /// Also write the machine-readable report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect or extend a corpus file.
    Corpus {
        #[command(subcommand)]
        action: CorpusCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    /// Check every record against the catalog and grammar.
    Validate { path: PathBuf },
    /// Append one validated example.
    Add {
        path: PathBuf,
        #[arg(long)]
        input: String,
        #[arg(long)]
        command: String,
        #[arg(long)]
        class: String,
        #[arg(long)]
        id: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Table,
    Machine,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PrecisionArg {
    Set,
    Clipped,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Table => ReportFormat::Table,
            FormatArg::Machine => ReportFormat::Machine,
        }
    }
}

impl From<PrecisionArg> for PrecisionMode {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Set => PrecisionMode::Set,
            PrecisionArg::Clipped => PrecisionMode::Clipped,
        }
    }
}

fn settings(global: &GlobalArgs) -> Result<Settings, ConfigError> {
    // clap already folded the environment into these flags.
    let mut s = Settings::load(global.config.as_deref())?;
    if let Some(u) = &global.llm_url {
        s.llm.url = u.clone();
    }
    if let Some(m) = &global.model {
        s.llm.model = m.clone();
    }
    if global.corpus.is_some() {
        s.corpus = global.corpus.clone();
    }
    if global.catalog.is_some() {
        s.catalog = global.catalog.clone();
    }
    Ok(s)
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_FAILURE)
}

fn usage(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_USAGE)
}

/// Parses `std::env::args` and runs the chosen command.
pub async fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    run(cli).await
}

pub async fn run(cli: Cli) -> ExitCode {
    let mut s = match settings(&cli.global) {
        Ok(s) => s,
        Err(e) => return usage(e),
    };
    match cli.command {
        Command::Serve {
            bind,
            store,
            console_dir,
        } => {
            if let Some(b) = bind {
                s.bind = b;
            }
            if let Some(p) = store {
                s.store = p;
            }
            if console_dir.is_some() {
                s.console_dir = console_dir;
            }
            serve(s).await
        }
        Command::Ask {
            instruction,
            rag,
            show_trace,
        } => {
            if instruction.trim().is_empty() {
                return usage("instruction is empty");
            }
            s.rag = rag.resolve(s.rag);
            ask(s, &instruction, show_trace).await
        }
        Command::Eval {
            dataset,
            format,
            rag,
            compare,
            precision,
            concurrency,
            out,
        } => {
            s.rag = rag.resolve(s.rag);
            if let Some(p) = precision {
                s.precision_mode = p.into();
            }
            if let Some(c) = concurrency {
                s.eval_concurrency = c;
            }
            eval(s, &dataset, format.into(), compare, out).await
        }
        Command::Corpus { action } => corpus(s, action),
    }
}

async fn serve(s: Settings) -> ExitCode {
    if s.execute_on_network {
        return usage("execute_on_network is not supported; approvals are dry-run only");
    }
    let listener = match TcpListener::bind(&s.bind).await {
        Ok(l) => l,
        Err(e) => return fail(format!("cannot bind {}: {e}", s.bind)),
    };
    let console = s.console_dir.clone();
    let store_path = s.store.clone();
    let rt = match Runtime::from_settings(s).await {
        Ok(rt) => rt,
        Err(e) => return fail(e),
    };
    let store = match Store::open(&store_path) {
        Ok(st) => st,
        Err(e) => return fail(e),
    };
    let health = rt.pipeline.backend().health().await;
    if let crate::llm::Health::Unhealthy(reason) = &health {
        tracing::warn!("inference backend not ready: {reason}");
    }
    let state = Arc::new(AppState::from_runtime(rt, store));
    let addr = match listener.local_addr() {
        Ok(a) => a,
        Err(e) => return fail(e),
    };
    println!("netword listening on http://{addr}");
    let app = router(state, console);
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    match axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
    {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

async fn ask(s: Settings, instruction: &str, show_trace: bool) -> ExitCode {
    let config = s.pipeline_config();
    let rt = match Runtime::from_settings(s).await {
        Ok(rt) => rt,
        Err(e) => return fail(e),
    };
    match rt.pipeline.run(instruction, &config).await {
        Ok(r) => {
            if show_trace {
                eprintln!(
                    "{}",
                    serde_json::to_string_pretty(&r.trace).expect("trace serializes")
                );
            }
            println!("{}", r.command);
            ExitCode::SUCCESS
        }
        Err(e) => {
            if show_trace {
                if let Some(c) = &e.classification {
                    eprintln!("{}", serde_json::to_string_pretty(c).expect("serializes"));
                }
                for a in e.error.attempts() {
                    eprintln!("{}", serde_json::to_string_pretty(a).expect("serializes"));
                }
            }
            match &e.error {
                PipelineError::EmptyInstruction => usage(&e),
                _ => fail(&e),
            }
        }
    }
}

async fn eval(
    s: Settings,
    path: &PathBuf,
    format: ReportFormat,
    compare: bool,
    out: Option<PathBuf>,
) -> ExitCode {
    let options = EvalOptions {
        precision_mode: s.precision_mode,
        concurrency: s.eval_concurrency,
    };
    let config = s.pipeline_config();
    let rt = match Runtime::from_settings(s).await {
        Ok(rt) => rt,
        Err(e) => return fail(e),
    };
    let dataset = match Dataset::load(path, &rt.catalog, Split::Eval) {
        Ok(d) => d,
        Err(e) => return fail(format!("{}: {e}", path.display())),
    };
    let configs = if compare {
        vec![
            crate::pipeline::PipelineConfig {
                rag_enabled: true,
                ..config.clone()
            },
            config.clone().without_rag(),
        ]
    } else {
        vec![config]
    };
    let mut reports = Vec::new();
    for c in &configs {
        match evaluate(&dataset, &rt.pipeline, c, &options).await {
            Ok(r) => reports.push(r),
            Err(e @ EvalError::Overlap(_)) => return fail(e),
            Err(e) => return fail(e),
        }
    }
    if let Some(p) = out {
        let body = if reports.len() == 1 {
            serde_json::to_string_pretty(&reports[0])
        } else {
            serde_json::to_string_pretty(&reports)
        }
        .expect("report serializes");
        if let Err(e) = std::fs::write(&p, body) {
            return fail(format!("{}: {e}", p.display()));
        }
    }
    if compare && format == ReportFormat::Table {
        print!("{}", comparison_table(&reports.iter().collect::<Vec<_>>()));
    } else if compare {
        println!(
            "{}",
            serde_json::to_string_pretty(&reports).expect("report serializes")
        );
    } else {
        print!("{}", emit_report(&reports[0], format));
    }
    ExitCode::SUCCESS
}

fn corpus(s: Settings, action: CorpusCommand) -> ExitCode {
    let catalog = match s.load_catalog() {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match action {
        CorpusCommand::Validate { path } => {
            match Dataset::load(&path, &catalog, Split::TrainCorpus) {
                Ok(d) => {
                    println!("{}: {} examples ok", path.display(), d.len());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(format!("{}: {e}", path.display())),
            }
        }
        CorpusCommand::Add {
            path,
            input,
            command,
            class,
            id,
        } => {
            let existing = if path.exists() {
                match Dataset::load(&path, &catalog, Split::TrainCorpus) {
                    Ok(d) => d,
                    Err(e) => return fail(format!("{}: {e}", path.display())),
                }
            } else {
                Dataset::new("corpus", Split::TrainCorpus)
            };
            let id = id.unwrap_or_else(|| format!("c{:03}", existing.len() + 1));
            let next = match existing
                .add_example(Example::new(id.clone(), input, command, class), &catalog)
            {
                Ok(d) => d,
                Err(e) => return fail(e),
            };
            if let Err(e) = next.save(&path) {
                return fail(e);
            }
            println!("added {id}");
            ExitCode::SUCCESS
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn rag_flags() {
        let cli = Cli::try_parse_from(["netword", "ask", "--no-rag", "list users"]).unwrap();
        match cli.command {
            Command::Ask { rag, .. } => assert!(!rag.resolve(true)),
            _ => unreachable!(),
        }
        let cli = Cli::try_parse_from(["netword", "ask", "x"]).unwrap();
        match cli.command {
            Command::Ask { rag, .. } => assert!(rag.resolve(true)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn compare_conflicts_with_rag_flags() {
        assert!(
            Cli::try_parse_from(["netword", "eval", "d.jsonl", "--compare", "--no-rag"]).is_err()
        );
    }
}
