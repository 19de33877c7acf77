//! The `irag` command line: corpus ingestion, index building, ad-hoc search,
//! agent and workflow runs, trajectory tooling, evaluation and HTTP serving.

pub mod config;
pub mod serve;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use irag_core::agent::{read_trajectories, run_agent, trajectory_json, write_trajectory_log, Trajectory};
use irag_core::corpus::{ingest_corpus, ChunkStore, CorpusError};
use irag_core::dense::{DenseError, DenseIndex};
use irag_core::engine::{render_tool_response, Action, Engine, EngineError};
use irag_core::eval::{load_dataset, render_report, run_benchmark, EvalError, QAExample, ReportFormat, RunnerConfig};
use irag_core::sparse::{SparseError, SparseIndex};
use irag_core::training::{export_sft, filter_trajectories, write_reward_report, write_sft, TrainingError};
use irag_core::workflow::{run_workflow, WorkflowError};
use thiserror::Error;

use crate::config::{Config, ConfigError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Dense(#[from] DenseError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error("{0}")]
    Episode(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Parser)]
#[command(name = "irag", version, about = "Interactive retrieval over a chunked corpus")]
pub struct Cli {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Index directory (overrides `index.dir`).
    #[arg(long, global = true)]
    pub index: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SearchMode {
    Semantic,
    Exact,
    Entity,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RunnerKind {
    Agent,
    Workflow,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Debug, clap::Args)]
pub struct ClientArgs {
    /// Replay replies from a JSON script instead of calling a model.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Chat-completions base URL (overrides `llm.base_url`).
    #[arg(long)]
    pub llm: Option<String>,
}

#[derive(Debug, clap::Args)]
pub struct OutputArgs {
    /// Write the step-per-line trajectory log here.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Write serialized trajectories (one per line) here.
    #[arg(long)]
    pub save: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk a JSONL corpus and store it in an index directory.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        chunk_words: Option<usize>,
    },
    /// Build the sparse and dense indexes for an ingested corpus.
    BuildIndex,
    /// Run one primitive against a fresh session and print the tool response.
    Search {
        text: String,
        #[arg(long, value_enum, default_value_t = SearchMode::Semantic)]
        mode: SearchMode,
        /// Ranking query for entity mode.
        #[arg(long)]
        query: Option<String>,
        #[arg(long)]
        scale: Option<u64>,
        #[arg(long)]
        include: Vec<String>,
        #[arg(long)]
        exclude: Vec<String>,
    },
    /// Answer one question with the tool-calling agent.
    RunAgent {
        #[arg(long)]
        question: String,
        #[command(flatten)]
        client: ClientArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Answer one question with the planner / reasoner / executor workflow.
    RunWorkflow {
        #[arg(long)]
        question: String,
        #[command(flatten)]
        client: ClientArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Run a dataset, keep trajectories with reward 1 and export them for SFT.
    Synthesize {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = RunnerKind::Workflow)]
        runner: RunnerKind,
        #[command(flatten)]
        client: ClientArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Reward breakdown (CSV) for saved trajectories.
    Reward {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a dataset and report EM / F1, turns and action counts.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = RunnerKind::Agent)]
        runner: RunnerKind,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        client: ClientArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Serve sessions over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

struct Ctx {
    cfg: Config,
    index: PathBuf,
}

impl Ctx {
    fn engine(&self) -> Result<Engine, CliError> {
        Ok(Engine::open(&self.index, self.cfg.provider()?)?)
    }

    fn runner(&self, kind: RunnerKind) -> RunnerConfig {
        match kind {
            RunnerKind::Agent => RunnerConfig::Agent(self.cfg.agent()),
            RunnerKind::Workflow => RunnerConfig::Workflow(self.cfg.workflow()),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_outputs(output: &OutputArgs, trajectories: &[Trajectory]) -> Result<(), CliError> {
    if let Some(path) = &output.log {
        let mut w = create(path)?;
        write_trajectory_log(&mut w, trajectories)?;
        w.flush()?;
    }
    if let Some(path) = &output.save {
        let mut w = create(path)?;
        for t in trajectories {
            writeln!(w, "{}", trajectory_json(t))?;
        }
        w.flush()?;
    }
    Ok(())
}

fn print_episode(traj: &Trajectory, out: &mut dyn Write) -> Result<(), CliError> {
    writeln!(out, "steps: {}", traj.steps.len())?;
    match &traj.final_answer {
        Some(a) => writeln!(out, "answer: {a}")?,
        None => writeln!(out, "answer: (none)")?,
    }
    Ok(())
}

fn episode(
    ctx: &Ctx,
    question: &str,
    client: &ClientArgs,
    output: &OutputArgs,
    kind: RunnerKind,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let engine = ctx.engine()?;
    let chat = ctx.cfg.client(client.script.as_deref(), client.llm.as_deref())?;
    let session = ctx.cfg.session()?;
    let result = match kind {
        RunnerKind::Agent => run_agent(question, chat.as_ref(), &engine, session, &ctx.cfg.agent()).map_err(|e| {
            let partial = e.partial().cloned();
            (e.to_string(), partial)
        }),
        RunnerKind::Workflow => {
            run_workflow(question, chat.as_ref(), &engine, session, &ctx.cfg.workflow()).map_err(|e| {
                let partial = match &e {
                    WorkflowError::Aborted { partial, .. } => Some((**partial).clone()),
                    _ => None,
                };
                (e.to_string(), partial)
            })
        }
    };
    match result {
        Ok(traj) => {
            write_outputs(output, std::slice::from_ref(&traj))?;
            print_episode(&traj, out)
        }
        Err((message, partial)) => {
            if let Some(p) = partial {
                write_outputs(output, &[p])?;
            }
            Err(CliError::Episode(message))
        }
    }
}

fn gold_by_question(dataset: &[QAExample]) -> HashMap<&str, &[String]> {
    dataset.iter().map(|ex| (ex.question.as_str(), ex.answers.as_slice())).collect()
}

/// Runs the parsed command, writing user-facing output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = Config::load(cli.config.as_deref())?;
    let index = cli.index.clone().unwrap_or_else(|| cfg.index.dir.clone());
    let ctx = Ctx { cfg, index };

    match cli.command {
        Command::Ingest { input, out: dir, chunk_words } => {
            let dir = dir.unwrap_or_else(|| ctx.index.clone());
            let manifest = ingest_corpus(&input, &dir, chunk_words.unwrap_or(ctx.cfg.index.chunk_words))?;
            writeln!(
                out,
                "ingested {} documents into {} chunks at {} (checksum {})",
                manifest.num_documents,
                manifest.num_chunks,
                dir.display(),
                manifest.checksum
            )?;
        }
        Command::BuildIndex => {
            let (store, _) = ChunkStore::load(&ctx.index)?;
            let provider = ctx.cfg.provider()?;
            SparseIndex::build(store.chunks())?.save(&ctx.index)?;
            DenseIndex::build(store.chunks(), provider.as_ref())?.save(&ctx.index)?;
            writeln!(out, "indexed {} chunks with {} at {}", store.num_chunks(), provider.id(), ctx.index.display())?;
        }
        Command::Search { text, mode, query, scale, include, exclude } => {
            let engine = ctx.engine()?;
            let mut actions = Vec::new();
            if let Some(n) = scale {
                actions.push(Action::AdjustScale { n });
            }
            if !include.is_empty() {
                actions.push(Action::IncludeDocs { doc_ids: include });
            }
            if !exclude.is_empty() {
                actions.push(Action::ExcludeDocs { doc_ids: exclude });
            }
            actions.push(match mode {
                SearchMode::Semantic => Action::SemanticSearch { query: text },
                SearchMode::Exact => Action::ExactSearch { keywords: text },
                SearchMode::Entity => Action::EntityMatch { entity: text, query },
            });
            let (_, response) = engine.execute_suite(&ctx.cfg.session()?, &actions)?;
            writeln!(out, "{}", render_tool_response(&response))?;
        }
        Command::RunAgent { question, client, output } => {
            episode(&ctx, &question, &client, &output, RunnerKind::Agent, out)?
        }
        Command::RunWorkflow { question, client, output } => {
            episode(&ctx, &question, &client, &output, RunnerKind::Workflow, out)?
        }
        Command::Synthesize { dataset, out: sft_path, runner, client, output } => {
            let examples = load_dataset(&dataset)?;
            let engine = ctx.engine()?;
            let chat = ctx.cfg.client(client.script.as_deref(), client.llm.as_deref())?;
            let run = run_benchmark(
                &examples,
                &engine,
                chat.as_ref(),
                &ctx.cfg.session()?,
                &ctx.runner(runner),
                ctx.cfg.eval.workers,
            )?;
            let pairs: Vec<(Trajectory, Vec<String>)> = run
                .trajectories
                .into_iter()
                .zip(&examples)
                .filter_map(|(t, ex)| t.map(|t| (t, ex.answers.clone())))
                .collect();
            let all: Vec<Trajectory> = pairs.iter().map(|(t, _)| t.clone()).collect();
            write_outputs(&output, &all)?;
            let kept = filter_trajectories(&pairs);
            let records = kept.iter().map(export_sft).collect::<Result<Vec<_>, _>>()?;
            let mut w = create(&sft_path)?;
            write_sft(&mut w, &records)?;
            w.flush()?;
            writeln!(out, "exported {} of {} trajectories to {}", records.len(), examples.len(), sft_path.display())?;
        }
        Command::Reward { trajectories, gold, out: report } => {
            let examples = load_dataset(&gold)?;
            let golds = gold_by_question(&examples);
            let text = std::fs::read_to_string(&trajectories)?;
            let trajs =
                read_trajectories(&text).map_err(|e| CliError::Usage(format!("{}: {e}", trajectories.display())))?;
            let pairs = trajs
                .into_iter()
                .map(|t| match golds.get(t.question.as_str()) {
                    Some(g) => Ok((t, g.to_vec())),
                    None => Err(CliError::Usage(format!("no gold answers for {:?}", t.question))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            match report {
                Some(path) => {
                    write_reward_report(create(&path)?, &pairs)?;
                    let kept = filter_trajectories(&pairs).len();
                    writeln!(out, "{kept} of {} trajectories have reward 1", pairs.len())?;
                }
                None => write_reward_report(&mut *out, &pairs)?,
            }
        }
        Command::Evaluate { dataset, runner, workers, format, out: report_path, client, output } => {
            let examples = load_dataset(&dataset)?;
            let engine = ctx.engine()?;
            let chat = ctx.cfg.client(client.script.as_deref(), client.llm.as_deref())?;
            let workers = workers.unwrap_or(ctx.cfg.eval.workers);
            let run =
                run_benchmark(&examples, &engine, chat.as_ref(), &ctx.cfg.session()?, &ctx.runner(runner), workers)?;
            let finished: Vec<Trajectory> = run.trajectories.iter().flatten().cloned().collect();
            write_outputs(&output, &finished)?;
            let format = match format {
                Format::Text => ReportFormat::Text,
                Format::Csv => ReportFormat::Csv,
            };
            let rendered = render_report(&run.report, format)?;
            match report_path {
                Some(path) => std::fs::write(path, rendered)?,
                None => write!(out, "{rendered}")?,
            }
        }
        Command::Serve { addr } => {
            let engine = Arc::new(ctx.engine()?);
            let session = ctx.cfg.session()?;
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(serve::serve(engine, session, &addr))?;
        }
    }
    Ok(())
}
