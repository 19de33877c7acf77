//! QA metrics, benchmark runs and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;
use thiserror::Error;

use crate::agent::{run_agent, AgentConfig, AgentError, ChatClient, Trajectory};
use crate::engine::action::PRIMITIVES;
use crate::engine::{Engine, SessionState};
use crate::workflow::{run_workflow, WorkflowConfig, WorkflowError};

static ARTICLES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(a|an|the)\b").expect("static regex"));

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// SQuAD-style: lowercase, drop punctuation, drop articles, collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let no_articles = ARTICLES.replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn exact_match(prediction: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(prediction);
    if golds.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

fn f1_single(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt.is_empty() && gt.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0i64;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token F1, best over gold aliases.
pub fn f1(prediction: &str, golds: &[String]) -> f64 {
    golds.iter().map(|g| f1_single(prediction, g)).fold(0.0, f64::max)
}

/// Half-up rounding to one decimal, for percentages.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub question: String,
    #[serde(alias = "gold_answers", alias = "golden_answers")]
    pub answers: Vec<String>,
    #[serde(default, alias = "dataset_tag", alias = "data_source")]
    pub dataset: String,
}

/// One example per non-blank JSONL line; every example needs a gold answer.
pub fn parse_dataset(text: &str) -> Result<Vec<QAExample>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: QAExample =
            serde_json::from_str(line).map_err(|e| EvalError::Dataset { line: i + 1, message: e.to_string() })?;
        if ex.answers.is_empty() {
            return Err(EvalError::Dataset { line: i + 1, message: "no gold answers".into() });
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<QAExample>, EvalError> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone)]
pub enum RunnerConfig {
    Agent(AgentConfig),
    Workflow(WorkflowConfig),
}

/// Runs one episode with the chosen runner. Aborted runs come back as the
/// partial trajectory plus the reason.
pub fn run_episode(
    question: &str,
    engine: &Engine,
    client: &dyn ChatClient,
    session: &SessionState,
    runner: &RunnerConfig,
) -> (Option<Trajectory>, Option<String>) {
    match runner {
        RunnerConfig::Agent(cfg) => match run_agent(question, client, engine, session.clone(), cfg) {
            Ok(t) => (Some(t), None),
            Err(e @ AgentError::Aborted { .. }) => (e.partial().cloned(), Some(e.to_string())),
            Err(e) => (None, Some(e.to_string())),
        },
        RunnerConfig::Workflow(cfg) => match run_workflow(question, client, engine, session.clone(), cfg) {
            Ok(t) => (Some(t), None),
            Err(e @ WorkflowError::Aborted { .. }) => (e.partial().cloned(), Some(e.to_string())),
            Err(e) => (None, Some(e.to_string())),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub question: String,
    pub dataset: String,
    pub prediction: Option<String>,
    pub em: f64,
    pub f1: f64,
    pub turns: usize,
    pub action_counts: BTreeMap<String, usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScores {
    pub dataset: String,
    pub num_examples: usize,
    /// Percentages, rounded to one decimal.
    pub em: f64,
    pub f1: f64,
    pub avg_turns: f64,
    /// Mean invocations per question of each primitive.
    pub action_counts: BTreeMap<String, f64>,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: Vec<DatasetScores>,
    pub overall: DatasetScores,
}

pub struct BenchmarkRun {
    pub report: EvalReport,
    pub outcomes: Vec<ExampleOutcome>,
    pub trajectories: Vec<Option<Trajectory>>,
}

/// Per-primitive invocation counts (answers excluded, failed parses ignored).
pub fn count_actions(traj: &Trajectory) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = PRIMITIVES.iter().map(|p| (p.to_string(), 0)).collect();
    for step in &traj.steps {
        for action in step.actions() {
            if let Some(c) = counts.get_mut(action.name()) {
                *c += 1;
            }
        }
    }
    counts
}

pub fn score_example(ex: &QAExample, traj: Option<&Trajectory>, error: Option<String>) -> ExampleOutcome {
    let prediction = traj.and_then(|t| t.final_answer.clone());
    // A failed episode scores zero even if a partial answer exists.
    let (em, f1_score) = match (&prediction, &error) {
        (Some(p), None) => (exact_match(p, &ex.answers), f1(p, &ex.answers)),
        _ => (0.0, 0.0),
    };
    ExampleOutcome {
        question: ex.question.clone(),
        dataset: ex.dataset.clone(),
        prediction,
        em,
        f1: f1_score,
        turns: traj.map_or(0, |t| t.steps.len()),
        action_counts: traj
            .map(count_actions)
            .unwrap_or_else(|| PRIMITIVES.iter().map(|p| (p.to_string(), 0)).collect()),
        error,
    }
}

fn aggregate(name: &str, outcomes: &[&ExampleOutcome]) -> DatasetScores {
    let n = outcomes.len();
    let mean = |f: &dyn Fn(&ExampleOutcome) -> f64| {
        if n == 0 {
            0.0
        } else {
            outcomes.iter().map(|o| f(o)).sum::<f64>() / n as f64
        }
    };
    let action_counts = PRIMITIVES
        .iter()
        .map(|p| (p.to_string(), mean(&|o| o.action_counts.get(*p).copied().unwrap_or(0) as f64)))
        .collect();
    DatasetScores {
        dataset: name.to_string(),
        num_examples: n,
        em: round1(100.0 * mean(&|o| o.em)),
        f1: round1(100.0 * mean(&|o| o.f1)),
        avg_turns: mean(&|o| o.turns as f64),
        action_counts,
        errors: outcomes.iter().filter(|o| o.error.is_some()).count(),
    }
}

pub fn build_report(outcomes: &[ExampleOutcome]) -> EvalReport {
    let mut by_dataset: BTreeMap<&str, Vec<&ExampleOutcome>> = BTreeMap::new();
    for o in outcomes {
        by_dataset.entry(o.dataset.as_str()).or_default().push(o);
    }
    EvalReport {
        datasets: by_dataset.iter().map(|(name, list)| aggregate(name, list)).collect(),
        overall: aggregate("overall", &outcomes.iter().collect::<Vec<_>>()),
    }
}

/// One episode per example over a pool of `workers` threads. Failures score
/// zero and are annotated; they never stop the batch.
pub fn run_benchmark(
    dataset: &[QAExample],
    engine: &Engine,
    client: &dyn ChatClient,
    session: &SessionState,
    runner: &RunnerConfig,
    workers: usize,
) -> Result<BenchmarkRun, EvalError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let results: Vec<(ExampleOutcome, Option<Trajectory>)> = pool.install(|| {
        dataset
            .par_iter()
            .map(|ex| {
                let (traj, error) = run_episode(&ex.question, engine, client, session, runner);
                if let Some(e) = &error {
                    log::warn!("episode failed for {:?}: {e}", ex.question);
                }
                (score_example(ex, traj.as_ref(), error), traj)
            })
            .collect()
    });
    let (outcomes, trajectories): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(BenchmarkRun { report: build_report(&outcomes), outcomes, trajectories })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

fn rows(report: &EvalReport) -> impl Iterator<Item = &DatasetScores> {
    report.datasets.iter().chain(std::iter::once(&report.overall))
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> Result<String, EvalError> {
    match format {
        ReportFormat::Text => {
            let mut out = String::new();
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>6} {:>6} {:>9} {:>6}",
                "dataset", "n", "EM", "F1", "avg_turns", "errors"
            );
            for r in rows(report) {
                let _ = writeln!(
                    out,
                    "{:<16} {:>6} {:>6.1} {:>6.1} {:>9.2} {:>6}",
                    r.dataset, r.num_examples, r.em, r.f1, r.avg_turns, r.errors
                );
            }
            let _ = writeln!(out);
            let _ = writeln!(out, "mean actions per question");
            let _ = write!(out, "{:<16}", "dataset");
            for p in PRIMITIVES {
                let _ = write!(out, " {p:>15}");
            }
            let _ = writeln!(out);
            for r in rows(report) {
                let _ = write!(out, "{:<16}", r.dataset);
                for p in PRIMITIVES {
                    let _ = write!(out, " {:>15.2}", r.action_counts.get(p).copied().unwrap_or(0.0));
                }
                let _ = writeln!(out);
            }
            Ok(out)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["dataset", "num_examples", "em", "f1", "avg_turns", "errors"];
            header.extend(PRIMITIVES);
            w.write_record(&header)?;
            for r in rows(report) {
                let mut rec = vec![
                    r.dataset.clone(),
                    r.num_examples.to_string(),
                    format!("{:.1}", r.em),
                    format!("{:.1}", r.f1),
                    format!("{:.4}", r.avg_turns),
                    r.errors.to_string(),
                ];
                rec.extend(
                    PRIMITIVES.iter().map(|p| format!("{:.4}", r.action_counts.get(*p).copied().unwrap_or(0.0))),
                );
                w.write_record(&rec)?;
            }
            let bytes = w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
        }
    }
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<(), EvalError> {
    std::fs::write(path, render_report(report, format)?)?;
    Ok(())
}
