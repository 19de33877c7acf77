//! Training-free planner / reasoner / executor workflow. Produces the same
//! [`Trajectory`] shape as the end-to-end agent.
//!
//! The reasoner answers with a leading keyword: `PROCEED:`, `REFINE:` (or
//! `REFLECT:`) or `CONCLUDE:`. Anything else counts as a failed refinement.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    extract_answer, extract_thought, question_message, tools_listing, ChatClient, ChatRequest, ClientError, Message,
    Runner, Step, Trajectory,
};
use crate::engine::{
    parse_tool_calls, tool_definitions, Action, BlockOutcome, CallEcho, Engine, SessionState, ToolResponse,
};

pub const DEFAULT_MAX_ITERATIONS: usize = 12;
pub const MAX_REFINES_PER_STEP: usize = 3;
pub const MAX_EXECUTOR_CALLS: usize = 2;

const PLANNER_PROMPT: &str = include_str!("../assets/prompts/planner.txt");
const REASONER_PROMPT: &str = include_str!("../assets/prompts/reasoner.txt");
const EXECUTOR_PROMPT: &str = include_str!("../assets/prompts/executor.txt");

/// Longest chunk excerpt shown to the reasoner.
const EVIDENCE_CHARS: usize = 300;

static NUMBERED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(\d+)[.)]\s+(.+?)\s*$").expect("static regex"));
static PARALLEL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)^\s*parallel\s*:\s*(.+)$").expect("static regex"));
static DIRECTIVE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^[\s*#>_-]*(proceed|conclude|refine|reflect)[\s*_]*:[\s*_]*(.*)$").expect("static regex")
});

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("planning failed: {0}")]
    Planning(String),
    #[error("invalid workflow config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("workflow aborted: {reason}")]
    Aborted { reason: String, partial: Box<Trajectory> },
}

impl WorkflowError {
    pub fn partial(&self) -> Option<&Trajectory> {
        match self {
            WorkflowError::Aborted { partial, .. } => Some(partial),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimaryPlan {
    pub analysis: String,
    pub steps: Vec<String>,
    /// 0-based step indices that may run together.
    pub parallel_groups: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Directive {
    Proceed { next_objective: String, analysis: String },
    Conclude { summary: String, analysis: String },
    ReflectRefine { diagnosis: String, refined_strategy: String, analysis: String },
}

impl Directive {
    pub fn analysis(&self) -> &str {
        match self {
            Directive::Proceed { analysis, .. }
            | Directive::Conclude { analysis, .. }
            | Directive::ReflectRefine { analysis, .. } => analysis,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkflowConfig {
    pub max_iterations: usize,
    pub max_refines: usize,
    pub max_calls: usize,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            max_refines: MAX_REFINES_PER_STEP,
            max_calls: MAX_EXECUTOR_CALLS,
            temperature: None,
            max_tokens: None,
        }
    }
}

impl WorkflowConfig {
    fn request(&self, messages: Vec<Message>, tools: bool) -> ChatRequest {
        ChatRequest {
            messages,
            tools: tools.then(tool_definitions),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

pub fn planner_prompt() -> String {
    PLANNER_PROMPT.trim_end().to_string()
}

pub fn reasoner_prompt() -> String {
    REASONER_PROMPT.trim_end().to_string()
}

pub fn executor_prompt() -> String {
    EXECUTOR_PROMPT.trim_end().replace("{tools}", &tools_listing())
}

/// Numbered items (in order) and `Parallel:` groups found in `lines`.
fn numbered_items<'a>(lines: impl Iterator<Item = &'a str>) -> (Vec<String>, Vec<Vec<usize>>) {
    let mut steps = Vec::new();
    let mut raw_groups = Vec::new();
    for line in lines {
        let clean = line.replace("**", "");
        if let Some(c) = PARALLEL.captures(&clean) {
            let ids: Vec<usize> =
                c[1].split(|ch: char| !ch.is_ascii_digit()).filter_map(|s| s.parse::<usize>().ok()).collect();
            raw_groups.push(ids);
        } else if let Some(c) = NUMBERED.captures(&clean) {
            steps.push(c[2].to_string());
        }
    }
    // 1-based in text; groups with out-of-range or repeated steps are dropped.
    let groups = raw_groups
        .into_iter()
        .filter_map(|ids| {
            let mut g: Vec<usize> = ids.iter().filter(|&&i| i >= 1).map(|i| i - 1).collect();
            g.sort_unstable();
            g.dedup();
            (g.len() >= 2 && g.len() == ids.len() && g.iter().all(|&i| i < steps.len())).then_some(g)
        })
        .collect();
    (steps, groups)
}

/// Parses planner output. The numbered list after a `Primary Plan:` line is
/// used when that line exists, otherwise any numbered list.
pub fn parse_plan(text: &str) -> Option<PrimaryPlan> {
    let text = crate::agent::extract_answer(text).unwrap_or_else(|| text.to_string());
    let lines: Vec<&str> = text.lines().collect();
    let header = lines.iter().position(|l| l.replace(['*', '#'], "").trim().to_lowercase().starts_with("primary plan"));
    let (before, list): (&[&str], &[&str]) = match header {
        Some(h) => (&lines[..h], &lines[h + 1..]),
        None => {
            let first = lines.iter().position(|l| NUMBERED.is_match(l))?;
            (&lines[..first], &lines[first..])
        }
    };
    let (steps, parallel_groups) = numbered_items(list.iter().copied());
    if steps.is_empty() {
        return None;
    }
    let analysis = before.join("\n");
    let analysis = analysis.trim();
    let analysis = analysis
        .strip_prefix("Analysis:")
        .or_else(|| analysis.strip_prefix("**Analysis:**"))
        .unwrap_or(analysis)
        .trim()
        .to_string();
    Some(PrimaryPlan { analysis, steps, parallel_groups })
}

/// One planner completion, retried once if the output has no plan.
pub fn plan(question: &str, client: &dyn ChatClient, config: &WorkflowConfig) -> Result<PrimaryPlan, WorkflowError> {
    let request =
        config.request(vec![Message::system(planner_prompt()), Message::user(question_message(question))], false);
    let mut last = String::new();
    for _ in 0..2 {
        last = client.complete(&request)?;
        if let Some(p) = parse_plan(&last) {
            return Ok(p);
        }
    }
    Err(WorkflowError::Planning(format!("no numbered plan in planner output: {:?}", truncate(&last, 200))))
}

/// Classifies reasoner output by its first directive keyword.
pub fn parse_directive(text: &str) -> Option<Directive> {
    let visible = extract_answer(text).unwrap_or_default();
    let analysis = visible.trim().to_string();
    let lines: Vec<&str> = visible.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        let Some(c) = DIRECTIVE.captures(line) else { continue };
        let mut body = c[2].trim().trim_end_matches("**").trim().to_string();
        if body.is_empty() {
            body = lines[i + 1..].iter().map(|l| l.trim()).find(|l| !l.is_empty()).unwrap_or("").to_string();
        }
        let directive = match c[1].to_lowercase().as_str() {
            "proceed" => Directive::Proceed { next_objective: body, analysis },
            "conclude" => Directive::Conclude { summary: body, analysis },
            _ => {
                let (diagnosis, strategy) = match body.split_once(';') {
                    Some((d, s)) => (d.trim().to_string(), s.trim().to_string()),
                    None => (body.clone(), body),
                };
                Directive::ReflectRefine { diagnosis, refined_strategy: strategy, analysis }
            }
        };
        return Some(directive);
    }
    None
}

/// Steps listed after a `REVISED PLAN:` marker, if any.
pub fn parse_revised_plan(text: &str) -> Option<Vec<String>> {
    let lines: Vec<&str> = text.lines().collect();
    let at = lines.iter().position(|l| l.replace(['*', '#'], "").trim().to_uppercase().starts_with("REVISED PLAN"))?;
    let (steps, _) = numbered_items(lines[at + 1..].iter().copied());
    (!steps.is_empty()).then_some(steps)
}

#[derive(Debug, Clone)]
pub struct WorkflowState {
    pub plan: PrimaryPlan,
    pub current_step: usize,
    pub attempts_on_current_step: usize,
    /// Whether a search has already run for the current sub-task.
    pub searched_current: bool,
    pub session: SessionState,
    pub trajectory: Trajectory,
}

impl WorkflowState {
    pub fn new(question: &str, plan: PrimaryPlan, session: SessionState, cap: usize) -> Self {
        Self {
            plan,
            current_step: 0,
            attempts_on_current_step: 0,
            searched_current: false,
            session,
            trajectory: Trajectory::new(question, Runner::Workflow, cap),
        }
    }

    /// Indices of the sub-tasks handled together with the current one.
    pub fn current_group(&self) -> Vec<usize> {
        self.plan
            .parallel_groups
            .iter()
            .find(|g| g.first() == Some(&self.current_step))
            .cloned()
            .unwrap_or_else(|| vec![self.current_step])
    }

    fn advance(&mut self) {
        let last = self.current_group().last().copied().unwrap_or(self.current_step);
        self.current_step = (last + 1).min(self.plan.steps.len());
        self.attempts_on_current_step = 0;
        self.searched_current = false;
    }

    fn objectives(&self) -> Vec<String> {
        self.current_group().iter().filter_map(|&i| self.plan.steps.get(i).map(|s| format!("{}. {s}", i + 1))).collect()
    }

    fn revise(&mut self, steps: Vec<String>) {
        let keep = self.current_step.min(self.plan.steps.len());
        self.plan.steps.truncate(keep);
        self.plan.steps.extend(steps);
        self.plan.parallel_groups.retain(|g| g.iter().all(|&i| i < keep));
        self.attempts_on_current_step = 0;
        self.searched_current = false;
    }

    /// The text the reasoner sees: question, plan with progress, evidence.
    pub fn render(&self) -> String {
        let mut out = format!("{}\n\nPlan:\n", question_message(&self.trajectory.question));
        let group = self.current_group();
        for (i, s) in self.plan.steps.iter().enumerate() {
            let mark = if i < self.current_step {
                " [done]"
            } else if group.contains(&i) {
                " [current]"
            } else {
                ""
            };
            out.push_str(&format!("{}. {s}{mark}\n", i + 1));
        }
        if self.current_step >= self.plan.steps.len() {
            out.push_str("All sub-tasks have been attempted.\n");
        } else {
            out.push_str(&format!(
                "Refinements on the current sub-task: {} of {}\n",
                self.attempts_on_current_step, MAX_REFINES_PER_STEP
            ));
        }
        out.push_str("\nEvidence so far:\n");
        if self.trajectory.steps.is_empty() {
            out.push_str("(none)\n");
        }
        for (i, step) in self.trajectory.steps.iter().enumerate() {
            out.push_str(&format!("Search {}:\n", i + 1));
            for call in &step.calls {
                match call {
                    CallEcho::Action(a) => out.push_str(&format!("  call {} {}\n", a.name(), a.arguments())),
                    CallEcho::Invalid(f) => out.push_str(&format!("  invalid call: {}\n", f.reason)),
                }
            }
            if let Some(info) = &step.info {
                out.push_str(&evidence_lines(info));
            }
        }
        out
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

fn evidence_lines(info: &ToolResponse) -> String {
    let mut out = String::new();
    if let Some(e) = &info.error {
        out.push_str(&format!("  error: {e}\n"));
    }
    for block in &info.blocks {
        match &block.outcome {
            BlockOutcome::Failed(m) => out.push_str(&format!("  {} failed: {m}\n", block.call.name())),
            BlockOutcome::Ack(_) => {}
            BlockOutcome::Chunks(list) if list.is_empty() => out.push_str("  no results\n"),
            BlockOutcome::Entities(list) if list.is_empty() => out.push_str("  no results\n"),
            BlockOutcome::Chunks(list) => {
                for c in list {
                    out.push_str(&format!(
                        "  - [{}] {}\n",
                        c.doc_id,
                        truncate(&c.text.replace('\n', " "), EVIDENCE_CHARS)
                    ));
                }
            }
            BlockOutcome::Entities(list) => {
                for e in list {
                    out.push_str(&format!("  - [{}] {}\n", e.chunk.doc_id, e.snippets.join(" ... ")));
                }
            }
        }
    }
    out
}

/// Asks the reasoner for the next directive and updates the attempt counter
/// and current sub-task. A refinement past the cap is turned into a forced
/// Proceed; unclassifiable output is a refinement with diagnosis "unparseable".
pub fn reason_step(
    state: &mut WorkflowState,
    client: &dyn ChatClient,
    config: &WorkflowConfig,
) -> Result<Directive, ClientError> {
    let request = config.request(vec![Message::system(reasoner_prompt()), Message::user(state.render())], false);
    let text = client.complete(&request)?;
    let mut directive = parse_directive(&text).unwrap_or_else(|| Directive::ReflectRefine {
        diagnosis: "unparseable".into(),
        refined_strategy: String::new(),
        analysis: extract_answer(&text).unwrap_or_default(),
    });
    if let Some(steps) = parse_revised_plan(&text) {
        state.revise(steps);
    }
    match &directive {
        Directive::Proceed { .. } => {
            if state.searched_current {
                state.advance();
            }
        }
        Directive::ReflectRefine { refined_strategy, analysis, .. } => {
            if state.attempts_on_current_step >= config.max_refines {
                let next_objective = refined_strategy.clone();
                let analysis = analysis.clone();
                state.advance();
                directive = Directive::Proceed { next_objective, analysis };
            } else {
                state.attempts_on_current_step += 1;
            }
        }
        Directive::Conclude { .. } => {}
    }
    Ok(directive)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    /// Tool calls were run (or failed); the step is recorded.
    Searched(Step),
    /// The final answer, or `None` when the executor gave none.
    Answered { answer: Option<String>, thought: String, assistant: String },
}

fn executor_message(state: &WorkflowState, directive: &Directive) -> String {
    let mut out = format!("{}\n\n", question_message(&state.trajectory.question));
    let objectives = state.objectives();
    if !objectives.is_empty() {
        out.push_str("Current sub-task(s):\n");
        for o in objectives {
            out.push_str(&format!("{o}\n"));
        }
        out.push('\n');
    }
    match directive {
        Directive::Proceed { next_objective, .. } => out.push_str(&format!("Instruction: {next_objective}\n")),
        Directive::ReflectRefine { diagnosis, refined_strategy, .. } => {
            out.push_str(&format!("The previous search fell short: {diagnosis}\n"));
            if !refined_strategy.is_empty() && refined_strategy != diagnosis {
                out.push_str(&format!("Instruction: {refined_strategy}\n"));
            } else {
                out.push_str("Instruction: search again for the current sub-task with a different approach.\n");
            }
        }
        Directive::Conclude { summary, .. } => {
            out.push_str(&format!("Findings: {summary}\n\nEvidence:\n"));
            for step in &state.trajectory.steps {
                if let Some(info) = &step.info {
                    out.push_str(&evidence_lines(info));
                }
            }
            out.push_str("\nGive the final answer now.\n");
        }
    }
    out
}

/// Runs one directive through the executor. Proceed / refine produce tool
/// calls (at most `max_calls`); Conclude produces the final answer.
pub fn execute_directive(
    directive: &Directive,
    state: &mut WorkflowState,
    client: &dyn ChatClient,
    engine: &Engine,
    config: &WorkflowConfig,
) -> Result<StepOutcome, ClientError> {
    let conclude = matches!(directive, Directive::Conclude { .. });
    let request = config.request(
        vec![Message::system(executor_prompt()), Message::user(executor_message(state, directive))],
        !conclude,
    );
    let text = client.complete(&request)?;
    let thought = reasoner_thought(directive, &text);

    let mut calls = parse_tool_calls(&text);
    if conclude {
        let answer = calls
            .iter()
            .find_map(|c| match c {
                Ok(Action::Answer { text }) => Some(text.clone()),
                _ => None,
            })
            .or_else(|| extract_answer(&text));
        return Ok(StepOutcome::Answered { answer, thought, assistant: text });
    }
    if calls.is_empty() {
        if let Some(answer) = extract_answer(&text) {
            // A plain reply to a search instruction is still an answer.
            return Ok(StepOutcome::Answered { answer: Some(answer), thought, assistant: text });
        }
    }
    if let [Ok(Action::Answer { text: answer })] = calls.as_slice() {
        return Ok(StepOutcome::Answered { answer: Some(answer.clone()), thought, assistant: text });
    }

    let mut notes = vec![format!("sub-task: {}", state.objectives().join(" | "))];
    if calls.len() > config.max_calls {
        notes.push(format!("executor issued {} calls; only the first {} were run", calls.len(), config.max_calls));
        calls.truncate(config.max_calls);
    }
    let info = if calls.is_empty() {
        ToolResponse::rejected(state.session.clone(), "no tool call found")
    } else {
        let (next, resp) = engine.execute_calls(&state.session, &calls);
        state.session = next;
        resp
    };
    let failed = calls.is_empty() || calls.iter().any(|c| c.is_err()) || info.error.is_some();
    if failed {
        state.attempts_on_current_step += 1;
    } else {
        state.searched_current = true;
    }
    let calls = calls
        .into_iter()
        .map(|c| match c {
            Ok(a) => CallEcho::Action(a),
            Err(f) => CallEcho::Invalid(f),
        })
        .collect();
    Ok(StepOutcome::Searched(Step { thought, assistant: text, calls, info: Some(info), forced: false, notes }))
}

/// The step's recorded reasoning: the reasoner's analysis, falling back to
/// the executor's own thought.
fn reasoner_thought(directive: &Directive, executor_text: &str) -> String {
    let a = directive.analysis().trim();
    if !a.is_empty() {
        return a.to_string();
    }
    let t = extract_thought(executor_text);
    if !t.is_empty() {
        return t;
    }
    match directive {
        Directive::Proceed { next_objective, .. } => format!("proceed: {next_objective}"),
        Directive::Conclude { summary, .. } => format!("conclude: {summary}"),
        Directive::ReflectRefine { diagnosis, .. } => format!("refine: {diagnosis}"),
    }
}

/// Plans once, then alternates reasoner and executor until the reasoner
/// concludes or `max_iterations` is reached (which forces a conclusion).
pub fn run_workflow(
    question: &str,
    client: &dyn ChatClient,
    engine: &Engine,
    session: SessionState,
    config: &WorkflowConfig,
) -> Result<Trajectory, WorkflowError> {
    if config.max_iterations < 1 || config.max_calls < 1 {
        return Err(WorkflowError::InvalidConfig("max_iterations and max_calls must be at least 1".into()));
    }
    let primary = match plan(question, client, config) {
        Ok(p) => p,
        Err(WorkflowError::Client(e)) => {
            let mut t = Trajectory::new(question, Runner::Workflow, config.max_iterations);
            t.aborted = Some(e.to_string());
            return Err(WorkflowError::Aborted { reason: format!("planner: {e}"), partial: Box::new(t) });
        }
        Err(e) => return Err(e),
    };
    let plan_note = format!(
        "plan: {}",
        primary.steps.iter().enumerate().map(|(i, s)| format!("{}. {s}", i + 1)).collect::<Vec<_>>().join(" ")
    );
    let mut state = WorkflowState::new(question, primary, session, config.max_iterations);

    let abort = |mut state: WorkflowState, e: ClientError| {
        state.trajectory.aborted = Some(e.to_string());
        WorkflowError::Aborted { reason: e.to_string(), partial: Box::new(state.trajectory) }
    };

    let mut concluded = None;
    for _ in 0..config.max_iterations {
        let directive = match reason_step(&mut state, client, config) {
            Ok(d) => d,
            Err(e) => return Err(abort(state, e)),
        };
        if matches!(directive, Directive::Conclude { .. }) {
            concluded = Some(directive);
            break;
        }
        match execute_directive(&directive, &mut state, client, engine, config) {
            Ok(StepOutcome::Searched(mut step)) => {
                if state.trajectory.steps.is_empty() {
                    step.notes.insert(0, plan_note.clone());
                }
                state.trajectory.push(step);
            }
            Ok(StepOutcome::Answered { answer, thought, assistant }) => {
                finish(&mut state.trajectory, answer, thought, assistant, false);
                return Ok(state.trajectory);
            }
            Err(e) => return Err(abort(state, e)),
        }
    }

    let forced = concluded.is_none();
    let directive = concluded.unwrap_or_else(|| Directive::Conclude {
        summary: "iteration limit reached; answer from the evidence gathered".into(),
        analysis: String::new(),
    });
    match execute_directive(&directive, &mut state, client, engine, config) {
        Ok(StepOutcome::Answered { answer, thought, assistant }) => {
            finish(&mut state.trajectory, answer, thought, assistant, forced);
            Ok(state.trajectory)
        }
        Ok(StepOutcome::Searched(_)) => unreachable!("conclude never runs tools"),
        Err(e) => Err(abort(state, e)),
    }
}

fn finish(traj: &mut Trajectory, answer: Option<String>, thought: String, assistant: String, forced: bool) {
    match answer {
        Some(a) => traj.finish(thought, assistant, a, forced),
        None => traj.push(Step {
            thought,
            assistant,
            calls: Vec::new(),
            info: None,
            forced,
            notes: vec!["executor gave no final answer".into()],
        }),
    }
}
