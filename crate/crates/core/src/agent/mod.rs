//! The end-to-end agent loop: history rendering, chat completion, tool-call
//! routing through the engine and trajectory recording.

pub mod client;

use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::engine::action::{contains_tool_call, TOOL_CALL_OPEN};
use crate::engine::{
    parse_tool_calls, render_tool_response, tool_definitions, Action, CallEcho, Engine, SessionState, ToolResponse,
};

pub use client::{ChatClient, ChatRequest, ClientError, Message, OpenAiChatClient, Role, ScriptedClient};

pub const DEFAULT_MAX_TURNS: usize = 7;

const AGENT_PROMPT: &str = include_str!("../../assets/prompts/agent.txt");

/// Sent as a user message before the forced final completion.
pub const FINALIZE_PROMPT: &str =
    "The turn limit has been reached. Reply with your final answer only, without tool calls.";

const NO_ACTION_MESSAGE: &str = "no tool call or answer found; call a tool or give the final answer";

/// Tool list in the compact form embedded in system prompts: one JSON object
/// per line.
pub fn tools_listing() -> String {
    tool_definitions()
        .as_array()
        .map(|tools| tools.iter().map(|t| t["function"].to_string()).collect::<Vec<_>>().join("\n"))
        .unwrap_or_default()
}

pub fn agent_system_prompt() -> String {
    AGENT_PROMPT.trim_end().replace("{tools}", &tools_listing())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Runner {
    Agent,
    Workflow,
}

/// One turn: what the model said, what it asked for and what came back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub thought: String,
    /// Raw assistant text.
    pub assistant: String,
    pub calls: Vec<CallEcho>,
    pub info: Option<ToolResponse>,
    /// The completion made with tools disabled after the turn cap.
    #[serde(default)]
    pub forced: bool,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl Step {
    pub fn actions(&self) -> impl Iterator<Item = &Action> {
        self.calls.iter().filter_map(|c| match c {
            CallEcho::Action(a) => Some(a),
            CallEcho::Invalid(_) => None,
        })
    }

    pub fn answer(&self) -> Option<&str> {
        match self.calls.as_slice() {
            [CallEcho::Action(Action::Answer { text })] => Some(text),
            _ => None,
        }
    }
}

/// Full record of one episode. Steps are only ever appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question: String,
    pub runner: Runner,
    pub turn_cap: usize,
    pub steps: Vec<Step>,
    pub final_answer: Option<String>,
    #[serde(default)]
    pub aborted: Option<String>,
}

impl Trajectory {
    pub fn new(question: impl Into<String>, runner: Runner, turn_cap: usize) -> Self {
        Self { question: question.into(), runner, turn_cap, steps: Vec::new(), final_answer: None, aborted: None }
    }

    pub fn push(&mut self, step: Step) {
        self.steps.push(step);
    }

    /// Records `text` as the final answer in a step of its own.
    pub fn finish(&mut self, thought: String, assistant: String, text: String, forced: bool) {
        self.steps.push(Step {
            thought,
            assistant,
            calls: vec![CallEcho::Action(Action::Answer { text: text.clone() })],
            info: None,
            forced,
            notes: Vec::new(),
        });
        self.final_answer = Some(text);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub max_turns: usize,
    pub system_prompt: String,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { max_turns: DEFAULT_MAX_TURNS, system_prompt: agent_system_prompt(), temperature: None, max_tokens: None }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("max_turns must be at least 1")]
    InvalidConfig,
    #[error("trajectory aborted: {reason}")]
    Aborted { reason: String, partial: Box<Trajectory> },
}

impl AgentError {
    pub fn partial(&self) -> Option<&Trajectory> {
        match self {
            AgentError::Aborted { partial, .. } => Some(partial),
            _ => None,
        }
    }
}

/// Removes `<think>...</think>` spans; an unclosed `<think>` swallows the rest.
fn strip_think(text: &str) -> String {
    let mut out = String::new();
    let mut rest = text;
    while let Some(start) = rest.find("<think>") {
        out.push_str(&rest[..start]);
        match rest[start..].find("</think>") {
            Some(end) => rest = &rest[start + end + "</think>".len()..],
            None => {
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// `<think>` content when present, else the text before the first tool call.
pub fn extract_thought(text: &str) -> String {
    if let Some(start) = text.find("<think>") {
        let body = &text[start + "<think>".len()..];
        let end = body.find("</think>").unwrap_or(body.len());
        return body[..end].trim().to_string();
    }
    match text.find(TOOL_CALL_OPEN) {
        Some(i) => text[..i].trim().to_string(),
        None => String::new(),
    }
}

/// The answer carried by a reply with no tool calls: the text outside
/// `<think>` (or inside `<answer>` tags when present), trimmed.
pub fn extract_answer(text: &str) -> Option<String> {
    if contains_tool_call(text) {
        return None;
    }
    let visible = strip_think(text);
    let answer = match (visible.find("<answer>"), visible.find("</answer>")) {
        (Some(s), Some(e)) if e > s => visible[s + "<answer>".len()..e].to_string(),
        _ => visible,
    };
    let answer = answer.trim();
    (!answer.is_empty()).then(|| answer.to_string())
}

/// System prompt, question, then per step the assistant text and the tool
/// response (if any). A forced step is preceded by [`FINALIZE_PROMPT`].
pub fn render_messages(trajectory: &Trajectory, system_prompt: &str) -> Vec<Message> {
    let mut messages = vec![Message::system(system_prompt), Message::user(question_message(&trajectory.question))];
    for step in &trajectory.steps {
        if step.forced {
            messages.push(Message::user(FINALIZE_PROMPT));
        }
        messages.push(Message::assistant(step.assistant.clone()));
        if let Some(info) = &step.info {
            messages.push(Message::tool(render_tool_response(info)));
        }
    }
    messages
}

pub fn question_message(question: &str) -> String {
    format!("Question: {question}")
}

/// Runs one episode against a fresh `session`.
pub fn run_agent(
    question: &str,
    client: &dyn ChatClient,
    engine: &Engine,
    session: SessionState,
    config: &AgentConfig,
) -> Result<Trajectory, AgentError> {
    if config.max_turns < 1 {
        return Err(AgentError::InvalidConfig);
    }
    let mut traj = Trajectory::new(question, Runner::Agent, config.max_turns);
    let mut session = session;
    let mut no_action_streak = 0;
    let tools = tool_definitions();

    for _ in 0..config.max_turns {
        let request = ChatRequest {
            messages: render_messages(&traj, &config.system_prompt),
            tools: Some(tools.clone()),
            temperature: config.temperature,
            max_tokens: config.max_tokens,
        };
        let text = match client.complete(&request) {
            Ok(t) => t,
            Err(e) => return Err(abort(traj, format!("chat client failed: {e}"))),
        };
        let thought = extract_thought(&text);
        let calls = parse_tool_calls(&text);

        if calls.is_empty() {
            if let Some(answer) = extract_answer(&text) {
                traj.finish(thought, text, answer, false);
                return Ok(traj);
            }
            no_action_streak += 1;
            traj.push(Step {
                thought,
                assistant: text,
                calls: Vec::new(),
                info: Some(ToolResponse::rejected(session.clone(), NO_ACTION_MESSAGE)),
                forced: false,
                notes: Vec::new(),
            });
            if no_action_streak >= 2 {
                return Err(abort(traj, "no action twice in a row".into()));
            }
            continue;
        }
        no_action_streak = 0;

        if let [Ok(Action::Answer { text: answer })] = calls.as_slice() {
            let answer = answer.clone();
            traj.finish(thought, text, answer, false);
            return Ok(traj);
        }
        let (next, response) = engine.execute_calls(&session, &calls);
        session = next;
        let echoes = calls
            .into_iter()
            .map(|c| match c {
                Ok(a) => CallEcho::Action(a),
                Err(f) => CallEcho::Invalid(f),
            })
            .collect();
        traj.push(Step {
            thought,
            assistant: text,
            calls: echoes,
            info: Some(response),
            forced: false,
            notes: Vec::new(),
        });
    }

    // Turn cap reached: one more completion with tools disabled.
    let mut messages = render_messages(&traj, &config.system_prompt);
    messages.push(Message::user(FINALIZE_PROMPT));
    let request = ChatRequest { messages, tools: None, temperature: config.temperature, max_tokens: config.max_tokens };
    let text = match client.complete(&request) {
        Ok(t) => t,
        Err(e) => return Err(abort(traj, format!("chat client failed during finalization: {e}"))),
    };
    let thought = extract_thought(&text);
    let answer = parse_tool_calls(&text)
        .into_iter()
        .find_map(|c| match c {
            Ok(Action::Answer { text }) => Some(text),
            _ => None,
        })
        .or_else(|| extract_answer(&text));
    match answer {
        Some(a) => traj.finish(thought, text, a, true),
        None => traj.push(Step {
            thought,
            assistant: text,
            calls: Vec::new(),
            info: None,
            forced: true,
            notes: vec!["no answer after the turn limit".into()],
        }),
    }
    Ok(traj)
}

fn abort(mut traj: Trajectory, reason: String) -> AgentError {
    traj.aborted = Some(reason.clone());
    AgentError::Aborted { reason, partial: Box::new(traj) }
}

/// One JSON line per step plus a closing summary line. Output depends only on
/// the trajectory, so scripted runs produce byte-identical logs.
pub fn trajectory_log_lines(episode: usize, traj: &Trajectory) -> Vec<String> {
    let mut lines: Vec<String> = traj
        .steps
        .iter()
        .enumerate()
        .map(|(i, step)| {
            json!({
                "episode": episode,
                "step": i + 1,
                "forced": step.forced,
                "thought": step.thought,
                "assistant": step.assistant,
                "calls": step.calls,
                "info": step.info.as_ref().map(render_tool_response),
                "notes": step.notes,
            })
            .to_string()
        })
        .collect();
    lines.push(
        json!({
            "episode": episode,
            "question": traj.question,
            "runner": traj.runner,
            "steps": traj.steps.len(),
            "final_answer": traj.final_answer,
            "aborted": traj.aborted,
        })
        .to_string(),
    );
    lines
}

pub fn write_trajectory_log<W: Write>(out: &mut W, trajectories: &[Trajectory]) -> std::io::Result<()> {
    for (i, t) in trajectories.iter().enumerate() {
        for line in trajectory_log_lines(i, t) {
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

/// Reads trajectories back from a JSONL file of serialized [`Trajectory`]
/// values (as written by `run-agent --save`).
pub fn read_trajectories(text: &str) -> Result<Vec<Trajectory>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

pub fn trajectory_json(traj: &Trajectory) -> Value {
    serde_json::to_value(traj).expect("trajectory serializes")
}
