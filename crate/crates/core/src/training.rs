//! Trajectory post-processing: validity, reward, filtering, SFT export and
//! group-relative advantages.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{agent_system_prompt, render_messages, Message, Role, Trajectory};
use crate::engine::action::PRIMITIVES;
use crate::engine::response::TOOL_RESPONSE_OPEN;
use crate::engine::{Action, CallEcho};
use crate::eval::exact_match;

pub const ADVANTAGE_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("cannot export an invalid trajectory: {0}")]
    Export(String),
    #[error("advantage needs a group of at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    EmptyThought,
    BadToolSyntax,
    NoFinalAnswer,
    MixedAnswer,
    TurnCap,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::EmptyThought => "empty-thought",
            Rule::BadToolSyntax => "bad-tool-syntax",
            Rule::NoFinalAnswer => "no-final-answer",
            Rule::MixedAnswer => "mixed-answer",
            Rule::TurnCap => "turn-cap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// 1-based step number; 0 for whole-trajectory problems.
    pub step: usize,
    pub rule: Rule,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryVerdict {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

fn is_answer(c: &CallEcho) -> bool {
    matches!(c, CallEcho::Action(Action::Answer { .. }))
}

/// Checks the structural rules: thoughts present, well-formed tool calls on
/// every non-final step, a lone answer at the end, and the turn cap.
pub fn validate_trajectory(traj: &Trajectory) -> TrajectoryVerdict {
    let mut violations = Vec::new();
    let mut flag =
        |step: usize, rule: Rule, description: String| violations.push(Violation { step, rule, description });
    let last = traj.steps.len().saturating_sub(1);

    for (i, step) in traj.steps.iter().enumerate() {
        let n = i + 1;
        if step.thought.trim().is_empty() {
            flag(n, Rule::EmptyThought, "step has no reasoning".into());
        }
        if step.calls.iter().any(is_answer) && step.calls.len() > 1 {
            flag(n, Rule::MixedAnswer, "answer issued together with other calls".into());
        }
        if i < last {
            if step.calls.is_empty() {
                flag(n, Rule::BadToolSyntax, "no tool call".into());
            }
            for call in &step.calls {
                match call {
                    CallEcho::Invalid(f) => flag(n, Rule::BadToolSyntax, format!("unparseable call: {}", f.reason)),
                    CallEcho::Action(a) if !PRIMITIVES.contains(&a.name()) && !is_answer(call) => {
                        flag(n, Rule::BadToolSyntax, format!("unknown tool {}", a.name()))
                    }
                    CallEcho::Action(Action::Answer { .. }) if step.calls.len() == 1 => {
                        flag(n, Rule::NoFinalAnswer, "answer before the last step".into())
                    }
                    _ => {}
                }
            }
        }
    }
    match traj.steps.last() {
        Some(step) if step.answer().is_some() && traj.final_answer.is_some() => {}
        Some(_) => flag(traj.steps.len(), Rule::NoFinalAnswer, "last step is not a lone answer".into()),
        None => flag(0, Rule::NoFinalAnswer, "trajectory has no steps".into()),
    }
    if traj.steps.len() > traj.turn_cap + 1 {
        flag(0, Rule::TurnCap, format!("{} steps exceed cap {} + 1", traj.steps.len(), traj.turn_cap));
    }
    TrajectoryVerdict { valid: violations.is_empty(), violations }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub base: i32,
    pub validity_bonus: i32,
    pub answer_bonus: i32,
    pub total: i32,
}

/// `-1 + valid + valid * em`: the answer only counts on a valid trajectory.
pub fn reward(traj: &Trajectory, gold_answers: &[String]) -> RewardBreakdown {
    let valid = validate_trajectory(traj).valid;
    let correct = traj.final_answer.as_deref().is_some_and(|a| exact_match(a, gold_answers) == 1.0);
    let validity_bonus = i32::from(valid);
    let answer_bonus = i32::from(valid && correct);
    RewardBreakdown { base: -1, validity_bonus, answer_bonus, total: -1 + validity_bonus + answer_bonus }
}

/// Keeps the trajectories whose reward is 1, in input order.
pub fn filter_trajectories(pairs: &[(Trajectory, Vec<String>)]) -> Vec<Trajectory> {
    pairs.iter().filter(|(t, gold)| reward(t, gold).total == 1).map(|(t, _)| t.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub messages: Vec<Message>,
    /// True where the message contributes to the loss.
    pub loss_mask: Vec<bool>,
}

/// Renders a valid trajectory for supervised fine-tuning. Only assistant
/// messages are trained on; retrieved information is masked.
pub fn export_sft(traj: &Trajectory) -> Result<SftRecord, TrainingError> {
    let verdict = validate_trajectory(traj);
    if !verdict.valid {
        let why: Vec<String> = verdict.violations.iter().map(|v| format!("{}@{}", v.rule.id(), v.step)).collect();
        return Err(TrainingError::Export(why.join(", ")));
    }
    let messages = render_messages(traj, &agent_system_prompt());
    let loss_mask =
        messages.iter().map(|m| m.role == Role::Assistant && !m.content.contains(TOOL_RESPONSE_OPEN)).collect();
    Ok(SftRecord { messages, loss_mask })
}

pub fn write_sft<W: Write>(out: &mut W, records: &[SftRecord]) -> Result<(), TrainingError> {
    for r in records {
        serde_json::to_writer(&mut *out, r).map_err(std::io::Error::from)?;
        writeln!(out)?;
    }
    Ok(())
}

/// `(r - mean) / (population std + 1e-8)`; a constant group maps to zeros.
pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>, TrainingError> {
    if rewards.len() < 2 {
        return Err(TrainingError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / (std + ADVANTAGE_EPSILON)).collect())
}

/// Per-trajectory reward table as CSV.
pub fn write_reward_report<W: Write>(out: W, pairs: &[(Trajectory, Vec<String>)]) -> Result<(), TrainingError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "question", "valid", "base", "validity_bonus", "answer_bonus", "total", "violations"])?;
    for (i, (t, gold)) in pairs.iter().enumerate() {
        let verdict = validate_trajectory(t);
        let r = reward(t, gold);
        let violations: Vec<String> =
            verdict.violations.iter().map(|v| format!("{}@{}", v.rule.id(), v.step)).collect();
        w.write_record([
            i.to_string(),
            t.question.clone(),
            verdict.valid.to_string(),
            r.base.to_string(),
            r.validity_bonus.to_string(),
            r.answer_bonus.to_string(),
            r.total.to_string(),
            violations.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}
