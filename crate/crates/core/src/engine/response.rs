//! Tool responses and their `<tool_response>` text form.
//!
//! Layout (one item per line):
//!
//! ```text
//! <tool_response>
//! session {"w_s":0.7,"w_e":0.3,"scale_n":3,"included":[],"excluded":[]}
//! error "..."                      only for a rejected suite
//! ### semantic_search {"query":"..."}
//! status ok                        or: status error "<message>"
//! warning "..."                    zero or more
//! [1] {"chunk_id":"d1#0","doc_id":"d1","fused":0.7,"semantic":0.8123,"exact":null,"via":["semantic"]}
//! <chunk text on one line>
//! > <snippet>                      entity_match only
//! no results                       empty retrieval
//! note "..."                       acknowledgement of a state change
//! </tool_response>
//! ```
//!
//! Scores are rounded to four decimals. Strings other than chunk text and
//! snippets are JSON-quoted.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::action::{Action, ParseFailure};
use super::session::SessionState;

pub const TOOL_RESPONSE_OPEN: &str = "<tool_response>";
pub const TOOL_RESPONSE_CLOSE: &str = "</tool_response>";
const INVALID_CALL: &str = "invalid_call";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Semantic,
    Exact,
    Entity,
    Included,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub text: String,
    pub semantic_score: Option<f64>,
    pub exact_score: Option<f64>,
    pub fused_score: f64,
    pub provenance: Vec<Strategy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityChunk {
    pub chunk: ScoredChunk,
    pub snippets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallEcho {
    Action(Action),
    Invalid(ParseFailure),
}

impl CallEcho {
    pub fn name(&self) -> &str {
        match self {
            CallEcho::Action(a) => a.name(),
            CallEcho::Invalid(_) => INVALID_CALL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOutcome {
    Ack(String),
    Chunks(Vec<ScoredChunk>),
    Entities(Vec<EntityChunk>),
    Failed(String),
}

/// The result of one action inside a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseBlock {
    pub call: CallEcho,
    pub outcome: BlockOutcome,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ResponseBlock {
    pub fn ack(action: Action, message: impl Into<String>, warnings: Vec<String>) -> Self {
        Self { call: CallEcho::Action(action), outcome: BlockOutcome::Ack(message.into()), warnings }
    }

    pub fn failed(call: CallEcho, message: impl Into<String>) -> Self {
        Self { call, outcome: BlockOutcome::Failed(message.into()), warnings: Vec::new() }
    }

    pub fn is_ok(&self) -> bool {
        !matches!(self.outcome, BlockOutcome::Failed(_))
    }

    /// Chunks carried by this block, entity hits included.
    pub fn chunks(&self) -> Vec<&ScoredChunk> {
        match &self.outcome {
            BlockOutcome::Chunks(c) => c.iter().collect(),
            BlockOutcome::Entities(e) => e.iter().map(|e| &e.chunk).collect(),
            _ => Vec::new(),
        }
    }
}

/// One consolidated reply to an action suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResponse {
    pub blocks: Vec<ResponseBlock>,
    pub session: SessionState,
    /// Set when the whole suite was rejected.
    #[serde(default)]
    pub error: Option<String>,
}

impl ToolResponse {
    pub fn rejected(session: SessionState, message: impl Into<String>) -> Self {
        Self { blocks: Vec::new(), session, error: Some(message.into()) }
    }

    pub fn all_chunks(&self) -> impl Iterator<Item = &ScoredChunk> {
        self.blocks.iter().flat_map(|b| b.chunks())
    }

    pub fn has_errors(&self) -> bool {
        self.error.is_some() || self.blocks.iter().any(|b| !b.is_ok())
    }

    /// Copy with every score passed through [`round4`], i.e. what survives a
    /// render/parse cycle.
    pub fn rounded(&self) -> Self {
        let mut out = self.clone();
        let fix = |c: &mut ScoredChunk| {
            c.semantic_score = c.semantic_score.map(round4);
            c.exact_score = c.exact_score.map(round4);
            c.fused_score = round4(c.fused_score);
        };
        for block in &mut out.blocks {
            match &mut block.outcome {
                BlockOutcome::Chunks(list) => list.iter_mut().for_each(fix),
                BlockOutcome::Entities(list) => list.iter_mut().for_each(|e| fix(&mut e.chunk)),
                _ => {}
            }
        }
        out
    }
}

pub fn round4(x: f64) -> f64 {
    (x * 10_000.0).round() / 10_000.0
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("tool_response line {line}: {message}")]
pub struct ResponseParseError {
    pub line: usize,
    pub message: String,
}

fn one_line(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

fn quote(s: &str) -> String {
    Value::String(s.to_string()).to_string()
}

fn chunk_meta(c: &ScoredChunk) -> Value {
    json!({
        "chunk_id": c.chunk_id,
        "doc_id": c.doc_id,
        "fused": round4(c.fused_score),
        "semantic": c.semantic_score.map(round4),
        "exact": c.exact_score.map(round4),
        "via": c.provenance,
    })
}

pub fn render_tool_response(resp: &ToolResponse) -> String {
    let mut lines = vec![TOOL_RESPONSE_OPEN.to_string()];
    lines.push(format!("session {}", serde_json::to_string(&resp.session).expect("session serializes")));
    if let Some(err) = &resp.error {
        lines.push(format!("error {}", quote(err)));
    }
    for block in &resp.blocks {
        let args = match &block.call {
            CallEcho::Action(a) => a.arguments(),
            CallEcho::Invalid(f) => json!({ "raw": f.raw }),
        };
        lines.push(format!("### {} {}", block.call.name(), args));
        match &block.outcome {
            BlockOutcome::Failed(msg) => lines.push(format!("status error {}", quote(msg))),
            _ => lines.push("status ok".into()),
        }
        for w in &block.warnings {
            lines.push(format!("warning {}", quote(w)));
        }
        match &block.outcome {
            BlockOutcome::Failed(_) => {}
            BlockOutcome::Ack(note) => lines.push(format!("note {}", quote(note))),
            BlockOutcome::Chunks(list) if list.is_empty() => lines.push("no results".into()),
            BlockOutcome::Entities(list) if list.is_empty() => lines.push("no results".into()),
            BlockOutcome::Chunks(list) => {
                for (i, c) in list.iter().enumerate() {
                    lines.push(format!("[{}] {}", i + 1, chunk_meta(c)));
                    lines.push(one_line(&c.text));
                }
            }
            BlockOutcome::Entities(list) => {
                for (i, e) in list.iter().enumerate() {
                    lines.push(format!("[{}] {}", i + 1, chunk_meta(&e.chunk)));
                    lines.push(one_line(&e.chunk.text));
                    for s in &e.snippets {
                        lines.push(format!("> {}", one_line(s)));
                    }
                }
            }
        }
    }
    lines.push(TOOL_RESPONSE_CLOSE.to_string());
    lines.join("\n")
}

/// Inverse of [`render_tool_response`] (scores come back rounded).
pub fn parse_tool_response(text: &str) -> Result<ToolResponse, ResponseParseError> {
    let lines: Vec<&str> = text.split('\n').collect();
    let mut p = LineParser { lines, pos: 0 };
    p.expect_exact(TOOL_RESPONSE_OPEN)?;
    let session: SessionState = p.json_after("session ")?;
    let mut error = None;
    if p.peek().is_some_and(|l| l.starts_with("error ")) {
        error = Some(p.json_after::<String>("error ")?);
    }
    let mut blocks = Vec::new();
    while let Some(line) = p.peek() {
        if line == TOOL_RESPONSE_CLOSE {
            break;
        }
        blocks.push(p.block()?);
    }
    p.expect_exact(TOOL_RESPONSE_CLOSE)?;
    Ok(ToolResponse { blocks, session, error })
}

struct LineParser<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> LineParser<'a> {
    fn err(&self, message: impl Into<String>) -> ResponseParseError {
        ResponseParseError { line: self.pos + 1, message: message.into() }
    }

    fn peek(&self) -> Option<&'a str> {
        self.lines.get(self.pos).copied()
    }

    fn next(&mut self) -> Result<&'a str, ResponseParseError> {
        let line = self.peek().ok_or_else(|| self.err("unexpected end of input"))?;
        self.pos += 1;
        Ok(line)
    }

    fn expect_exact(&mut self, want: &str) -> Result<(), ResponseParseError> {
        let line = self.next()?;
        if line != want {
            self.pos -= 1;
            return Err(self.err(format!("expected {want:?}, found {line:?}")));
        }
        Ok(())
    }

    fn json_after<T: for<'de> Deserialize<'de>>(&mut self, prefix: &str) -> Result<T, ResponseParseError> {
        let line = self.next()?;
        let rest = line
            .strip_prefix(prefix)
            .ok_or_else(|| ResponseParseError { line: self.pos, message: format!("expected {prefix:?}") })?;
        serde_json::from_str(rest).map_err(|e| ResponseParseError { line: self.pos, message: e.to_string() })
    }

    fn block(&mut self) -> Result<ResponseBlock, ResponseParseError> {
        let header = self.next()?;
        let rest = header.strip_prefix("### ").ok_or_else(|| ResponseParseError {
            line: self.pos,
            message: format!("expected block header, found {header:?}"),
        })?;
        let (name, args) = rest.split_once(' ').unwrap_or((rest, "null"));
        let args: Value =
            serde_json::from_str(args).map_err(|e| ResponseParseError { line: self.pos, message: e.to_string() })?;
        let call = if name == INVALID_CALL {
            let raw = args.get("raw").and_then(Value::as_str).unwrap_or_default().to_string();
            CallEcho::Invalid(ParseFailure { raw, reason: String::new() })
        } else {
            CallEcho::Action(
                Action::from_call(name, &args).map_err(|m| ResponseParseError { line: self.pos, message: m })?,
            )
        };

        let status = self.next()?;
        let failure = if status == "status ok" {
            None
        } else if let Some(msg) = status.strip_prefix("status error ") {
            Some(serde_json::from_str::<String>(msg).map_err(|e| self.err(e.to_string()))?)
        } else {
            return Err(ResponseParseError { line: self.pos, message: format!("bad status line {status:?}") });
        };
        let mut warnings = Vec::new();
        while self.peek().is_some_and(|l| l.starts_with("warning ")) {
            warnings.push(self.json_after::<String>("warning ")?);
        }

        let outcome = if let Some(msg) = failure {
            if let CallEcho::Invalid(f) = &call {
                let f = ParseFailure { raw: f.raw.clone(), reason: msg.clone() };
                return Ok(ResponseBlock { call: CallEcho::Invalid(f), outcome: BlockOutcome::Failed(msg), warnings });
            }
            BlockOutcome::Failed(msg)
        } else if self.peek().is_some_and(|l| l.starts_with("note ")) {
            BlockOutcome::Ack(self.json_after("note ")?)
        } else {
            let entity = matches!(&call, CallEcho::Action(Action::EntityMatch { .. }));
            if self.peek() == Some("no results") {
                self.pos += 1;
                if entity {
                    BlockOutcome::Entities(Vec::new())
                } else {
                    BlockOutcome::Chunks(Vec::new())
                }
            } else {
                let mut chunks = Vec::new();
                let mut entities = Vec::new();
                while self.peek().is_some_and(|l| l.starts_with('[')) {
                    let chunk = self.chunk()?;
                    if entity {
                        let mut snippets = Vec::new();
                        while let Some(s) = self.peek().and_then(|l| l.strip_prefix("> ")) {
                            snippets.push(s.to_string());
                            self.pos += 1;
                        }
                        entities.push(EntityChunk { chunk, snippets });
                    } else {
                        chunks.push(chunk);
                    }
                }
                if entity {
                    BlockOutcome::Entities(entities)
                } else {
                    BlockOutcome::Chunks(chunks)
                }
            }
        };
        Ok(ResponseBlock { call, outcome, warnings })
    }

    fn chunk(&mut self) -> Result<ScoredChunk, ResponseParseError> {
        #[derive(Deserialize)]
        struct Meta {
            chunk_id: String,
            doc_id: String,
            fused: f64,
            semantic: Option<f64>,
            exact: Option<f64>,
            via: Vec<Strategy>,
        }
        let line = self.next()?;
        let (_, json) = line
            .split_once("] ")
            .ok_or_else(|| ResponseParseError { line: self.pos, message: "bad result line".into() })?;
        let meta: Meta =
            serde_json::from_str(json).map_err(|e| ResponseParseError { line: self.pos, message: e.to_string() })?;
        let text = self.next()?.to_string();
        Ok(ScoredChunk {
            chunk_id: meta.chunk_id,
            doc_id: meta.doc_id,
            text,
            semantic_score: meta.semantic,
            exact_score: meta.exact,
            fused_score: meta.fused,
            provenance: meta.via,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk(id: &str, fused: f64) -> ScoredChunk {
        ScoredChunk {
            chunk_id: id.into(),
            doc_id: id.split('#').next().unwrap().into(),
            text: "The Jaws of Death is a 1976 thriller film.".into(),
            semantic_score: Some(0.51084),
            exact_score: None,
            fused_score: fused,
            provenance: vec![Strategy::Semantic],
        }
    }

    #[test]
    fn empty_results_render_no_results() {
        let resp = ToolResponse {
            blocks: vec![ResponseBlock {
                call: CallEcho::Action(Action::ExactSearch { keywords: "zzz".into() }),
                outcome: BlockOutcome::Chunks(vec![]),
                warnings: vec![],
            }],
            session: SessionState::default(),
            error: None,
        };
        let text = render_tool_response(&resp);
        assert!(text.contains("\nno results\n"), "{text}");
        assert_eq!(parse_tool_response(&text).unwrap(), resp);
    }

    #[test]
    fn scores_render_with_four_decimals() {
        let resp = ToolResponse {
            blocks: vec![ResponseBlock {
                call: CallEcho::Action(Action::SemanticSearch { query: "q".into() }),
                outcome: BlockOutcome::Chunks(vec![chunk("d1#0", 0.7)]),
                warnings: vec![],
            }],
            session: SessionState::default(),
            error: None,
        };
        let text = render_tool_response(&resp);
        assert!(text.contains("\"semantic\":0.5108"), "{text}");
        assert!(!text.contains("0.51084"));
        assert_eq!(parse_tool_response(&text).unwrap(), resp.rounded());
    }

    #[test]
    fn full_round_trip() {
        let resp = ToolResponse {
            blocks: vec![
                ResponseBlock::ack(Action::AdjustScale { n: 5 }, "scale set to 5", vec![]),
                ResponseBlock {
                    call: CallEcho::Action(Action::EntityMatch { entity: "Jaws".into(), query: None }),
                    outcome: BlockOutcome::Entities(vec![EntityChunk {
                        chunk: chunk("d1#0", 3.25),
                        snippets: vec!["a. b".into(), "> nested".into()],
                    }]),
                    warnings: vec!["unknown doc_id \"x\"".into()],
                },
                ResponseBlock::failed(
                    CallEcho::Invalid(ParseFailure {
                        raw: "{\"name\":\"grep\"}".into(),
                        reason: "unknown tool \"grep\"".into(),
                    }),
                    "unknown tool \"grep\"",
                ),
                ResponseBlock::failed(CallEcho::Action(Action::WeightedFusion { w_s: 0.0, w_e: 0.0 }), "bad weights"),
            ],
            session: SessionState::default(),
            error: Some("line one\nline two".into()),
        };
        let text = render_tool_response(&resp);
        assert_eq!(parse_tool_response(&text).unwrap(), resp.rounded());
    }

    #[test]
    fn garbage_is_an_error_not_a_panic() {
        for bad in ["", "<tool_response>", "<tool_response>\nsession {}\n</tool_response>", "### x"] {
            assert!(parse_tool_response(bad).is_err());
        }
    }
}
