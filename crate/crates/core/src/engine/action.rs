//! The action algebra and the `<tool_call>` wire format.
//!
//! Each call is a JSON object `{"name": <tool>, "arguments": {...}}` wrapped in
//! `<tool_call>` / `</tool_call>` tags. `arguments` may also arrive as a JSON
//! string holding the object, as OpenAI-style servers emit it.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value};

pub const TOOL_CALL_OPEN: &str = "<tool_call>";
pub const TOOL_CALL_CLOSE: &str = "</tool_call>";

/// Names of the seven interaction primitives, in schema order.
pub const PRIMITIVES: [&str; 7] = [
    "semantic_search",
    "exact_search",
    "weighted_fusion",
    "entity_match",
    "include_docs",
    "exclude_docs",
    "adjust_scale",
];

pub const ANSWER_TOOL: &str = "answer";

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    SemanticSearch {
        query: String,
    },
    ExactSearch {
        keywords: String,
    },
    WeightedFusion {
        w_s: f64,
        w_e: f64,
    },
    /// `query` ranks the anchored chunks and their snippets; the entity itself
    /// is used when it is absent.
    EntityMatch {
        entity: String,
        query: Option<String>,
    },
    IncludeDocs {
        doc_ids: Vec<String>,
    },
    ExcludeDocs {
        doc_ids: Vec<String>,
    },
    AdjustScale {
        n: u64,
    },
    Answer {
        text: String,
    },
}

/// A `<tool_call>` block that could not be turned into an [`Action`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub raw: String,
    pub reason: String,
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::SemanticSearch { .. } => "semantic_search",
            Action::ExactSearch { .. } => "exact_search",
            Action::WeightedFusion { .. } => "weighted_fusion",
            Action::EntityMatch { .. } => "entity_match",
            Action::IncludeDocs { .. } => "include_docs",
            Action::ExcludeDocs { .. } => "exclude_docs",
            Action::AdjustScale { .. } => "adjust_scale",
            Action::Answer { .. } => ANSWER_TOOL,
        }
    }

    /// Actions that only change session state.
    pub fn is_state_mutation(&self) -> bool {
        matches!(
            self,
            Action::WeightedFusion { .. }
                | Action::IncludeDocs { .. }
                | Action::ExcludeDocs { .. }
                | Action::AdjustScale { .. }
        )
    }

    pub fn is_retrieval(&self) -> bool {
        matches!(self, Action::SemanticSearch { .. } | Action::ExactSearch { .. } | Action::EntityMatch { .. })
    }

    pub fn arguments(&self) -> Value {
        match self {
            Action::SemanticSearch { query } => json!({ "query": query }),
            Action::ExactSearch { keywords } => json!({ "keywords": keywords }),
            Action::WeightedFusion { w_s, w_e } => json!({ "w_s": w_s, "w_e": w_e }),
            Action::EntityMatch { entity, query: None } => json!({ "entity": entity }),
            Action::EntityMatch { entity, query: Some(q) } => json!({ "entity": entity, "query": q }),
            Action::IncludeDocs { doc_ids } => json!({ "doc_ids": doc_ids }),
            Action::ExcludeDocs { doc_ids } => json!({ "doc_ids": doc_ids }),
            Action::AdjustScale { n } => json!({ "n": n }),
            Action::Answer { text } => json!({ "answer": text }),
        }
    }

    pub fn to_call_json(&self) -> Value {
        json!({ "name": self.name(), "arguments": self.arguments() })
    }

    /// `<tool_call>\n{json}\n</tool_call>`. A `</` inside string arguments is
    /// written as `<\/` so arguments can never close the block early.
    pub fn render_call(&self) -> String {
        let body = self.to_call_json().to_string().replace("</", "<\\/");
        format!("{TOOL_CALL_OPEN}\n{body}\n{TOOL_CALL_CLOSE}")
    }

    /// Builds an action from a tool name and its argument object.
    pub fn from_call(name: &str, arguments: &Value) -> Result<Action, String> {
        let empty = Map::new();
        let args = match arguments {
            Value::Object(map) => map,
            Value::Null => &empty,
            other => return Err(format!("arguments must be an object, got {other}")),
        };
        let action = match name {
            "semantic_search" => Action::SemanticSearch { query: string_arg(args, "query")? },
            "exact_search" => Action::ExactSearch { keywords: string_arg(args, "keywords")? },
            "weighted_fusion" => {
                Action::WeightedFusion { w_s: number_arg(args, "w_s")?, w_e: number_arg(args, "w_e")? }
            }
            "entity_match" => Action::EntityMatch {
                entity: string_arg(args, "entity")?,
                query: match args.get("query") {
                    None | Some(Value::Null) => None,
                    Some(Value::String(s)) => Some(s.clone()),
                    Some(other) => return Err(format!("`query` must be a string, got {other}")),
                },
            },
            "include_docs" => Action::IncludeDocs { doc_ids: ids_arg(args)? },
            "exclude_docs" => Action::ExcludeDocs { doc_ids: ids_arg(args)? },
            "adjust_scale" => Action::AdjustScale { n: count_arg(args, "n")? },
            ANSWER_TOOL => Action::Answer { text: string_arg(args, "answer")? },
            other => return Err(format!("unknown tool {other:?}")),
        };
        Ok(action)
    }

    /// Parses one `{"name": ..., "arguments": ...}` object.
    pub fn from_call_json(value: &Value) -> Result<Action, String> {
        let obj = value.as_object().ok_or("tool call must be a JSON object")?;
        let name = obj.get("name").and_then(Value::as_str).ok_or("tool call is missing a string `name`")?;
        let arguments = match obj.get("arguments") {
            Some(Value::String(s)) => {
                serde_json::from_str(s).map_err(|e| format!("arguments string is not JSON: {e}"))?
            }
            Some(v) => v.clone(),
            None => Value::Null,
        };
        Action::from_call(name, &arguments)
    }
}

fn string_arg(args: &Map<String, Value>, key: &str) -> Result<String, String> {
    match args.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(format!("`{key}` must be a string, got {other}")),
        None => Err(format!("missing argument `{key}`")),
    }
}

fn number_arg(args: &Map<String, Value>, key: &str) -> Result<f64, String> {
    args.get(key)
        .and_then(Value::as_f64)
        .filter(|x| x.is_finite())
        .ok_or_else(|| format!("`{key}` must be a finite number"))
}

fn count_arg(args: &Map<String, Value>, key: &str) -> Result<u64, String> {
    let value = args.get(key).ok_or_else(|| format!("missing argument `{key}`"))?;
    if let Some(n) = value.as_u64() {
        return Ok(n);
    }
    match value.as_f64() {
        Some(x) if x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64 => Ok(x as u64),
        _ => Err(format!("`{key}` must be a non-negative integer, got {value}")),
    }
}

fn ids_arg(args: &Map<String, Value>) -> Result<Vec<String>, String> {
    match args.get("doc_ids") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                other => Err(format!("doc id must be a string, got {other}")),
            })
            .collect(),
        Some(Value::String(s)) => Ok(vec![s.clone()]),
        Some(other) => Err(format!("`doc_ids` must be a list of strings, got {other}")),
        None => Err("missing argument `doc_ids`".into()),
    }
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_call_json().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        Action::from_call_json(&value).map_err(serde::de::Error::custom)
    }
}

/// Extracts every `<tool_call>` block in document order. An empty result means
/// the text carries no calls at all.
pub fn parse_tool_calls(text: &str) -> Vec<Result<Action, ParseFailure>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find(TOOL_CALL_OPEN) {
        let body_start = start + TOOL_CALL_OPEN.len();
        let Some(len) = rest[body_start..].find(TOOL_CALL_CLOSE) else {
            out.push(Err(ParseFailure {
                raw: rest[body_start..].trim().to_string(),
                reason: "unterminated tool_call block".into(),
            }));
            break;
        };
        let raw = rest[body_start..body_start + len].trim();
        out.push(parse_block(raw));
        rest = &rest[body_start + len + TOOL_CALL_CLOSE.len()..];
    }
    out
}

fn parse_block(raw: &str) -> Result<Action, ParseFailure> {
    let fail = |reason: String| ParseFailure { raw: raw.to_string(), reason };
    let value: Value = serde_json::from_str(raw).map_err(|e| fail(format!("malformed JSON: {e}")))?;
    Action::from_call_json(&value).map_err(fail)
}

/// Renders a suite as consecutive `<tool_call>` blocks.
pub fn render_tool_calls(actions: &[Action]) -> String {
    actions.iter().map(Action::render_call).collect::<Vec<_>>().join("\n")
}

pub fn contains_tool_call(text: &str) -> bool {
    text.contains(TOOL_CALL_OPEN)
}
