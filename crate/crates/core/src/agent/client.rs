//! Chat-model clients: a scripted one for tests and an OpenAI-compatible HTTP one.

use std::collections::HashMap;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::engine::action::{Action, TOOL_CALL_CLOSE, TOOL_CALL_OPEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
    pub fn tool(content: impl Into<String>) -> Self {
        Self { role: Role::Tool, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    /// Tool definitions in chat-completions format; `None` disables tools.
    pub tools: Option<Value>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn new(messages: Vec<Message>) -> Self {
        Self { messages, tools: None, temperature: None, max_tokens: None }
    }

    /// Content of the first user message.
    pub fn first_user(&self) -> Option<&str> {
        self.messages.iter().find(|m| m.role == Role::User).map(|m| m.content.as_str())
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed completion: {0}")]
    Malformed(String),
    #[error("script exhausted for {key:?} after {served} replies")]
    ScriptExhausted { key: String, served: usize },
    #[error("unexpected request: {0}")]
    Unexpected(String),
}

impl ClientError {
    fn retryable(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Anything that turns a message list into assistant text.
pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError>;

    /// True when identical request sequences always get identical replies.
    fn is_deterministic(&self) -> bool {
        false
    }
}

type Expectation = Box<dyn Fn(usize, &ChatRequest) -> Result<(), String> + Send + Sync>;

/// Plays back canned replies.
///
/// Scripts are keyed by a substring of the request's first user message, so one
/// client can serve several episodes concurrently; the empty key matches any
/// request. Each key keeps its own cursor.
pub struct ScriptedClient {
    scripts: Vec<(String, Vec<String>)>,
    cursors: Mutex<HashMap<usize, usize>>,
    repeat_last: bool,
    expectation: Option<Expectation>,
    log: Mutex<Vec<ChatRequest>>,
}

impl std::fmt::Debug for ScriptedClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedClient")
            .field("scripts", &self.scripts.len())
            .field("repeat_last", &self.repeat_last)
            .finish()
    }
}

impl ScriptedClient {
    /// One script for every request.
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::keyed([(String::new(), replies.into_iter().map(Into::into).collect())])
    }

    pub fn keyed(scripts: impl IntoIterator<Item = (String, Vec<String>)>) -> Self {
        Self {
            scripts: scripts.into_iter().collect(),
            cursors: Mutex::new(HashMap::new()),
            repeat_last: false,
            expectation: None,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Parses either a JSON array of replies or an array of
    /// `{"key": ..., "replies": [...]}` objects.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Spec {
            Plain(Vec<String>),
            Keyed(Vec<KeyedScript>),
        }
        #[derive(Deserialize)]
        struct KeyedScript {
            #[serde(default)]
            key: String,
            replies: Vec<String>,
        }
        Ok(match serde_json::from_str(text)? {
            Spec::Plain(replies) => Self::new(replies),
            Spec::Keyed(list) => Self::keyed(list.into_iter().map(|k| (k.key, k.replies))),
        })
    }

    /// Keep returning the final reply once a script runs out.
    pub fn repeat_last(mut self) -> Self {
        self.repeat_last = true;
        self
    }

    /// Checked against every request, with the per-script turn index.
    pub fn expect(mut self, check: impl Fn(usize, &ChatRequest) -> Result<(), String> + Send + Sync + 'static) -> Self {
        self.expectation = Some(Box::new(check));
        self
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("request log poisoned").clone()
    }
}

impl ChatClient for ScriptedClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        self.log.lock().expect("request log poisoned").push(request.clone());
        let first_user = request.first_user().unwrap_or("");
        let (slot, (key, replies)) = self
            .scripts
            .iter()
            .enumerate()
            .find(|(_, (key, _))| first_user.contains(key.as_str()))
            .ok_or_else(|| ClientError::Unexpected(format!("no script matches {first_user:?}")))?;
        let turn = {
            let mut cursors = self.cursors.lock().expect("cursor map poisoned");
            let c = cursors.entry(slot).or_insert(0);
            let turn = *c;
            *c += 1;
            turn
        };
        if let Some(check) = &self.expectation {
            check(turn, request).map_err(ClientError::Unexpected)?;
        }
        match replies.get(turn) {
            Some(r) => Ok(r.clone()),
            None if self.repeat_last && !replies.is_empty() => Ok(replies[replies.len() - 1].clone()),
            None => Err(ClientError::ScriptExhausted { key: key.clone(), served: replies.len() }),
        }
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
///
/// Tool results travel as user messages since the text protocol carries no
/// native tool-call ids. Native `tool_calls` in a reply are converted back to
/// `<tool_call>` blocks.
pub struct OpenAiChatClient {
    base_url: String,
    model: String,
    api_key: Option<String>,
    max_retries: u32,
    backoff: Duration,
    agent: ureq::Agent,
}

impl std::fmt::Debug for OpenAiChatClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiChatClient").field("base_url", &self.base_url).field("model", &self.model).finish()
    }
}

impl OpenAiChatClient {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            max_retries: 3,
            backoff: Duration::from_millis(500),
            agent,
        }
    }

    /// Reads the API key from the named environment variable, if set.
    pub fn from_env(base_url: impl Into<String>, model: impl Into<String>, key_var: &str) -> Self {
        Self::new(base_url, model, std::env::var(key_var).ok().filter(|k| !k.is_empty()))
    }

    pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    fn body(&self, request: &ChatRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User | Role::Tool => "user",
                    Role::Assistant => "assistant",
                };
                json!({ "role": role, "content": m.content })
            })
            .collect();
        let mut body = json!({ "model": self.model, "messages": messages });
        if let Some(tools) = &request.tools {
            body["tools"] = tools.clone();
        }
        if let Some(t) = request.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(m) = request.max_tokens {
            body["max_tokens"] = json!(m);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<String, ClientError> {
        let mut req = self.agent.post(&format!("{}/chat/completions", self.base_url));
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| ClientError::Transport(e.to_string()))?;
        if status >= 400 {
            return Err(ClientError::Http { status, body: text });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| ClientError::Malformed(e.to_string()))?;
        completion_text(&value)
    }
}

/// Assistant text of a chat-completions response, with native tool calls
/// appended as `<tool_call>` blocks.
pub fn completion_text(response: &Value) -> Result<String, ClientError> {
    let message = response
        .pointer("/choices/0/message")
        .ok_or_else(|| ClientError::Malformed("response has no choices[0].message".into()))?;
    let mut text = message.get("content").and_then(Value::as_str).unwrap_or("").to_string();
    for call in message.get("tool_calls").and_then(Value::as_array).into_iter().flatten() {
        let f = call.get("function").unwrap_or(call);
        let name = f.get("name").and_then(Value::as_str).unwrap_or("");
        let args = match f.get("arguments") {
            Some(Value::String(s)) => serde_json::from_str(s).unwrap_or(Value::String(s.clone())),
            Some(v) => v.clone(),
            None => json!({}),
        };
        // Well-formed calls are rendered canonically; anything else is passed
        // through so the parser reports it.
        let block = match Action::from_call(name, &args) {
            Ok(action) => action.render_call(),
            Err(_) => format!("{TOOL_CALL_OPEN}\n{}\n{TOOL_CALL_CLOSE}", json!({ "name": name, "arguments": args })),
        };
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&block);
    }
    Ok(text)
}

impl ChatClient for OpenAiChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let body = self.body(request);
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Err(e) if e.retryable() && attempt < self.max_retries => {
                    log::warn!("chat completion failed ({e}); retrying in {delay:?}");
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}
