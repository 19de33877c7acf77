//! TOML configuration. Every field has a default, so an empty file (or no
//! file at all) is valid. Secrets never live here: only the names of the
//! environment variables that hold them.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use irag_core::agent::{AgentConfig, ChatClient, OpenAiChatClient, ScriptedClient};
use irag_core::dense::{EmbeddingProvider, HashingProvider, HttpEmbeddingProvider};
use irag_core::engine::SessionState;
use irag_core::workflow::WorkflowConfig;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub index: IndexConfig,
    pub embedding: EmbeddingConfig,
    pub llm: LlmConfig,
    pub session: SessionConfig,
    pub agent: AgentSection,
    pub workflow: WorkflowSection,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub dir: PathBuf,
    pub chunk_words: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("index"), chunk_words: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Hashing,
    Http,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub provider: ProviderKind,
    pub dimension: usize,
    pub url: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { provider: ProviderKind::Hashing, dimension: 64, url: None, model: None, api_key_env: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            api_key_env: "IRAG_LLM_API_KEY".into(),
            temperature: None,
            max_tokens: None,
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub w_s: f64,
    pub w_e: f64,
    pub scale: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        let s = SessionState::default();
        Self { w_s: s.w_s, w_e: s.w_e, scale: s.scale_n }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub max_turns: usize,
}

impl Default for AgentSection {
    fn default() -> Self {
        Self { max_turns: AgentConfig::default().max_turns }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkflowSection {
    pub max_iterations: usize,
    pub max_refines: usize,
    pub max_calls: usize,
}

impl Default for WorkflowSection {
    fn default() -> Self {
        let w = WorkflowConfig::default();
        Self { max_iterations: w.max_iterations, max_refines: w.max_refines, max_calls: w.max_calls }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { workers: 4 }
    }
}

impl Config {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: Config =
            toml::from_str(text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })?;
        cfg.session()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?;
                Self::parse(&text, p)
            }
        }
    }

    pub fn session(&self) -> Result<SessionState, ConfigError> {
        SessionState::new(self.session.w_s, self.session.w_e, self.session.scale)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn agent(&self) -> AgentConfig {
        AgentConfig {
            max_turns: self.agent.max_turns,
            temperature: self.llm.temperature,
            max_tokens: self.llm.max_tokens,
            ..AgentConfig::default()
        }
    }

    pub fn workflow(&self) -> WorkflowConfig {
        WorkflowConfig {
            max_iterations: self.workflow.max_iterations,
            max_refines: self.workflow.max_refines,
            max_calls: self.workflow.max_calls,
            temperature: self.llm.temperature,
            max_tokens: self.llm.max_tokens,
        }
    }

    pub fn provider(&self) -> Result<Arc<dyn EmbeddingProvider>, ConfigError> {
        let e = &self.embedding;
        if e.dimension == 0 {
            return Err(ConfigError::Invalid("embedding.dimension must be positive".into()));
        }
        Ok(match e.provider {
            ProviderKind::Hashing => Arc::new(HashingProvider::new(e.dimension)),
            ProviderKind::Http => {
                let url = e
                    .url
                    .clone()
                    .ok_or_else(|| ConfigError::Invalid("embedding.url is required for the http provider".into()))?;
                let model = e.model.clone().unwrap_or_default();
                let key = e.api_key_env.as_deref().and_then(|v| std::env::var(v).ok());
                Arc::new(HttpEmbeddingProvider::new(url, model, e.dimension, key))
            }
        })
    }

    /// A scripted client when `script` is given, otherwise the live endpoint
    /// (`endpoint` overrides `llm.base_url`).
    pub fn client(&self, script: Option<&Path>, endpoint: Option<&str>) -> Result<Box<dyn ChatClient>, ConfigError> {
        if let Some(path) = script {
            let text = std::fs::read_to_string(path)
                .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
            let client = ScriptedClient::from_json(&text)
                .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
            return Ok(Box::new(client));
        }
        let base = endpoint.unwrap_or(&self.llm.base_url);
        let client = OpenAiChatClient::from_env(base, &self.llm.model, &self.llm.api_key_env)
            .with_retries(self.llm.max_retries, std::time::Duration::from_millis(self.llm.backoff_ms));
        Ok(Box::new(client))
    }
}
