//! OpenAI-style chat-completions client.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde_json::json;

use super::{ChatMessage, LlmClient, PlannerConfig, PlannerError, LLM_KEY_ENV};

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

pub struct ChatCompletionsClient {
    base_url: String,
    api_key: String,
    timeout: Duration,
    log_dir: Option<PathBuf>,
    counter: AtomicU64,
}

impl ChatCompletionsClient {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        ChatCompletionsClient {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            timeout: Duration::from_secs(120),
            log_dir: None,
            counter: AtomicU64::new(0),
        }
    }

    /// Reads the key from `PLOTNPOLISH_LLM_KEY`.
    pub fn from_env(base_url: Option<&str>) -> Result<Self, PlannerError> {
        let key = std::env::var(LLM_KEY_ENV)
            .map_err(|_| PlannerError::LlmUnavailable(format!("{LLM_KEY_ENV} is not set")))?;
        Ok(Self::new(base_url.unwrap_or(DEFAULT_BASE_URL), key))
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Writes every request and response body into `dir`.
    pub fn with_log_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.log_dir = Some(dir.into());
        self
    }

    fn log(&self, n: u64, kind: &str, body: &serde_json::Value) {
        let Some(dir) = &self.log_dir else { return };
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
        let path = dir.join(format!("llm-{stamp}-{n:04}-{kind}.json"));
        let written = std::fs::create_dir_all(dir).and_then(|_| {
            std::fs::write(&path, serde_json::to_vec_pretty(body).unwrap_or_default())
        });
        if let Err(e) = written {
            tracing::warn!(path = %path.display(), error = %e, "could not write LLM log");
        }
    }
}

impl LlmClient for ChatCompletionsClient {
    fn complete(&self, messages: &[ChatMessage], config: &PlannerConfig) -> Result<String, PlannerError> {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let body = json!({
            "model": config.model_identifier,
            "temperature": config.temperature,
            "messages": messages,
        });
        self.log(n, "request", &body);

        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut response = agent
            .post(&format!("{}/chat/completions", self.base_url))
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| PlannerError::LlmUnavailable(e.to_string()))?;
        let reply: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| PlannerError::LlmUnavailable(format!("bad response body: {e}")))?;
        self.log(n, "response", &reply);

        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| PlannerError::LlmUnavailable("response has no message content".into()))
    }
}
