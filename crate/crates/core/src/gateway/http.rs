//! Live chat-completion backend speaking the OpenAI-compatible wire schema,
//! which most hosted and local model servers expose.

use serde::{Deserialize, Serialize};

use super::{ChatRequest, GatewayError, Role};

/// Name of the environment variable holding the API credential.
pub const API_KEY_ENV: &str = "MODAGENT_API_KEY";

#[derive(Debug, Clone)]
pub struct HttpChatBackend {
    base_url: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: Vec<WireMessage<'a>>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

/// Classifies a single attempt so the gateway retry loop can decide whether
/// another try makes sense.
pub enum AttemptError {
    /// Timeouts, connection errors, 429 and 5xx responses.
    Transient(String),
    /// Anything that will not improve on retry (credentials, bad request).
    Fatal(GatewayError),
}

impl HttpChatBackend {
    /// Builds a live backend. The credential is read from `MODAGENT_API_KEY`;
    /// a missing credential is a configuration error.
    pub fn new(base_url: &str, timeout_s: u64) -> Result<Self, GatewayError> {
        let api_key = std::env::var(API_KEY_ENV).map_err(|_| {
            GatewayError::Config(format!(
                "live backend requires the {API_KEY_ENV} environment variable"
            ))
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(timeout_s))
            .build()
            .map_err(|e| GatewayError::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            client,
        })
    }

    /// One request/response attempt, no retries.
    pub fn attempt(&self, req: &ChatRequest) -> Result<String, AttemptError> {
        let mut messages = Vec::with_capacity(req.turns.len() + 1);
        if !req.system_prompt.is_empty() {
            messages.push(WireMessage {
                role: "system",
                content: &req.system_prompt,
            });
        }
        for turn in &req.turns {
            messages.push(WireMessage {
                role: match turn.role {
                    Role::User => "user",
                    Role::Assistant => "assistant",
                },
                content: &turn.content,
            });
        }
        let body = WireRequest {
            model: &req.model_id,
            temperature: req.temperature,
            messages,
        };

        let url = format!("{}/chat/completions", self.base_url);
        let response = self
            .client
            .post(&url)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| AttemptError::Transient(format!("transport error: {e}")))?;

        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(AttemptError::Fatal(GatewayError::Config(format!(
                "backend rejected credentials: HTTP {status}"
            ))));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(GatewayError::Config(format!(
                "backend returned HTTP {status}"
            ))));
        }

        let wire: WireResponse = response
            .json()
            .map_err(|e| AttemptError::Transient(format!("malformed response body: {e}")))?;
        let text = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        Ok(text)
    }
}
