//! Backends for OpenAI-compatible `chat/completions` and `embeddings`
//! endpoints.
//!
//! Vision requests are sent to the chat endpoint with frames attached as
//! base64 `image_url` parts. Frame-set embeddings post the frames as data
//! URLs to the embeddings endpoint (as multimodal embedding servers accept)
//! and average the returned vectors.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tracing::warn;

use super::{
    ChatBackend, ChatRequest, ChatResponse, Embedder, Role, ToolInvocation, VisionBackend,
    VisionRequest,
};
use crate::error::{Error, Result};
use crate::model::FrameRef;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(default)]
    pub api_key: Option<String>,
    pub model: String,
    /// Required for embedding endpoints.
    #[serde(default)]
    pub dimension: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay: Duration::from_secs(1) }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    /// Connection-level failure; always retried.
    Network(String),
    Status { code: u16, body: String },
}

impl TransportError {
    fn retryable(&self) -> bool {
        match self {
            TransportError::Network(_) => true,
            TransportError::Status { code, .. } => *code == 429 || *code >= 500,
        }
    }
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportError::Network(m) => write!(f, "network error: {m}"),
            TransportError::Status { code, body } => write!(f, "HTTP {code}: {body}"),
        }
    }
}

/// Sends one JSON POST and returns the decoded JSON body.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value) -> Result<Value, TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::BackendUnavailable(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { client })
    }
}

impl Transport for ReqwestTransport {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value) -> Result<Value, TransportError> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| TransportError::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError::Status { code: status.as_u16(), body: text });
        }
        serde_json::from_str(&text).map_err(|e| TransportError::Status {
            code: status.as_u16(),
            body: format!("undecodable body ({e}): {text}"),
        })
    }
}

/// Client for one configured endpoint.
#[derive(Clone)]
pub struct OpenAiClient {
    endpoint: EndpointConfig,
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
}

impl OpenAiClient {
    pub fn new(endpoint: EndpointConfig, transport: Arc<dyn Transport>, retry: RetryPolicy) -> Self {
        Self { endpoint, transport, retry }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.endpoint.base_url.trim_end_matches('/'))
    }

    /// Posts with retries. Every call ends in a response or a typed error.
    fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let url = self.url(path);
        let attempts = self.retry.max_attempts.max(1);
        let mut last = None;
        for attempt in 1..=attempts {
            if attempt > 1 {
                std::thread::sleep(self.retry.delay_before(attempt - 1));
            }
            match self.transport.post_json(&url, self.endpoint.api_key.as_deref(), body) {
                Ok(v) => return Ok(v),
                Err(e) if e.retryable() && attempt < attempts => {
                    warn!(%url, attempt, error = %e, "request failed, retrying");
                    last = Some(e);
                }
                Err(e) if e.retryable() => last = Some(e),
                Err(e) => return Err(Error::BackendRefusal(format!("{url}: {e}"))),
            }
        }
        Err(Error::BackendUnavailable(format!(
            "{url}: giving up after {attempts} attempts: {}",
            last.map(|e| e.to_string()).unwrap_or_default()
        )))
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
        Role::Tool => "tool",
    }
}

/// Chat-completions request body for `request`.
pub fn chat_body(model: &str, request: &ChatRequest) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| json!({ "role": role_name(m.role), "content": m.content }))
        .collect();
    let mut body = json!({ "model": model, "messages": messages });
    if !request.tools.is_empty() {
        let tools: Vec<Value> = request
            .tools
            .iter()
            .map(|t| {
                json!({
                    "type": "function",
                    "function": { "name": t.name, "description": t.description, "parameters": t.parameters },
                })
            })
            .collect();
        body["tools"] = Value::Array(tools);
        body["tool_choice"] = json!("required");
    }
    if let Some(max) = request.max_output_tokens {
        body["max_completion_tokens"] = json!(max);
    }
    body
}

/// Decodes the first choice of a chat-completions response.
pub fn parse_chat_response(body: &Value) -> Result<ChatResponse> {
    let message = &body["choices"][0]["message"];
    if message.is_null() {
        return Err(Error::BackendRefusal(format!("response has no message: {body}")));
    }
    let content = message["content"].as_str().map(str::trim).filter(|s| !s.is_empty());
    if let Some(calls) = message["tool_calls"].as_array().filter(|c| !c.is_empty()) {
        if calls.len() > 1 {
            warn!(count = calls.len(), "model returned several tool calls; using the first");
        }
        let function = &calls[0]["function"];
        let name = function["name"]
            .as_str()
            .ok_or_else(|| Error::BackendRefusal("tool call without a name".into()))?;
        let arguments = match &function["arguments"] {
            Value::String(s) if s.trim().is_empty() => Map::new(),
            Value::String(s) => match serde_json::from_str::<Value>(s) {
                Ok(Value::Object(m)) => m,
                _ => return Err(Error::BackendRefusal(format!("tool arguments are not a JSON object: {s}"))),
            },
            Value::Object(m) => m.clone(),
            Value::Null => Map::new(),
            other => return Err(Error::BackendRefusal(format!("unexpected tool arguments {other}"))),
        };
        return Ok(ChatResponse::ToolCall(ToolInvocation {
            name: name.to_string(),
            arguments,
            thought: content.map(str::to_string),
        }));
    }
    Ok(ChatResponse::Text(content.unwrap_or_default().to_string()))
}

fn mime_for(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "image/jpeg",
    }
}

fn data_url(frame: &FrameRef) -> Result<String> {
    let bytes = std::fs::read(&frame.path).map_err(|e| Error::io(&frame.path, e))?;
    Ok(format!(
        "data:{};base64,{}",
        mime_for(&frame.path),
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

pub struct OpenAiChat {
    client: OpenAiClient,
    max_frames: usize,
}

impl OpenAiChat {
    pub fn new(client: OpenAiClient, max_frames: usize) -> Self {
        Self { client, max_frames }
    }
}

impl ChatBackend for OpenAiChat {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse> {
        if request.messages.is_empty() {
            return Err(Error::InvalidInput("chat request has no messages".into()));
        }
        let body = chat_body(&self.client.endpoint.model, request);
        parse_chat_response(&self.client.post("chat/completions", &body)?)
    }
}

impl VisionBackend for OpenAiChat {
    fn max_frames(&self) -> usize {
        self.max_frames
    }

    fn answer(&self, request: &VisionRequest) -> Result<String> {
        let mut parts = vec![json!({ "type": "text", "text": request.prompt })];
        for frame in &request.frames {
            parts.push(json!({ "type": "image_url", "image_url": { "url": data_url(frame)? } }));
        }
        let body = json!({
            "model": self.client.endpoint.model,
            "messages": [{ "role": "user", "content": parts }],
        });
        match parse_chat_response(&self.client.post("chat/completions", &body)?)? {
            ChatResponse::Text(t) if !t.is_empty() => Ok(t),
            _ => Err(Error::BackendRefusal("vision model returned no text".into())),
        }
    }
}

pub struct OpenAiEmbedder {
    client: OpenAiClient,
    dimension: usize,
}

impl OpenAiEmbedder {
    pub fn new(client: OpenAiClient) -> Result<Self> {
        let dimension = client.endpoint.dimension.ok_or_else(|| {
            Error::InvalidInput(format!("embedding endpoint {} needs a dimension", client.endpoint.model))
        })?;
        Ok(Self { client, dimension })
    }

    fn embed_inputs(&self, input: Value) -> Result<Vec<Vec<f32>>> {
        let body = json!({ "model": self.client.endpoint.model, "input": input });
        let resp = self.client.post("embeddings", &body)?;
        let data = resp["data"]
            .as_array()
            .ok_or_else(|| Error::BackendRefusal("embeddings response has no data".into()))?;
        data.iter()
            .map(|d| {
                let v: Vec<f32> = d["embedding"]
                    .as_array()
                    .ok_or_else(|| Error::BackendRefusal("embedding entry without vector".into()))?
                    .iter()
                    .map(|x| x.as_f64().map(|f| f as f32))
                    .collect::<Option<_>>()
                    .ok_or_else(|| Error::BackendRefusal("non-numeric embedding".into()))?;
                if v.len() != self.dimension {
                    return Err(Error::DimensionMismatch { expected: self.dimension, actual: v.len() });
                }
                Ok(v)
            })
            .collect()
    }
}

impl Embedder for OpenAiEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        self.embed_inputs(json!(text))?
            .pop()
            .ok_or_else(|| Error::BackendRefusal("empty embeddings response".into()))
    }

    fn embed_frames(&self, frames: &[FrameRef]) -> Result<Vec<f32>> {
        let urls = frames.iter().map(data_url).collect::<Result<Vec<_>>>()?;
        let vectors = self.embed_inputs(json!(urls))?;
        if vectors.is_empty() {
            return Err(Error::BackendRefusal("empty embeddings response".into()));
        }
        let mut mean = vec![0.0f32; self.dimension];
        for v in &vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / vectors.len() as f32;
            }
        }
        Ok(mean)
    }
}
