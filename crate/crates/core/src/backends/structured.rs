use serde::de::DeserializeOwned;
use serde_json::Value;

use super::{ChatBackend, ChatMessage, ChatRequest, ChatResponse};
use crate::error::{Error, Result};

const JSON_REPROMPT: &str =
    "Your previous reply could not be parsed. Reply with a single valid JSON object only, no prose.";
const TEXT_REPROMPT: &str = "Reply with plain text only; do not call a tool.";

/// Pulls the first JSON object out of a model reply, tolerating code fences
/// and surrounding prose.
pub fn extract_json(text: &str) -> Option<Value> {
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        return Some(v);
    }
    let start = trimmed.find('{')?;
    let end = trimmed.rfind('}')?;
    if end <= start {
        return None;
    }
    serde_json::from_str(&trimmed[start..=end]).ok()
}

fn parse_reply<T: DeserializeOwned>(response: &ChatResponse) -> std::result::Result<T, String> {
    let text = match response {
        ChatResponse::Text(t) => t,
        ChatResponse::ToolCall(call) => return Err(format!("unexpected tool call {}", call.name)),
    };
    let value = extract_json(text).ok_or_else(|| "no JSON object in reply".to_string())?;
    serde_json::from_value(value).map_err(|e| e.to_string())
}

/// Sends `request` and decodes a JSON reply into `T`, re-prompting once on a
/// malformed answer.
pub fn chat_json<T: DeserializeOwned>(backend: &dyn ChatBackend, request: &ChatRequest) -> Result<T> {
    let first = backend.chat(request)?;
    match parse_reply(&first) {
        Ok(v) => Ok(v),
        Err(first_err) => {
            let mut retry = request.clone();
            retry.messages.push(ChatMessage::assistant(reply_text(&first)));
            retry.messages.push(ChatMessage::user(JSON_REPROMPT));
            let second = backend.chat(&retry)?;
            parse_reply(&second).map_err(|e| {
                Error::BackendRefusal(format!("unparseable structured reply ({first_err}; then {e})"))
            })
        }
    }
}

/// Sends `request` and expects non-empty free text back.
pub fn chat_text(backend: &dyn ChatBackend, request: &ChatRequest) -> Result<String> {
    let accept = |r: &ChatResponse| match r {
        ChatResponse::Text(t) if !t.trim().is_empty() => Some(t.trim().to_string()),
        _ => None,
    };
    let first = backend.chat(request)?;
    if let Some(t) = accept(&first) {
        return Ok(t);
    }
    let mut retry = request.clone();
    retry.messages.push(ChatMessage::assistant(reply_text(&first)));
    retry.messages.push(ChatMessage::user(TEXT_REPROMPT));
    let second = backend.chat(&retry)?;
    accept(&second).ok_or_else(|| Error::BackendRefusal("empty or non-text reply".into()))
}

fn reply_text(response: &ChatResponse) -> String {
    match response {
        ChatResponse::Text(t) => t.clone(),
        ChatResponse::ToolCall(call) => {
            format!("{}({})", call.name, serde_json::Value::Object(call.arguments.clone()))
        }
    }
}
