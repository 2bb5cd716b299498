//! Contracts for the external model services and their implementations.
//!
//! Four kinds of service are used:
//!
//! * chat: a "builder" model for index construction and a "reasoner" model
//!   for planning and scene browsing;
//! * vision: frame-grounded answering, used for segment captioning and for
//!   visual inspection at question time;
//! * text embedding, for segment texts, entity descriptions and re-captions;
//! * cross-modal embedding, which places frame sets and text queries in one
//!   space for visual search.
//!
//! Callers go through [`embed_text`], [`embed_frames`] and [`vision_answer`],
//! which enforce payload, dimension and frame-budget contracts regardless of
//! the implementation behind the trait object.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::FrameRef;

pub mod http;
pub mod mock;
mod structured;

pub use structured::{chat_json, chat_text, extract_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// A function the model may call, described by a JSON schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tools: Vec<ToolSchema>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self { messages, ..Default::default() }
    }

    pub fn offers_tool(&self, name: &str) -> bool {
        self.tools.iter().any(|t| t.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub name: String,
    pub arguments: Map<String, Value>,
    /// Free text the model emitted next to the call, if any.
    #[serde(default)]
    pub thought: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatResponse {
    Text(String),
    ToolCall(ToolInvocation),
}

impl ChatResponse {
    pub fn text(&self) -> Option<&str> {
        match self {
            ChatResponse::Text(t) => Some(t),
            ChatResponse::ToolCall(_) => None,
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionRequest {
    pub prompt: String,
    pub frames: Vec<FrameRef>,
}

pub trait VisionBackend: Send + Sync {
    /// Largest number of frames one request may carry.
    fn max_frames(&self) -> usize;
    fn answer(&self, request: &VisionRequest) -> Result<String>;
}

pub trait Embedder: Send + Sync {
    /// Fixed for the lifetime of the instance.
    fn dimension(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
    fn embed_frames(&self, frames: &[FrameRef]) -> Result<Vec<f32>>;
}

/// The full set of services an index build or agent run talks to.
#[derive(Clone)]
pub struct Backends {
    pub builder: Arc<dyn ChatBackend>,
    pub reasoner: Arc<dyn ChatBackend>,
    pub captioner: Arc<dyn VisionBackend>,
    pub inspector: Arc<dyn VisionBackend>,
    pub text_embedder: Arc<dyn Embedder>,
    pub visual_embedder: Arc<dyn Embedder>,
}

impl Backends {
    /// Deterministic offline backends; see [`mock`].
    pub fn mock(text_dim: usize, visual_dim: usize, max_frames: usize) -> Self {
        let chat: Arc<dyn ChatBackend> = Arc::new(mock::HeuristicChat);
        let vision: Arc<dyn VisionBackend> = Arc::new(mock::HeuristicVision::new(max_frames));
        Self {
            builder: chat.clone(),
            reasoner: chat,
            captioner: vision.clone(),
            inspector: vision,
            text_embedder: Arc::new(mock::HashEmbedder::new(text_dim)),
            visual_embedder: Arc::new(mock::HashEmbedder::new(visual_dim)),
        }
    }
}

pub(crate) fn l2_normalize(v: &mut [f32]) -> bool {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    true
}

fn check_embedding(embedder: &dyn Embedder, mut v: Vec<f32>) -> Result<Vec<f32>> {
    let dim = embedder.dimension();
    if v.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, actual: v.len() });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::BackendRefusal("embedding contains non-finite values".into()));
    }
    if !l2_normalize(&mut v) {
        return Err(Error::BackendRefusal("embedding has zero norm".into()));
    }
    Ok(v)
}

/// Embeds non-empty text and returns a unit vector of the declared dimension.
pub fn embed_text(embedder: &dyn Embedder, text: &str) -> Result<Vec<f32>> {
    if text.trim().is_empty() {
        return Err(Error::EmptyPayload("text"));
    }
    let v = embedder.embed_text(text)?;
    check_embedding(embedder, v)
}

pub fn embed_frames(embedder: &dyn Embedder, frames: &[FrameRef]) -> Result<Vec<f32>> {
    if frames.is_empty() {
        return Err(Error::EmptyPayload("frames"));
    }
    let v = embedder.embed_frames(frames)?;
    check_embedding(embedder, v)
}

pub fn vision_answer(backend: &dyn VisionBackend, request: &VisionRequest) -> Result<String> {
    let cap = backend.max_frames();
    if request.frames.is_empty() {
        return Err(Error::EmptyPayload("frames"));
    }
    if request.frames.len() > cap {
        return Err(Error::FrameBudgetExceeded { requested: request.frames.len(), cap });
    }
    backend.answer(request)
}

#[cfg(test)]
mod tests {
    use super::mock::{HashEmbedder, ScriptedVision};
    use super::*;

    fn frames(n: usize) -> Vec<FrameRef> {
        (0..n)
            .map(|i| FrameRef { timestamp_s: i as f64, path: format!("{i}.jpg").into() })
            .collect()
    }

    #[test]
    fn vision_frame_budget() {
        let v = ScriptedVision::new(50, ["ok"]);
        assert!(matches!(
            vision_answer(&v, &VisionRequest { prompt: "q".into(), frames: frames(51) }),
            Err(Error::FrameBudgetExceeded { requested: 51, cap: 50 })
        ));
        assert!(matches!(
            vision_answer(&v, &VisionRequest { prompt: "q".into(), frames: vec![] }),
            Err(Error::EmptyPayload(_))
        ));
        assert_eq!(
            vision_answer(&v, &VisionRequest { prompt: "q".into(), frames: frames(50) }).unwrap(),
            "ok"
        );
    }

    struct WrongDim;
    impl Embedder for WrongDim {
        fn dimension(&self) -> usize {
            4
        }
        fn embed_text(&self, _: &str) -> Result<Vec<f32>> {
            Ok(vec![1.0; 3])
        }
        fn embed_frames(&self, _: &[FrameRef]) -> Result<Vec<f32>> {
            Ok(vec![0.0; 4])
        }
    }

    #[test]
    fn embedding_contracts_enforced() {
        assert!(matches!(
            embed_text(&WrongDim, "x"),
            Err(Error::DimensionMismatch { expected: 4, actual: 3 })
        ));
        assert!(matches!(embed_frames(&WrongDim, &frames(1)), Err(Error::BackendRefusal(_))));
        assert!(matches!(embed_text(&HashEmbedder::new(8), "  "), Err(Error::EmptyPayload(_))));
    }
}
