//! Hierarchical indexing and agentic question answering over long videos.
//!
//! A video is cut into fixed-length segments, each captioned and fused with
//! its diarized transcript. Segments feed three further levels: canonical
//! entities with per-segment re-captions, scenes, and a global summary. At
//! question time an agent plans over six retrieval and inspection tools
//! until it can answer.

pub mod agent;
pub mod backends;
pub mod bundle;
pub mod entity;
pub mod error;
pub mod eval;
pub mod index;
pub mod ingestion;
pub mod model;
pub mod prompts;
pub mod report;
pub mod scene;
pub mod store;
pub mod time;
pub mod tools;

pub use error::{Error, Result};
