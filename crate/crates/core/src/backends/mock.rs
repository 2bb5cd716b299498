//! Deterministic offline backends.
//!
//! * [`HashEmbedder`] hashes whitespace tokens into signed buckets.
//! * [`ScriptedChat`] / [`ScriptedVision`] replay a fixed queue of replies.
//! * [`RecordingChat`] / [`ReplayChat`] capture a session and serve it back.
//! * [`HeuristicChat`] / [`HeuristicVision`] answer every builder and
//!   reasoner task with simple rules over their inputs, so that a whole
//!   index build and agent run can execute without a model. Frames are read
//!   as UTF-8 text files describing what is "visible".
//!
//! Fixture frame files use one fact per line. A line of the form
//! `Name (category[, SPEAKER_LABEL]): description` declares an entity; the
//! first line of a segment's caption is treated as its setting.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use super::{
    ChatBackend, ChatRequest, ChatResponse, Embedder, Role, ToolInvocation, VisionBackend,
    VisionRequest,
};
use crate::agent::prompt as planner;
use crate::error::{Error, Result};
use crate::ingestion::CAPTION_HEADER;
use crate::model::FrameRef;
use crate::prompts;
use crate::time::render_timecode;

/// Lowercased alphanumeric tokens of `text`.
pub fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

fn token_set(text: &str) -> BTreeSet<String> {
    tokens(text).into_iter().collect()
}

fn overlap(a: &BTreeSet<String>, text: &str) -> usize {
    token_set(text).intersection(a).count()
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "at", "by", "do", "does", "for", "from", "has", "have", "how", "in", "is", "it", "of",
    "on", "or", "the", "their", "this", "to", "what", "when", "where", "which", "who", "why", "with",
];

fn content_set(text: &str) -> BTreeSet<String> {
    tokens(text).into_iter().filter(|t| !STOPWORDS.contains(&t.as_str())).collect()
}

/// Bag-of-tokens embedder: each token lands in one of `dim` buckets with a
/// ±1 sign taken from its SHA-256 digest.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    fn accumulate(&self, acc: &mut [f64], token: &str) {
        let digest = Sha256::digest(token.as_bytes());
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        let bucket = (u64::from_le_bytes(word) % self.dim as u64) as usize;
        acc[bucket] += if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
    }

    fn vector_for(&self, text: &str) -> Vec<f32> {
        let toks = tokens(text);
        let mut acc = vec![0.0f64; self.dim];
        for t in &toks {
            self.accumulate(&mut acc, t);
        }
        if acc.iter().all(|x| *x == 0.0) {
            // No tokens, or every token cancelled out.
            self.accumulate(&mut acc, &format!("\u{0}{text}"));
        }
        let count = toks.len().max(1) as f64;
        let norm = acc.iter().map(|x| (x / count).powi(2)).sum::<f64>().sqrt();
        acc.iter().map(|x| (x / count / norm) as f32).collect()
    }

    fn frame_key(frame: &FrameRef) -> String {
        match fs::read(&frame.path).ok().and_then(|b| String::from_utf8(b).ok()) {
            Some(text) if !text.trim().is_empty() => text,
            _ => frame
                .path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        }
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        if text.trim().is_empty() {
            return Err(Error::EmptyPayload("text"));
        }
        Ok(self.vector_for(text))
    }

    /// Mean of per-frame vectors. Frames are summed in a canonical order so
    /// the result does not depend on how the list is permuted.
    fn embed_frames(&self, frames: &[FrameRef]) -> Result<Vec<f32>> {
        if frames.is_empty() {
            return Err(Error::EmptyPayload("frames"));
        }
        let mut keys: Vec<String> = frames.iter().map(Self::frame_key).collect();
        keys.sort();
        let mut acc = vec![0.0f64; self.dim];
        for key in &keys {
            for (a, x) in acc.iter_mut().zip(self.vector_for(key)) {
                *a += x as f64;
            }
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(self.vector_for(&keys.join("\n")));
        }
        Ok(acc.iter().map(|x| (x / norm) as f32).collect())
    }
}

/// Chat backend that pops replies from a queue. An `Err` entry simulates a
/// transport failure.
#[derive(Default)]
pub struct ScriptedChat {
    replies: Mutex<VecDeque<std::result::Result<ChatResponse, String>>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChat {
    pub fn new(replies: impl IntoIterator<Item = ChatResponse>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().map(Ok).collect()),
            seen: Mutex::default(),
        }
    }

    pub fn from_texts<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        Self::new(texts.into_iter().map(|t| ChatResponse::Text(t.into())))
    }

    pub fn push(&self, reply: ChatResponse) {
        self.replies.lock().unwrap().push_back(Ok(reply));
    }

    pub fn push_failure(&self, message: impl Into<String>) {
        self.replies.lock().unwrap().push_back(Err(message.into()));
    }

    /// Every request received so far, in order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().unwrap().clone()
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().unwrap().len()
    }
}

impl ChatBackend for ScriptedChat {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse> {
        if request.messages.is_empty() {
            return Err(Error::InvalidInput("chat request has no messages".into()));
        }
        self.seen.lock().unwrap().push(request.clone());
        match self.replies.lock().unwrap().pop_front() {
            Some(Ok(reply)) => Ok(reply),
            Some(Err(msg)) => Err(Error::BackendUnavailable(msg)),
            None => Err(Error::BackendUnavailable("script exhausted".into())),
        }
    }
}

/// Builds a tool-call reply for scripts.
pub fn tool_call(name: &str, arguments: Value) -> ChatResponse {
    let arguments = match arguments {
        Value::Object(map) => map,
        other => {
            let mut m = Map::new();
            m.insert("value".into(), other);
            m
        }
    };
    ChatResponse::ToolCall(ToolInvocation { name: name.into(), arguments, thought: None })
}

pub struct ScriptedVision {
    max_frames: usize,
    replies: Mutex<VecDeque<String>>,
    seen: Mutex<Vec<VisionRequest>>,
}

impl ScriptedVision {
    pub fn new<S: Into<String>>(max_frames: usize, replies: impl IntoIterator<Item = S>) -> Self {
        Self {
            max_frames,
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
            seen: Mutex::default(),
        }
    }

    pub fn requests(&self) -> Vec<VisionRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl VisionBackend for ScriptedVision {
    fn max_frames(&self) -> usize {
        self.max_frames
    }

    fn answer(&self, request: &VisionRequest) -> Result<String> {
        self.seen.lock().unwrap().push(request.clone());
        self.replies
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| Error::BackendUnavailable("script exhausted".into()))
    }
}

/// Chat backend backed by a closure.
pub struct FnChat<F>(pub F);

impl<F> ChatBackend for FnChat<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse> + Send + Sync,
{
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse> {
        (self.0)(request)
    }
}

/// One request/response pair of a recorded session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub request: ChatRequest,
    pub response: ChatResponse,
}

/// Passes calls through to `inner` and keeps every successful exchange.
pub struct RecordingChat<B> {
    inner: B,
    log: Mutex<Vec<Exchange>>,
}

impl<B: ChatBackend> RecordingChat<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, log: Mutex::default() }
    }

    pub fn exchanges(&self) -> Vec<Exchange> {
        self.log.lock().unwrap().clone()
    }

    /// Writes the session as one JSON record per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for ex in self.log.lock().unwrap().iter() {
            let line = serde_json::to_string(ex)?;
            writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

impl<B: ChatBackend> ChatBackend for RecordingChat<B> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let response = self.inner.chat(request)?;
        self.log.lock().unwrap().push(Exchange { request: request.clone(), response: response.clone() });
        Ok(response)
    }
}

/// Serves recorded responses keyed by the exact serialized request.
/// Identical requests are answered in recording order.
pub struct ReplayChat {
    by_request: Mutex<HashMap<String, VecDeque<ChatResponse>>>,
}

impl ReplayChat {
    pub fn new(exchanges: impl IntoIterator<Item = Exchange>) -> Self {
        let mut by_request: HashMap<String, VecDeque<ChatResponse>> = HashMap::new();
        for ex in exchanges {
            let key = serde_json::to_string(&ex.request).expect("requests serialize");
            by_request.entry(key).or_default().push_back(ex.response);
        }
        Self { by_request: Mutex::new(by_request) }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut exchanges = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            exchanges.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self::new(exchanges))
    }
}

impl ChatBackend for ReplayChat {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let key = serde_json::to_string(request)?;
        self.by_request
            .lock()
            .unwrap()
            .get_mut(&key)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| Error::BackendUnavailable("no recorded response for request".into()))
    }
}

fn entity_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^(?P<name>[^():\n]+?) \((?P<cat>character|location|event|other)(?:, (?P<spk>[A-Za-z0-9_\-]+))?\): (?P<desc>.+)$",
        )
        .unwrap()
    })
}

fn option_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\(?([A-F])[).:]\s+(.+)$").unwrap())
}

struct EntityLine<'a> {
    name: &'a str,
    category: &'a str,
    speaker: Option<&'a str>,
    description: &'a str,
}

fn entity_lines(text: &str) -> Vec<EntityLine<'_>> {
    text.lines()
        .filter_map(|line| {
            let c = entity_line_re().captures(line.trim())?;
            Some(EntityLine {
                name: c.name("name")?.as_str().trim(),
                category: c.name("cat")?.as_str(),
                speaker: c.name("spk").map(|m| m.as_str()),
                description: c.name("desc")?.as_str().trim(),
            })
        })
        .collect()
}

/// Caption block of a composed segment text.
fn caption_block(composed: &str) -> &str {
    composed
        .find(CAPTION_HEADER)
        .map(|at| &composed[at + CAPTION_HEADER.len()..])
        .unwrap_or(composed)
        .trim()
}

fn setting_of(composed: &str) -> &str {
    caption_block(composed).lines().next().unwrap_or("").trim()
}

fn dedup_join<'a>(items: impl IntoIterator<Item = &'a str>, sep: &str) -> String {
    let mut seen = BTreeSet::new();
    items
        .into_iter()
        .map(str::trim)
        .filter(|s| !s.is_empty() && seen.insert(s.to_string()))
        .collect::<Vec<_>>()
        .join(sep)
}

fn section<'a>(text: &'a str, header: &str) -> Option<&'a str> {
    let at = text.find(header)?;
    let rest = &text[at + header.len()..];
    let end = rest.find("\n\n## ").unwrap_or(rest.len());
    Some(rest[..end].trim())
}

/// The memory block runs to the end of the message and may itself contain
/// `## ` headers from composed segment texts.
fn memory_of(user: &str) -> &str {
    user.find(planner::MEMORY_HEADER).map_or("", |at| user[at + planner::MEMORY_HEADER.len()..].trim())
}

fn options_of(question: &str) -> Vec<(String, String)> {
    question
        .lines()
        .filter_map(|l| {
            let c = option_line_re().captures(l)?;
            Some((c[1].to_string(), c[2].trim().to_string()))
        })
        .collect()
}

/// Option best supported by the evidence lines that mention the question's
/// content words: each line contributes its question overlap times its
/// option overlap. Ties go to the earliest label.
fn best_option(options: &[(String, String)], question: &str, evidence: &str) -> Option<String> {
    let q = content_set(question);
    let lines: Vec<(usize, BTreeSet<String>)> = evidence
        .lines()
        .map(|l| (overlap(&q, l).max(usize::from(q.is_empty())), content_set(l)))
        .filter(|(w, _)| *w > 0)
        .collect();
    let mut best: Option<(usize, &str)> = None;
    for (label, text) in options {
        let o = content_set(text);
        let score: usize = lines.iter().map(|(w, l)| w * l.intersection(&o).count()).sum();
        if best.map_or(true, |(s, _)| score > s) {
            best = Some((score, label));
        }
    }
    best.map(|(_, l)| l.to_string())
}

/// Rule-based stand-in for both chat roles.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicChat;

impl HeuristicChat {
    fn builder_reply(task: &str, input: &Value) -> Result<String> {
        let s = |v: &Value| v.as_str().unwrap_or_default().to_string();
        let reply = match task {
            prompts::EXTRACT_ENTITIES => {
                let text = s(&input["text"]);
                let speakers: BTreeSet<String> = input["speakers"]
                    .as_array()
                    .map(|a| a.iter().map(s).collect())
                    .unwrap_or_default();
                let entities: Vec<Value> = entity_lines(caption_block(&text))
                    .into_iter()
                    .map(|e| {
                        let spk: Vec<&str> =
                            e.speaker.filter(|l| speakers.contains(*l)).into_iter().collect();
                        json!({
                            "name": e.name,
                            "category": e.category,
                            "description": e.description,
                            "speakers": spk,
                        })
                    })
                    .collect();
                json!({ "entities": entities }).to_string()
            }
            prompts::CANONICALIZE => {
                let mut groups: Vec<(String, Vec<String>, Vec<u64>)> = Vec::new();
                for m in input["mentions"].as_array().into_iter().flatten() {
                    let name = s(&m["name"]);
                    let key = name.to_lowercase();
                    let id = m["id"].as_u64().unwrap_or_default();
                    match groups.iter_mut().find(|(n, _, _)| n.to_lowercase() == key) {
                        Some(g) => {
                            g.1.push(s(&m["description"]));
                            g.2.push(id);
                        }
                        None => groups.push((name, vec![s(&m["description"])], vec![id])),
                    }
                }
                let groups: Vec<Value> = groups
                    .into_iter()
                    .map(|(name, descs, members)| {
                        json!({
                            "name": name,
                            "description": dedup_join(descs.iter().map(String::as_str), "; "),
                            "members": members,
                        })
                    })
                    .collect();
                json!({ "groups": groups }).to_string()
            }
            prompts::MERGE_ENTITIES => {
                let list = input["entities"].as_array().cloned().unwrap_or_default();
                let name = list.first().map(|e| s(&e["name"])).unwrap_or_default();
                let descs: Vec<String> = list.iter().map(|e| s(&e["description"])).collect();
                json!({
                    "name": name,
                    "description": dedup_join(descs.iter().map(String::as_str), " | "),
                })
                .to_string()
            }
            prompts::RECAPTION => {
                let name = s(&input["entity"]["name"]);
                let text = s(&input["segment"]["text"]);
                let needle = name.to_lowercase();
                let lines = text
                    .lines()
                    .filter(|l| !needle.is_empty() && l.to_lowercase().contains(&needle));
                let joined = dedup_join(lines, "\n");
                if joined.is_empty() {
                    format!("{name} appears during {}.", s(&input["segment"]["span"]))
                } else {
                    joined
                }
            }
            prompts::SCENE_BOUNDARIES => {
                let segs = input["segments"].as_array().cloned().unwrap_or_default();
                let mut boundaries = Vec::new();
                let mut prev: Option<String> = None;
                for seg in &segs {
                    let index = seg["index"].as_u64().unwrap_or_default();
                    let setting = setting_of(seg["text"].as_str().unwrap_or_default()).to_string();
                    let starts = match &prev {
                        None => index == 0,
                        Some(p) => *p != setting,
                    };
                    if starts {
                        boundaries.push(index);
                    }
                    prev = Some(setting);
                }
                json!({ "boundaries": boundaries }).to_string()
            }
            prompts::SUMMARIZE_SCENE => {
                let texts: Vec<String> = input["segments"]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .map(|t| setting_of(t.as_str().unwrap_or_default()).to_string())
                    .collect();
                format!(
                    "Scene {}: {}",
                    s(&input["span"]),
                    dedup_join(texts.iter().map(String::as_str), "; ")
                )
            }
            prompts::SUMMARIZE_GLOBAL => {
                let scenes = input["scenes"].as_array().cloned().unwrap_or_default();
                let body: Vec<String> = scenes.iter().map(|sc| s(&sc["summary"])).collect();
                format!("The video has {} scene(s). {}", scenes.len(), body.join(" "))
            }
            prompts::SCENE_BROWSE => {
                let query = token_set(&s(&input["query"]));
                let scenes = input["scenes"].as_array().cloned().unwrap_or_default();
                let mut best: Option<(usize, &Value)> = None;
                for sc in &scenes {
                    let score = overlap(&query, sc["summary"].as_str().unwrap_or_default());
                    if best.map_or(true, |(b, _)| score > b) {
                        best = Some((score, sc));
                    }
                }
                match best {
                    Some((_, sc)) => json!({
                        "scene_ids": [sc["id"].clone()],
                        "response": format!("Scene {} ({}): {}", sc["id"], s(&sc["span"]), s(&sc["summary"])),
                    })
                    .to_string(),
                    None => json!({"scene_ids": [], "response": "No scenes."}).to_string(),
                }
            }
            prompts::CLARIFY_ANSWER => {
                let answer = s(&input["answer"]);
                let options: Vec<(String, String)> = input["options"]
                    .as_object()
                    .map(|m| m.iter().map(|(k, v)| (k.clone(), s(v))).collect())
                    .unwrap_or_default();
                best_option(&options, "", &answer).unwrap_or_default()
            }
            other => {
                return Err(Error::BackendRefusal(format!("heuristic backend has no rule for task {other}")))
            }
        };
        Ok(reply)
    }

    /// Planner policy: search captions for the question once, then answer.
    fn plan(request: &ChatRequest) -> Result<ChatResponse> {
        let user = last_user(request);
        let question = section(user, planner::QUESTION_HEADER).unwrap_or_default();
        let memory = memory_of(user);
        let steps = memory.matches(planner::STEP_MARKER).count();
        if steps == 0 && request.offers_tool("clip_caption_search_wtime_tool") {
            let whole = user
                .lines()
                .find_map(|l| l.strip_prefix(planner::WHOLE_RANGE_PREFIX))
                .and_then(|r| serde_json::from_str::<Value>(r).ok())
                .unwrap_or_else(|| json!(["00:00:00", "00:00:01"]));
            let stem = question.lines().next().unwrap_or(question);
            return Ok(ChatResponse::ToolCall(ToolInvocation {
                name: "clip_caption_search_wtime_tool".into(),
                arguments: json!({ "query": stem, "time_ranges": [whole] })
                    .as_object()
                    .cloned()
                    .unwrap_or_default(),
                thought: Some("Search captions and transcripts for the question's key terms.".into()),
            }));
        }
        let answer = Self::best_answer(question, memory, user);
        if request.offers_tool("finish") {
            Ok(ChatResponse::ToolCall(ToolInvocation {
                name: "finish".into(),
                arguments: json!({ "answer": answer }).as_object().cloned().unwrap_or_default(),
                thought: Some("The observations are enough to answer.".into()),
            }))
        } else {
            Ok(ChatResponse::Text(answer))
        }
    }

    fn best_answer(question: &str, memory: &str, user: &str) -> String {
        let options = options_of(question);
        let stem = question.lines().next().unwrap_or_default();
        let evidence = if memory.is_empty() {
            section(user, planner::SUMMARY_HEADER).unwrap_or_default()
        } else {
            memory
        };
        best_option(&options, stem, evidence).unwrap_or_else(|| {
            evidence
                .lines()
                .find(|l| !l.trim().is_empty() && !l.starts_with("###"))
                .unwrap_or("unknown")
                .trim()
                .to_string()
        })
    }
}

fn last_user(request: &ChatRequest) -> &str {
    request
        .messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
        .unwrap_or_default()
}

impl ChatBackend for HeuristicChat {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let system = request
            .messages
            .iter()
            .find(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        match prompts::task_of(system) {
            Some(prompts::FORCED_ANSWER) => {
                let user = last_user(request);
                let question = section(user, planner::QUESTION_HEADER).unwrap_or_default();
                let memory = memory_of(user);
                Ok(ChatResponse::Text(Self::best_answer(question, memory, user)))
            }
            Some(task) => {
                // Re-prompts append messages; the original input stays in
                // the first user message.
                let input = request
                    .messages
                    .iter()
                    .find(|m| m.role == Role::User)
                    .and_then(|m| prompts::input_of(&m.content))
                    .unwrap_or(Value::Null);
                Self::builder_reply(task, &input).map(ChatResponse::Text)
            }
            None if !request.tools.is_empty() => Self::plan(request),
            None => Err(Error::BackendRefusal("heuristic backend cannot identify the task".into())),
        }
    }
}

/// Rule-based vision: "sees" the text content of frame files.
#[derive(Debug, Clone)]
pub struct HeuristicVision {
    max_frames: usize,
}

impl HeuristicVision {
    pub fn new(max_frames: usize) -> Self {
        Self { max_frames }
    }
}

fn frame_lines(frames: &[FrameRef]) -> Vec<String> {
    let mut lines = Vec::new();
    for f in frames {
        if let Ok(text) = fs::read_to_string(&f.path) {
            lines.extend(text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()));
        }
    }
    let mut seen = BTreeSet::new();
    lines.retain(|l| seen.insert(l.clone()));
    lines
}

impl VisionBackend for HeuristicVision {
    fn max_frames(&self) -> usize {
        self.max_frames
    }

    fn answer(&self, request: &VisionRequest) -> Result<String> {
        let input = prompts::input_of(&request.prompt).unwrap_or(Value::Null);
        let lines = frame_lines(&request.frames);
        match prompts::task_of(&request.prompt) {
            Some(prompts::CAPTION_SEGMENT) => {
                let caption = if lines.is_empty() {
                    let first = request.frames.first().map(|f| f.timestamp_s).unwrap_or(0.0);
                    format!("Frames from {} show nothing recognizable.", render_timecode(first))
                } else {
                    lines.join("\n")
                };
                let mut fused: BTreeMap<String, String> = BTreeMap::new();
                for spk in input["speakers"].as_array().into_iter().flatten() {
                    let label = spk.as_str().unwrap_or_default();
                    let who = entity_lines(&caption)
                        .into_iter()
                        .find(|e| e.speaker == Some(label))
                        .map(|e| format!("{label} is {}, {}", e.name, e.description))
                        .unwrap_or_else(|| format!("{label} is heard but not clearly visible"));
                    fused.insert(label.to_string(), who);
                }
                let speaker_info = fused.into_values().collect::<Vec<_>>().join("\n");
                Ok(json!({ "caption": caption, "speaker_info": speaker_info }).to_string())
            }
            _ => {
                let question = token_set(input["question"].as_str().unwrap_or(&request.prompt));
                let relevant: Vec<&str> = lines
                    .iter()
                    .map(String::as_str)
                    .filter(|l| overlap(&question, l) > 0)
                    .collect();
                Ok(if !relevant.is_empty() {
                    relevant.join("; ")
                } else if !lines.is_empty() {
                    lines.join("; ")
                } else {
                    "Nothing recognizable in the frames.".into()
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{embed_frames, embed_text, ChatMessage};
    use crate::store::cosine;
    use rand::{Rng, SeedableRng};

    #[test]
    fn hash_embedder_is_deterministic_and_normalized() {
        let e = HashEmbedder::new(64);
        let a = embed_text(&e, "a host walks on stage").unwrap();
        let b = embed_text(&e, "a host walks on stage").unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn hash_embedder_separates_random_strings() {
        let e = HashEmbedder::new(128);
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let word = |rng: &mut rand::rngs::StdRng| -> String {
            (0..rng.gen_range(3..9)).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
        };
        for _ in 0..100 {
            let s1: Vec<String> = (0..4).map(|_| word(&mut rng)).collect();
            let s2: Vec<String> = (0..4).map(|_| word(&mut rng)).collect();
            if s1 == s2 {
                continue;
            }
            let u = embed_text(&e, &s1.join(" ")).unwrap();
            let v = embed_text(&e, &s2.join(" ")).unwrap();
            assert!(cosine(&u, &v).unwrap() < 1.0 - 1e-9, "{s1:?} vs {s2:?}");
        }
    }

    #[test]
    fn frame_embedding_ignores_order() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<FrameRef> = (0..5)
            .map(|i| {
                let path = dir.path().join(format!("{i}.txt"));
                fs::write(&path, format!("frame {i} shows object {}", i * 7)).unwrap();
                FrameRef { timestamp_s: i as f64, path }
            })
            .collect();
        let e = HashEmbedder::new(32);
        let a = embed_frames(&e, &frames).unwrap();
        assert_eq!(a, embed_frames(&e, &frames).unwrap());
        let mut permuted = frames.clone();
        permuted.reverse();
        permuted.swap(0, 2);
        assert_eq!(a, embed_frames(&e, &permuted).unwrap());
        assert!(matches!(embed_frames(&e, &[]), Err(Error::EmptyPayload(_))));
    }

    #[test]
    fn scripted_chat_pops_in_order() {
        let chat = ScriptedChat::from_texts(["A", "B"]);
        let req = ChatRequest::new(vec![ChatMessage::user("hi")]);
        assert_eq!(chat.chat(&req).unwrap(), ChatResponse::Text("A".into()));
        assert_eq!(chat.chat(&req).unwrap(), ChatResponse::Text("B".into()));
        assert!(matches!(chat.chat(&req), Err(Error::BackendUnavailable(_))));
    }

    #[test]
    fn scripted_tool_choice() {
        let chat = ScriptedChat::new([tool_call("global_scene_browse_tool", json!({"query": "songs"}))]);
        let tools = crate::tools::tool_schemas();
        assert_eq!(tools.len(), 7);
        let req = ChatRequest { messages: vec![ChatMessage::user("q")], tools, max_output_tokens: None };
        match chat.chat(&req).unwrap() {
            ChatResponse::ToolCall(call) => {
                assert_eq!(call.name, "global_scene_browse_tool");
                assert!(req.offers_tool(&call.name));
            }
            other => panic!("expected tool call, got {other:?}"),
        }
    }

    #[test]
    fn record_then_replay_reproduces_responses() {
        let rec = RecordingChat::new(HeuristicChat);
        let reqs: Vec<ChatRequest> = [
            json!({"query": "guitar", "scenes": [{"id": 0, "span": "a", "summary": "guitar solo"}]}),
            json!({"query": "drums", "scenes": [{"id": 0, "span": "a", "summary": "drum"}]}),
        ]
        .iter()
        .map(|input| prompts::request(prompts::SCENE_BROWSE, input))
        .collect();
        let originals: Vec<ChatResponse> = reqs.iter().map(|r| rec.chat(r).unwrap()).collect();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("session.jsonl");
        rec.save(&path).unwrap();
        let replay = ReplayChat::load(&path).unwrap();
        for (r, o) in reqs.iter().zip(&originals) {
            assert_eq!(&replay.chat(r).unwrap(), o);
        }
        assert!(matches!(replay.chat(&reqs[0]), Err(Error::BackendUnavailable(_))));
    }

    #[test]
    fn heuristic_extraction_reads_entity_lines() {
        let text = format!(
            "{CAPTION_HEADER}Setting: studio\nAnna (character, SPEAKER_00): host in a red dress\nStudio (location): bright set"
        );
        let req = prompts::request(
            prompts::EXTRACT_ENTITIES,
            &json!({"segment_index": 0, "speakers": ["SPEAKER_00"], "text": text}),
        );
        let reply = HeuristicChat.chat(&req).unwrap();
        let v = crate::backends::extract_json(reply.text().unwrap()).unwrap();
        let ents = v["entities"].as_array().unwrap();
        assert_eq!(ents.len(), 2);
        assert_eq!(ents[0]["category"], "character");
        assert_eq!(ents[0]["speakers"][0], "SPEAKER_00");
        assert_eq!(ents[1]["speakers"].as_array().unwrap().len(), 0);
    }
}
