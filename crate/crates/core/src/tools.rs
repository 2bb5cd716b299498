//! The retrieval and inspection tools offered to the planner.
//!
//! Every tool maps a query and optional time ranges to response text plus
//! the segment- or scene-aligned spans it drew on.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tracing::warn;

use crate::backends::{self, chat_json, Backends, ToolSchema, VisionRequest};
use crate::error::{Error, Result};
use crate::ingestion::{span_label, FrameIndex};
use crate::model::{FrameRef, IndexDatabase, QueryConfig};
use crate::prompts;
use crate::store::{parse_entity_key, parse_recaption_key, parse_segment_key, Hit, RecordKind, VectorStore};
use crate::time::{render_timecode, TimeRange};

pub const SCENE_BROWSE: &str = "global_scene_browse_tool";
pub const ENTITY_SEARCH: &str = "entity_search_tool";
pub const CAPTION_SEARCH: &str = "clip_caption_search_wtime_tool";
pub const VISUAL_SEARCH: &str = "clip_visual_search_wtime_tool";
pub const CAPTION_INSPECT: &str = "clip_caption_inspect_tool";
pub const VISUAL_INSPECT: &str = "visual_inspect_tool";
pub const FINISH: &str = "finish";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub response: String,
    pub timestamps: Vec<TimeRange>,
    /// Record ids or scene ids the result was built from.
    pub provenance: Vec<String>,
}

fn ranges_schema() -> Value {
    json!({
        "type": "array",
        "description": "List of [start, end] pairs in HH:MM:SS.",
        "items": {"type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2},
    })
}

fn schema(name: &str, description: &str, properties: Value, required: &[&str]) -> ToolSchema {
    ToolSchema {
        name: name.into(),
        description: description.into(),
        parameters: json!({"type": "object", "properties": properties, "required": required}),
    }
}

/// Schemas for the six tools plus `finish`, in a fixed order.
pub fn tool_schemas() -> Vec<ToolSchema> {
    let query = json!({"type": "string"});
    vec![
        schema(SCENE_BROWSE, "Browse scene summaries to locate scenes and their order.", json!({"query": query}), &["query"]),
        schema(ENTITY_SEARCH, "Find entities related to the query and the clips they appear in.", json!({"query": query}), &["query"]),
        schema(
            CAPTION_SEARCH,
            "Search clip captions and transcripts within time ranges.",
            json!({"query": query, "time_ranges": ranges_schema()}),
            &["query", "time_ranges"],
        ),
        schema(
            VISUAL_SEARCH,
            "Search clips by visual content within time ranges.",
            json!({"query": query, "time_ranges": ranges_schema()}),
            &["query", "time_ranges"],
        ),
        schema(
            CAPTION_INSPECT,
            "Return the captions and transcripts of every clip in the time ranges.",
            json!({"time_ranges": ranges_schema()}),
            &["time_ranges"],
        ),
        schema(
            VISUAL_INSPECT,
            "Answer a question from the video frames in narrow time ranges.",
            json!({"query": query, "time_ranges": ranges_schema()}),
            &["query", "time_ranges"],
        ),
        schema(FINISH, "Give the final answer.", json!({"answer": {"type": "string"}}), &["answer"]),
    ]
}

/// Parses `[["HH:MM:SS","HH:MM:SS"], ...]`, clipping ends to `duration`.
/// An empty list or a range starting at or past the end is rejected.
pub fn parse_time_ranges(value: &Value, duration: f64) -> Result<Vec<TimeRange>> {
    let list = value
        .as_array()
        .ok_or_else(|| Error::InvalidInput("time_ranges must be a list of [start, end] pairs".into()))?;
    if list.is_empty() {
        return Err(Error::InvalidInput("time_ranges is empty".into()));
    }
    list.iter()
        .map(|pair| {
            let (start, end) = match pair.as_array().map(Vec::as_slice) {
                Some([Value::String(a), Value::String(b)]) => (a, b),
                _ => return Err(Error::InvalidInput(format!("time range {pair} is not a pair of HH:MM:SS strings"))),
            };
            let r = TimeRange::from_timecodes(start, end)?;
            if r.start_s >= duration {
                return Err(Error::InvalidInput(format!("time range {r} starts after the video ends")));
            }
            TimeRange::new(r.start_s, r.end_s.min(duration))
        })
        .collect()
}

/// JSON form of a range as the planner writes it.
pub fn range_arg(r: &TimeRange) -> Value {
    json!([render_timecode(r.start_s), render_timecode(r.end_s)])
}

/// Frames for visual inspection: one target per `1/fps` seconds in each
/// range, snapped to the nearest frame inside that range, deduplicated and
/// time-ordered. Over `cap`, keeps positions `floor(j * n / cap)`.
pub fn select_inspection_frames(ranges: &[TimeRange], index: &FrameIndex, fps: f64, cap: usize) -> Vec<FrameRef> {
    let step = 1.0 / fps;
    let mut seen = HashSet::new();
    let mut picked = Vec::new();
    for r in ranges {
        let mut k = 0u64;
        loop {
            let t = r.start_s + k as f64 * step;
            if t >= r.end_s {
                break;
            }
            if let Some(f) = index.nearest_within(r, t) {
                if seen.insert(f.path.clone()) {
                    picked.push(f.clone());
                }
            }
            k += 1;
        }
    }
    picked.sort_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s).then_with(|| a.path.cmp(&b.path)));
    let n = picked.len();
    if n <= cap {
        return picked;
    }
    (0..cap).map(|j| picked[j * n / cap].clone()).collect()
}

/// Tools bound to one index. Cheap to share across threads.
pub struct Toolbox<'a> {
    pub db: &'a IndexDatabase,
    pub backends: &'a Backends,
    pub config: QueryConfig,
    store: VectorStore,
    frames: FrameIndex,
}

#[derive(Deserialize)]
struct SceneSelection {
    #[serde(default)]
    scene_ids: Vec<i64>,
    #[serde(default)]
    response: String,
}

impl<'a> Toolbox<'a> {
    pub fn new(db: &'a IndexDatabase, backends: &'a Backends, config: QueryConfig) -> Result<Self> {
        let frames = FrameIndex::scan(&db.manifest.frames_dir).unwrap_or_else(|e| {
            warn!(error = %e, "frames unavailable; visual inspection will fail");
            FrameIndex::default()
        });
        Self::with_frames(db, backends, config, frames)
    }

    pub fn with_frames(db: &'a IndexDatabase, backends: &'a Backends, config: QueryConfig, frames: FrameIndex) -> Result<Self> {
        Ok(Self { db, backends, config, store: VectorStore::from_database(db)?, frames })
    }

    pub fn store(&self) -> &VectorStore {
        &self.store
    }

    fn duration(&self) -> f64 {
        self.db.duration_s()
    }

    fn segment_range(&self, i: usize) -> TimeRange {
        self.db.segments[i].range
    }

    /// Segment spans overlapping `ranges`, in order.
    fn segments_in(&self, ranges: &[TimeRange]) -> Vec<usize> {
        self.db
            .segments
            .iter()
            .filter(|s| ranges.iter().any(|r| r.intersects(&s.range)))
            .map(|s| s.index)
            .collect()
    }

    pub fn scene_browse(&self, query: &str) -> Result<ToolResult> {
        if self.db.scenes.is_empty() {
            return Err(Error::InvalidInput("the index has no scenes".into()));
        }
        let scenes: Vec<Value> = self
            .db
            .scenes
            .iter()
            .map(|s| {
                let span = self.db.scene_range(s).map(|r| span_label(&r)).unwrap_or_default();
                json!({"id": s.id, "span": span, "summary": s.summary})
            })
            .collect();
        let input = json!({"query": query, "scenes": scenes});
        let reply: SceneSelection =
            chat_json(self.backends.reasoner.as_ref(), &prompts::request(prompts::SCENE_BROWSE, &input))?;
        let ids: BTreeSet<usize> = reply
            .scene_ids
            .iter()
            .filter_map(|&i| usize::try_from(i).ok())
            .filter(|&i| i < self.db.scenes.len())
            .collect();
        let selected: Vec<_> = ids.iter().map(|&i| &self.db.scenes[i]).collect();
        let response = match reply.response.trim() {
            "" if selected.is_empty() => "No scene matches the query.".to_string(),
            "" => selected
                .iter()
                .map(|s| format!("Scene {} [{}]: {}", s.id, self.db.scene_range(s).map(|r| span_label(&r)).unwrap_or_default(), s.summary))
                .collect::<Vec<_>>()
                .join("\n"),
            r => r.to_string(),
        };
        Ok(ToolResult {
            response,
            timestamps: selected.iter().filter_map(|s| self.db.scene_range(s)).collect(),
            provenance: ids.iter().map(|i| format!("scene:{i}")).collect(),
        })
    }

    fn render_hits(&self, query: &str, hits: &[Hit]) -> ToolResult {
        if hits.is_empty() {
            return ToolResult { response: format!("No clips in the given time ranges match \"{query}\"."), ..Default::default() };
        }
        let blocks: Vec<String> = hits
            .iter()
            .map(|h| format!("[{}] (similarity {:.3})\n{}", span_label(&h.range), h.score, h.payload))
            .collect();
        ToolResult {
            response: blocks.join("\n\n"),
            timestamps: hits.iter().map(|h| h.range).collect(),
            provenance: hits.iter().map(|h| h.id.to_string()).collect(),
        }
    }

    pub fn caption_search(&self, query: &str, ranges: &[TimeRange]) -> Result<ToolResult> {
        let q = backends::embed_text(self.backends.text_embedder.as_ref(), query)?;
        let hits = self.store.search(&q, RecordKind::SegmentText, self.config.search_k, Some(ranges))?;
        Ok(self.render_hits(query, &hits))
    }

    pub fn visual_search(&self, query: &str, ranges: &[TimeRange]) -> Result<ToolResult> {
        let q = backends::embed_text(self.backends.visual_embedder.as_ref(), query)?;
        let hits = self.store.search(&q, RecordKind::SegmentVisual, self.config.search_k, Some(ranges))?;
        Ok(self.render_hits(query, &hits))
    }

    /// Two stages: top-K1 entities by description, then top-K2 re-captions
    /// among those entities' linked segments.
    pub fn entity_search(&self, query: &str) -> Result<ToolResult> {
        if self.store.len(RecordKind::EntityGlobal) == 0 {
            return Ok(ToolResult { response: "No entities are indexed for this video.".into(), ..Default::default() });
        }
        let q = backends::embed_text(self.backends.text_embedder.as_ref(), query)?;
        let top = self.store.search(&q, RecordKind::EntityGlobal, self.config.entity_k1, None)?;
        let chosen: BTreeSet<usize> = top.iter().filter_map(|h| parse_entity_key(&h.id.key)).collect();
        let clips = self.store.search_where(&q, RecordKind::EntityRecaption, self.config.entity_k2, None, |r| {
            parse_recaption_key(&r.id.key).is_some_and(|(e, _)| chosen.contains(&e))
        })?;

        let mut out = String::from("Entities:\n");
        for h in &top {
            let Some(e) = parse_entity_key(&h.id.key).and_then(|j| self.db.entities.get(j)) else { continue };
            let spans: Vec<String> = e.linked_segments.iter().map(|&i| span_label(&self.segment_range(i))).collect();
            out.push_str(&format!("- {} ({}), appears in {}: {}\n", e.name, e.category, spans.join(", "), e.global_description));
        }
        out.push_str("\nRelevant clips:\n");
        let mut timestamps = Vec::new();
        for h in &clips {
            let Some((j, i)) = parse_recaption_key(&h.id.key) else { continue };
            let name = self.db.entities.get(j).map_or("?", |e| e.name.as_str());
            out.push_str(&format!("[{}] {}: {}\n", span_label(&self.segment_range(i)), name, h.payload));
            timestamps.push(self.segment_range(i));
        }
        let provenance = top.iter().chain(&clips).map(|h| h.id.to_string()).collect();
        Ok(ToolResult { response: out.trim_end().to_string(), timestamps, provenance })
    }

    /// Composed texts of every segment overlapping `ranges`. No model call.
    pub fn caption_inspect(&self, ranges: &[TimeRange]) -> ToolResult {
        let idx = self.segments_in(ranges);
        if idx.is_empty() {
            return ToolResult { response: "No clips in the given time ranges.".into(), ..Default::default() };
        }
        let blocks: Vec<String> = idx
            .iter()
            .map(|&i| format!("[{}]\n{}", span_label(&self.segment_range(i)), self.db.segments[i].composed_text))
            .collect();
        ToolResult {
            response: blocks.join("\n\n"),
            timestamps: idx.iter().map(|&i| self.segment_range(i)).collect(),
            provenance: idx.iter().map(|&i| format!("segment_text:{}", crate::store::segment_key(i))).collect(),
        }
    }

    pub fn visual_inspect(&self, query: &str, ranges: &[TimeRange]) -> Result<ToolResult> {
        let cap = self.config.max_frames.min(self.backends.inspector.max_frames()).max(1);
        let frames = select_inspection_frames(ranges, &self.frames, self.config.inspect_fps, cap);
        if frames.is_empty() {
            let spans: Vec<String> = ranges.iter().map(span_label).collect();
            return Err(Error::MissingFrames(format!("no frames in {}", spans.join(", "))));
        }
        let input = json!({
            "question": query,
            "time_ranges": ranges.iter().map(range_arg).collect::<Vec<_>>(),
        });
        let answer = backends::vision_answer(
            self.backends.inspector.as_ref(),
            &VisionRequest { prompt: prompts::vision_prompt(prompts::VISUAL_INSPECT, &input), frames: frames.clone() },
        )?;
        let segs: BTreeSet<usize> = self
            .db
            .segments
            .iter()
            .filter(|s| frames.iter().any(|f| s.range.contains(f.timestamp_s)))
            .map(|s| s.index)
            .collect();
        Ok(ToolResult {
            response: answer.trim().to_string(),
            timestamps: segs.iter().map(|&i| self.segment_range(i)).collect(),
            provenance: frames.iter().map(|f| format!("frame:{}", f.path.display())).collect(),
        })
    }

    fn ranges_arg(&self, args: &Map<String, Value>) -> Result<Vec<TimeRange>> {
        match args.get("time_ranges") {
            None | Some(Value::Null) => Ok(vec![self.db.whole_video()]),
            Some(v) => parse_time_ranges(v, self.duration()),
        }
    }

    /// Runs one planner tool call. `finish` is not a tool here.
    pub fn execute(&self, name: &str, args: &Map<String, Value>) -> Result<ToolResult> {
        let query = || -> Result<&str> {
            match args.get("query").and_then(Value::as_str).map(str::trim) {
                Some(q) if !q.is_empty() => Ok(q),
                _ => Err(Error::InvalidInput(format!("{name} needs a non-empty \"query\" string"))),
            }
        };
        match name {
            SCENE_BROWSE => self.scene_browse(query()?),
            ENTITY_SEARCH => self.entity_search(query()?),
            CAPTION_SEARCH => self.caption_search(query()?, &self.ranges_arg(args)?),
            VISUAL_SEARCH => self.visual_search(query()?, &self.ranges_arg(args)?),
            CAPTION_INSPECT => Ok(self.caption_inspect(&self.ranges_arg(args)?)),
            VISUAL_INSPECT => self.visual_inspect(query()?, &self.ranges_arg(args)?),
            other => Err(Error::Unsupported(format!("unknown tool {other}"))),
        }
    }

    /// Entity ids whose re-captions were considered in stage two.
    pub fn entity_candidates(&self, query: &str) -> Result<BTreeMap<usize, Vec<usize>>> {
        let q = backends::embed_text(self.backends.text_embedder.as_ref(), query)?;
        let top = self.store.search(&q, RecordKind::EntityGlobal, self.config.entity_k1, None)?;
        Ok(top
            .iter()
            .filter_map(|h| parse_entity_key(&h.id.key))
            .map(|j| (j, self.db.entities[j].linked_segments.iter().copied().collect()))
            .collect())
    }
}

/// Segment index behind a `segment_*` provenance id.
pub fn provenance_segment(id: &str) -> Option<usize> {
    id.split_once(':').and_then(|(_, key)| parse_segment_key(key))
}
