//! The hierarchical index: segments, entities, scenes and the global summary.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::ingestion::{compose_segment_text, SourceManifest};
use crate::time::TimeRange;

/// Bundle format written by this build.
pub const FORMAT_VERSION: u32 = 1;

/// A frame image on disk together with its position in the video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub timestamp_s: f64,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTurn {
    pub speaker_label: String,
    pub range: TimeRange,
    pub text: String,
}

/// One fixed-length window of the video and everything derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    pub range: TimeRange,
    /// Distinct speaker labels heard in this window, sorted.
    pub speakers: Vec<String>,
    pub transcript: Vec<SpeakerTurn>,
    pub caption: String,
    pub fused_speaker_info: String,
    pub composed_text: String,
    pub frame_refs: Vec<FrameRef>,
    #[serde(skip)]
    pub text_embedding: Vec<f32>,
    #[serde(skip)]
    pub visual_embedding: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityCategory {
    Character,
    Location,
    Event,
    Other,
}

impl EntityCategory {
    pub const ALL: [EntityCategory; 4] = [
        EntityCategory::Character,
        EntityCategory::Location,
        EntityCategory::Event,
        EntityCategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityCategory::Character => "character",
            EntityCategory::Location => "location",
            EntityCategory::Event => "event",
            EntityCategory::Other => "other",
        }
    }

    /// Lenient parse; anything unrecognised lands in `Other`.
    pub fn parse_lenient(text: &str) -> Self {
        match text.trim().to_ascii_lowercase().as_str() {
            "character" | "person" | "people" | "characters" => EntityCategory::Character,
            "location" | "place" | "locations" => EntityCategory::Location,
            "event" | "events" | "action" => EntityCategory::Event,
            _ => EntityCategory::Other,
        }
    }
}

impl fmt::Display for EntityCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An entity as extracted from a single segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMention {
    /// Position in [`IndexDatabase::mentions`].
    pub id: usize,
    pub segment_index: usize,
    pub name: String,
    pub category: EntityCategory,
    pub description: String,
    /// Speaker labels the extractor attributed to this mention. Always a
    /// subset of the segment's speakers.
    pub speaker_labels: Vec<String>,
    #[serde(skip)]
    pub embedding: Vec<f32>,
}

impl EntityMention {
    /// Text handed to the text embedder.
    pub fn embedding_text(&self) -> String {
        format!("{} ({}): {}", self.name, self.category, self.description)
    }
}

/// A consolidated identity spanning one or more segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalEntity {
    pub id: usize,
    pub name: String,
    pub category: EntityCategory,
    pub global_description: String,
    pub member_mentions: Vec<usize>,
    pub linked_segments: BTreeSet<usize>,
    pub speaker_labels: BTreeSet<String>,
    pub recaptions: BTreeMap<usize, String>,
    #[serde(skip)]
    pub embedding: Vec<f32>,
    #[serde(skip)]
    pub recaption_embeddings: BTreeMap<usize, Vec<f32>>,
}

impl CanonicalEntity {
    pub fn embedding_text(&self) -> String {
        format!("{} ({}): {}", self.name, self.category, self.global_description)
    }
}

/// A contiguous run of segments, `first_segment..=last_segment`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: usize,
    pub first_segment: usize,
    pub last_segment: usize,
    pub summary: String,
}

impl Scene {
    pub fn range(&self, segments: &[Segment]) -> Option<TimeRange> {
        let first = segments.get(self.first_segment)?;
        let last = segments.get(self.last_segment)?;
        Some(TimeRange {
            start_s: first.range.start_s,
            end_s: last.range.end_s,
        })
    }
}

/// Index construction knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    /// Average-linkage cosine threshold for preliminary entity clusters.
    pub cluster_threshold: f64,
    /// Segments per scene-boundary chunk.
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    pub workers: usize,
    /// Character budget for the fallback global summary.
    pub global_summary_budget: usize,
    /// Reserved for captioning several sub-windows per segment; only 1 is
    /// currently supported.
    pub subsegments_per_segment: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            cluster_threshold: 0.80,
            chunk_size: 20,
            chunk_overlap: 4,
            workers: 4,
            global_summary_budget: 4000,
            subsegments_per_segment: 1,
        }
    }
}

/// Retrieval and reasoning knobs used at question time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryConfig {
    /// Hits per caption / visual search call.
    pub search_k: usize,
    /// Entities kept by the first entity-search stage.
    pub entity_k1: usize,
    /// Re-captions kept by the second entity-search stage.
    pub entity_k2: usize,
    pub max_frames: usize,
    pub inspect_fps: f64,
    pub max_steps: usize,
    /// Character budget for serialized tool observations in the planner prompt.
    pub memory_budget_chars: usize,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            search_k: 5,
            entity_k1: 5,
            entity_k2: 8,
            max_frames: 50,
            inspect_fps: 1.0,
            max_steps: 10,
            memory_budget_chars: 60_000,
        }
    }
}

/// Everything the question-answering side needs about one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexDatabase {
    pub format_version: u32,
    pub manifest: SourceManifest,
    pub config: BuildConfig,
    pub text_dim: usize,
    pub visual_dim: usize,
    pub segments: Vec<Segment>,
    pub mentions: Vec<EntityMention>,
    pub entities: Vec<CanonicalEntity>,
    pub scenes: Vec<Scene>,
    pub global_summary: String,
}

impl IndexDatabase {
    pub fn duration_s(&self) -> f64 {
        self.manifest.duration_s
    }

    pub fn whole_video(&self) -> TimeRange {
        TimeRange {
            start_s: 0.0,
            end_s: self.manifest.duration_s,
        }
    }

    pub fn scene_range(&self, scene: &Scene) -> Option<TimeRange> {
        scene.range(&self.segments)
    }
}

/// Invariant violations found by [`validate_database`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, msg: impl Into<String>) {
        self.violations.push(msg.into());
    }
}

fn check_vector(report: &mut ValidationReport, what: &str, v: &[f32], dim: usize) {
    if v.len() != dim {
        report.push(format!("{what}: dimension {} != {dim}", v.len()));
    } else if v.iter().any(|x| !x.is_finite()) {
        report.push(format!("{what}: non-finite component"));
    }
}

pub fn validate_database(db: &IndexDatabase) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = db.segments.len();
    let seg_len = db.manifest.segment_len_s;

    if n == 0 {
        report.push("database has no segments");
    }

    let mut expected_start = 0.0;
    for (pos, seg) in db.segments.iter().enumerate() {
        if seg.index != pos {
            report.push(format!("segment at position {pos} has index {}", seg.index));
        }
        if !seg.range.is_valid() {
            report.push(format!("segment {pos} has invalid range"));
        }
        if (seg.range.start_s - expected_start).abs() > 1e-9 {
            report.push(format!(
                "segment {pos} starts at {} instead of {expected_start}",
                seg.range.start_s
            ));
        }
        let last = pos + 1 == n;
        if !last && (seg.range.len() - seg_len).abs() > 1e-9 {
            report.push(format!("segment {pos} length {} != {seg_len}", seg.range.len()));
        }
        if last && (seg.range.end_s - db.manifest.duration_s).abs() > 1e-9 {
            report.push(format!("final segment ends at {} not at duration", seg.range.end_s));
        }
        expected_start = seg.range.end_s;

        let composed = compose_segment_text(&seg.fused_speaker_info, &seg.transcript, &seg.caption);
        if composed != seg.composed_text {
            report.push(format!("segment {pos} composed_text does not match its parts"));
        }
        check_vector(&mut report, &format!("segment {pos} text embedding"), &seg.text_embedding, db.text_dim);
        check_vector(
            &mut report,
            &format!("segment {pos} visual embedding"),
            &seg.visual_embedding,
            db.visual_dim,
        );
    }

    for (pos, m) in db.mentions.iter().enumerate() {
        if m.id != pos {
            report.push(format!("mention at position {pos} has id {}", m.id));
        }
        if m.segment_index >= n {
            report.push(format!("mention {pos} references missing segment {}", m.segment_index));
        }
        if m.description.trim().is_empty() {
            report.push(format!("mention {pos} has empty description"));
        }
        check_vector(&mut report, &format!("mention {pos} embedding"), &m.embedding, db.text_dim);
    }

    let mut owner: Vec<Option<usize>> = vec![None; db.mentions.len()];
    for (pos, e) in db.entities.iter().enumerate() {
        if e.id != pos {
            report.push(format!("entity at position {pos} has id {}", e.id));
        }
        for &s in &e.linked_segments {
            if s >= n {
                report.push(format!("entity {pos} links missing segment {s}"));
            }
        }
        if e.recaptions.keys().ne(e.linked_segments.iter()) {
            for &k in e.recaptions.keys().filter(|k| !e.linked_segments.contains(k)) {
                report.push(format!("entity {pos} has recaption for unlinked segment {k}"));
            }
            for &k in e.linked_segments.iter().filter(|k| !e.recaptions.contains_key(k)) {
                report.push(format!("entity {pos} has no recaption for linked segment {k}"));
            }
        }
        if e.recaption_embeddings.keys().ne(e.recaptions.keys()) {
            report.push(format!("entity {pos} recaption embeddings do not match recaptions"));
        }
        for (k, v) in &e.recaption_embeddings {
            check_vector(&mut report, &format!("entity {pos} recaption {k} embedding"), v, db.text_dim);
        }
        check_vector(&mut report, &format!("entity {pos} embedding"), &e.embedding, db.text_dim);

        let mut from_members = BTreeSet::new();
        for &mid in &e.member_mentions {
            match db.mentions.get(mid) {
                Some(m) => {
                    from_members.insert(m.segment_index);
                }
                None => report.push(format!("entity {pos} lists missing mention {mid}")),
            }
            if let Some(slot) = owner.get_mut(mid) {
                if let Some(prev) = slot.replace(pos) {
                    report.push(format!("mention {mid} owned by entities {prev} and {pos}"));
                }
            }
        }
        if from_members != e.linked_segments {
            report.push(format!("entity {pos} linked segments differ from its mentions' segments"));
        }
    }
    let mut voice_owner: BTreeMap<&str, usize> = BTreeMap::new();
    for e in db.entities.iter().filter(|e| e.category == EntityCategory::Character) {
        for label in &e.speaker_labels {
            if let Some(prev) = voice_owner.insert(label, e.id) {
                report.push(format!("characters {prev} and {} share speaker {label}", e.id));
            }
        }
    }
    for (mid, o) in owner.iter().enumerate() {
        if o.is_none() {
            report.push(format!("mention {mid} belongs to no entity"));
        }
    }

    let mut next = 0usize;
    for (pos, scene) in db.scenes.iter().enumerate() {
        if scene.id != pos {
            report.push(format!("scene at position {pos} has id {}", scene.id));
        }
        if scene.first_segment > scene.last_segment {
            report.push(format!("scene {pos} has reversed span"));
            continue;
        }
        if scene.first_segment > next {
            report.push(format!("scene gap at {next}"));
        } else if scene.first_segment < next {
            report.push(format!("scene overlap at {}", scene.first_segment));
        }
        next = next.max(scene.last_segment + 1);
    }
    if next < n {
        report.push(format!("scene gap at {next}"));
    } else if next > n {
        report.push(format!("scenes extend past final segment {}", n.saturating_sub(1)));
    }
    if db.scenes.iter().any(|s| s.summary.trim().is_empty()) {
        report.push("scene with empty summary");
    }
    if n > 0 && db.global_summary.trim().is_empty() {
        report.push("global summary is empty");
    }

    report
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::ingestion::partition_timeline;

    /// Small, internally consistent database for unit tests.
    pub(crate) fn tiny_db(n: usize) -> IndexDatabase {
        let ranges = partition_timeline(n as f64 * 30.0, 30.0);
        let segments = ranges
            .into_iter()
            .enumerate()
            .map(|(i, range)| {
                let caption = format!("caption {i}");
                Segment {
                    index: i,
                    range,
                    speakers: vec![],
                    transcript: vec![],
                    composed_text: compose_segment_text("", &[], &caption),
                    caption,
                    fused_speaker_info: String::new(),
                    frame_refs: vec![],
                    text_embedding: vec![1.0, 0.0],
                    visual_embedding: vec![0.0, 1.0, 0.0],
                }
            })
            .collect();
        IndexDatabase {
            format_version: FORMAT_VERSION,
            manifest: SourceManifest {
                video_id: "tiny".into(),
                duration_s: n as f64 * 30.0,
                transcript_path: "t.jsonl".into(),
                frames_dir: "frames".into(),
                language_tag: "en".into(),
                segment_len_s: 30.0,
                frames_per_segment: 20,
            },
            config: BuildConfig::default(),
            text_dim: 2,
            visual_dim: 3,
            segments,
            mentions: vec![],
            entities: vec![],
            scenes: vec![Scene {
                id: 0,
                first_segment: 0,
                last_segment: n - 1,
                summary: "all".into(),
            }],
            global_summary: "summary".into(),
        }
    }

    #[test]
    fn tiny_db_is_clean() {
        assert!(validate_database(&tiny_db(4)).is_clean());
    }

    #[test]
    fn reports_scene_gap() {
        let mut db = tiny_db(7);
        db.scenes[0].last_segment = 5;
        let report = validate_database(&db);
        assert_eq!(report.violations, vec!["scene gap at 6".to_string()]);
    }

    #[test]
    fn reports_recaption_outside_links() {
        let mut db = tiny_db(3);
        db.mentions.push(EntityMention {
            id: 0,
            segment_index: 1,
            name: "host".into(),
            category: EntityCategory::Character,
            description: "a host".into(),
            speaker_labels: vec![],
            embedding: vec![0.0, 1.0],
        });
        db.entities.push(CanonicalEntity {
            id: 0,
            name: "host".into(),
            category: EntityCategory::Character,
            global_description: "a host".into(),
            member_mentions: vec![0],
            linked_segments: BTreeSet::from([1]),
            speaker_labels: BTreeSet::new(),
            recaptions: BTreeMap::from([(2, "elsewhere".to_string())]),
            embedding: vec![0.0, 1.0],
            recaption_embeddings: BTreeMap::from([(2, vec![1.0, 0.0])]),
        });
        let report = validate_database(&db);
        assert!(report
            .violations
            .iter()
            .any(|v| v.contains("recaption for unlinked segment 2")));
    }

    #[test]
    fn reports_shared_speaker_between_characters() {
        let mut db = tiny_db(2);
        for i in 0..2 {
            db.mentions.push(EntityMention {
                id: i,
                segment_index: i,
                name: format!("p{i}"),
                category: EntityCategory::Character,
                description: "someone".into(),
                speaker_labels: vec!["S1".into()],
                embedding: vec![0.0, 1.0],
            });
            db.entities.push(CanonicalEntity {
                id: i,
                name: format!("p{i}"),
                category: EntityCategory::Character,
                global_description: "someone".into(),
                member_mentions: vec![i],
                linked_segments: BTreeSet::from([i]),
                speaker_labels: BTreeSet::from(["S1".to_string()]),
                recaptions: BTreeMap::from([(i, "r".to_string())]),
                embedding: vec![0.0, 1.0],
                recaption_embeddings: BTreeMap::from([(i, vec![1.0, 0.0])]),
            });
        }
        let report = validate_database(&db);
        assert_eq!(report.violations, vec!["characters 0 and 1 share speaker S1".to_string()]);
    }

    #[test]
    fn reports_orphan_mention_and_bad_dims() {
        let mut db = tiny_db(2);
        db.mentions.push(EntityMention {
            id: 0,
            segment_index: 0,
            name: "x".into(),
            category: EntityCategory::Other,
            description: "thing".into(),
            speaker_labels: vec![],
            embedding: vec![1.0],
        });
        let report = validate_database(&db);
        assert!(report.violations.iter().any(|v| v.contains("belongs to no entity")));
        assert!(report.violations.iter().any(|v| v.contains("dimension 1 != 2")));
    }

    #[test]
    fn reports_scene_overlap() {
        let mut db = tiny_db(4);
        db.scenes = vec![
            Scene { id: 0, first_segment: 0, last_segment: 2, summary: "a".into() },
            Scene { id: 1, first_segment: 2, last_segment: 3, summary: "b".into() },
        ];
        assert!(validate_database(&db)
            .violations
            .contains(&"scene overlap at 2".to_string()));
    }
}
