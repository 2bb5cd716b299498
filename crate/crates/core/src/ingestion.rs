//! Timeline partitioning, transcript alignment and per-segment captioning.
//!
//! ## Diarized transcript format
//!
//! One JSON object per line:
//!
//! ```text
//! {"start": 12.3, "end": 15.0, "speaker": "SPEAKER_01", "text": "Hello.", "language": "en"}
//! ```
//!
//! `start`/`end` are seconds, `speaker` must be non-empty, `language` is
//! optional. Records whose language is declared and not English are dropped.
//!
//! ## Frames directory
//!
//! Files named `<seconds>.<ext>` (for example `12.jpg` or `12.5.png`),
//! extracted beforehand at a fixed rate.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::{debug, warn};

use crate::backends::{self, extract_json, Backends, VisionBackend, VisionRequest};
use crate::error::{Error, Result};
use crate::model::{BuildConfig, FrameRef, Segment, SpeakerTurn};
use crate::prompts;
use crate::time::{render_timecode, TimeRange};

pub const SPEAKERS_HEADER: &str = "## Speaker identities\n";
pub const TRANSCRIPT_HEADER: &str = "## Transcript\n";
pub const CAPTION_HEADER: &str = "## Visual caption\n";

fn default_language() -> String {
    "en".into()
}
fn default_segment_len() -> f64 {
    30.0
}
fn default_frames_per_segment() -> usize {
    20
}

/// Describes one video's pre-extracted inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceManifest {
    pub video_id: String,
    pub duration_s: f64,
    pub transcript_path: PathBuf,
    pub frames_dir: PathBuf,
    #[serde(default = "default_language")]
    pub language_tag: String,
    #[serde(default = "default_segment_len")]
    pub segment_len_s: f64,
    #[serde(default = "default_frames_per_segment")]
    pub frames_per_segment: usize,
}

impl SourceManifest {
    /// Reads a JSON manifest; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: SourceManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = std::path::absolute(base).map_err(|e| Error::io(base, e))?;
        for p in [&mut manifest.transcript_path, &mut manifest.frames_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.video_id.trim().is_empty() {
            return Err(Error::InvalidInput("manifest video_id is empty".into()));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::InvalidInput(format!("duration_s must be positive, got {}", self.duration_s)));
        }
        if !(self.segment_len_s.is_finite() && self.segment_len_s > 0.0) {
            return Err(Error::InvalidInput(format!("segment_len_s must be positive, got {}", self.segment_len_s)));
        }
        if self.frames_per_segment == 0 {
            return Err(Error::InvalidInput("frames_per_segment must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_english(&self) -> bool {
        is_english(&self.language_tag)
    }
}

pub fn is_english(tag: &str) -> bool {
    let t = tag.trim().to_ascii_lowercase();
    t == "en" || t.starts_with("en-") || t.starts_with("en_") || t == "english"
}

/// Splits `[0, duration)` into consecutive windows of `segment_len`; the last
/// one may be shorter.
pub fn partition_timeline(duration_s: f64, segment_len_s: f64) -> Vec<TimeRange> {
    assert!(duration_s > 0.0 && segment_len_s > 0.0, "partition needs positive lengths");
    let n = (duration_s / segment_len_s).ceil() as usize;
    (0..n)
        .map(|i| TimeRange {
            start_s: i as f64 * segment_len_s,
            end_s: ((i + 1) as f64 * segment_len_s).min(duration_s),
        })
        .filter(|r| r.start_s < r.end_s)
        .collect()
}

#[derive(Deserialize)]
struct TranscriptRecord {
    start: f64,
    end: f64,
    speaker: String,
    text: String,
    #[serde(default)]
    language: Option<String>,
}

/// Loads a line-delimited diarized transcript, sorted by start time.
pub fn load_diarized_transcript(path: &Path) -> Result<Vec<SpeakerTurn>> {
    let file = fs::File::open(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: format!("cannot open transcript: {e}"),
    })?;
    let mut turns = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
        let rec: TranscriptRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if rec.speaker.trim().is_empty() {
            return Err(err("empty speaker label".into()));
        }
        let range = TimeRange::new(rec.start, rec.end)
            .map_err(|_| err(format!("invalid timestamps start={} end={}", rec.start, rec.end)))?;
        if rec.language.as_deref().is_some_and(|l| !is_english(l)) {
            debug!(line = i + 1, "dropping non-English transcript record");
            continue;
        }
        turns.push(SpeakerTurn { speaker_label: rec.speaker, range, text: rec.text.trim().to_string() });
    }
    turns.sort_by(|a, b| a.range.start_s.total_cmp(&b.range.start_s));
    Ok(turns)
}

/// Turns overlapping `range`, kept whole, and their distinct speakers.
pub fn assign_turns_to_segment(turns: &[SpeakerTurn], range: &TimeRange) -> (Vec<String>, Vec<SpeakerTurn>) {
    let assigned: Vec<SpeakerTurn> = turns
        .iter()
        .take_while(|t| t.range.start_s < range.end_s)
        .filter(|t| t.range.intersects(range))
        .cloned()
        .collect();
    let mut speakers: Vec<String> = assigned.iter().map(|t| t.speaker_label.clone()).collect();
    speakers.sort();
    speakers.dedup();
    (speakers, assigned)
}

pub fn render_turn(turn: &SpeakerTurn) -> String {
    format!("[{}] {}: {}", turn.range, turn.speaker_label, turn.text)
}

/// Segment text: speaker identities, transcript, then caption. Empty parts
/// are omitted.
pub fn compose_segment_text(fused_speaker_info: &str, transcript: &[SpeakerTurn], caption: &str) -> String {
    let mut blocks = Vec::with_capacity(3);
    if !fused_speaker_info.trim().is_empty() {
        blocks.push(format!("{SPEAKERS_HEADER}{}", fused_speaker_info.trim()));
    }
    if !transcript.is_empty() {
        let lines: Vec<String> = transcript.iter().map(render_turn).collect();
        blocks.push(format!("{TRANSCRIPT_HEADER}{}", lines.join("\n")));
    }
    if !caption.trim().is_empty() {
        blocks.push(format!("{CAPTION_HEADER}{}", caption.trim()));
    }
    blocks.join("\n\n")
}

/// Frame files of one video, ordered by timestamp.
#[derive(Debug, Clone, Default)]
pub struct FrameIndex {
    frames: Vec<FrameRef>,
}

impl FrameIndex {
    pub fn scan(dir: &Path) -> Result<Self> {
        let entries = fs::read_dir(dir)
            .map_err(|e| Error::MissingFrames(format!("cannot read frames directory {}: {e}", dir.display())))?;
        let mut frames = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if !path.is_file() {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            match stem.parse::<f64>() {
                Ok(t) if t.is_finite() && t >= 0.0 => frames.push(FrameRef { timestamp_s: t, path }),
                _ => debug!(path = %path.display(), "ignoring file without a timestamp name"),
            }
        }
        frames.sort_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s).then_with(|| a.path.cmp(&b.path)));
        Ok(Self { frames })
    }

    pub fn from_frames(mut frames: Vec<FrameRef>) -> Self {
        frames.sort_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s).then_with(|| a.path.cmp(&b.path)));
        Self { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames whose timestamp lies in `range`.
    pub fn within(&self, range: &TimeRange) -> &[FrameRef] {
        let lo = self.frames.partition_point(|f| f.timestamp_s < range.start_s);
        let hi = self.frames.partition_point(|f| f.timestamp_s < range.end_s);
        &self.frames[lo..hi]
    }

    /// Frame nearest to `t` among those in `range`; earlier frame wins ties.
    pub fn nearest_within(&self, range: &TimeRange, t: f64) -> Option<&FrameRef> {
        let candidates = self.within(range);
        let at = candidates.partition_point(|f| f.timestamp_s < t);
        let before = at.checked_sub(1).and_then(|i| candidates.get(i));
        let after = candidates.get(at);
        match (before, after) {
            (Some(b), Some(a)) => Some(if t - b.timestamp_s <= a.timestamp_s - t { b } else { a }),
            (b, a) => b.or(a),
        }
    }

    /// `count` targets spread uniformly over `range`, each snapped to the
    /// nearest frame inside it; repeated frames collapse.
    pub fn sample_uniform(&self, range: &TimeRange, count: usize) -> Vec<FrameRef> {
        let mut out: Vec<FrameRef> = Vec::with_capacity(count);
        for k in 0..count {
            let t = range.start_s + (k as f64 + 0.5) * range.len() / count as f64;
            if let Some(f) = self.nearest_within(range, t) {
                if out.last().map_or(true, |last| last.path != f.path) {
                    out.push(f.clone());
                }
            }
        }
        out
    }
}

#[derive(Deserialize)]
struct CaptionReply {
    caption: String,
    #[serde(default)]
    speaker_info: String,
}

/// One captioning pass producing the caption and the speaker/visual fusion.
pub fn caption_segment(
    vision: &dyn VisionBackend,
    range: &TimeRange,
    frames: &[FrameRef],
    speakers: &[String],
    transcript: &[SpeakerTurn],
) -> Result<(String, String)> {
    if frames.is_empty() {
        return Err(Error::MissingFrames(format!("no frames for segment {range}")));
    }
    let input = json!({
        "segment": range.to_string(),
        "speakers": speakers,
        "transcript": transcript.iter().map(render_turn).collect::<Vec<_>>(),
    });
    let mut request = VisionRequest { prompt: prompts::vision_prompt(prompts::CAPTION_SEGMENT, &input), frames: frames.to_vec() };
    let mut last_err = String::new();
    for attempt in 0..2 {
        if attempt == 1 {
            request.prompt.push_str("\n\nReply with a single valid JSON object only.");
        }
        let reply = backends::vision_answer(vision, &request)?;
        match extract_json(&reply).map(serde_json::from_value::<CaptionReply>) {
            Some(Ok(r)) if !r.caption.trim().is_empty() => {
                let fused = if speakers.is_empty() { String::new() } else { r.speaker_info.trim().to_string() };
                return Ok((r.caption.trim().to_string(), fused));
            }
            Some(Ok(_)) => last_err = "empty caption".into(),
            Some(Err(e)) => last_err = e.to_string(),
            None => last_err = "no JSON object".into(),
        }
    }
    Err(Error::BackendRefusal(format!("caption for {range}: {last_err}")))
}

/// Bookkeeping for transcript turns across segments.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestionStats {
    pub turns_loaded: usize,
    /// Total turn placements; exceeds `turns_loaded` by the duplicates.
    pub turn_assignments: usize,
    /// Turns placed in more than one segment.
    pub duplicated_turns: usize,
    /// Turns lying entirely past the video's end.
    pub dropped_turns: usize,
}

/// Runs `f` over `items` on a pool of `workers` threads, preserving order.
pub(crate) fn parallel_map<T, R, F>(workers: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            warn!(error = %e, "thread pool unavailable, running sequentially");
            items.iter().map(f).collect()
        }
    }
}

/// Builds every segment of the video: captions, composed texts and both
/// embeddings.
pub fn build_segments(
    manifest: &SourceManifest,
    backends: &Backends,
    config: &BuildConfig,
) -> Result<(Vec<Segment>, IngestionStats)> {
    manifest.validate()?;
    if config.subsegments_per_segment != 1 {
        return Err(Error::Unsupported(format!(
            "subsegments_per_segment = {} (only 1 is implemented)",
            config.subsegments_per_segment
        )));
    }
    let ranges = partition_timeline(manifest.duration_s, manifest.segment_len_s);
    let turns = if manifest.is_english() {
        load_diarized_transcript(&manifest.transcript_path)?
    } else {
        debug!(language = %manifest.language_tag, "non-English audio; transcript ignored");
        Vec::new()
    };
    let frames = FrameIndex::scan(&manifest.frames_dir)?;
    let per_segment = manifest.frames_per_segment.min(backends.captioner.max_frames());

    let mut stats = IngestionStats { turns_loaded: turns.len(), ..Default::default() };
    let assignments: Vec<(Vec<String>, Vec<SpeakerTurn>)> =
        ranges.iter().map(|r| assign_turns_to_segment(&turns, r)).collect();
    for t in &turns {
        let hits = ranges.iter().filter(|r| r.intersects(&t.range)).count();
        stats.turn_assignments += hits;
        if hits > 1 {
            stats.duplicated_turns += 1;
        }
        if hits == 0 {
            stats.dropped_turns += 1;
            warn!(start = t.range.start_s, "transcript turn lies outside the video");
        }
    }

    let indices: Vec<usize> = (0..ranges.len()).collect();
    let results = parallel_map(config.workers, &indices, |&i| {
        let range = ranges[i];
        let (speakers, transcript) = assignments[i].clone();
        let frame_refs = frames.sample_uniform(&range, per_segment);
        if frame_refs.is_empty() {
            return Err(Error::MissingFrames(format!(
                "no frames in {} for segment {i} ({range})",
                manifest.frames_dir.display()
            )));
        }
        let (caption, fused) = caption_segment(backends.captioner.as_ref(), &range, &frame_refs, &speakers, &transcript)?;
        let composed_text = compose_segment_text(&fused, &transcript, &caption);
        let text_embedding = backends::embed_text(backends.text_embedder.as_ref(), &composed_text)?;
        let visual_embedding = backends::embed_frames(backends.visual_embedder.as_ref(), &frame_refs)?;
        Ok(Segment {
            index: i,
            range,
            speakers,
            transcript,
            caption,
            fused_speaker_info: fused,
            composed_text,
            frame_refs,
            text_embedding,
            visual_embedding,
        })
    });

    let mut segments = Vec::with_capacity(results.len());
    let mut first_error = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => segments.push(s),
            Err(e) => {
                warn!(segment = i, error = %e, "segment failed");
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok((segments, stats)),
    }
}

/// `HH:MM:SS` span label used in prompts and tool output.
pub fn span_label(range: &TimeRange) -> String {
    format!("{}–{}", render_timecode(range.start_s), render_timecode(range.end_s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::ScriptedVision;
    use proptest::prelude::*;

    fn turn(label: &str, a: f64, b: f64, text: &str) -> SpeakerTurn {
        SpeakerTurn { speaker_label: label.into(), range: TimeRange::new(a, b).unwrap(), text: text.into() }
    }

    #[test]
    fn partition_examples() {
        let p = partition_timeline(4101.0, 30.0);
        assert_eq!(p.len(), 137);
        assert_eq!(p.last().unwrap(), &TimeRange { start_s: 4080.0, end_s: 4101.0 });
        assert_eq!(partition_timeline(30.0, 30.0), vec![TimeRange { start_s: 0.0, end_s: 30.0 }]);
        assert_eq!(partition_timeline(29.0, 30.0), vec![TimeRange { start_s: 0.0, end_s: 29.0 }]);
    }

    proptest! {
        #[test]
        fn partition_is_exact(duration in 1u32..20_000, len in 1u32..600) {
            let (d, l) = (duration as f64, len as f64);
            let p = partition_timeline(d, l);
            prop_assert_eq!(p.len(), (d / l).ceil() as usize);
            prop_assert_eq!(p[0].start_s, 0.0);
            prop_assert_eq!(p.last().unwrap().end_s, d);
            for (i, w) in p.windows(2).enumerate() {
                prop_assert_eq!(w[0].end_s, w[1].start_s);
                prop_assert_eq!(w[0].start_s, i as f64 * l);
                prop_assert_eq!(w[0].len(), l);
            }
        }
    }

    #[test]
    fn boundary_turns_are_duplicated() {
        let turns = vec![turn("S1", 25.0, 35.0, "hello")];
        let a = TimeRange::new(0.0, 30.0).unwrap();
        let b = TimeRange::new(30.0, 60.0).unwrap();
        // brute-force overlap check
        for r in [a, b] {
            let expected = turns[0].range.start_s.max(r.start_s) < turns[0].range.end_s.min(r.end_s);
            let (spk, t) = assign_turns_to_segment(&turns, &r);
            assert_eq!(!t.is_empty(), expected);
            assert_eq!(spk, vec!["S1".to_string()]);
            assert_eq!(t[0].text, "hello");
        }
    }

    #[test]
    fn half_open_turns_and_empty_segments() {
        let turns = vec![turn("S1", 30.0, 60.0, "later")];
        let (spk, t) = assign_turns_to_segment(&turns, &TimeRange::new(0.0, 30.0).unwrap());
        assert!(spk.is_empty() && t.is_empty());
        let (spk, t) = assign_turns_to_segment(&[], &TimeRange::new(0.0, 30.0).unwrap());
        assert!(spk.is_empty() && t.is_empty());
    }

    #[test]
    fn loads_transcript_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        fs::write(
            &path,
            r#"{"start": 40, "end": 45, "speaker": "SPEAKER_01", "text": "third"}
{"start": 0, "end": 5, "speaker": "SPEAKER_00", "text": "first", "language": "en"}

{"start": 10.5, "end": 20, "speaker": "SPEAKER_01", "text": "second"}
{"start": 11, "end": 12, "speaker": "SPEAKER_02", "text": "hola", "language": "es"}
"#,
        )
        .unwrap();
        let turns = load_diarized_transcript(&path).unwrap();
        let texts: Vec<&str> = turns.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["first", "second", "third"]);

        fs::write(&path, "").unwrap();
        assert!(load_diarized_transcript(&path).unwrap().is_empty());

        fs::write(&path, "{\"start\": 0, \"end\": 5, \"speaker\": \"A\", \"text\": \"ok\"}\n{\"start\": \"00:01\", \"end\": 5, \"speaker\": \"A\", \"text\": \"x\"}\n").unwrap();
        match load_diarized_transcript(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        fs::write(&path, "{\"start\": 9, \"end\": 5, \"speaker\": \"A\", \"text\": \"x\"}\n").unwrap();
        assert!(matches!(load_diarized_transcript(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn compose_caption_only() {
        assert_eq!(compose_segment_text("", &[], "A dog runs."), "## Visual caption\nA dog runs.");
    }

    #[test]
    fn compose_golden() {
        let text = compose_segment_text(
            "SPEAKER_00 is the host, a woman in a red dress.",
            &[turn("SPEAKER_00", 3.0, 7.0, "Welcome back."), turn("SPEAKER_01", 25.0, 35.0, "Thanks!")],
            "A studio with two chairs.",
        );
        assert_eq!(text, include_str!("../tests/golden/composed_segment.txt").trim_end_matches('\n'));
    }

    proptest! {
        #[test]
        fn compose_is_injective(
            a in proptest::collection::vec(("[a-c ]{0,6}", proptest::collection::vec(("S[12]", 0u8..3, "[a-c ]{0,4}"), 0..3), "[a-c ]{0,6}"), 2)
        ) {
            let render = |(f, ts, c): &(String, Vec<(String, u8, String)>, String)| {
                let turns: Vec<SpeakerTurn> = ts.iter().map(|(l, s, t)| turn(l, *s as f64, *s as f64 + 1.0, t)).collect();
                (compose_segment_text(f, &turns, c), (f.trim().to_string(), turns, c.trim().to_string()))
            };
            let (ta, ka) = render(&a[0]);
            let (tb, kb) = render(&a[1]);
            if ka.0 != kb.0 || ka.2 != kb.2 || ka.1 != kb.1 {
                prop_assert_ne!(ta, tb);
            }
        }
    }

    #[test]
    fn frame_sampling_snaps_and_dedups() {
        let frames = FrameIndex::from_frames(
            (0..60).map(|t| FrameRef { timestamp_s: t as f64, path: format!("{t}.jpg").into() }).collect(),
        );
        let r = TimeRange::new(30.0, 60.0).unwrap();
        let s = frames.sample_uniform(&r, 20);
        assert_eq!(s.len(), 20);
        assert!(s.iter().all(|f| r.contains(f.timestamp_s)));
        assert!(s.windows(2).all(|w| w[0].timestamp_s < w[1].timestamp_s));
        // Sparser extraction than requested collapses duplicates.
        let sparse = FrameIndex::from_frames(
            (0..6).map(|k| FrameRef { timestamp_s: k as f64 * 10.0, path: format!("{k}.jpg").into() }).collect(),
        );
        assert_eq!(sparse.sample_uniform(&r, 20).len(), 3);
        assert!(sparse.sample_uniform(&TimeRange::new(100.0, 130.0).unwrap(), 20).is_empty());
    }

    #[test]
    fn caption_echo_and_silent_segments() {
        let frames = vec![FrameRef { timestamp_s: 1.0, path: "1.jpg".into() }];
        let r = TimeRange::new(0.0, 30.0).unwrap();
        let v = ScriptedVision::new(50, [r#"{"caption": "A dog runs.", "speaker_info": "nobody"}"#]);
        let (cap, fused) = caption_segment(&v, &r, &frames, &[], &[]).unwrap();
        assert_eq!(cap, "A dog runs.");
        assert_eq!(fused, "");

        let v = ScriptedVision::new(50, [r#"{"caption": "Host talks.", "speaker_info": "S1 is the host in a red dress"}"#]);
        let (_, fused) = caption_segment(&v, &r, &frames, &["S1".into()], &[turn("S1", 1.0, 4.0, "hi")]).unwrap();
        assert!(fused.contains("S1"));
        let sent = &v.requests()[0].prompt;
        assert!(sent.contains("[00:00:01–00:00:04] S1: hi"));

        let v = ScriptedVision::new(50, ["not json", "still not"]);
        assert!(matches!(caption_segment(&v, &r, &frames, &[], &[]), Err(Error::BackendRefusal(_))));
        assert!(matches!(caption_segment(&v, &r, &[], &[], &[]), Err(Error::MissingFrames(_))));
    }
}
