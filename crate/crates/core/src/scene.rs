//! Scene boundaries over overlapping segment chunks, scene summaries and the
//! global summary.

use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use serde::Deserialize;
use serde_json::json;

use crate::backends::{chat_json, chat_text, Backends, ChatBackend};
use crate::error::{Error, Result};
use crate::ingestion::{parallel_map, span_label};
use crate::model::{BuildConfig, Scene, Segment};
use crate::prompts;
use crate::report::{soft, BuildReport};
use crate::time::TimeRange;

pub const PHASE: &str = "scenes";

/// Inclusive segment-index windows of `chunk_size` sharing `overlap`
/// segments with their predecessor. The last window is clipped at `n`.
pub fn chunk_captions(n: usize, chunk_size: usize, overlap: usize) -> Result<Vec<RangeInclusive<usize>>> {
    if chunk_size == 0 || overlap >= chunk_size {
        return Err(Error::InvalidInput(format!(
            "chunk_size ({chunk_size}) must exceed overlap ({overlap})"
        )));
    }
    let step = chunk_size - overlap;
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk_size).min(n) - 1;
        chunks.push(start..=end);
        if end + 1 == n {
            break;
        }
        start += step;
    }
    Ok(chunks)
}

#[derive(Deserialize)]
struct Boundaries {
    boundaries: Vec<i64>,
}

/// Scene starts the builder proposes inside `chunk`, sorted and deduplicated.
/// Proposals outside the chunk are dropped.
pub fn detect_boundaries(chat: &dyn ChatBackend, segments: &[Segment], chunk: RangeInclusive<usize>) -> Result<Vec<usize>> {
    let input = json!({
        "segments": segments[chunk.clone()].iter().map(|s| json!({
            "index": s.index,
            "span": span_label(&s.range),
            "text": s.composed_text,
        })).collect::<Vec<_>>(),
    });
    let reply: Boundaries = chat_json(chat, &prompts::request(prompts::SCENE_BOUNDARIES, &input))?;
    let mut kept = BTreeSet::new();
    for b in reply.boundaries {
        match usize::try_from(b) {
            Ok(b) if chunk.contains(&b) => {
                kept.insert(b);
            }
            _ => tracing::warn!(proposal = b, ?chunk, "boundary outside chunk dropped"),
        }
    }
    Ok(kept.into_iter().collect())
}

/// Union of proposals plus 0, as inclusive `(first, last)` spans covering
/// `0..n`. Proposals at or past `n` are ignored.
pub fn reconcile_boundaries<'a>(proposals: impl IntoIterator<Item = &'a [usize]>, n: usize) -> Vec<(usize, usize)> {
    if n == 0 {
        return Vec::new();
    }
    let mut starts: BTreeSet<usize> = proposals.into_iter().flatten().copied().filter(|&b| b < n).collect();
    starts.insert(0);
    let starts: Vec<usize> = starts.into_iter().collect();
    starts
        .iter()
        .enumerate()
        .map(|(k, &s)| (s, starts.get(k + 1).map_or(n - 1, |next| next - 1)))
        .collect()
}

fn first_caption(segments: &[Segment], first: usize) -> String {
    let seg = &segments[first];
    match seg.caption.trim() {
        "" => seg.composed_text.clone(),
        c => c.to_string(),
    }
}

pub fn summarize_scene(chat: &dyn ChatBackend, segments: &[Segment], first: usize, last: usize) -> Result<String> {
    let span = TimeRange { start_s: segments[first].range.start_s, end_s: segments[last].range.end_s };
    let input = json!({
        "span": span_label(&span),
        "segments": segments[first..=last].iter().map(|s| s.composed_text.as_str()).collect::<Vec<_>>(),
    });
    chat_text(chat, &prompts::request(prompts::SUMMARIZE_SCENE, &input))
}

pub fn summarize_global(chat: &dyn ChatBackend, segments: &[Segment], scenes: &[Scene]) -> Result<String> {
    let input = json!({
        "scenes": scenes.iter().map(|s| json!({
            "id": s.id,
            "span": s.range(segments).map(|r| span_label(&r)).unwrap_or_default(),
            "summary": s.summary,
        })).collect::<Vec<_>>(),
    });
    chat_text(chat, &prompts::request(prompts::SUMMARIZE_GLOBAL, &input))
}

/// Scene summaries joined in order and cut to `budget` characters.
pub fn fallback_global(scenes: &[Scene], budget: usize) -> String {
    let joined = scenes.iter().map(|s| s.summary.as_str()).collect::<Vec<_>>().join("\n");
    joined.chars().take(budget.max(1)).collect()
}

/// Scenes and the global summary for a built segment list.
pub fn build_scene_hierarchy(
    segments: &[Segment],
    backends: &Backends,
    config: &BuildConfig,
    report: &mut BuildReport,
) -> Result<(Vec<Scene>, String)> {
    let builder = backends.builder.as_ref();
    let chunks = chunk_captions(segments.len(), config.chunk_size, config.chunk_overlap)?;
    let proposals = parallel_map(config.workers, &chunks, |c| detect_boundaries(builder, segments, c.clone()));
    let mut accepted = Vec::with_capacity(chunks.len());
    for (chunk, result) in chunks.iter().zip(proposals) {
        let subject = || format!("boundaries for segments {}-{}", chunk.start(), chunk.end());
        accepted.push(soft(report, PHASE, subject, result)?.unwrap_or_default());
    }
    let spans = reconcile_boundaries(accepted.iter().map(Vec::as_slice), segments.len());
    report.count(PHASE, "chunks", chunks.len());
    report.count(PHASE, "scenes", spans.len());

    let mut scenes = Vec::with_capacity(spans.len());
    for (id, &(first, last)) in spans.iter().enumerate() {
        let subject = || format!("summary of scene {id}");
        let summary = soft(report, PHASE, subject, summarize_scene(builder, segments, first, last))?
            .unwrap_or_else(|| first_caption(segments, first));
        scenes.push(Scene { id, first_segment: first, last_segment: last, summary });
    }
    let global = match soft(report, PHASE, || "global summary".into(), summarize_global(builder, segments, &scenes))? {
        Some(g) => g,
        None => fallback_global(&scenes, config.global_summary_budget),
    };
    Ok((scenes, global))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::ScriptedChat;
    use crate::model::tests::tiny_db;
    use proptest::prelude::*;

    #[test]
    fn chunk_examples() {
        assert_eq!(chunk_captions(10, 4, 1).unwrap(), vec![0..=3, 3..=6, 6..=9]);
        assert_eq!(chunk_captions(3, 8, 2).unwrap(), vec![0..=2]);
        assert!(chunk_captions(0, 4, 1).unwrap().is_empty());
        assert!(chunk_captions(5, 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn chunks_cover_with_exact_overlap(n in 1usize..200, size in 1usize..30, overlap_frac in 0.0f64..1.0) {
            let overlap = ((size as f64) * overlap_frac) as usize % size;
            let chunks = chunk_captions(n, size, overlap).unwrap();
            let mut seen = vec![false; n];
            for c in &chunks {
                for i in c.clone() {
                    seen[i] = true;
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
            for w in chunks.windows(2) {
                prop_assert_eq!(*w[1].start(), w[0].start() + size - overlap);
                if *w[1].end() + 1 < n {
                    prop_assert_eq!(w[0].end() + 1 - w[1].start(), overlap);
                }
            }
        }

        #[test]
        fn reconciled_spans_partition(n in 1usize..120, props in proptest::collection::vec(proptest::collection::vec(0usize..150, 0..10), 0..6)) {
            let spans = reconcile_boundaries(props.iter().map(Vec::as_slice), n);
            let mut next = 0;
            for &(a, b) in &spans {
                prop_assert_eq!(a, next);
                prop_assert!(a <= b);
                next = b + 1;
            }
            prop_assert_eq!(next, n);
        }
    }

    #[test]
    fn reconcile_examples() {
        let p: [&[usize]; 2] = [&[0, 4], &[4, 7]];
        assert_eq!(reconcile_boundaries(p, 10), vec![(0, 3), (4, 6), (7, 9)]);
        assert_eq!(reconcile_boundaries(std::iter::empty(), 5), vec![(0, 4)]);
    }

    #[test]
    fn out_of_chunk_proposals_dropped() {
        let db = tiny_db(10);
        let chat = ScriptedChat::from_texts([r#"{"boundaries":[2, 4, 4, 9, -1]}"#]);
        assert_eq!(detect_boundaries(&chat, &db.segments, 2..=7).unwrap(), vec![2, 4]);
    }

    #[test]
    fn refusals_fall_back() {
        let db = tiny_db(3);
        let chat = ScriptedChat::from_texts(["x", "y", "", "", "", ""]);
        let backends = Backends { builder: std::sync::Arc::new(chat), ..Backends::mock(8, 8, 50) };
        let mut report = BuildReport::default();
        let (scenes, global) = build_scene_hierarchy(&db.segments, &backends, &BuildConfig::default(), &mut report).unwrap();
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].summary, db.segments[0].caption);
        assert_eq!(global, scenes[0].summary);
        assert_eq!(report.fallbacks(PHASE), 3);
    }

    #[test]
    fn fallback_global_truncates() {
        let s = |id, t: &str| Scene { id, first_segment: 0, last_segment: 0, summary: t.into() };
        assert_eq!(fallback_global(&[s(0, "abc"), s(1, "def")], 5), "abc\nd");
    }
}
