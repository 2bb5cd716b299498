//! Shared helpers for integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use vidscope::backends::Backends;
use vidscope::index::build_index;
use vidscope::ingestion::{partition_timeline, SourceManifest};
use vidscope::model::{BuildConfig, CanonicalEntity, EntityCategory, EntityMention, IndexDatabase, Scene, Segment, FORMAT_VERSION};
use vidscope::report::BuildReport;

pub const TEXT_DIM: usize = 64;
pub const VISUAL_DIM: usize = 32;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn mock_backends() -> Backends {
    Backends::mock(TEXT_DIM, VISUAL_DIM, 50)
}

pub fn build_fixture(name: &str, backends: &Backends) -> (IndexDatabase, BuildReport) {
    let manifest = SourceManifest::load(&fixture(name).join("manifest.json")).expect("fixture manifest loads");
    build_index(&manifest, backends, &BuildConfig::default()).expect("fixture builds")
}

pub fn unit(rng: &mut StdRng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| (*x as f64 / n) as f32).collect();
        }
    }
}

/// A structurally valid database with random contents and vectors.
pub fn random_database(seed: u64) -> IndexDatabase {
    let mut rng = StdRng::seed_from_u64(seed);
    let text_dim = rng.gen_range(4..48);
    let visual_dim = rng.gen_range(4..48);
    let segment_len = rng.gen_range(5.0..40.0);
    let duration = rng.gen_range(segment_len..segment_len * 15.0);
    let ranges = partition_timeline(duration, segment_len);
    let n = ranges.len();
    let speakers = ["SPEAKER_00", "SPEAKER_01", "SPEAKER_02"];
    let segments: Vec<Segment> = ranges
        .iter()
        .enumerate()
        .map(|(i, &range)| Segment {
            index: i,
            range,
            speakers: speakers.iter().take(rng.gen_range(0..3)).map(|s| s.to_string()).collect(),
            transcript: Vec::new(),
            caption: format!("caption {i} \u{e9}\u{4e2d} \"quoted\"\ttab {}", rng.gen::<u32>()),
            fused_speaker_info: String::new(),
            composed_text: String::new(),
            frame_refs: Vec::new(),
            text_embedding: unit(&mut rng, text_dim),
            visual_embedding: unit(&mut rng, visual_dim),
        })
        .collect();
    let mut segments = segments;
    for s in &mut segments {
        s.composed_text = vidscope::ingestion::compose_segment_text(&s.fused_speaker_info, &s.transcript, &s.caption);
    }
    let mut mentions = Vec::new();
    for s in &segments {
        for _ in 0..rng.gen_range(0..3) {
            let id = mentions.len();
            mentions.push(EntityMention {
                id,
                segment_index: s.index,
                name: format!("thing {}", rng.gen_range(0..5)),
                category: EntityCategory::ALL[rng.gen_range(1..4)],
                description: format!("described {}", rng.gen::<f64>()),
                speaker_labels: Vec::new(),
                embedding: unit(&mut rng, text_dim),
            });
        }
    }
    // One entity per mention keeps every cross-reference consistent.
    let entities: Vec<CanonicalEntity> = mentions
        .iter()
        .enumerate()
        .map(|(id, m)| CanonicalEntity {
            id,
            name: m.name.clone(),
            category: m.category,
            global_description: m.description.clone(),
            member_mentions: vec![m.id],
            linked_segments: BTreeSet::from([m.segment_index]),
            speaker_labels: BTreeSet::new(),
            recaptions: BTreeMap::from([(m.segment_index, format!("recaption {id}"))]),
            embedding: unit(&mut rng, text_dim),
            recaption_embeddings: BTreeMap::from([(m.segment_index, unit(&mut rng, text_dim))]),
        })
        .collect();
    let mut scenes = Vec::new();
    let mut first = 0;
    while first < n {
        let last = (first + rng.gen_range(0..4)).min(n - 1);
        scenes.push(Scene { id: scenes.len(), first_segment: first, last_segment: last, summary: format!("scene from {first}") });
        first = last + 1;
    }
    IndexDatabase {
        format_version: FORMAT_VERSION,
        manifest: SourceManifest {
            video_id: format!("video{seed}"),
            duration_s: duration,
            transcript_path: "transcript.jsonl".into(),
            frames_dir: "frames".into(),
            language_tag: "en".into(),
            segment_len_s: segment_len,
            frames_per_segment: 8,
        },
        config: BuildConfig { cluster_threshold: rng.gen_range(0.5..0.95), ..BuildConfig::default() },
        text_dim,
        visual_dim,
        segments,
        mentions,
        entities,
        scenes,
        global_summary: format!("summary of video {seed}"),
    }
}

/// Bare segments over `n` consecutive 30 s windows; no embeddings.
pub fn synthetic_segments(n: usize) -> Vec<Segment> {
    (0..n)
        .map(|i| {
            let range = vidscope::time::TimeRange { start_s: i as f64 * 30.0, end_s: (i + 1) as f64 * 30.0 };
            let caption = format!("Setting: place {i}\nsomething happens in window {i}");
            Segment {
                index: i,
                range,
                speakers: vec!["S1".into(), "S2".into(), "S3".into(), "S4".into()],
                transcript: Vec::new(),
                composed_text: vidscope::ingestion::compose_segment_text("", &[], &caption),
                caption,
                fused_speaker_info: String::new(),
                frame_refs: Vec::new(),
                text_embedding: Vec::new(),
                visual_embedding: Vec::new(),
            }
        })
        .collect()
}
