//! End-to-end index construction.

use tracing::info;

use crate::backends::Backends;
use crate::entity::build_entity_database;
use crate::error::{Error, Result};
use crate::ingestion::{build_segments, SourceManifest};
use crate::model::{validate_database, BuildConfig, IndexDatabase, FORMAT_VERSION};
use crate::report::BuildReport;
use crate::scene::build_scene_hierarchy;

/// Segments, then entities, then scenes and the global summary. The result
/// always passes [`validate_database`].
pub fn build_index(manifest: &SourceManifest, backends: &Backends, config: &BuildConfig) -> Result<(IndexDatabase, BuildReport)> {
    let mut report = BuildReport::default();
    let (segments, stats) = build_segments(manifest, backends, config)?;
    report.count("segments", "segments", segments.len());
    report.count("segments", "turns_loaded", stats.turns_loaded);
    report.count("segments", "duplicated_turns", stats.duplicated_turns);
    report.count("segments", "dropped_turns", stats.dropped_turns);
    info!(segments = segments.len(), "segments built");

    let (mentions, entities) = build_entity_database(&segments, backends, config, &mut report)?;
    info!(mentions = mentions.len(), entities = entities.len(), "entities built");
    let (scenes, global_summary) = build_scene_hierarchy(&segments, backends, config, &mut report)?;
    info!(scenes = scenes.len(), "scenes built");

    let db = IndexDatabase {
        format_version: FORMAT_VERSION,
        manifest: manifest.clone(),
        config: config.clone(),
        text_dim: backends.text_embedder.dimension(),
        visual_dim: backends.visual_embedder.dimension(),
        segments,
        mentions,
        entities,
        scenes,
        global_summary,
    };
    let validation = validate_database(&db);
    if !validation.is_clean() {
        return Err(Error::InvalidInput(format!("built index is inconsistent: {}", validation.violations.join("; "))));
    }
    Ok((db, report))
}
