//! On-disk index bundle: one directory of human-readable level files plus
//! binary vector arrays, all covered by checksums in `header.json`.
//!
//! Vector arrays are little-endian `f32`, row-major, in the order of the
//! records they belong to: segments, mentions, entities, and per entity its
//! re-captions by segment index.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingestion::SourceManifest;
use crate::model::{BuildConfig, CanonicalEntity, EntityMention, IndexDatabase, Scene, Segment, FORMAT_VERSION};
use crate::report::BuildReport;

pub const HEADER: &str = "header.json";
const MANIFEST: &str = "manifest.json";
const CONFIG: &str = "config.json";
const SEGMENTS: &str = "segments.jsonl";
const MENTIONS: &str = "mentions.jsonl";
const ENTITIES: &str = "entities.jsonl";
const SCENES: &str = "scenes.jsonl";
const SUMMARY: &str = "summary.txt";
const REPORT: &str = "build_report.jsonl";

const SEGMENT_TEXT: &str = "segment_text";
const SEGMENT_VISUAL: &str = "segment_visual";
const MENTION: &str = "entity_mention";
const ENTITY_GLOBAL: &str = "entity_global";
const RECAPTION: &str = "entity_recaption";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorSet {
    pub file: String,
    pub count: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub text_dim: usize,
    pub visual_dim: usize,
    pub vectors: BTreeMap<String, VectorSet>,
    /// File name to lowercase hex SHA-256.
    pub checksums: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("index records serialize");
        out.push(b'\n');
    }
    out
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("index records serialize");
    out.push(b'\n');
    out
}

fn pack<'a>(vectors: impl IntoIterator<Item = &'a Vec<f32>>, dim: usize, name: &str) -> Result<(Vec<u8>, usize)> {
    let mut bytes = Vec::new();
    let mut count = 0;
    for v in vectors {
        if v.len() != dim {
            return Err(Error::InvalidInput(format!("{name} vector {count} has dimension {} not {dim}", v.len())));
        }
        for x in v {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        count += 1;
    }
    Ok((bytes, count))
}

/// Writes `db` (and the build report, if any) into `dir`, replacing files of
/// the same names. Identical inputs give byte-identical files.
pub fn save_index(db: &IndexDatabase, report: Option<&BuildReport>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(String, Vec<u8>)> = vec![
        (MANIFEST.into(), pretty(&db.manifest)),
        (CONFIG.into(), pretty(&db.config)),
        (SEGMENTS.into(), jsonl(&db.segments)),
        (MENTIONS.into(), jsonl(&db.mentions)),
        (ENTITIES.into(), jsonl(&db.entities)),
        (SCENES.into(), jsonl(&db.scenes)),
        (SUMMARY.into(), db.global_summary.as_bytes().to_vec()),
    ];
    if let Some(r) = report {
        files.push((REPORT.into(), r.to_jsonl().into_bytes()));
    }

    let sets: [(&str, Vec<&Vec<f32>>, usize); 5] = [
        (SEGMENT_TEXT, db.segments.iter().map(|s| &s.text_embedding).collect(), db.text_dim),
        (SEGMENT_VISUAL, db.segments.iter().map(|s| &s.visual_embedding).collect(), db.visual_dim),
        (MENTION, db.mentions.iter().map(|m| &m.embedding).collect(), db.text_dim),
        (ENTITY_GLOBAL, db.entities.iter().map(|e| &e.embedding).collect(), db.text_dim),
        (RECAPTION, db.entities.iter().flat_map(|e| e.recaption_embeddings.values()).collect(), db.text_dim),
    ];
    let mut vectors = BTreeMap::new();
    for (name, vs, dim) in sets {
        let (bytes, count) = pack(vs, dim, name)?;
        let file = format!("vectors_{name}.f32");
        vectors.insert(name.to_string(), VectorSet { file: file.clone(), count, dim });
        files.push((file, bytes));
    }

    let mut checksums = BTreeMap::new();
    for (name, bytes) in &files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        checksums.insert(name.clone(), sha256_hex(bytes));
    }
    let header = Header { format_version: FORMAT_VERSION, text_dim: db.text_dim, visual_dim: db.visual_dim, vectors, checksums };
    let path = dir.join(HEADER);
    fs::write(&path, pretty(&header)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    dir: &'a Path,
    header: &'a Header,
}

impl Reader<'_> {
    fn bytes(&self, name: &str) -> Result<Vec<u8>> {
        let expected = self
            .header
            .checksums
            .get(name)
            .ok_or_else(|| Error::CorruptBundle(format!("{name} is not listed in the header")))?;
        let path = self.dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::CorruptBundle(format!("cannot read {}: {e}", path.display())))?;
        if &sha256_hex(&bytes) != expected {
            return Err(Error::CorruptBundle(format!("checksum mismatch for {name}")));
        }
        Ok(bytes)
    }

    fn text(&self, name: &str) -> Result<String> {
        String::from_utf8(self.bytes(name)?).map_err(|_| Error::CorruptBundle(format!("{name} is not UTF-8")))
    }

    fn json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        serde_json::from_str(&self.text(name)?).map_err(|e| Error::CorruptBundle(format!("{name}: {e}")))
    }

    fn jsonl<T: DeserializeOwned>(&self, name: &str) -> Result<Vec<T>> {
        self.text(name)?
            .lines()
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::CorruptBundle(format!("{name} line {}: {e}", i + 1))))
            .collect()
    }

    fn vectors(&self, set: &str, count: usize, dim: usize) -> Result<Vec<Vec<f32>>> {
        let meta = self
            .header
            .vectors
            .get(set)
            .ok_or_else(|| Error::CorruptBundle(format!("vector set {set} is missing")))?;
        if meta.count != count || meta.dim != dim {
            return Err(Error::CorruptBundle(format!(
                "vector set {set} holds {}x{}, expected {count}x{dim}",
                meta.count, meta.dim
            )));
        }
        let bytes = self.bytes(&meta.file)?;
        if bytes.len() != count * dim * 4 {
            return Err(Error::CorruptBundle(format!("{} has {} bytes, expected {}", meta.file, bytes.len(), count * dim * 4)));
        }
        let floats: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(if dim == 0 { vec![Vec::new(); count] } else { floats.chunks(dim).map(<[f32]>::to_vec).collect() })
    }
}

pub fn read_header(dir: &Path) -> Result<Header> {
    let path = dir.join(HEADER);
    let text = fs::read_to_string(&path).map_err(|e| Error::CorruptBundle(format!("cannot read {}: {e}", path.display())))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::CorruptBundle(format!("{HEADER}: {e}")))?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::CorruptBundle("header has no format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch { found: found.try_into().unwrap_or(u32::MAX), supported: FORMAT_VERSION });
    }
    serde_json::from_value(raw).map_err(|e| Error::CorruptBundle(format!("{HEADER}: {e}")))
}

/// Loads a bundle written by [`save_index`], verifying every checksum.
pub fn load_index(dir: &Path) -> Result<(IndexDatabase, Option<BuildReport>)> {
    let header = read_header(dir)?;
    let r = Reader { dir, header: &header };
    let manifest: SourceManifest = r.json(MANIFEST)?;
    let config: BuildConfig = r.json(CONFIG)?;
    let mut segments: Vec<Segment> = r.jsonl(SEGMENTS)?;
    let mut mentions: Vec<EntityMention> = r.jsonl(MENTIONS)?;
    let mut entities: Vec<CanonicalEntity> = r.jsonl(ENTITIES)?;
    let scenes: Vec<Scene> = r.jsonl(SCENES)?;
    let global_summary = r.text(SUMMARY)?;
    let (td, vd) = (header.text_dim, header.visual_dim);
    let (ns, nm, ne) = (segments.len(), mentions.len(), entities.len());

    for (s, v) in segments.iter_mut().zip(r.vectors(SEGMENT_TEXT, ns, td)?) {
        s.text_embedding = v;
    }
    for (s, v) in segments.iter_mut().zip(r.vectors(SEGMENT_VISUAL, ns, vd)?) {
        s.visual_embedding = v;
    }
    for (m, v) in mentions.iter_mut().zip(r.vectors(MENTION, nm, td)?) {
        m.embedding = v;
    }
    for (e, v) in entities.iter_mut().zip(r.vectors(ENTITY_GLOBAL, ne, td)?) {
        e.embedding = v;
    }
    let n_recaptions = entities.iter().map(|e| e.recaptions.len()).sum();
    let mut recaption_vectors = r.vectors(RECAPTION, n_recaptions, td)?.into_iter();
    for e in &mut entities {
        e.recaption_embeddings = e.recaptions.keys().map(|&k| (k, recaption_vectors.next().expect("count checked"))).collect();
    }

    let report = match header.checksums.contains_key(REPORT) {
        true => Some(BuildReport::from_jsonl(&r.text(REPORT)?).map_err(|e| Error::CorruptBundle(format!("{REPORT}: {e}")))?),
        false => None,
    };
    let db = IndexDatabase {
        format_version: header.format_version,
        manifest,
        config,
        text_dim: td,
        visual_dim: vd,
        segments,
        mentions,
        entities,
        scenes,
        global_summary,
    };
    Ok((db, report))
}
