//! Exact cosine top-k retrieval over the index's vectors.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::backends::l2_normalize;
use crate::error::{Error, Result};
use crate::model::IndexDatabase;
use crate::time::TimeRange;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    SegmentText,
    SegmentVisual,
    EntityGlobal,
    EntityRecaption,
}

impl RecordKind {
    pub const ALL: [RecordKind; 4] = [
        RecordKind::SegmentText,
        RecordKind::SegmentVisual,
        RecordKind::EntityGlobal,
        RecordKind::EntityRecaption,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::SegmentText => "segment_text",
            RecordKind::SegmentVisual => "segment_visual",
            RecordKind::EntityGlobal => "entity_global",
            RecordKind::EntityRecaption => "entity_recaption",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordId {
    pub kind: RecordKind,
    pub key: String,
}

impl std::fmt::Display for RecordId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.key)
    }
}

pub fn segment_key(index: usize) -> String {
    format!("seg{index:06}")
}

pub fn entity_key(id: usize) -> String {
    format!("ent{id:05}")
}

pub fn recaption_key(entity: usize, segment: usize) -> String {
    format!("ent{entity:05}/seg{segment:06}")
}

pub fn parse_segment_key(key: &str) -> Option<usize> {
    key.strip_prefix("seg")?.parse().ok()
}

pub fn parse_entity_key(key: &str) -> Option<usize> {
    key.strip_prefix("ent")?.parse().ok()
}

pub fn parse_recaption_key(key: &str) -> Option<(usize, usize)> {
    let (e, s) = key.split_once('/')?;
    Some((parse_entity_key(e)?, parse_segment_key(s)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorRecord {
    pub id: RecordId,
    pub vector: Vec<f32>,
    /// Non-empty; a record matches a time filter if any range overlaps it.
    pub time_ranges: Vec<TimeRange>,
    pub payload: String,
}

impl VectorRecord {
    /// Range reported for a hit: the earliest one admitted by `filter`.
    fn hit_range(&self, filter: Option<&[TimeRange]>) -> Option<TimeRange> {
        let mut admitted: Vec<TimeRange> = match filter {
            None => self.time_ranges.clone(),
            Some(f) => self
                .time_ranges
                .iter()
                .filter(|r| f.iter().any(|q| q.intersects(r)))
                .copied()
                .collect(),
        };
        admitted.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        admitted.first().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hit {
    pub id: RecordId,
    pub score: f64,
    pub range: TimeRange,
    pub payload: String,
}

/// Result order: score descending, then start time, then key.
pub fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.range.start_s.total_cmp(&b.range.start_s))
        .then_with(|| a.id.key.cmp(&b.id.key))
}

/// Cosine similarity of two equal-length vectors; zero if either is zero.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), actual: v.len() });
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (*a as f64, *b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}

fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(a, b)| *a as f64 * *b as f64).sum()
}

#[derive(Debug, Clone, Default)]
struct Collection {
    dim: usize,
    records: Vec<VectorRecord>,
    keys: HashSet<String>,
}

/// Candidate in the bounded heap; `Ord` says "ranks better".
struct Ranked<'a> {
    score: f64,
    start: f64,
    key: &'a str,
    index: usize,
}

impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(other.start.total_cmp(&self.start))
            .then_with(|| other.key.cmp(self.key))
    }
}
impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked<'_> {}

/// Per-kind vector collections. Filled once during build, then read-only.
#[derive(Debug, Clone, Default)]
pub struct VectorStore {
    collections: BTreeMap<RecordKind, Collection>,
}

impl VectorStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a record, normalizing its vector. The first record of a kind
    /// fixes that kind's dimension.
    pub fn insert(&mut self, mut record: VectorRecord) -> Result<()> {
        if record.time_ranges.is_empty() {
            return Err(Error::InvalidInput(format!("record {} has no time range", record.id)));
        }
        let coll = self.collections.entry(record.id.kind).or_default();
        if coll.records.is_empty() {
            coll.dim = record.vector.len();
        } else if coll.dim != record.vector.len() {
            return Err(Error::DimensionMismatch { expected: coll.dim, actual: record.vector.len() });
        }
        if coll.keys.contains(&record.id.key) {
            return Err(Error::InvalidInput(format!("duplicate record {}", record.id)));
        }
        if !l2_normalize(&mut record.vector) {
            return Err(Error::InvalidInput(format!("record {} has a zero or non-finite vector", record.id)));
        }
        coll.keys.insert(record.id.key.clone());
        coll.records.push(record);
        Ok(())
    }

    pub fn len(&self, kind: RecordKind) -> usize {
        self.collections.get(&kind).map_or(0, |c| c.records.len())
    }

    pub fn records(&self, kind: RecordKind) -> &[VectorRecord] {
        self.collections.get(&kind).map_or(&[], |c| c.records.as_slice())
    }

    pub fn get(&self, id: &RecordId) -> Option<&VectorRecord> {
        self.records(id.kind).iter().find(|r| r.id.key == id.key)
    }

    fn prepare<'a>(&'a self, query: &[f32], kind: RecordKind, k: usize) -> Result<Option<&'a Collection>> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        match self.collections.get(&kind) {
            Some(c) if !c.records.is_empty() => {
                if c.dim != query.len() {
                    return Err(Error::DimensionMismatch { expected: c.dim, actual: query.len() });
                }
                Ok(Some(c))
            }
            _ => Ok(None),
        }
    }

    /// Top-`k` records of `kind` by cosine similarity, optionally restricted
    /// to records overlapping any of `ranges`.
    pub fn search(&self, query: &[f32], kind: RecordKind, k: usize, ranges: Option<&[TimeRange]>) -> Result<Vec<Hit>> {
        self.search_where(query, kind, k, ranges, |_| true)
    }

    /// [`search`](Self::search) with an extra record predicate.
    pub fn search_where(
        &self,
        query: &[f32],
        kind: RecordKind,
        k: usize,
        ranges: Option<&[TimeRange]>,
        keep: impl Fn(&VectorRecord) -> bool,
    ) -> Result<Vec<Hit>> {
        let Some(coll) = self.prepare(query, kind, k)? else { return Ok(Vec::new()) };
        let mut q = query.to_vec();
        if !l2_normalize(&mut q) {
            // A zero query scores every record 0; rank by time and key only.
            q.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut heap: BinaryHeap<Reverse<Ranked<'_>>> = BinaryHeap::with_capacity(k + 1);
        for (index, rec) in coll.records.iter().enumerate() {
            if !keep(rec) {
                continue;
            }
            let Some(range) = rec.hit_range(ranges) else { continue };
            heap.push(Reverse(Ranked { score: dot(&q, &rec.vector), start: range.start_s, key: &rec.id.key, index }));
            if heap.len() > k {
                heap.pop();
            }
        }
        let mut hits: Vec<Hit> = heap
            .into_iter()
            .map(|Reverse(r)| {
                let rec = &coll.records[r.index];
                Hit {
                    id: rec.id.clone(),
                    score: r.score,
                    range: rec.hit_range(ranges).expect("admitted above"),
                    payload: rec.payload.clone(),
                }
            })
            .collect();
        hits.sort_by(hit_order);
        Ok(hits)
    }

    /// Reference implementation: score every record with [`cosine`], sort
    /// everything, truncate.
    pub fn brute_force_search(&self, query: &[f32], kind: RecordKind, k: usize, ranges: Option<&[TimeRange]>) -> Result<Vec<Hit>> {
        let Some(coll) = self.prepare(query, kind, k)? else { return Ok(Vec::new()) };
        let mut all = Vec::new();
        for rec in &coll.records {
            let admitted = match ranges {
                None => true,
                Some(f) => rec.time_ranges.iter().any(|r| f.iter().any(|q| q.start_s < r.end_s && r.start_s < q.end_s)),
            };
            if !admitted {
                continue;
            }
            let range = rec.hit_range(ranges).expect("admitted");
            all.push(Hit { id: rec.id.clone(), score: cosine(query, &rec.vector)?, range, payload: rec.payload.clone() });
        }
        all.sort_by(hit_order);
        all.truncate(k);
        Ok(all)
    }

    /// Indexes every vector of a built database.
    pub fn from_database(db: &IndexDatabase) -> Result<Self> {
        let mut store = Self::new();
        for seg in &db.segments {
            store.insert(VectorRecord {
                id: RecordId { kind: RecordKind::SegmentText, key: segment_key(seg.index) },
                vector: seg.text_embedding.clone(),
                time_ranges: vec![seg.range],
                payload: seg.composed_text.clone(),
            })?;
            store.insert(VectorRecord {
                id: RecordId { kind: RecordKind::SegmentVisual, key: segment_key(seg.index) },
                vector: seg.visual_embedding.clone(),
                time_ranges: vec![seg.range],
                payload: seg.caption.clone(),
            })?;
        }
        for e in &db.entities {
            let ranges: Vec<TimeRange> =
                e.linked_segments.iter().filter_map(|&i| db.segments.get(i).map(|s| s.range)).collect();
            if ranges.is_empty() {
                warn!(entity = e.id, "entity without linked segments is not searchable");
                continue;
            }
            store.insert(VectorRecord {
                id: RecordId { kind: RecordKind::EntityGlobal, key: entity_key(e.id) },
                vector: e.embedding.clone(),
                time_ranges: ranges,
                payload: format!("{}: {}", e.name, e.global_description),
            })?;
            for (&seg, vector) in &e.recaption_embeddings {
                let Some(s) = db.segments.get(seg) else { continue };
                store.insert(VectorRecord {
                    id: RecordId { kind: RecordKind::EntityRecaption, key: recaption_key(e.id, seg) },
                    vector: vector.clone(),
                    time_ranges: vec![s.range],
                    payload: e.recaptions.get(&seg).cloned().unwrap_or_default(),
                })?;
            }
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rec(key: &str, v: Vec<f32>, start: f64) -> VectorRecord {
        VectorRecord {
            id: RecordId { kind: RecordKind::SegmentText, key: key.into() },
            vector: v,
            time_ranges: vec![TimeRange::new(start, start + 30.0).unwrap()],
            payload: key.into(),
        }
    }

    /// Long-hand reference: normalize each vector separately, then dot.
    fn reference_cosine(u: &[f32], v: &[f32]) -> f64 {
        let mut nu = 0.0;
        for x in u {
            nu += (*x as f64) * (*x as f64);
        }
        let mut nv = 0.0;
        for x in v {
            nv += (*x as f64) * (*x as f64);
        }
        let (nu, nv) = (nu.sqrt(), nv.sqrt());
        let mut d = 0.0;
        for i in 0..u.len() {
            d += (u[i] as f64 / nu) * (v[i] as f64 / nv);
        }
        d
    }

    #[test]
    fn cosine_examples() {
        let u = [0.3f32, -1.2, 2.0];
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() <= 1e-9);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(cosine(&[1.0], &[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn cosine_matches_reference_on_random_pairs() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        for _ in 0..200 {
            let dim = rng.gen_range(2..300);
            let u: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (a, b) = (cosine(&u, &v).unwrap(), reference_cosine(&u, &v));
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            assert_eq!(a, cosine(&v, &u).unwrap());
        }
    }

    #[test]
    fn single_record_always_returned() {
        let mut s = VectorStore::new();
        s.insert(rec("only", vec![1.0, 2.0], 0.0)).unwrap();
        let hits = s.search(&[-5.0, 0.1], RecordKind::SegmentText, 3, None).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id.key, "only");
    }

    #[test]
    fn ties_break_by_start_then_key() {
        let mut s = VectorStore::new();
        s.insert(rec("b", vec![1.0, 0.0], 60.0)).unwrap();
        s.insert(rec("c", vec![1.0, 0.0], 0.0)).unwrap();
        s.insert(rec("a", vec![1.0, 0.0], 60.0)).unwrap();
        let keys: Vec<String> = s.search(&[1.0, 0.0], RecordKind::SegmentText, 3, None).unwrap().into_iter().map(|h| h.id.key).collect();
        assert_eq!(keys, ["c", "a", "b"]);
    }

    #[test]
    fn time_filter_and_edge_cases() {
        let mut s = VectorStore::new();
        for i in 0..5 {
            s.insert(rec(&segment_key(i), vec![1.0, i as f32], i as f64 * 30.0)).unwrap();
        }
        let filter = [TimeRange::new(45.0, 75.0).unwrap()];
        let hits = s.search(&[0.0, 1.0], RecordKind::SegmentText, 10, Some(&filter)).unwrap();
        let keys: Vec<usize> = hits.iter().map(|h| parse_segment_key(&h.id.key).unwrap()).collect();
        assert_eq!(keys, [2, 1]);
        assert!(s.search(&[0.0, 1.0], RecordKind::SegmentText, 10, Some(&[])).unwrap().is_empty());
        assert!(s.search(&[1.0, 0.0], RecordKind::EntityGlobal, 2, None).unwrap().is_empty());
        assert!(matches!(s.search(&[1.0], RecordKind::SegmentText, 2, None), Err(Error::DimensionMismatch { .. })));
        assert!(s.search(&[1.0, 0.0], RecordKind::SegmentText, 0, None).is_err());
        assert!(s.insert(rec(&segment_key(0), vec![1.0, 1.0], 0.0)).is_err());
        assert!(s.insert(rec("z", vec![1.0, 1.0, 1.0], 0.0)).is_err());
    }

    #[test]
    fn inserted_vectors_are_unit_length() {
        let mut s = VectorStore::new();
        s.insert(rec("x", vec![3.0, 4.0], 0.0)).unwrap();
        let v = &s.records(RecordKind::SegmentText)[0].vector;
        assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn brute_force_is_repeatable() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let mut s = VectorStore::new();
        for i in 0..200 {
            s.insert(rec(&segment_key(i), (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(), (i % 17) as f64 * 30.0)).unwrap();
        }
        let q: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = s.brute_force_search(&q, RecordKind::SegmentText, 10, None).unwrap();
        assert_eq!(a, s.brute_force_search(&q, RecordKind::SegmentText, 10, None).unwrap());
        let ids = |h: &[Hit]| h.iter().map(|x| x.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&s.search(&q, RecordKind::SegmentText, 10, None).unwrap()));
    }
}
