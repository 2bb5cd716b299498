//! Entity extraction, clustering, canonicalization, speaker-priority merging
//! and entity-centric re-captioning.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;
use serde_json::json;

use crate::backends::{self, chat_json, chat_text, Backends, ChatBackend};
use crate::error::{Error, Result};
use crate::ingestion::{parallel_map, span_label};
use crate::model::{BuildConfig, CanonicalEntity, EntityCategory, EntityMention, Segment};
use crate::prompts;
use crate::report::{soft, BuildReport};
use crate::store::cosine;

pub const PHASE: &str = "entities";

#[derive(Deserialize)]
struct Extracted {
    #[serde(default)]
    entities: Vec<RawEntity>,
}

#[derive(Deserialize)]
struct RawEntity {
    name: String,
    #[serde(default)]
    category: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    speakers: Vec<String>,
}

/// Salient entities of one segment. Ids are left at 0 for the caller to
/// assign. Speaker labels are kept only on characters and only if the
/// segment actually has that speaker.
pub fn extract_entities(chat: &dyn ChatBackend, segment: &Segment) -> Result<Vec<EntityMention>> {
    if segment.composed_text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let input = json!({
        "segment": segment.index,
        "span": span_label(&segment.range),
        "speakers": segment.speakers,
        "text": segment.composed_text,
    });
    let reply: Extracted = chat_json(chat, &prompts::request(prompts::EXTRACT_ENTITIES, &input))?;
    let mut out = Vec::new();
    for raw in reply.entities {
        let name = raw.name.trim().to_string();
        if name.is_empty() {
            continue;
        }
        let category = EntityCategory::parse_lenient(&raw.category);
        let description = match raw.description.trim() {
            "" => name.clone(),
            d => d.to_string(),
        };
        let mut speaker_labels: Vec<String> = if category == EntityCategory::Character {
            raw.speakers.into_iter().filter(|s| segment.speakers.contains(s)).collect()
        } else {
            Vec::new()
        };
        speaker_labels.sort();
        speaker_labels.dedup();
        out.push(EntityMention {
            id: 0,
            segment_index: segment.index,
            name,
            category,
            description,
            speaker_labels,
            embedding: Vec::new(),
        });
    }
    Ok(out)
}

/// Greedy average-linkage agglomeration over cosine similarity.
///
/// Repeatedly merges the pair of clusters with the highest mean pairwise
/// similarity while that mean is at least `threshold`. Equal means go to the
/// pair whose lowest members come first. Returns clusters of input
/// positions, each sorted, ordered by lowest member.
pub fn cluster_mentions(vectors: &[Vec<f32>], threshold: f64) -> Vec<Vec<usize>> {
    let n = vectors.len();
    // sums[a][b]: total pairwise similarity between the clusters in slots a, b.
    // Slot a always holds the cluster whose lowest member is a.
    let mut sums = vec![vec![0.0f64; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let s = cosine(&vectors[a], &vectors[b]).unwrap_or(0.0);
            sums[a][b] = s;
            sums[b][a] = s;
        }
    }
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut active = vec![true; n];
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in (0..n).filter(|&a| active[a]) {
            for b in (a + 1..n).filter(|&b| active[b]) {
                let mean = sums[a][b] / (members[a].len() * members[b].len()) as f64;
                if best.map_or(true, |(m, _, _)| mean > m) {
                    best = Some((mean, a, b));
                }
            }
        }
        let Some((mean, a, b)) = best else { break };
        if mean < threshold {
            break;
        }
        for c in (0..n).filter(|&c| active[c] && c != a && c != b) {
            let s = sums[a][c] + sums[b][c];
            sums[a][c] = s;
            sums[c][a] = s;
        }
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        members[a].sort_unstable();
        active[b] = false;
    }
    (0..n).filter(|&i| active[i]).map(|i| std::mem::take(&mut members[i])).collect()
}

/// Clusters mentions separately per category. Returns mention ids.
pub fn cluster_by_category(mentions: &[EntityMention], threshold: f64) -> Vec<Vec<usize>> {
    let mut clusters = Vec::new();
    for cat in EntityCategory::ALL {
        let ids: Vec<usize> = mentions.iter().filter(|m| m.category == cat).map(|m| m.id).collect();
        let vectors: Vec<Vec<f32>> = ids.iter().map(|&i| mentions[i].embedding.clone()).collect();
        for c in cluster_mentions(&vectors, threshold) {
            clusters.push(c.into_iter().map(|p| ids[p]).collect::<Vec<_>>());
        }
    }
    clusters.sort_by_key(|c| c[0]);
    clusters
}

fn entity_from(mentions: &[EntityMention], mut members: Vec<usize>, name: String, description: String) -> CanonicalEntity {
    members.sort_unstable();
    members.dedup();
    let first = &mentions[members[0]];
    let speaker_labels = if first.category == EntityCategory::Character {
        members.iter().flat_map(|&m| mentions[m].speaker_labels.iter().cloned()).collect()
    } else {
        BTreeSet::new()
    };
    CanonicalEntity {
        id: 0,
        name,
        category: first.category,
        global_description: description,
        linked_segments: members.iter().map(|&m| mentions[m].segment_index).collect(),
        member_mentions: members,
        speaker_labels,
        recaptions: BTreeMap::new(),
        embedding: Vec::new(),
        recaption_embeddings: BTreeMap::new(),
    }
}

fn join_distinct<'a>(parts: impl IntoIterator<Item = &'a str>, sep: &str) -> String {
    let mut seen = BTreeSet::new();
    parts
        .into_iter()
        .map(str::trim)
        .filter(|p| !p.is_empty() && seen.insert(*p))
        .collect::<Vec<_>>()
        .join(sep)
}

/// The whole cluster as one entity, named after its earliest mention.
pub fn fallback_entity(mentions: &[EntityMention], cluster: &[usize]) -> CanonicalEntity {
    let name = mentions[cluster[0]].name.clone();
    let description = join_distinct(cluster.iter().map(|&m| mentions[m].description.as_str()), "; ");
    entity_from(mentions, cluster.to_vec(), name, description)
}

#[derive(Deserialize)]
struct Groups {
    groups: Vec<Group>,
}

#[derive(Deserialize)]
struct Group {
    #[serde(default)]
    name: String,
    #[serde(default)]
    description: String,
    members: Vec<usize>,
}

/// Asks the builder whether a cluster is one entity or several. A reply that
/// is not an exact partition of the cluster is a refusal.
pub fn canonicalize_cluster(
    chat: &dyn ChatBackend,
    mentions: &[EntityMention],
    cluster: &[usize],
) -> Result<Vec<CanonicalEntity>> {
    if cluster.len() == 1 {
        let m = &mentions[cluster[0]];
        return Ok(vec![entity_from(mentions, cluster.to_vec(), m.name.clone(), m.description.clone())]);
    }
    let input = json!({
        "category": mentions[cluster[0]].category,
        "mentions": cluster.iter().map(|&i| {
            let m = &mentions[i];
            json!({"id": i, "name": m.name, "description": m.description, "segment": m.segment_index})
        }).collect::<Vec<_>>(),
    });
    let reply: Groups = chat_json(chat, &prompts::request(prompts::CANONICALIZE, &input))?;
    let expected: BTreeSet<usize> = cluster.iter().copied().collect();
    let mut seen = BTreeSet::new();
    for g in &reply.groups {
        if g.members.is_empty() {
            return Err(Error::BackendRefusal("canonicalization returned an empty group".into()));
        }
        for m in &g.members {
            if !expected.contains(m) || !seen.insert(*m) {
                return Err(Error::BackendRefusal(format!("canonicalization misassigned mention {m}")));
            }
        }
    }
    if seen != expected {
        return Err(Error::BackendRefusal("canonicalization left mentions unassigned".into()));
    }
    let mut out: Vec<CanonicalEntity> = reply
        .groups
        .into_iter()
        .map(|g| {
            let mut members = g.members;
            members.sort_unstable();
            let name = match g.name.trim() {
                "" => mentions[members[0]].name.clone(),
                n => n.to_string(),
            };
            let description = match g.description.trim() {
                "" => join_distinct(members.iter().map(|&m| mentions[m].description.as_str()), "; "),
                d => d.to_string(),
            };
            entity_from(mentions, members, name, description)
        })
        .collect();
    out.sort_by_key(|e| e.member_mentions[0]);
    Ok(out)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Groups of character entities connected through shared speaker labels,
/// transitively. Every entity appears in exactly one group; groups are
/// ordered by their lowest position.
pub fn speaker_components(entities: &[CanonicalEntity]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..entities.len()).collect();
    let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, e) in entities.iter().enumerate() {
        if e.category != EntityCategory::Character {
            continue;
        }
        for label in &e.speaker_labels {
            match owner.get(label.as_str()) {
                Some(&j) => {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
                None => {
                    owner.insert(label, i);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..entities.len() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups.into_values().collect()
}

#[derive(Deserialize)]
struct Merged {
    name: String,
    #[serde(default)]
    description: String,
}

/// Merges character entities that share a speaker voice. Afterwards no two
/// characters share a label.
pub fn speaker_priority_merge(
    chat: &dyn ChatBackend,
    entities: Vec<CanonicalEntity>,
    report: &mut BuildReport,
) -> Result<Vec<CanonicalEntity>> {
    let groups = speaker_components(&entities);
    let mut slots: Vec<Option<CanonicalEntity>> = entities.into_iter().map(Some).collect();
    let mut out = Vec::with_capacity(groups.len());
    let mut merges = 0;
    for group in groups {
        let parts: Vec<CanonicalEntity> = group.iter().map(|&i| slots[i].take().expect("each entity in one group")).collect();
        if parts.len() == 1 {
            out.extend(parts);
            continue;
        }
        merges += parts.len() - 1;
        let input = json!({
            "entities": parts.iter().map(|e| json!({
                "name": e.name,
                "description": e.global_description,
                "speakers": e.speaker_labels,
            })).collect::<Vec<_>>(),
        });
        let subject = || format!("merge of {}", parts.iter().map(|e| e.name.as_str()).collect::<Vec<_>>().join(", "));
        let reply = soft(report, PHASE, subject, chat_json::<Merged>(chat, &prompts::request(prompts::MERGE_ENTITIES, &input)))?;
        let (name, description) = match reply {
            Some(m) if !m.name.trim().is_empty() => {
                let d = match m.description.trim() {
                    "" => join_distinct(parts.iter().map(|e| e.global_description.as_str()), " | "),
                    d => d.to_string(),
                };
                (m.name.trim().to_string(), d)
            }
            _ => (parts[0].name.clone(), join_distinct(parts.iter().map(|e| e.global_description.as_str()), " | ")),
        };
        let mut merged = parts[0].clone();
        merged.name = name;
        merged.global_description = description;
        for p in &parts[1..] {
            merged.member_mentions.extend(&p.member_mentions);
            merged.linked_segments.extend(&p.linked_segments);
            merged.speaker_labels.extend(p.speaker_labels.iter().cloned());
            merged.recaptions.extend(p.recaptions.iter().map(|(k, v)| (*k, v.clone())));
            merged.recaption_embeddings.extend(p.recaption_embeddings.iter().map(|(k, v)| (*k, v.clone())));
        }
        merged.member_mentions.sort_unstable();
        out.push(merged);
    }
    report.count(PHASE, "speaker_merges", merges);
    Ok(out)
}

/// Segment description focused on one entity.
pub fn recaption_entity_segment(chat: &dyn ChatBackend, entity: &CanonicalEntity, segment: &Segment) -> Result<String> {
    let input = json!({
        "entity": {
            "name": entity.name,
            "category": entity.category,
            "description": entity.global_description,
        },
        "segment": {
            "index": segment.index,
            "span": span_label(&segment.range),
            "text": segment.composed_text,
        },
    });
    chat_text(chat, &prompts::request(prompts::RECAPTION, &input))
}

/// Mentions and canonical entities for a built segment list, with all
/// embeddings and re-captions filled in. Entity ids follow the order of
/// each entity's lowest mention id.
pub fn build_entity_database(
    segments: &[Segment],
    backends: &Backends,
    config: &BuildConfig,
    report: &mut BuildReport,
) -> Result<(Vec<EntityMention>, Vec<CanonicalEntity>)> {
    let builder = backends.builder.as_ref();
    let text = backends.text_embedder.as_ref();

    let extracted = parallel_map(config.workers, segments, |s| extract_entities(builder, s));
    let mut mentions = Vec::new();
    for (seg, result) in segments.iter().zip(extracted) {
        if let Some(list) = soft(report, PHASE, || format!("extraction for segment {}", seg.index), result)? {
            mentions.extend(list);
        }
    }
    for (i, m) in mentions.iter_mut().enumerate() {
        m.id = i;
    }
    report.count(PHASE, "mentions", mentions.len());

    let embedded = parallel_map(config.workers, &mentions, |m| backends::embed_text(text, &m.embedding_text()));
    for (m, v) in mentions.iter_mut().zip(embedded) {
        m.embedding = v?;
    }

    let clusters = cluster_by_category(&mentions, config.cluster_threshold);
    report.count(PHASE, "clusters", clusters.len());

    let mut entities = Vec::new();
    let mut splits = 0;
    for cluster in &clusters {
        let result = canonicalize_cluster(builder, &mentions, cluster);
        let subject = || format!("canonicalization of mentions {cluster:?}");
        match soft(report, PHASE, subject, result)? {
            Some(list) => {
                splits += list.len() - 1;
                entities.extend(list);
            }
            None => entities.push(fallback_entity(&mentions, cluster)),
        }
    }
    report.count(PHASE, "splits", splits);

    let mut entities = speaker_priority_merge(builder, entities, report)?;
    entities.sort_by_key(|e| e.member_mentions[0]);
    for (i, e) in entities.iter_mut().enumerate() {
        e.id = i;
    }
    report.count(PHASE, "entities", entities.len());

    let globals = parallel_map(config.workers, &entities, |e| backends::embed_text(text, &e.embedding_text()));
    for (e, v) in entities.iter_mut().zip(globals) {
        e.embedding = v?;
    }

    let pairs: Vec<(usize, usize)> =
        entities.iter().flat_map(|e| e.linked_segments.iter().map(move |&s| (e.id, s))).collect();
    let recaptions = parallel_map(config.workers, &pairs, |&(e, s)| recaption_entity_segment(builder, &entities[e], &segments[s]));
    let mut texts = Vec::with_capacity(pairs.len());
    for (&(e, s), result) in pairs.iter().zip(recaptions) {
        let subject = || format!("recaption of entity {e} in segment {s}");
        texts.push(soft(report, PHASE, subject, result)?.unwrap_or_else(|| segments[s].composed_text.clone()));
    }
    let vectors = parallel_map(config.workers, &texts, |t| backends::embed_text(text, t));
    for ((&(e, s), t), v) in pairs.iter().zip(texts).zip(vectors) {
        entities[e].recaptions.insert(s, t);
        entities[e].recaption_embeddings.insert(s, v?);
    }
    report.count(PHASE, "recaptions", pairs.len());
    Ok((mentions, entities))
}
