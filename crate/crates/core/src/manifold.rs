//! Activity-balanced embedding manifold and guide search.
//!
//! A [`BodyManifold`] stores the same number of exemplars for every activity
//! class. Guide selection picks, inside the query's activity class, the
//! exemplar whose embedding is farthest from the query in cosine distance.
//! Face guides are drawn uniformly from the K globally farthest exemplars.
//!
//! Queries are exhaustive linear scans. Ties on distance resolve to the
//! lexicographically smallest id, so results never depend on entry order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DIM: usize = 512;
pub const DEFAULT_SPHERE_K: usize = 10;
pub const FORMAT_NAME: &str = "mbmc-manifold";
pub const FORMAT_VERSION: u32 = 1;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ManifoldError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot normalize a zero-length embedding")]
    ZeroVector,
    #[error("embedding is not unit norm (norm = {norm})")]
    NotUnitNorm { norm: f64 },
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("activity class {class:?} has {have} entries, need {need}")]
    InsufficientClass { class: String, have: usize, need: usize },
    #[error("duplicate entry id {0:?}")]
    DuplicateId(String),
    #[error("entry {0:?} has an empty activity label")]
    EmptyActivity(String),
    #[error("unknown activity {0:?}")]
    UnknownActivity(String),
    #[error("manifold is empty")]
    Empty,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Normalizes `values` to unit L2 norm.
    pub fn normalized(values: Vec<f32>) -> Result<Self, ManifoldError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ManifoldError::NonFinite);
        }
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return Err(ManifoldError::ZeroVector);
        }
        Ok(Self(values.iter().map(|&v| (v as f64 / norm) as f32).collect()))
    }

    /// Accepts values that are already unit norm (within 1e-6), without rescaling.
    pub fn from_unit(values: Vec<f32>) -> Result<Self, ManifoldError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ManifoldError::NonFinite);
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(ManifoldError::NotUnitNorm { norm });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

fn l2_norm(values: &[f32]) -> f64 {
    values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// `1 - cos(a, b)`, clamped to `[0, 2]`.
pub fn cosine_distance(a: &Embedding, b: &Embedding) -> Result<f64, ManifoldError> {
    cosine_distance_raw(a.as_slice(), b.as_slice())
}

pub(crate) fn cosine_distance_raw(a: &[f32], b: &[f32]) -> Result<f64, ManifoldError> {
    if a.len() != b.len() {
        return Err(ManifoldError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(ManifoldError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldEntry {
    pub id: String,
    pub activity: String,
    pub embedding: Embedding,
    pub source_uri: Option<String>,
}

impl ManifoldEntry {
    /// Builds an entry, normalizing the raw embedding.
    pub fn new(
        id: impl Into<String>,
        activity: impl Into<String>,
        raw_embedding: Vec<f32>,
        source_uri: Option<String>,
    ) -> Result<Self, ManifoldError> {
        Ok(Self {
            id: id.into(),
            activity: activity.into(),
            embedding: Embedding::normalized(raw_embedding)?,
            source_uri,
        })
    }
}

/// Immutable, activity-balanced set of exemplars.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyManifold {
    dim: usize,
    per_class_count: usize,
    entries: Vec<ManifoldEntry>,
}

impl BodyManifold {
    /// Subsamples every activity class to exactly `per_class_count` entries
    /// (the first ones by id). Classes with fewer entries are rejected.
    pub fn build(
        entries: Vec<ManifoldEntry>,
        per_class_count: usize,
        dim: usize,
    ) -> Result<Self, ManifoldError> {
        if per_class_count == 0 {
            return Err(ManifoldError::InvalidArgument("per_class_count must be >= 1".into()));
        }
        if dim == 0 {
            return Err(ManifoldError::InvalidArgument("dim must be >= 1".into()));
        }
        let mut seen = HashSet::new();
        let mut classes: BTreeMap<String, Vec<ManifoldEntry>> = BTreeMap::new();
        for entry in entries {
            check_entry(&entry, dim)?;
            if !seen.insert(entry.id.clone()) {
                return Err(ManifoldError::DuplicateId(entry.id));
            }
            classes.entry(entry.activity.clone()).or_default().push(entry);
        }
        let mut kept = Vec::with_capacity(classes.len() * per_class_count);
        for (class, mut members) in classes {
            if members.len() < per_class_count {
                return Err(ManifoldError::InsufficientClass {
                    class,
                    have: members.len(),
                    need: per_class_count,
                });
            }
            members.sort_by(|a, b| a.id.cmp(&b.id));
            members.truncate(per_class_count);
            kept.extend(members);
        }
        Ok(Self { dim, per_class_count, entries: kept })
    }

    /// Re-checks every invariant on an already-subsampled entry list.
    fn validated(
        entries: Vec<ManifoldEntry>,
        per_class_count: usize,
        dim: usize,
    ) -> Result<Self, ManifoldError> {
        if per_class_count == 0 || dim == 0 {
            return Err(ManifoldError::Validation("dim and per_class_count must be >= 1".into()));
        }
        let mut seen = HashSet::new();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for entry in &entries {
            check_entry(entry, dim).map_err(|e| ManifoldError::Validation(format!("entry {:?}: {e}", entry.id)))?;
            if !seen.insert(entry.id.as_str()) {
                return Err(ManifoldError::Validation(format!("duplicate id {:?}", entry.id)));
            }
            *counts.entry(entry.activity.as_str()).or_default() += 1;
        }
        for (class, count) in counts {
            if count != per_class_count {
                return Err(ManifoldError::Validation(format!(
                    "class {class:?} has {count} entries, header declares {per_class_count}"
                )));
            }
        }
        Ok(Self { dim, per_class_count, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn per_class_count(&self) -> usize {
        self.per_class_count
    }

    pub fn entries(&self) -> &[ManifoldEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn activities(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.entries.iter().map(|e| e.activity.as_str()).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn has_activity(&self, activity: &str) -> bool {
        self.entries.iter().any(|e| e.activity == activity)
    }

    /// Farthest same-class exemplar from `query`.
    pub fn select_guide(&self, query: &Embedding, activity: &str) -> Result<&ManifoldEntry, ManifoldError> {
        self.check_query(query)?;
        self.farthest(query, |e| e.activity == activity)?
            .ok_or_else(|| ManifoldError::UnknownActivity(activity.to_string()))
    }

    /// Farthest exemplar over the whole manifold, ignoring activity.
    pub fn select_global_farthest(&self, query: &Embedding) -> Result<&ManifoldEntry, ManifoldError> {
        self.check_query(query)?;
        self.farthest(query, |_| true)?.ok_or(ManifoldError::Empty)
    }

    /// The `k` exemplars farthest from `query`, farthest first. `k` is
    /// clamped to the entry count.
    pub fn farthest_k(&self, query: &Embedding, k: usize) -> Result<Vec<&ManifoldEntry>, ManifoldError> {
        self.check_query(query)?;
        let mut scored = self
            .entries
            .iter()
            .map(|e| Ok((cosine_distance_raw(query.as_slice(), e.embedding.as_slice())?, e)))
            .collect::<Result<Vec<_>, ManifoldError>>()?;
        scored.sort_by(|a, b| rank_farther(a.0, &a.1.id, b.0, &b.1.id));
        Ok(scored.into_iter().take(k.min(self.entries.len())).map(|(_, e)| e).collect())
    }

    /// Uniform pick among the `sphere_k` farthest exemplars, driven by a
    /// generator seeded with `seed`.
    pub fn select_face_guide(
        &self,
        query: &Embedding,
        sphere_k: usize,
        seed: u64,
    ) -> Result<&ManifoldEntry, ManifoldError> {
        if sphere_k == 0 {
            return Err(ManifoldError::InvalidArgument("sphere_k must be >= 1".into()));
        }
        if self.entries.is_empty() {
            return Err(ManifoldError::Empty);
        }
        let candidates = self.farthest_k(query, sphere_k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(candidates[rng.random_range(0..candidates.len())])
    }

    fn check_query(&self, query: &Embedding) -> Result<(), ManifoldError> {
        if query.dim() != self.dim {
            return Err(ManifoldError::DimensionMismatch { expected: self.dim, got: query.dim() });
        }
        Ok(())
    }

    fn farthest(
        &self,
        query: &Embedding,
        keep: impl Fn(&ManifoldEntry) -> bool,
    ) -> Result<Option<&ManifoldEntry>, ManifoldError> {
        let mut best: Option<(f64, &ManifoldEntry)> = None;
        for entry in self.entries.iter().filter(|e| keep(e)) {
            let d = cosine_distance_raw(query.as_slice(), entry.embedding.as_slice())?;
            let better = match best {
                None => true,
                Some((bd, be)) => rank_farther(d, &entry.id, bd, &be.id) == Ordering::Less,
            };
            if better {
                best = Some((d, entry));
            }
        }
        Ok(best.map(|(_, e)| e))
    }

    /// Writes the newline-delimited manifold format; returns bytes written.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<usize, ManifoldError> {
        let mut buf = String::new();
        let header = Header {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            dim: self.dim,
            per_class_count: self.per_class_count,
        };
        buf.push_str(&serde_json::to_string(&header).expect("header serializes"));
        buf.push('\n');
        for entry in &self.entries {
            buf.push_str("{\"id\":");
            buf.push_str(&serde_json::to_string(&entry.id).expect("string serializes"));
            buf.push_str(",\"activity\":");
            buf.push_str(&serde_json::to_string(&entry.activity).expect("string serializes"));
            buf.push_str(",\"embedding\":[");
            for (i, v) in entry.embedding.as_slice().iter().enumerate() {
                if i > 0 {
                    buf.push(',');
                }
                buf.push_str(&format_float(*v));
            }
            buf.push_str("],\"source_uri\":");
            buf.push_str(&serde_json::to_string(&entry.source_uri).expect("option serializes"));
            buf.push_str("}\n");
        }
        out.write_all(buf.as_bytes())?;
        out.flush()?;
        Ok(buf.len())
    }

    /// Parses the manifold format and re-validates every invariant.
    pub fn read_from<R: BufRead>(input: R) -> Result<Self, ManifoldError> {
        let mut lines = input.lines().enumerate();
        let header: Header = loop {
            match lines.next() {
                None => return Err(ManifoldError::Parse { line: 1, message: "missing header record".into() }),
                Some((i, line)) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line)
                        .map_err(|e| ManifoldError::Parse { line: i + 1, message: e.to_string() })?;
                }
            }
        };
        if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
            return Err(ManifoldError::Parse {
                line: 1,
                message: format!("unsupported format {:?} version {}", header.format, header.version),
            });
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| ManifoldError::Parse { line: i + 1, message: e.to_string() })?;
            let embedding = Embedding::from_unit(rec.embedding).map_err(|e| {
                ManifoldError::Validation(format!("line {}: entry {:?}: {e}", i + 1, rec.id))
            })?;
            entries.push(ManifoldEntry {
                id: rec.id,
                activity: rec.activity,
                embedding,
                source_uri: rec.source_uri,
            });
        }
        Self::validated(entries, header.per_class_count, header.dim)
    }
}

fn check_entry(entry: &ManifoldEntry, dim: usize) -> Result<(), ManifoldError> {
    if entry.activity.is_empty() {
        return Err(ManifoldError::EmptyActivity(entry.id.clone()));
    }
    if entry.id.is_empty() {
        return Err(ManifoldError::InvalidArgument("entry id must be non-empty".into()));
    }
    if entry.embedding.dim() != dim {
        return Err(ManifoldError::DimensionMismatch { expected: dim, got: entry.embedding.dim() });
    }
    Ok(())
}

/// `Less` when (da, ida) ranks ahead of (db, idb): larger distance first,
/// then smaller id.
fn rank_farther(da: f64, ida: &str, db: f64, idb: &str) -> Ordering {
    db.total_cmp(&da).then_with(|| ida.cmp(idb))
}

/// Nine significant digits, which round-trips every `f32` exactly.
fn format_float(v: f32) -> String {
    if v == 0.0 {
        return "0.0".to_string();
    }
    format!("{:.8e}", v)
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dim: usize,
    per_class_count: usize,
}

#[derive(Deserialize)]
struct Record {
    id: String,
    activity: String,
    embedding: Vec<f32>,
    source_uri: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(values: &[f32]) -> Embedding {
        Embedding::normalized(values.to_vec()).unwrap()
    }

    fn entry(id: &str, activity: &str, values: &[f32]) -> ManifoldEntry {
        ManifoldEntry::new(id, activity, values.to_vec(), None).unwrap()
    }

    #[test]
    fn cosine_distance_basic_cases() {
        let u = unit(&[0.3, -0.4, 0.5]);
        let neg = unit(&[-0.3, 0.4, -0.5]);
        assert!(cosine_distance(&u, &u).unwrap().abs() < 1e-7);
        assert!((cosine_distance(&u, &neg).unwrap() - 2.0).abs() < 1e-7);
        let e1 = unit(&[1.0, 0.0]);
        let e2 = unit(&[0.0, 1.0]);
        assert_eq!(cosine_distance(&e1, &e2).unwrap(), 1.0);
        assert_eq!(cosine_distance(&e2, &e1).unwrap(), 1.0);
    }

    #[test]
    fn cosine_distance_rejects_dimension_mismatch() {
        let err = cosine_distance(&unit(&[1.0, 0.0]), &unit(&[1.0, 0.0, 0.0])).unwrap_err();
        assert!(matches!(err, ManifoldError::DimensionMismatch { expected: 2, got: 3 }));
    }

    #[test]
    fn normalization_and_zero_vector() {
        let e = unit(&[3.0, 4.0]);
        assert!((e.norm() - 1.0).abs() < 1e-6);
        assert!(matches!(Embedding::normalized(vec![0.0, 0.0]), Err(ManifoldError::ZeroVector)));
        assert!(matches!(Embedding::from_unit(vec![0.5, 0.0]), Err(ManifoldError::NotUnitNorm { .. })));
    }

    #[test]
    fn build_exact_fit() {
        let m = BodyManifold::build(
            vec![
                entry("a1", "run", &[1.0, 0.0]),
                entry("a2", "run", &[0.0, 1.0]),
                entry("b1", "sit", &[1.0, 1.0]),
                entry("b2", "sit", &[1.0, -1.0]),
            ],
            2,
            2,
        )
        .unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m.activities(), vec!["run", "sit"]);
    }

    #[test]
    fn build_rejects_small_class() {
        let err = BodyManifold::build(
            vec![
                entry("a1", "run", &[1.0, 0.0]),
                entry("a2", "run", &[0.0, 1.0]),
                entry("d1", "dancing", &[1.0, 1.0]),
            ],
            2,
            2,
        )
        .unwrap_err();
        match err {
            ManifoldError::InsufficientClass { class, have, need } => {
                assert_eq!((class.as_str(), have, need), ("dancing", 1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn build_rejects_duplicates_and_keeps_first_ids() {
        let err = BodyManifold::build(
            vec![entry("a", "run", &[1.0, 0.0]), entry("a", "sit", &[0.0, 1.0])],
            1,
            2,
        )
        .unwrap_err();
        assert!(matches!(err, ManifoldError::DuplicateId(id) if id == "a"));

        let m = BodyManifold::build(
            vec![
                entry("c", "run", &[1.0, 0.0]),
                entry("a", "run", &[0.0, 1.0]),
                entry("b", "run", &[1.0, 1.0]),
            ],
            2,
            2,
        )
        .unwrap();
        let ids: Vec<_> = m.entries().iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn select_guide_singleton_and_antipodal() {
        let m = BodyManifold::build(
            vec![
                entry("only", "solo", &[1.0, 0.0]),
                entry("same", "pair", &[0.6, 0.8]),
                entry("opposite", "pair", &[-0.6, -0.8]),
            ],
            1,
            2,
        );
        // "pair" has two entries, "solo" one: unbalanced, so build with k=1 keeps one of "pair".
        let m = m.unwrap();
        assert_eq!(m.select_guide(&unit(&[1.0, 0.0]), "solo").unwrap().id, "only");

        let m = BodyManifold::build(
            vec![entry("same", "pair", &[0.6, 0.8]), entry("opposite", "pair", &[-0.6, -0.8])],
            2,
            2,
        )
        .unwrap();
        let g = m.select_guide(&unit(&[0.6, 0.8]), "pair").unwrap();
        assert_eq!(g.id, "opposite");
        assert!(matches!(
            m.select_guide(&unit(&[0.6, 0.8]), "swim"),
            Err(ManifoldError::UnknownActivity(a)) if a == "swim"
        ));
    }

    #[test]
    fn ties_break_to_smallest_id() {
        let m = BodyManifold::build(
            vec![entry("z", "c", &[0.0, 1.0]), entry("y", "c", &[0.0, -1.0])],
            2,
            2,
        )
        .unwrap();
        // Both orthogonal to the query: distance 1 each.
        assert_eq!(m.select_guide(&unit(&[1.0, 0.0]), "c").unwrap().id, "y");
    }

    #[test]
    fn face_guide_degenerate_sphere_and_clamp() {
        let m = BodyManifold::build(
            vec![
                entry("a", "c", &[1.0, 0.0]),
                entry("b", "c", &[0.0, 1.0]),
                entry("d", "c", &[-1.0, 0.1]),
            ],
            3,
            2,
        )
        .unwrap();
        let q = unit(&[1.0, 0.0]);
        assert_eq!(m.select_face_guide(&q, 1, 99).unwrap().id, "d");
        let picked = m.select_face_guide(&q, 50, 3).unwrap();
        assert!(["a", "b", "d"].contains(&picked.id.as_str()));
        assert!(m.select_face_guide(&q, 0, 3).is_err());
    }

    #[test]
    fn roundtrip_and_validation() {
        let m = BodyManifold::build(
            vec![
                ManifoldEntry::new("a1", "run", vec![0.1, 0.7, -0.2], Some("mpii/1.jpg".into())).unwrap(),
                entry("a2", "run", &[0.9, 0.7, 0.2]),
                entry("b1", "sit \"quoted\"", &[1e-9, -3.0, 2.0]),
                entry("b2", "sit \"quoted\"", &[5.0, 0.0, 0.0]),
            ],
            2,
            3,
        )
        .unwrap();
        let mut first = Vec::new();
        let n = m.write_to(&mut first).unwrap();
        assert_eq!(n, first.len());
        assert_eq!(first.iter().filter(|&&b| b == b'\n').count(), 5);
        let mut second = Vec::new();
        m.write_to(&mut second).unwrap();
        assert_eq!(first, second);
        let back = BodyManifold::read_from(first.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn read_rejects_non_unit_and_truncated() {
        let text = "{\"format\":\"mbmc-manifold\",\"version\":1,\"dim\":2,\"per_class_count\":1}\n\
                    {\"id\":\"a\",\"activity\":\"run\",\"embedding\":[0.5,0.0],\"source_uri\":null}\n";
        assert!(matches!(BodyManifold::read_from(text.as_bytes()), Err(ManifoldError::Validation(_))));

        let truncated = "{\"format\":\"mbmc-manifold\",\"version\":1,\"dim\":2,\"per_class_count\":1}\n\
                         {\"id\":\"a\",\"activity\":\"run\",\"embedding\":[1.0,";
        match BodyManifold::read_from(truncated.as_bytes()) {
            Err(ManifoldError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(BodyManifold::read_from("".as_bytes()), Err(ManifoldError::Parse { .. })));
    }

    #[test]
    fn read_rejects_unbalanced_classes() {
        let text = "{\"format\":\"mbmc-manifold\",\"version\":1,\"dim\":2,\"per_class_count\":2}\n\
                    {\"id\":\"a\",\"activity\":\"run\",\"embedding\":[1.0,0.0],\"source_uri\":null}\n";
        assert!(matches!(BodyManifold::read_from(text.as_bytes()), Err(ManifoldError::Validation(_))));
    }
}
