//! Cluster-and-refine: command-position search, entropy-based type
//! refinement and function/type constraints.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{nw_align, AlignmentParams};
use crate::semantics::{CorpusAnnotations, FieldAnnotation, SemanticFunction, SemanticType};
use crate::trace::{FormatResult, Message};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RefineError {
    #[error("no format for message `{0}`")]
    MissingFormat(String),
    #[error("no annotations for message `{0}`")]
    MissingAnnotations(String),
}

/// Alignment score of two formats over their boundary-offset sequences.
pub fn nw_format_score(fa: &FormatResult, fb: &FormatResult, params: &AlignmentParams) -> i64 {
    nw_align(&fa.boundaries(), &fb.boundaries(), params)
}

/// One group of messages sharing a command-field value. `key` is `None` for
/// messages too short to contain the command range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub key: Option<Vec<u8>>,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// `None` when no candidate scored above zero (or fewer than two
    /// messages); then all messages share one cluster.
    pub command_pos: Option<(usize, usize)>,
    pub clusters: Vec<Cluster>,
    pub align_score: f64,
}

impl Clustering {
    /// Everything in one cluster, no command position.
    pub fn single(messages: &[Message]) -> Self {
        let members = messages.iter().map(|m| m.id.clone()).collect();
        Self { command_pos: None, clusters: alloc::vec![Cluster { key: None, members }], align_score: 0.0 }
    }

    pub fn cluster_of(&self, message_id: &str) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.members.iter().any(|m| m == message_id))
    }
}

fn group_by_range(messages: &[Message], idx: &[usize], start: usize, end: usize) -> BTreeMap<Option<Vec<u8>>, Vec<usize>> {
    let mut groups: BTreeMap<Option<Vec<u8>>, Vec<usize>> = BTreeMap::new();
    for &i in idx {
        groups.entry(messages[i].slice(start, end).map(<[u8]>::to_vec)).or_default().push(i);
    }
    groups
}

/// Pair-count-weighted mean of within-cluster pairwise format scores;
/// 0 when no cluster has two members.
fn align_score(groups: &BTreeMap<Option<Vec<u8>>, Vec<usize>>, pair: &[Vec<i64>]) -> f64 {
    let (mut sum, mut pairs) = (0i64, 0u64);
    for members in groups.values() {
        for (k, &a) in members.iter().enumerate() {
            for &b in &members[k + 1..] {
                sum += pair[a][b];
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum as f64 / pairs as f64
    }
}

/// Tries every field range of every format as the command position and keeps
/// the one whose value-clusters have the highest average format alignment.
/// Candidates are visited in `(start, end)` order and only a strictly higher
/// score replaces the current best, so ties go to the smallest range.
pub fn explore_optimal(
    messages: &[Message],
    formats: &BTreeMap<String, FormatResult>,
    params: &AlignmentParams,
) -> Result<Clustering, RefineError> {
    let fs: Vec<&FormatResult> = messages
        .iter()
        .map(|m| formats.get(&m.id).ok_or_else(|| RefineError::MissingFormat(m.id.clone())))
        .collect::<Result<_, _>>()?;
    if messages.len() < 2 {
        return Ok(Clustering::single(messages));
    }
    let n = messages.len();
    let mut pair = alloc::vec![alloc::vec![0i64; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let s = nw_format_score(fs[a], fs[b], params);
            pair[a][b] = s;
            pair[b][a] = s;
        }
    }
    let candidates: BTreeSet<(usize, usize)> = fs.iter().flat_map(|f| f.fields.iter().map(|x| x.range())).collect();
    let idx: Vec<usize> = (0..n).collect();
    let mut best: Option<((usize, usize), f64)> = None;
    let mut max_score = 0.0;
    for (s, e) in candidates {
        let score = align_score(&group_by_range(messages, &idx, s, e), &pair);
        if score > max_score {
            max_score = score;
            best = Some(((s, e), score));
        }
    }
    let Some(((s, e), score)) = best else {
        return Ok(Clustering::single(messages));
    };
    let clusters = group_by_range(messages, &idx, s, e)
        .into_iter()
        .map(|(key, members)| Cluster { key, members: members.into_iter().map(|i| messages[i].id.clone()).collect() })
        .collect();
    Ok(Clustering { command_pos: Some((s, e)), clusters, align_score: score })
}

/// Shannon entropy in bits of a value multiset.
pub fn shannon_entropy<'a>(values: impl IntoIterator<Item = &'a [u8]>) -> f64 {
    let mut counts: BTreeMap<&[u8], usize> = BTreeMap::new();
    let mut n = 0usize;
    for v in values {
        *counts.entry(v).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * libm::log2(p)
        })
        .sum();
    // -0.0 and rounding noise for a single value
    if counts.len() == 1 {
        0.0
    } else {
        h
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldEntropy {
    pub start: usize,
    pub end: usize,
    pub entropy: f64,
    /// Messages long enough to contribute a value.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntropy {
    pub key: Option<Vec<u8>>,
    pub members: usize,
    pub fields: Vec<FieldEntropy>,
    pub median: f64,
    /// Set for single-message clusters, which are not refined.
    pub skipped: bool,
}

impl ClusterEntropy {
    pub fn entropy_of(&self, start: usize, end: usize) -> Option<f64> {
        self.fields.iter().find(|f| f.start == start && f.end == end).map(|f| f.entropy)
    }
}

/// Per-cluster entropies over every distinct field range found in the
/// cluster's annotations; the median is taken over those ranges.
pub fn cluster_entropy(cluster: &Cluster, annotations: &CorpusAnnotations, messages: &BTreeMap<&str, &Message>) -> ClusterEntropy {
    let ranges: BTreeSet<(usize, usize)> = cluster
        .members
        .iter()
        .filter_map(|id| annotations.get(id))
        .flat_map(|anns| anns.iter().map(|a| a.field.range()))
        .collect();
    let fields: Vec<FieldEntropy> = ranges
        .into_iter()
        .map(|(s, e)| {
            let values: Vec<&[u8]> =
                cluster.members.iter().filter_map(|id| messages.get(id.as_str())).filter_map(|m| m.slice(s, e)).collect();
            FieldEntropy { start: s, end: e, samples: values.len(), entropy: shannon_entropy(values) }
        })
        .collect();
    let hs: Vec<f64> = fields.iter().map(|f| f.entropy).collect();
    ClusterEntropy {
        key: cluster.key.clone(),
        members: cluster.members.len(),
        median: median(&hs),
        fields,
        skipped: cluster.members.len() < 2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditRule {
    /// STATIC kept only below the cluster median.
    StaticEntropy,
    /// BYTES kept only above the cluster median.
    BytesEntropy,
    /// UNKNOWN field took the type of the closest-entropy field.
    EntropyFallback,
    /// Cluster of one message: no refinement.
    SingletonCluster,
    /// Field at the clustering command position.
    CommandPosition,
    /// Function incompatible with the field type.
    Constraint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditAction {
    Revoked,
    Assigned,
    Added,
    Dropped,
    Skipped,
}

/// One change made by refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub message_id: String,
    pub field: Option<(usize, usize)>,
    pub action: AuditAction,
    pub rule: AuditRule,
    pub label: Option<String>,
    pub entropy: Option<f64>,
    pub median: Option<f64>,
    pub donor: Option<(usize, usize)>,
}

impl AuditEntry {
    fn new(message_id: &str, field: Option<(usize, usize)>, action: AuditAction, rule: AuditRule) -> Self {
        Self {
            message_id: message_id.to_string(),
            field,
            action,
            rule,
            label: None,
            entropy: None,
            median: None,
            donor: None,
        }
    }
}

/// Revokes STATIC/BYTES labels whose entropy is not on the expected side of
/// the cluster median, then gives UNKNOWN fields the type of the same
/// message's typed field with the closest entropy (ties: smaller start).
/// STATIC and BYTES are never donated: they must come from a detector and
/// survive the median test.
pub fn entropy_refine(
    annotations: &CorpusAnnotations,
    clustering: &Clustering,
    messages: &[Message],
) -> (CorpusAnnotations, Vec<AuditEntry>) {
    let by_id: BTreeMap<&str, &Message> = messages.iter().map(|m| (m.id.as_str(), m)).collect();
    let mut out = annotations.clone();
    let mut audit = Vec::new();
    for cluster in &clustering.clusters {
        let prof = cluster_entropy(cluster, annotations, &by_id);
        if prof.skipped {
            for id in &cluster.members {
                audit.push(AuditEntry::new(id, None, AuditAction::Skipped, AuditRule::SingletonCluster));
            }
            continue;
        }
        for id in &cluster.members {
            let Some(anns) = out.get_mut(id) else { continue };
            refine_message(id, anns, &prof, &mut audit);
        }
    }
    (out, audit)
}

fn refine_message(id: &str, anns: &mut [FieldAnnotation], prof: &ClusterEntropy, audit: &mut Vec<AuditEntry>) {
    let h = |a: &FieldAnnotation| prof.entropy_of(a.field.start, a.field.end).unwrap_or(0.0);
    for a in anns.iter_mut() {
        let e = h(a);
        let (keep, rule) = match a.inferred_type {
            SemanticType::Static => (e < prof.median, AuditRule::StaticEntropy),
            SemanticType::Bytes => (e > prof.median, AuditRule::BytesEntropy),
            _ => continue,
        };
        if !keep {
            let mut entry = AuditEntry::new(id, Some(a.field.range()), AuditAction::Revoked, rule);
            entry.label = Some(a.inferred_type.name().to_string());
            entry.entropy = Some(e);
            entry.median = Some(prof.median);
            audit.push(entry);
            a.inferred_type = SemanticType::Unknown;
        }
    }
    let donors: Vec<(usize, usize, SemanticType, f64)> = anns
        .iter()
        .filter(|a| !matches!(a.inferred_type, SemanticType::Unknown | SemanticType::Static | SemanticType::Bytes))
        .map(|a| (a.field.start, a.field.end, a.inferred_type, h(a)))
        .collect();
    for a in anns.iter_mut().filter(|a| a.inferred_type == SemanticType::Unknown) {
        let e = h(a);
        let best = donors
            .iter()
            .filter(|d| (d.0, d.1) != a.field.range())
            .min_by(|x, y| libm::fabs(x.3 - e).total_cmp(&libm::fabs(y.3 - e)).then(x.0.cmp(&y.0)));
        if let Some(&(s, en, ty, _)) = best {
            a.inferred_type = ty;
            let mut entry = AuditEntry::new(id, Some(a.field.range()), AuditAction::Assigned, AuditRule::EntropyFallback);
            entry.label = Some(ty.name().to_string());
            entry.entropy = Some(e);
            entry.median = Some(prof.median);
            entry.donor = Some((s, en));
            audit.push(entry);
        }
    }
}

/// Allowed field types for each function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintTable {
    pub allowed: BTreeMap<SemanticFunction, BTreeSet<SemanticType>>,
}

impl Default for ConstraintTable {
    fn default() -> Self {
        use SemanticFunction as F;
        use SemanticType as T;
        let rows: [(F, &[T]); 6] = [
            (F::Command, &[T::Group]),
            (F::Length, &[T::Integer]),
            (F::Delim, &[T::Static, T::Group]),
            (F::Aligned, &[T::Group, T::Bytes]),
            (F::Checksum, &[T::Integer]),
            (F::Filename, &[T::String]),
        ];
        Self { allowed: rows.into_iter().map(|(f, ts)| (f, ts.iter().copied().collect())).collect() }
    }
}

impl ConstraintTable {
    pub fn allows(&self, f: SemanticFunction, t: SemanticType) -> bool {
        self.allowed.get(&f).is_some_and(|s| s.contains(&t))
    }

    /// Number of (field, function) pairs whose type is not allowed.
    pub fn violations(&self, annotations: &CorpusAnnotations) -> usize {
        annotations
            .values()
            .flatten()
            .map(|a| a.inferred_functions.iter().filter(|&&f| !self.allows(f, a.inferred_type)).count())
            .sum()
    }
}

/// Adds COMMAND to the field at the clustering command position (typing it
/// GROUP if still UNKNOWN), then drops every function the table forbids for
/// the field's type.
pub fn constraint_refine(
    annotations: &CorpusAnnotations,
    table: &ConstraintTable,
    clustering: Option<&Clustering>,
) -> (CorpusAnnotations, Vec<AuditEntry>) {
    let mut out = annotations.clone();
    let mut audit = Vec::new();
    if let Some(pos) = clustering.and_then(|c| c.command_pos) {
        for (id, anns) in out.iter_mut() {
            apply_command(id, anns, pos, &mut audit);
        }
    }
    for (id, anns) in out.iter_mut() {
        for a in anns.iter_mut() {
            let ty = a.inferred_type;
            let dropped: Vec<SemanticFunction> =
                a.inferred_functions.iter().copied().filter(|&f| !table.allows(f, ty)).collect();
            for f in dropped {
                a.inferred_functions.remove(&f);
                let mut entry = AuditEntry::new(id, Some(a.field.range()), AuditAction::Dropped, AuditRule::Constraint);
                entry.label = Some(f.name().to_string());
                audit.push(entry);
            }
        }
    }
    (out, audit)
}

/// Marks the field at `pos` as the command field.
pub fn apply_command(id: &str, anns: &mut [FieldAnnotation], pos: (usize, usize), audit: &mut Vec<AuditEntry>) {
    let Some(a) = anns.iter_mut().find(|a| a.field.range() == pos) else {
        return;
    };
    if a.inferred_type == SemanticType::Unknown {
        a.inferred_type = SemanticType::Group;
        let mut entry = AuditEntry::new(id, Some(pos), AuditAction::Assigned, AuditRule::CommandPosition);
        entry.label = Some(SemanticType::Group.name().to_string());
        audit.push(entry);
    }
    if a.inferred_functions.insert(SemanticFunction::Command) {
        let mut entry = AuditEntry::new(id, Some(pos), AuditAction::Added, AuditRule::CommandPosition);
        entry.label = Some(SemanticFunction::Command.name().to_string());
        audit.push(entry);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Field;
    use alloc::vec;

    fn fr(id: &str, b: &[usize], len: usize) -> FormatResult {
        FormatResult::from_boundaries(id, b.iter().copied(), len).unwrap()
    }

    #[test]
    fn format_score_examples() {
        let p = AlignmentParams::default();
        assert_eq!(nw_format_score(&fr("a", &[1, 2, 3, 4], 6), &fr("b", &[1, 2, 3, 4], 6), &p), 4);
        assert_eq!(nw_format_score(&fr("a", &[2, 4], 6), &fr("b", &[2, 5], 6), &p), 0);
        assert_eq!(nw_format_score(&fr("a", &[], 6), &fr("b", &[1, 2, 3], 6), &p), -6);
    }

    #[test]
    fn entropy_values() {
        assert_eq!(shannon_entropy([&[7u8][..], &[7], &[7]]), 0.0);
        for n in [2usize, 4, 8] {
            let vals: Vec<[u8; 1]> = (0..n * 3).map(|i| [(i % n) as u8]).collect();
            let h = shannon_entropy(vals.iter().map(|v| &v[..]));
            assert!((h - libm::log2(n as f64)).abs() < 1e-12);
        }
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[0.0, 0.0, 1.0, 3.0]), 0.5);
    }

    fn msgs(v: &[&[u8]]) -> Vec<Message> {
        v.iter().enumerate().map(|(i, b)| Message::new(alloc::format!("m{i}"), b.to_vec()).unwrap()).collect()
    }

    #[test]
    fn shared_format_ties_to_smallest_range() {
        let ms = msgs(&[&[1, 9, 2], &[1, 8, 3], &[1, 7, 3]]);
        let formats = ms.iter().map(|m| (m.id.clone(), fr(&m.id, &[1, 2], 3))).collect();
        let c = explore_optimal(&ms, &formats, &AlignmentParams::default()).unwrap();
        assert_eq!(c.command_pos, Some((0, 0)));
        assert_eq!(c.align_score, 2.0);
        assert_eq!(c.clusters.len(), 1);
    }

    #[test]
    fn singleton_clusters_score_zero() {
        let ms = msgs(&[&[1, 2], &[3, 4]]);
        let formats = [(ms[0].id.clone(), fr("m0", &[1], 2)), (ms[1].id.clone(), fr("m1", &[], 2))].into_iter().collect();
        let c = explore_optimal(&ms, &formats, &AlignmentParams::default()).unwrap();
        assert_eq!(c.command_pos, None);
        assert_eq!(c.clusters.len(), 1);
        let one = explore_optimal(&ms[..1], &formats, &AlignmentParams::default()).unwrap();
        assert_eq!(one.command_pos, None);
    }

    #[test]
    fn missing_format_is_error() {
        let ms = msgs(&[&[1, 2]]);
        assert!(explore_optimal(&ms, &BTreeMap::new(), &AlignmentParams::default()).is_err());
    }

    fn ann(s: usize, e: usize, ty: SemanticType, fs: &[SemanticFunction]) -> FieldAnnotation {
        FieldAnnotation { field: Field::new(s, e), inferred_type: ty, inferred_functions: fs.iter().copied().collect(), evidence: vec![] }
    }

    #[test]
    fn constant_bytes_field_revoked_and_refilled() {
        // f0 varies (integer), f1 constant typed bytes, f2 constant static
        let ms = msgs(&[&[1, 5, 0], &[2, 5, 0], &[3, 5, 0], &[4, 5, 0]]);
        let mut anns = CorpusAnnotations::new();
        for m in &ms {
            anns.insert(
                m.id.clone(),
                vec![
                    ann(0, 0, SemanticType::Integer, &[]),
                    ann(1, 1, SemanticType::Bytes, &[SemanticFunction::Delim]),
                    ann(2, 2, SemanticType::Static, &[]),
                ],
            );
        }
        let (out, audit) = entropy_refine(&anns, &Clustering::single(&ms), &ms);
        // median of {2, 0, 0} is 0: bytes (0) and static (0, not < 0) both revoked
        let a = &out["m0"];
        assert_eq!(a[1].inferred_type, SemanticType::Integer);
        assert_eq!(a[2].inferred_type, SemanticType::Integer);
        assert!(audit.iter().any(|e| e.action == AuditAction::Revoked && e.rule == AuditRule::BytesEntropy));
        let (fin, _) = constraint_refine(&out, &ConstraintTable::default(), None);
        assert!(fin["m0"][1].inferred_functions.is_empty());
        assert_eq!(ConstraintTable::default().violations(&fin), 0);
    }

    #[test]
    fn singleton_cluster_untouched() {
        let ms = msgs(&[&[1, 5]]);
        let mut anns = CorpusAnnotations::new();
        anns.insert("m0".into(), vec![ann(0, 1, SemanticType::Bytes, &[])]);
        let (out, audit) = entropy_refine(&anns, &Clustering::single(&ms), &ms);
        assert_eq!(out, anns);
        assert_eq!(audit[0].action, AuditAction::Skipped);
    }

    #[test]
    fn command_position_added() {
        let mut anns = CorpusAnnotations::new();
        anns.insert("m0".into(), vec![ann(0, 0, SemanticType::Unknown, &[]), ann(1, 1, SemanticType::Static, &[SemanticFunction::Length])]);
        let c = Clustering { command_pos: Some((0, 0)), clusters: vec![], align_score: 1.0 };
        let (out, audit) = constraint_refine(&anns, &ConstraintTable::default(), Some(&c));
        assert_eq!(out["m0"][0].inferred_type, SemanticType::Group);
        assert!(out["m0"][0].inferred_functions.contains(&SemanticFunction::Command));
        assert!(out["m0"][1].inferred_functions.is_empty());
        assert!(audit.iter().any(|e| e.action == AuditAction::Dropped && e.label.as_deref() == Some("length")));
    }

    #[test]
    fn table_verbatim() {
        let t = ConstraintTable::default();
        assert_eq!(t.allowed.len(), 6);
        assert!(t.allows(SemanticFunction::Delim, SemanticType::Static));
        assert!(t.allows(SemanticFunction::Aligned, SemanticType::Bytes));
        assert!(!t.allows(SemanticFunction::Length, SemanticType::Static));
        assert!(t.allows(SemanticFunction::Checksum, SemanticType::Integer));
    }
}
