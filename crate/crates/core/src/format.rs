//! Format extraction: intra-instruction candidates, overlap resolution and
//! left-to-right merging of semantically similar neighbours.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::align::{nw_align, AlignmentParams};
use crate::trace::{ExecutionTrace, Field, FormatResult, Message};

/// Operators of the instructions accessing one field candidate, in seq order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OperatorSequence(pub Vec<String>);

impl OperatorSequence {
    pub fn of(trace: &ExecutionTrace, start: usize, end: usize) -> Self {
        Self(trace.records.iter().filter(|r| r.touches(start, end)).map(|r| r.operator.clone()).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: AsRef<str>> FromIterator<S> for OperatorSequence {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(|s| String::from(s.as_ref())).collect())
    }
}

pub fn nw_score(a: &OperatorSequence, b: &OperatorSequence, params: &AlignmentParams) -> i64 {
    nw_align(&a.0, &b.0, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub score: i64,
    /// `score / max(len_a, len_b)`; 1.0 when both sequences are empty.
    pub fraction: f64,
    pub similar: bool,
}

/// Normalised alignment score with the strict `> threshold` test.
pub fn semantic_similar(a: &OperatorSequence, b: &OperatorSequence, params: &AlignmentParams) -> Similarity {
    let score = nw_score(a, b, params);
    let longest = a.len().max(b.len());
    let fraction = if longest == 0 { 1.0 } else { score as f64 / longest as f64 };
    Similarity { score, fraction, similar: fraction > params.similarity_threshold }
}

/// Candidate fields: every maximal run of consecutive offsets accessed by one
/// record, deduplicated and sorted by offset, plus one unaccessed candidate for
/// each byte no record touches.
pub fn intra_instruction_candidates(message: &Message, trace: &ExecutionTrace) -> Vec<Field> {
    let len = message.len();
    let mut touched = alloc::vec![false; len];
    let mut cands = Vec::new();
    for r in &trace.records {
        let mut run: Option<(usize, usize)> = None;
        for &o in r.accessed.iter().filter(|&&o| o < len) {
            touched[o] = true;
            run = match run {
                Some((s, e)) if o == e + 1 => Some((s, o)),
                Some((s, e)) => {
                    cands.push(Field::new(s, e));
                    Some((o, o))
                }
                None => Some((o, o)),
            };
        }
        if let Some((s, e)) = run {
            cands.push(Field::new(s, e));
        }
    }
    cands.extend(touched.iter().enumerate().filter(|(_, t)| !**t).map(|(i, _)| Field::unaccessed(i, i)));
    cands.sort();
    cands.dedup();
    cands
}

/// Merges candidates whose ranges overlap, so the result is disjoint and sorted.
/// Gaps cannot remain because every byte has at least one candidate.
pub fn resolve_overlaps(mut cands: Vec<Field>) -> Vec<Field> {
    cands.sort();
    let mut out: Vec<Field> = Vec::with_capacity(cands.len());
    for c in cands {
        match out.last_mut() {
            Some(last) if c.start <= last.end => {
                last.end = last.end.max(c.end);
                last.accessed |= c.accessed;
            }
            _ => out.push(c),
        }
    }
    out
}

/// One adjacent-pair decision of the merge pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    pub left: Field,
    pub right: Field,
    pub similarity: Similarity,
    pub merged: bool,
}

/// Format result plus the per-pair merge log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub format: FormatResult,
    pub steps: Vec<MergeStep>,
}

pub fn extract_format(message: &Message, trace: &ExecutionTrace, params: &AlignmentParams) -> FormatResult {
    extract_format_explained(message, trace, params).format
}

/// Single left-to-right pass: when `L[i]` and `L[i+1]` are similar, `L[i+1]`
/// becomes their union and `L[i]` is dropped. A merged candidate keeps the
/// operator sequence of its right constituent, so a run of loop iterations is
/// always compared byte-against-byte. Two unaccessed candidates always merge;
/// an unaccessed candidate never merges with an accessed one.
pub fn extract_format_explained(message: &Message, trace: &ExecutionTrace, params: &AlignmentParams) -> Extraction {
    let cands = resolve_overlaps(intra_instruction_candidates(message, trace));
    let mut list: Vec<(Field, OperatorSequence)> = cands
        .into_iter()
        .map(|f| {
            let ops = if f.accessed { OperatorSequence::of(trace, f.start, f.end) } else { OperatorSequence::default() };
            (f, ops)
        })
        .collect();
    let mut keep = alloc::vec![true; list.len()];
    let mut steps = Vec::new();
    for i in 0..list.len().saturating_sub(1) {
        let (left, right) = (list[i].0, list[i + 1].0);
        let similarity = semantic_similar(&list[i].1, &list[i + 1].1, params);
        let merged = match (left.accessed, right.accessed) {
            (false, false) => true,
            (true, true) => similarity.similar,
            _ => false,
        };
        if merged {
            list[i + 1].0 = Field { start: left.start, end: right.end, accessed: left.accessed };
            keep[i] = false;
        }
        steps.push(MergeStep { left, right, similarity, merged });
    }
    let fields = list.into_iter().zip(keep).filter(|(_, k)| *k).map(|((f, _), _)| f).collect();
    Extraction { format: FormatResult { message_id: message.id.clone(), fields }, steps }
}

/// Classic strategy: bytes accessed by one instruction form one field, nothing
/// else is merged (overlaps are still resolved so the output is a partition).
pub fn extract_format_baseline(message: &Message, trace: &ExecutionTrace) -> FormatResult {
    let fields = resolve_overlaps(intra_instruction_candidates(message, trace));
    FormatResult { message_id: message.id.clone(), fields }
}
