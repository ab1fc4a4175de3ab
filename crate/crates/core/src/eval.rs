//! Scoring of formats and semantics against ground truth.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::semantics::{CorpusAnnotations, SemanticFunction, SemanticType};
use crate::trace::{Field, FormatResult};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("no ground truth for message `{0}`")]
    UnknownMessage(String),
    #[error("message `{id}`: inferred partition covers {inferred} bytes, truth covers {truth}")]
    LengthMismatch { id: String, inferred: usize, truth: usize },
    #[error("ground truth for `{0}` does not partition the message")]
    NotAPartition(String),
}

/// One true field with its semantics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrueField {
    pub start: usize,
    pub end: usize,
    pub ty: SemanticType,
    pub functions: BTreeSet<SemanticFunction>,
    /// False when the parser never reads the field.
    pub accessed: bool,
}

impl TrueField {
    pub fn new(start: usize, end: usize, ty: SemanticType, functions: &[SemanticFunction]) -> Self {
        Self { start, end, ty, functions: functions.iter().copied().collect(), accessed: true }
    }

    pub fn range(&self) -> (usize, usize) {
        (self.start, self.end)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub messages: BTreeMap<String, Vec<TrueField>>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a message's truth after checking that the fields partition it.
    pub fn insert(&mut self, message_id: impl Into<String>, mut fields: Vec<TrueField>) -> Result<(), EvalError> {
        let id = message_id.into();
        fields.sort_by_key(|f| f.start);
        let mut next = 0;
        for f in &fields {
            if f.start != next || f.end < f.start {
                return Err(EvalError::NotAPartition(id));
            }
            next = f.end + 1;
        }
        if fields.is_empty() {
            return Err(EvalError::NotAPartition(id));
        }
        self.messages.insert(id, fields);
        Ok(())
    }

    pub fn fields(&self, message_id: &str) -> Result<&[TrueField], EvalError> {
        self.messages.get(message_id).map(Vec::as_slice).ok_or_else(|| EvalError::UnknownMessage(message_id.to_string()))
    }

    pub fn message_len(&self, message_id: &str) -> Result<usize, EvalError> {
        Ok(self.fields(message_id)?.last().map_or(0, |f| f.end + 1))
    }

    pub fn boundaries(&self, message_id: &str) -> Result<BTreeSet<usize>, EvalError> {
        Ok(self.fields(message_id)?.iter().map(|f| f.start).filter(|&s| s > 0).collect())
    }

    /// The truth as a format result.
    pub fn format(&self, message_id: &str) -> Result<FormatResult, EvalError> {
        let fields = self.fields(message_id)?.iter().map(|f| Field { start: f.start, end: f.end, accessed: f.accessed }).collect();
        Ok(FormatResult { message_id: message_id.to_string(), fields })
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Boundary confusion counts over inter-byte positions `1..len`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub true_fields: usize,
    pub perfect_fields: usize,
}

impl core::ops::AddAssign for FormatCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
        self.true_fields += o.true_fields;
        self.perfect_fields += o.perfect_fields;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FormatMetrics {
    pub counts: FormatCounts,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub perfection: f64,
}

impl FormatCounts {
    /// Precision is 0 when nothing is predicted, unless there was also
    /// nothing to find (then both precision and recall are 1).
    pub fn metrics(&self) -> FormatMetrics {
        let total = self.tp + self.fp + self.fn_ + self.tn;
        let (precision, recall) = if self.tp + self.fp + self.fn_ == 0 {
            (1.0, 1.0)
        } else {
            (ratio(self.tp, self.tp + self.fp), ratio(self.tp, self.tp + self.fn_))
        };
        FormatMetrics {
            counts: *self,
            accuracy: if total == 0 { 1.0 } else { ratio(self.tp + self.tn, total) },
            precision,
            recall,
            f1: f1(precision, recall),
            perfection: ratio(self.perfect_fields, self.true_fields),
        }
    }
}

fn check_len(inferred: &FormatResult, truth: &GroundTruth) -> Result<usize, EvalError> {
    let t = truth.message_len(&inferred.message_id)?;
    let i = inferred.message_len();
    if i != t {
        return Err(EvalError::LengthMismatch { id: inferred.message_id.clone(), inferred: i, truth: t });
    }
    Ok(t)
}

/// Counts for one message. A true field is perfect when the inferred format
/// contains exactly the same range.
pub fn format_counts(inferred: &FormatResult, truth: &GroundTruth) -> Result<FormatCounts, EvalError> {
    let len = check_len(inferred, truth)?;
    let tb = truth.boundaries(&inferred.message_id)?;
    let ib: BTreeSet<usize> = inferred.boundaries().into_iter().collect();
    let mut c = FormatCounts::default();
    for p in 1..len {
        match (ib.contains(&p), tb.contains(&p)) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let ranges: BTreeSet<(usize, usize)> = inferred.fields.iter().map(Field::range).collect();
    let tf = truth.fields(&inferred.message_id)?;
    c.true_fields = tf.len();
    c.perfect_fields = tf.iter().filter(|f| ranges.contains(&f.range())).count();
    Ok(c)
}

pub fn score_format(inferred: &FormatResult, truth: &GroundTruth) -> Result<FormatMetrics, EvalError> {
    Ok(format_counts(inferred, truth)?.metrics())
}

/// Micro-averaged over every message of the corpus.
pub fn score_format_corpus<'a>(
    inferred: impl IntoIterator<Item = &'a FormatResult>,
    truth: &GroundTruth,
) -> Result<FormatMetrics, EvalError> {
    let mut total = FormatCounts::default();
    for f in inferred {
        total += format_counts(f, truth)?;
    }
    Ok(total.metrics())
}

/// Over-segmentation (spurious inferred boundaries) and under-segmentation
/// (missed true boundaries). Positions strictly inside a true field the
/// parser never reads are ignored.
pub fn count_segmentation_errors(inferred: &FormatResult, truth: &GroundTruth) -> Result<(usize, usize), EvalError> {
    let len = check_len(inferred, truth)?;
    let tf = truth.fields(&inferred.message_id)?;
    let tb = truth.boundaries(&inferred.message_id)?;
    let ib: BTreeSet<usize> = inferred.boundaries().into_iter().collect();
    let excluded = |p: usize| tf.iter().any(|f| !f.accessed && f.start < p && p <= f.end);
    let (mut over, mut under) = (0, 0);
    for p in (1..len).filter(|&p| !excluded(p)) {
        match (ib.contains(&p), tb.contains(&p)) {
            (true, false) => over += 1,
            (false, true) => under += 1,
            _ => {}
        }
    }
    Ok((over, under))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl LabelScore {
    fn new(label: &str, tp: usize, fp: usize, fn_: usize) -> Self {
        let (precision, recall) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
        Self { label: label.to_string(), tp, fp, fn_, precision, recall, f1: f1(precision, recall) }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SemanticMetrics {
    /// Micro-averaged over all type labels.
    pub types: LabelScore,
    /// Micro-averaged over all function labels.
    pub functions: LabelScore,
    pub types_macro_f1: f64,
    pub functions_macro_f1: f64,
    pub per_type: Vec<LabelScore>,
    pub per_function: Vec<LabelScore>,
    /// Recall restricted to true fields the parser reads.
    pub types_recall_accessed: f64,
    pub functions_recall_accessed: f64,
}

type Key<L> = (String, usize, usize, L);

fn score_labels<L: Ord + Copy>(
    all: &[L],
    name: impl Fn(L) -> &'static str,
    predicted: &BTreeSet<Key<L>>,
    truth: &BTreeSet<Key<L>>,
    truth_accessed: &BTreeSet<Key<L>>,
) -> (LabelScore, f64, Vec<LabelScore>, f64) {
    let tp = predicted.intersection(truth).count();
    let micro = LabelScore::new("all", tp, predicted.len() - tp, truth.len() - tp);
    let per: Vec<LabelScore> = all
        .iter()
        .map(|&l| {
            let p = predicted.iter().filter(|k| k.3 == l).count();
            let t = truth.iter().filter(|k| k.3 == l).count();
            let hit = predicted.iter().filter(|k| k.3 == l && truth.contains(*k)).count();
            LabelScore::new(name(l), hit, p - hit, t - hit)
        })
        .collect();
    let present: Vec<&LabelScore> = per.iter().filter(|s| s.tp + s.fp + s.fn_ > 0).collect();
    let macro_f1 = if present.is_empty() { 0.0 } else { present.iter().map(|s| s.f1).sum::<f64>() / present.len() as f64 };
    let recall_acc = ratio(predicted.intersection(truth_accessed).count(), truth_accessed.len());
    (micro, macro_f1, per, recall_acc)
}

/// A predicted label is a true positive only on a field whose range exactly
/// matches a true field carrying the same label. UNKNOWN is not a label.
pub fn score_semantics(annotations: &CorpusAnnotations, truth: &GroundTruth) -> Result<SemanticMetrics, EvalError> {
    let mut pt = BTreeSet::new();
    let mut pf = BTreeSet::new();
    let (mut tt, mut tf, mut tta, mut tfa) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
    for (id, anns) in annotations {
        truth.fields(id)?;
        for a in anns {
            let (s, e) = a.field.range();
            if a.inferred_type != SemanticType::Unknown {
                pt.insert((id.clone(), s, e, a.inferred_type));
            }
            for &f in &a.inferred_functions {
                pf.insert((id.clone(), s, e, f));
            }
        }
    }
    for (id, fields) in &truth.messages {
        if !annotations.contains_key(id) {
            continue;
        }
        for f in fields {
            if f.ty != SemanticType::Unknown {
                tt.insert((id.clone(), f.start, f.end, f.ty));
                if f.accessed {
                    tta.insert((id.clone(), f.start, f.end, f.ty));
                }
            }
            for &func in &f.functions {
                tf.insert((id.clone(), f.start, f.end, func));
                if f.accessed {
                    tfa.insert((id.clone(), f.start, f.end, func));
                }
            }
        }
    }
    let known: Vec<SemanticType> = SemanticType::ALL.into_iter().filter(|t| *t != SemanticType::Unknown).collect();
    let (types, types_macro_f1, per_type, types_recall_accessed) = score_labels(&known, SemanticType::name, &pt, &tt, &tta);
    let (functions, functions_macro_f1, per_function, functions_recall_accessed) =
        score_labels(&SemanticFunction::ALL, SemanticFunction::name, &pf, &tf, &tfa);
    Ok(SemanticMetrics {
        types,
        functions,
        types_macro_f1,
        functions_macro_f1,
        per_type,
        per_function,
        types_recall_accessed,
        functions_recall_accessed,
    })
}

/// Everything scored for one corpus.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub messages: usize,
    pub format: FormatMetrics,
    pub over_seg: usize,
    pub under_seg: usize,
    pub semantics: Option<SemanticMetrics>,
}

pub fn score_corpus(
    formats: &[FormatResult],
    annotations: Option<&CorpusAnnotations>,
    truth: &GroundTruth,
) -> Result<MetricsReport, EvalError> {
    let format = score_format_corpus(formats, truth)?;
    let (mut over_seg, mut under_seg) = (0, 0);
    for f in formats {
        let (o, u) = count_segmentation_errors(f, truth)?;
        over_seg += o;
        under_seg += u;
    }
    let semantics = annotations.map(|a| score_semantics(a, truth)).transpose()?;
    Ok(MetricsReport { messages: formats.len(), format, over_seg, under_seg, semantics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantics::FieldAnnotation;
    use alloc::vec;

    fn truth_of(id: &str, bounds: &[usize], len: usize) -> GroundTruth {
        let fr = FormatResult::from_boundaries(id, bounds.iter().copied(), len).unwrap();
        let mut gt = GroundTruth::new();
        gt.insert(id, fr.fields.iter().map(|f| TrueField::new(f.start, f.end, SemanticType::Integer, &[])).collect())
            .unwrap();
        gt
    }

    #[test]
    fn hand_case() {
        let gt = truth_of("m", &[2, 5], 8);
        let inf = FormatResult::from_boundaries("m", [2, 4], 8).unwrap();
        let m = score_format(&inf, &gt).unwrap();
        assert_eq!((m.counts.tp, m.counts.fp, m.counts.fn_, m.counts.tn), (1, 1, 1, 4));
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
        assert_eq!(m.counts.perfect_fields, 1);
        assert!((m.perfection - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_prediction() {
        let gt = truth_of("m", &[2, 5], 8);
        let inf = FormatResult::from_boundaries("m", [], 8).unwrap();
        let m = score_format(&inf, &gt).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn length_mismatch_is_error() {
        let gt = truth_of("m", &[2], 8);
        let inf = FormatResult::from_boundaries("m", [2], 9).unwrap();
        assert!(matches!(score_format(&inf, &gt), Err(EvalError::LengthMismatch { .. })));
        let other = FormatResult::from_boundaries("x", [2], 8).unwrap();
        assert!(matches!(score_format(&other, &gt), Err(EvalError::UnknownMessage(_))));
    }

    #[test]
    fn unaccessed_interior_excluded() {
        let mut gt = GroundTruth::new();
        let mut pad = TrueField::new(2, 5, SemanticType::Bytes, &[]);
        pad.accessed = false;
        gt.insert("m", vec![TrueField::new(0, 1, SemanticType::Static, &[]), pad]).unwrap();
        let inf = FormatResult::from_boundaries("m", [2, 3, 4], 6).unwrap();
        assert_eq!(count_segmentation_errors(&inf, &gt).unwrap(), (0, 0));
        let inf = FormatResult::from_boundaries("m", [1], 6).unwrap();
        assert_eq!(count_segmentation_errors(&inf, &gt).unwrap(), (1, 1));
    }

    #[test]
    fn semantics_need_exact_boundaries() {
        let mut gt = GroundTruth::new();
        gt.insert(
            "m",
            vec![
                TrueField::new(0, 1, SemanticType::Integer, &[]),
                TrueField::new(2, 3, SemanticType::Integer, &[SemanticFunction::Checksum]),
            ],
        )
        .unwrap();
        let ann = |s, e, ty, fs: &[SemanticFunction]| FieldAnnotation {
            field: Field::new(s, e),
            inferred_type: ty,
            inferred_functions: fs.iter().copied().collect(),
            evidence: vec![],
        };
        let mut anns = CorpusAnnotations::new();
        anns.insert(
            "m".into(),
            vec![
                ann(0, 1, SemanticType::Integer, &[]),
                ann(2, 2, SemanticType::Integer, &[SemanticFunction::Checksum]),
                ann(3, 3, SemanticType::Unknown, &[]),
            ],
        );
        let s = score_semantics(&anns, &gt).unwrap();
        assert_eq!((s.types.tp, s.types.fp, s.types.fn_), (1, 1, 1));
        assert_eq!((s.functions.tp, s.functions.fp, s.functions.fn_), (0, 1, 1));
        let cs = s.per_function.iter().find(|l| l.label == "checksum").unwrap();
        assert_eq!(cs.fp, 1);
        assert_eq!(s.functions.recall, 0.0);
    }
}
