//! Atomic semantic detectors.
//!
//! Each field is classified into one [`SemanticType`] and zero or more
//! [`SemanticFunction`]s from the instructions accessing it and, for file
//! names, from its value. Every decision cites the rule and the records that
//! triggered it.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::trace::{instructions_for, ExecutionTrace, Field, FormatResult, InstructionRecord, Message, OpClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticType {
    Static,
    Integer,
    Group,
    Bytes,
    String,
    Unknown,
}

impl SemanticType {
    pub const ALL: [SemanticType; 6] = [
        SemanticType::Static,
        SemanticType::Integer,
        SemanticType::Group,
        SemanticType::Bytes,
        SemanticType::String,
        SemanticType::Unknown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SemanticType::Static => "static",
            SemanticType::Integer => "integer",
            SemanticType::Group => "group",
            SemanticType::Bytes => "bytes",
            SemanticType::String => "string",
            SemanticType::Unknown => "unknown",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl fmt::Display for SemanticType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticFunction {
    Command,
    Length,
    Delim,
    Checksum,
    Filename,
    Aligned,
}

impl SemanticFunction {
    pub const ALL: [SemanticFunction; 6] = [
        SemanticFunction::Command,
        SemanticFunction::Length,
        SemanticFunction::Delim,
        SemanticFunction::Checksum,
        SemanticFunction::Filename,
        SemanticFunction::Aligned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SemanticFunction::Command => "command",
            SemanticFunction::Length => "length",
            SemanticFunction::Delim => "delim",
            SemanticFunction::Checksum => "checksum",
            SemanticFunction::Filename => "filename",
            SemanticFunction::Aligned => "aligned",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl fmt::Display for SemanticFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Identifier of one detector rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    StaticFixedCompare,
    IntegerArithmetic,
    IntegerConsecutiveValues,
    GroupDistinctConstants,
    BytesSharedLoopOps,
    StringLoopConstant,
    CommandCompareJump,
    LengthLoopBound,
    LengthApiArgument,
    LengthPointerArith,
    DelimLoopTerminator,
    ChecksumLoopOutput,
    FilenameConvention,
    AlignedNoFunctionalOps,
}

/// Static description of a rule, for `list-rules`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RuleInfo {
    pub rule: Rule,
    pub id: &'static str,
    pub label: &'static str,
    pub description: &'static str,
}

impl Rule {
    pub const ALL: [Rule; 14] = [
        Rule::StaticFixedCompare,
        Rule::IntegerArithmetic,
        Rule::IntegerConsecutiveValues,
        Rule::GroupDistinctConstants,
        Rule::BytesSharedLoopOps,
        Rule::StringLoopConstant,
        Rule::CommandCompareJump,
        Rule::LengthLoopBound,
        Rule::LengthApiArgument,
        Rule::LengthPointerArith,
        Rule::DelimLoopTerminator,
        Rule::ChecksumLoopOutput,
        Rule::FilenameConvention,
        Rule::AlignedNoFunctionalOps,
    ];

    pub fn info(self) -> RuleInfo {
        let (id, label, description) = match self {
            Rule::StaticFixedCompare => (
                "static.fixed_compare",
                "Static",
                "compared with an immediate that yields true; no operations besides moves and such comparisons",
            ),
            Rule::IntegerArithmetic => ("integer.arith", "Integer", "operand of an arithmetic or bit-wise instruction"),
            Rule::IntegerConsecutiveValues => (
                "integer.consecutive_values",
                "Integer",
                "compared with two immediates that differ by one",
            ),
            Rule::GroupDistinctConstants => (
                "group.distinct_constants",
                "Group",
                "the same bytes are compared with at least two different immediates",
            ),
            Rule::BytesSharedLoopOps => (
                "bytes.shared_loop_ops",
                "Bytes",
                "every byte is processed by one loop with an identical operator multiset, and the loop's pattern stops at the field edges",
            ),
            Rule::StringLoopConstant => (
                "string.loop_constant",
                "String",
                "bytes-rule holds and consecutive bytes are compared with the same immediate inside the loop",
            ),
            Rule::CommandCompareJump => (
                "command.compare_jump",
                "Command",
                "a true comparison with an immediate immediately triggers a jump (outside loop exits)",
            ),
            Rule::LengthLoopBound => (
                "length.loop_bound",
                "Length",
                "the field bounds a loop: its value is the non-constant side of a loop-exit comparison",
            ),
            Rule::LengthApiArgument => ("length.api_argument", "Length", "passed as the length argument of a library call"),
            Rule::LengthPointerArith => (
                "length.pointer_arith",
                "Length",
                "drives a pointer increment or a counter decrement",
            ),
            Rule::DelimLoopTerminator => (
                "delim.loop_terminator",
                "Delim",
                "ends a loop by matching an immediate that the neighbouring bytes failed to match in the same loop",
            ),
            Rule::ChecksumLoopOutput => (
                "checksum.loop_output",
                "Checksum",
                "compared with a value derived from two or more consecutive other bytes",
            ),
            Rule::FilenameConvention => ("filename.convention", "Filename", "value looks like a file path or name with extension"),
            Rule::AlignedNoFunctionalOps => ("aligned.no_functional_ops", "Aligned", "never touched by a functional operation"),
        };
        RuleInfo { rule: self, id, label, description }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.info().id == id)
    }
}

pub fn list_rules() -> Vec<RuleInfo> {
    Rule::ALL.iter().map(|r| r.info()).collect()
}

/// One justification: the rule and, when applicable, the record that fired it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Evidence {
    pub rule: Rule,
    pub seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldAnnotation {
    pub field: Field,
    pub inferred_type: SemanticType,
    pub inferred_functions: BTreeSet<SemanticFunction>,
    pub evidence: Vec<Evidence>,
}

/// Annotations of every message, keyed by message id.
pub type CorpusAnnotations = BTreeMap<alloc::string::String, Vec<FieldAnnotation>>;

/// Detector switches. Disabled rules never fire.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub disabled: BTreeSet<Rule>,
}

impl DetectorConfig {
    pub fn enabled(&self, rule: Rule) -> bool {
        !self.disabled.contains(&rule)
    }
}

fn cites(rule: Rule, records: &[&InstructionRecord]) -> Vec<Evidence> {
    records.iter().map(|r| Evidence { rule, seq: Some(r.seq) }).collect()
}

fn const_value(bytes: &[u8]) -> u128 {
    bytes.iter().take(16).rev().fold(0u128, |acc, &b| (acc << 8) | b as u128)
}

fn const_compares<'a, 'b>(records: &'b [&'a InstructionRecord]) -> impl Iterator<Item = &'a InstructionRecord> + 'b {
    records.iter().copied().filter(|r| r.op_class == OpClass::Compare && r.compared_const.is_some())
}

/// Operator multiset of the records of `loop_id` touching byte `b`.
fn loop_ops_at(trace: &ExecutionTrace, loop_id: u32, b: usize) -> Vec<&str> {
    let mut ops: Vec<&str> = trace
        .records
        .iter()
        .filter(|r| r.loop_id == Some(loop_id) && r.accessed.contains(&b))
        .map(|r| r.operator.as_str())
        .collect();
    ops.sort_unstable();
    ops
}

/// The loop whose per-byte operator multiset is shared by every byte of the
/// field and by neither neighbouring byte.
fn shared_loop(field: &Field, trace: &ExecutionTrace, records: &[&InstructionRecord]) -> Option<u32> {
    if field.len() < 2 {
        return None;
    }
    let loops: BTreeSet<u32> = records.iter().filter_map(|r| r.loop_id).collect();
    loops.into_iter().find(|&l| {
        let first = loop_ops_at(trace, l, field.start);
        if first.is_empty() || (field.start + 1..=field.end).any(|b| loop_ops_at(trace, l, b) != first) {
            return false;
        }
        let before = field.start.checked_sub(1).map(|b| loop_ops_at(trace, l, b));
        let after = loop_ops_at(trace, l, field.end + 1);
        before.as_ref() != Some(&first) && after != first
    })
}

fn detect_string(field: &Field, trace: &ExecutionTrace, loop_id: u32) -> Vec<Evidence> {
    // per byte: immediates compared inside the loop
    let consts_at = |b: usize| -> BTreeMap<&[u8], u64> {
        trace
            .records
            .iter()
            .filter(|r| r.loop_id == Some(loop_id) && r.op_class == OpClass::Compare && r.accessed.contains(&b))
            .filter_map(|r| r.compared_const.as_deref().map(|c| (c, r.seq)))
            .collect()
    };
    for b in field.start..field.end {
        let (here, next) = (consts_at(b), consts_at(b + 1));
        if let Some((_, &s1)) = here.iter().find(|(c, _)| next.contains_key(*c)) {
            let c = here.iter().find(|(c, _)| next.contains_key(*c)).map(|(c, _)| *c).unwrap_or_default();
            let s2 = next[c];
            return alloc::vec![
                Evidence { rule: Rule::StringLoopConstant, seq: Some(s1) },
                Evidence { rule: Rule::StringLoopConstant, seq: Some(s2) },
            ];
        }
    }
    Vec::new()
}

/// Applies the type rules in precedence order String > Bytes > Group >
/// Integer > Static and returns the first that fires.
pub fn detect_type(field: &Field, trace: &ExecutionTrace, message: &Message) -> (SemanticType, Vec<Evidence>) {
    detect_type_with(field, trace, message, &DetectorConfig::default())
}

pub fn detect_type_with(
    field: &Field,
    trace: &ExecutionTrace,
    _message: &Message,
    cfg: &DetectorConfig,
) -> (SemanticType, Vec<Evidence>) {
    let records = instructions_for(trace, field);
    if records.is_empty() {
        return (SemanticType::Unknown, Vec::new());
    }

    let bytes_loop = if cfg.enabled(Rule::BytesSharedLoopOps) { shared_loop(field, trace, &records) } else { None };
    if let Some(l) = bytes_loop {
        let loop_records: Vec<&InstructionRecord> =
            records.iter().copied().filter(|r| r.loop_id == Some(l)).collect();
        if cfg.enabled(Rule::StringLoopConstant) {
            let ev = detect_string(field, trace, l);
            if !ev.is_empty() {
                let mut all = cites(Rule::BytesSharedLoopOps, &loop_records);
                all.extend(ev);
                return (SemanticType::String, all);
            }
        }
        return (SemanticType::Bytes, cites(Rule::BytesSharedLoopOps, &loop_records));
    }

    // group: one byte set compared with several different immediates
    let mut by_set: BTreeMap<Vec<usize>, Vec<&InstructionRecord>> = BTreeMap::new();
    for r in const_compares(&records) {
        by_set.entry(r.accessed.iter().copied().collect()).or_default().push(r);
    }
    if cfg.enabled(Rule::GroupDistinctConstants) {
        for rs in by_set.values() {
            let distinct: BTreeSet<&[u8]> = rs.iter().filter_map(|r| r.compared_const.as_deref()).collect();
            if distinct.len() >= 2 {
                return (SemanticType::Group, cites(Rule::GroupDistinctConstants, rs));
            }
        }
    }

    if cfg.enabled(Rule::IntegerArithmetic) {
        let arith: Vec<&InstructionRecord> =
            records.iter().copied().filter(|r| r.op_class == OpClass::ArithBitwise).collect();
        if !arith.is_empty() {
            return (SemanticType::Integer, cites(Rule::IntegerArithmetic, &arith));
        }
    }
    if cfg.enabled(Rule::IntegerConsecutiveValues) {
        for rs in by_set.values() {
            for a in rs {
                let va = const_value(a.compared_const.as_deref().unwrap_or_default());
                if let Some(b) = rs.iter().find(|b| {
                    let vb = const_value(b.compared_const.as_deref().unwrap_or_default());
                    va.abs_diff(vb) == 1
                }) {
                    return (SemanticType::Integer, cites(Rule::IntegerConsecutiveValues, &[a, b]));
                }
            }
        }
    }

    if cfg.enabled(Rule::StaticFixedCompare) {
        let cmps: Vec<&InstructionRecord> = const_compares(&records).collect();
        let only_moves_and_cmps = records
            .iter()
            .all(|r| r.op_class == OpClass::MovSeries || (r.op_class == OpClass::Compare && r.compared_const.is_some()));
        if !cmps.is_empty() && only_moves_and_cmps && cmps.iter().all(|r| r.cmp_result == Some(true)) {
            return (SemanticType::Static, cites(Rule::StaticFixedCompare, &cmps));
        }
    }
    (SemanticType::Unknown, Vec::new())
}

fn has_consecutive_run(set: &crate::trace::OffsetSet) -> bool {
    set.iter().zip(set.iter().skip(1)).any(|(a, b)| b - a == 1)
}

/// File path syntax: printable, no spaces, optional `/` or `\` separated
/// directories, and a last segment `name.ext` with a 1-5 character
/// alphanumeric extension.
pub fn looks_like_filename(value: &[u8]) -> bool {
    let Ok(s) = core::str::from_utf8(value) else {
        return false;
    };
    let ok_char = |c: char| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | '~' | '/' | '\\');
    if s.is_empty() || !s.chars().all(ok_char) {
        return false;
    }
    let last = s.rsplit(['/', '\\']).next().unwrap_or(s);
    let Some((name, ext)) = last.rsplit_once('.') else {
        return false;
    };
    !name.is_empty()
        && name.chars().any(|c| c.is_ascii_alphanumeric())
        && (1..=5).contains(&ext.len())
        && ext.chars().all(|c| c.is_ascii_alphanumeric())
}

pub fn detect_functions(
    field: &Field,
    trace: &ExecutionTrace,
    message: &Message,
) -> (BTreeSet<SemanticFunction>, Vec<Evidence>) {
    detect_functions_with(field, trace, message, &DetectorConfig::default())
}

pub fn detect_functions_with(
    field: &Field,
    trace: &ExecutionTrace,
    message: &Message,
    cfg: &DetectorConfig,
) -> (BTreeSet<SemanticFunction>, Vec<Evidence>) {
    let records = instructions_for(trace, field);
    let mut funcs = BTreeSet::new();
    let mut evidence = Vec::new();
    let mut fire = |f: SemanticFunction, ev: Vec<Evidence>| {
        if !ev.is_empty() {
            funcs.insert(f);
            evidence.extend(ev);
        }
    };

    if cfg.enabled(Rule::CommandCompareJump) {
        let hits: Vec<&InstructionRecord> = const_compares(&records)
            .filter(|r| r.cmp_result == Some(true) && r.triggered_jump && !r.is_loop_termination())
            .collect();
        fire(SemanticFunction::Command, cites(Rule::CommandCompareJump, &hits));
    }

    let mut length_ev = Vec::new();
    if cfg.enabled(Rule::LengthLoopBound) {
        let hits: Vec<&InstructionRecord> = records
            .iter()
            .copied()
            .filter(|r| r.is_loop_termination() && r.op_class == OpClass::Compare && r.compared_const.is_none())
            .collect();
        length_ev.extend(cites(Rule::LengthLoopBound, &hits));
    }
    if cfg.enabled(Rule::LengthApiArgument) {
        let hits: Vec<&InstructionRecord> = records
            .iter()
            .copied()
            .filter(|r| r.api_call.as_ref().is_some_and(|c| c.tainted_arg_role == crate::trace::ArgRole::LengthArg))
            .collect();
        length_ev.extend(cites(Rule::LengthApiArgument, &hits));
    }
    if cfg.enabled(Rule::LengthPointerArith) {
        let hits: Vec<&InstructionRecord> = records.iter().copied().filter(|r| r.pointer_arith.is_some()).collect();
        length_ev.extend(cites(Rule::LengthPointerArith, &hits));
    }
    fire(SemanticFunction::Length, length_ev);

    if cfg.enabled(Rule::DelimLoopTerminator) {
        let neighbours = [field.start.checked_sub(1), Some(field.end + 1)];
        let mut ev = Vec::new();
        for term in const_compares(&records).filter(|r| r.is_loop_termination() && r.cmp_result == Some(true)) {
            let k = term.compared_const.as_deref();
            let partner = trace.records.iter().find(|o| {
                o.op_class == OpClass::Compare
                    && o.loop_id == term.loop_id
                    && o.compared_const.as_deref() == k
                    && o.cmp_result == Some(false)
                    && neighbours.iter().flatten().any(|b| o.accessed.contains(b))
                    && !o.touches(field.start, field.end)
            });
            if let Some(p) = partner {
                ev.push(Evidence { rule: Rule::DelimLoopTerminator, seq: Some(term.seq) });
                ev.push(Evidence { rule: Rule::DelimLoopTerminator, seq: Some(p.seq) });
                break;
            }
        }
        fire(SemanticFunction::Delim, ev);
    }

    if cfg.enabled(Rule::ChecksumLoopOutput) {
        let hits: Vec<&InstructionRecord> = records
            .iter()
            .copied()
            .filter(|r| r.op_class == OpClass::Compare && r.operand_origins.len() >= 2)
            .filter(|r| {
                let mine = r.operand_origins.iter().any(|o| o.range(field.start..=field.end).next().is_some());
                let derived = r
                    .operand_origins
                    .iter()
                    .any(|o| o.range(field.start..=field.end).next().is_none() && has_consecutive_run(o));
                mine && derived
            })
            .collect();
        fire(SemanticFunction::Checksum, cites(Rule::ChecksumLoopOutput, &hits));
    }

    if cfg.enabled(Rule::FilenameConvention) && !records.is_empty() {
        let value = message.slice(field.start, field.end).unwrap_or_default();
        if looks_like_filename(value) {
            fire(SemanticFunction::Filename, alloc::vec![Evidence { rule: Rule::FilenameConvention, seq: None }]);
        }
    }

    if cfg.enabled(Rule::AlignedNoFunctionalOps) && records.iter().all(|r| !r.op_class.is_functional()) {
        let ev = if records.is_empty() {
            alloc::vec![Evidence { rule: Rule::AlignedNoFunctionalOps, seq: None }]
        } else {
            cites(Rule::AlignedNoFunctionalOps, &records)
        };
        fire(SemanticFunction::Aligned, ev);
    }

    (funcs, evidence)
}

pub fn annotate_field(field: &Field, trace: &ExecutionTrace, message: &Message, cfg: &DetectorConfig) -> FieldAnnotation {
    let (inferred_type, mut evidence) = detect_type_with(field, trace, message, cfg);
    let (inferred_functions, fev) = detect_functions_with(field, trace, message, cfg);
    evidence.extend(fev);
    FieldAnnotation { field: *field, inferred_type, inferred_functions, evidence }
}

/// Annotates every field of `format`.
pub fn annotate(format: &FormatResult, trace: &ExecutionTrace, message: &Message, cfg: &DetectorConfig) -> Vec<FieldAnnotation> {
    format.fields.iter().map(|f| annotate_field(f, trace, message, cfg)).collect()
}
