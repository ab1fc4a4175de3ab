//! Messages, instruction records and execution traces.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Set of message byte offsets (a taint label set).
pub type OffsetSet = BTreeSet<usize>;

/// Integrity violations in the trace data model.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("message `{0}` has no bytes")]
    EmptyMessage(String),
    #[error("duplicate message id `{0}`")]
    DuplicateMessage(String),
    #[error("trace references unknown message `{0}`")]
    UnknownMessage(String),
    #[error("record {seq}: offset {offset} outside message of length {len}")]
    OffsetOutOfRange { seq: u64, offset: usize, len: usize },
    #[error("record {seq}: cmp_result on a non-compare instruction")]
    CmpResultWithoutCompare { seq: u64 },
    #[error("record {seq}: loop_id and loop_role must be given together")]
    LoopRoleMismatch { seq: u64 },
    #[error("record {seq}: sequence numbers must be strictly increasing")]
    SeqNotIncreasing { seq: u64 },
    #[error("field {start}..={end} outside message of length {len}")]
    FieldOutOfBounds { start: usize, end: usize, len: usize },
    #[error("fields of `{0}` do not partition the message")]
    NotAPartition(String),
}

/// A protocol message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: String,
    pub bytes: Vec<u8>,
}

impl Message {
    pub fn new(id: impl Into<String>, bytes: Vec<u8>) -> Result<Self, TraceError> {
        let id = id.into();
        if bytes.is_empty() {
            return Err(TraceError::EmptyMessage(id));
        }
        Ok(Self { id, bytes })
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Bytes of `field`, or `None` if the field does not fit.
    pub fn slice(&self, start: usize, end: usize) -> Option<&[u8]> {
        self.bytes.get(start..=end)
    }
}

/// Checks that ids are unique within a corpus.
pub fn check_corpus(messages: &[Message]) -> Result<(), TraceError> {
    let mut seen = BTreeSet::new();
    for m in messages {
        if m.bytes.is_empty() {
            return Err(TraceError::EmptyMessage(m.id.clone()));
        }
        if !seen.insert(m.id.as_str()) {
            return Err(TraceError::DuplicateMessage(m.id.clone()));
        }
    }
    Ok(())
}

/// Coarse instruction category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    MovSeries,
    Compare,
    ArithBitwise,
    Jump,
    Call,
    Other,
}

impl OpClass {
    pub const ALL: [OpClass; 6] = [
        OpClass::MovSeries,
        OpClass::Compare,
        OpClass::ArithBitwise,
        OpClass::Jump,
        OpClass::Call,
        OpClass::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpClass::MovSeries => "mov",
            OpClass::Compare => "cmp",
            OpClass::ArithBitwise => "arith",
            OpClass::Jump => "jump",
            OpClass::Call => "call",
            OpClass::Other => "other",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Anything outside the mov series counts as a functional operation.
    pub fn is_functional(self) -> bool {
        self != OpClass::MovSeries
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopRole {
    Body,
    Termination,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgRole {
    LengthArg,
    BufferArg,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiCall {
    pub name: String,
    pub tainted_arg_role: ArgRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointerArith {
    PointerIncrement,
    CounterDecrement,
}

/// One executed instruction that touched tainted data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub seq: u64,
    pub operator: String,
    pub op_class: OpClass,
    /// Message offsets whose taint reached an operand of this instruction.
    pub accessed: OffsetSet,
    /// Immediate operand of a comparison, little-endian.
    pub compared_const: Option<Vec<u8>>,
    pub cmp_result: Option<bool>,
    pub triggered_jump: bool,
    pub loop_id: Option<u32>,
    pub loop_role: Option<LoopRole>,
    pub api_call: Option<ApiCall>,
    pub pointer_arith: Option<PointerArith>,
    pub value_snapshot: Option<Vec<u8>>,
    /// For comparisons: every message offset that flowed into each operand,
    /// including flows through table lookups that drop taint.
    pub operand_origins: Vec<OffsetSet>,
}

impl InstructionRecord {
    pub fn new(seq: u64, operator: impl Into<String>, op_class: OpClass, accessed: OffsetSet) -> Self {
        Self {
            seq,
            operator: operator.into(),
            op_class,
            accessed,
            compared_const: None,
            cmp_result: None,
            triggered_jump: false,
            loop_id: None,
            loop_role: None,
            api_call: None,
            pointer_arith: None,
            value_snapshot: None,
            operand_origins: Vec::new(),
        }
    }

    pub fn check(&self, message_len: usize) -> Result<(), TraceError> {
        if let Some(&offset) = self.accessed.iter().find(|&&o| o >= message_len) {
            return Err(TraceError::OffsetOutOfRange { seq: self.seq, offset, len: message_len });
        }
        if self.cmp_result.is_some() && self.op_class != OpClass::Compare {
            return Err(TraceError::CmpResultWithoutCompare { seq: self.seq });
        }
        if self.loop_id.is_some() != self.loop_role.is_some() {
            return Err(TraceError::LoopRoleMismatch { seq: self.seq });
        }
        Ok(())
    }

    pub fn touches(&self, start: usize, end: usize) -> bool {
        self.accessed.range(start..=end).next().is_some()
    }

    pub fn is_loop_termination(&self) -> bool {
        self.loop_role == Some(LoopRole::Termination)
    }
}

/// Ordered instruction records for one message.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub message_id: String,
    pub records: Vec<InstructionRecord>,
}

impl ExecutionTrace {
    pub fn new(message_id: impl Into<String>) -> Self {
        Self { message_id: message_id.into(), records: Vec::new() }
    }

    /// Validates every record against `message` and the seq ordering.
    pub fn check(&self, message: &Message) -> Result<(), TraceError> {
        if self.message_id != message.id {
            return Err(TraceError::UnknownMessage(self.message_id.clone()));
        }
        let mut last: Option<u64> = None;
        for r in &self.records {
            if last.is_some_and(|l| r.seq <= l) {
                return Err(TraceError::SeqNotIncreasing { seq: r.seq });
            }
            last = Some(r.seq);
            r.check(message.len())?;
        }
        Ok(())
    }

    pub fn get(&self, seq: u64) -> Option<&InstructionRecord> {
        self.records.binary_search_by_key(&seq, |r| r.seq).ok().map(|i| &self.records[i])
    }
}

/// The instructions accessing `field`, in seq order.
pub fn instructions_for<'t>(trace: &'t ExecutionTrace, field: &Field) -> Vec<&'t InstructionRecord> {
    trace.records.iter().filter(|r| r.touches(field.start, field.end)).collect()
}

/// Inclusive byte range of a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Field {
    pub start: usize,
    pub end: usize,
    /// False for bytes no instruction touched.
    pub accessed: bool,
}

impl Field {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end, accessed: true }
    }

    pub fn unaccessed(start: usize, end: usize) -> Self {
        Self { start, end, accessed: false }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn range(&self) -> (usize, usize) {
        (self.start, self.end)
    }

    pub fn contains(&self, offset: usize) -> bool {
        (self.start..=self.end).contains(&offset)
    }

    pub fn overlaps(&self, other: &Field) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn check(&self, message_len: usize) -> Result<(), TraceError> {
        if self.start > self.end || self.end >= message_len {
            return Err(TraceError::FieldOutOfBounds { start: self.start, end: self.end, len: message_len });
        }
        Ok(())
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f[{},{}]", self.start, self.end)
    }
}

/// Segmentation of one message into fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatResult {
    pub message_id: String,
    pub fields: Vec<Field>,
}

impl FormatResult {
    /// Builds a format and checks that `fields` partition `[0, message_len)`.
    pub fn new(message_id: impl Into<String>, fields: Vec<Field>, message_len: usize) -> Result<Self, TraceError> {
        let out = Self { message_id: message_id.into(), fields };
        out.check(message_len)?;
        Ok(out)
    }

    /// Builds the partition induced by a boundary set; every field is marked accessed.
    pub fn from_boundaries(
        message_id: impl Into<String>,
        boundaries: impl IntoIterator<Item = usize>,
        message_len: usize,
    ) -> Result<Self, TraceError> {
        let id = message_id.into();
        let cuts: BTreeSet<usize> = boundaries.into_iter().collect();
        if cuts.iter().any(|&b| b == 0 || b >= message_len) {
            return Err(TraceError::NotAPartition(id));
        }
        let mut fields = Vec::with_capacity(cuts.len() + 1);
        let mut start = 0;
        for &b in cuts.iter().chain(core::iter::once(&message_len)) {
            fields.push(Field::new(start, b - 1));
            start = b;
        }
        Self::new(id, fields, message_len)
    }

    pub fn check(&self, message_len: usize) -> Result<(), TraceError> {
        let mut next = 0;
        for f in &self.fields {
            f.check(message_len)?;
            if f.start != next {
                return Err(TraceError::NotAPartition(self.message_id.clone()));
            }
            next = f.end + 1;
        }
        if next != message_len {
            return Err(TraceError::NotAPartition(self.message_id.clone()));
        }
        Ok(())
    }

    pub fn message_len(&self) -> usize {
        self.fields.last().map_or(0, |f| f.end + 1)
    }

    /// Offsets where a field starts, excluding 0.
    pub fn boundaries(&self) -> Vec<usize> {
        self.fields.iter().map(|f| f.start).filter(|&s| s > 0).collect()
    }

    pub fn field_at(&self, start: usize, end: usize) -> Option<&Field> {
        self.fields.iter().find(|f| f.start == start && f.end == end)
    }
}
