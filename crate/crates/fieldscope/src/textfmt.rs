//! Line-oriented interchange format for messages, traces and ground truth.
//!
//! One record per line. Every line is a record kind followed by `key=value`
//! pairs separated by whitespace. Blank lines and lines starting with `#` are
//! ignored. Byte strings are hex with a `0x` prefix.
//!
//! ```text
//! message id=m1 bytes=0x0564
//! inst msg=m1 seq=0 op=movzx class=mov acc=0
//! inst msg=m1 seq=1 op=cmp class=cmp acc=0 const=0x05 result=true
//! field msg=m1 start=0 end=1 type=static functions=-
//! ```
//!
//! `inst` keys: `msg seq op class acc` are required. Optional keys are
//! `const result jump loop role api arg ptr value origins`.
//!
//! * `class` is one of `mov cmp arith jump call other`.
//! * `acc` is an offset set: `-` for empty, otherwise comma-separated offsets
//!   and inclusive ranges, e.g. `2,4-7`.
//! * `origins` is a `;`-separated list of offset sets, one per compare operand.
//! * `role` is `body` or `termination`; `arg` is `length_arg`, `buffer_arg`
//!   or `other`; `ptr` is `pointer_increment` or `counter_decrement`.
//!
//! `field` keys: `msg start end type` are required, `functions` is a
//! comma-separated list or `-`, and `accessed=false` marks a field the parser
//! never reads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use fieldscope_core::eval::EvalError;
use fieldscope_core::trace::{ApiCall, ArgRole, LoopRole, OpClass, PointerArith, TraceError};
use fieldscope_core::{ExecutionTrace, GroundTruth, InstructionRecord, Message, OffsetSet, SemanticFunction, SemanticType, TrueField};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Record { line: usize, source: TraceError },
    #[error(transparent)]
    Integrity(#[from] TraceError),
    #[error(transparent)]
    Truth(#[from] EvalError),
}

fn perr(line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Parse { line, message: message.into() }
}

/// Messages and one trace per message, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub messages: Vec<Message>,
    pub traces: Vec<ExecutionTrace>,
}

impl Corpus {
    pub fn trace(&self, id: &str) -> Option<&ExecutionTrace> {
        self.traces.iter().find(|t| t.message_id == id)
    }
}

struct Line<'a> {
    no: usize,
    kind: &'a str,
    pairs: BTreeMap<&'a str, &'a str>,
}

impl<'a> Line<'a> {
    fn req(&self, key: &str) -> Result<&'a str, FormatError> {
        self.pairs.get(key).copied().ok_or_else(|| perr(self.no, format!("`{}` record needs `{key}=`", self.kind)))
    }

    fn opt(&self, key: &str) -> Option<&'a str> {
        self.pairs.get(key).copied()
    }

    fn num<T: std::str::FromStr>(&self, key: &str, v: &str) -> Result<T, FormatError> {
        v.parse().map_err(|_| perr(self.no, format!("`{key}`: not a number: `{v}`")))
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<(), FormatError> {
        match self.pairs.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(perr(self.no, format!("unknown key `{k}` on `{}` record", self.kind))),
            None => Ok(()),
        }
    }
}

fn lines(text: &str) -> impl Iterator<Item = Result<Line<'_>, FormatError>> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let no = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            return None;
        }
        let mut words = s.split_whitespace();
        let kind = words.next()?;
        let mut pairs = BTreeMap::new();
        for w in words {
            let Some((k, v)) = w.split_once('=') else {
                return Some(Err(perr(no, format!("expected key=value, got `{w}`"))));
            };
            if pairs.insert(k, v).is_some() {
                return Some(Err(perr(no, format!("duplicate key `{k}`"))));
            }
        }
        Some(Ok(Line { no, kind, pairs }))
    })
}

pub fn parse_hex(s: &str) -> Option<Vec<u8>> {
    hex::decode(s.strip_prefix("0x")?).ok()
}

pub fn fmt_hex(b: &[u8]) -> String {
    format!("0x{}", hex::encode(b))
}

pub fn parse_offsets(s: &str) -> Option<OffsetSet> {
    let mut out = BTreeSet::new();
    if s == "-" {
        return Some(out);
    }
    for part in s.split(',') {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().ok()?, b.parse().ok()?);
                if b < a {
                    return None;
                }
                out.extend(a..=b);
            }
            None => {
                out.insert(part.parse().ok()?);
            }
        }
    }
    Some(out)
}

pub fn fmt_offsets(set: &OffsetSet) -> String {
    if set.is_empty() {
        return "-".into();
    }
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &o in set {
        match runs.last_mut() {
            Some((_, e)) if *e + 1 == o => *e = o,
            _ => runs.push((o, o)),
        }
    }
    runs.iter().map(|&(a, b)| if a == b { a.to_string() } else { format!("{a}-{b}") }).collect::<Vec<_>>().join(",")
}

fn parse_bool(l: &Line<'_>, key: &str, v: &str) -> Result<bool, FormatError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(perr(l.no, format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn enum_name<T: serde::Serialize>(v: T) -> String {
    serde_json::to_value(v).ok().and_then(|j| j.as_str().map(str::to_owned)).unwrap_or_default()
}

fn parse_enum<T: serde::de::DeserializeOwned>(l: &Line<'_>, key: &str, v: &str) -> Result<T, FormatError> {
    serde_json::from_value(serde_json::Value::String(v.into())).map_err(|_| perr(l.no, format!("`{key}`: unknown value `{v}`")))
}

const INST_KEYS: &[&str] =
    &["msg", "seq", "op", "class", "acc", "const", "result", "jump", "loop", "role", "api", "arg", "ptr", "value", "origins"];

fn parse_inst(l: &Line<'_>) -> Result<(String, InstructionRecord), FormatError> {
    l.check_keys(INST_KEYS)?;
    let msg = l.req("msg")?.to_string();
    let seq = l.num("seq", l.req("seq")?)?;
    let class = l.req("class")?;
    let op_class = OpClass::from_name(class).ok_or_else(|| perr(l.no, format!("`class`: unknown value `{class}`")))?;
    let acc = l.req("acc")?;
    let accessed = parse_offsets(acc).ok_or_else(|| perr(l.no, format!("`acc`: bad offset set `{acc}`")))?;
    let mut r = InstructionRecord::new(seq, l.req("op")?, op_class, accessed);
    let bytes = |key: &str, v: &str| parse_hex(v).ok_or_else(|| perr(l.no, format!("`{key}`: bad hex `{v}`")));
    if let Some(v) = l.opt("const") {
        r.compared_const = Some(bytes("const", v)?);
    }
    if let Some(v) = l.opt("result") {
        r.cmp_result = Some(parse_bool(l, "result", v)?);
    }
    if let Some(v) = l.opt("jump") {
        r.triggered_jump = parse_bool(l, "jump", v)?;
    }
    if let Some(v) = l.opt("loop") {
        r.loop_id = Some(l.num("loop", v)?);
    }
    if let Some(v) = l.opt("role") {
        r.loop_role = Some(parse_enum::<LoopRole>(l, "role", v)?);
    }
    match (l.opt("api"), l.opt("arg")) {
        (Some(name), arg) => {
            let role = match arg {
                Some(a) => parse_enum::<ArgRole>(l, "arg", a)?,
                None => ArgRole::Other,
            };
            r.api_call = Some(ApiCall { name: name.into(), tainted_arg_role: role });
        }
        (None, Some(_)) => return Err(perr(l.no, "`arg` given without `api`")),
        (None, None) => {}
    }
    if let Some(v) = l.opt("ptr") {
        r.pointer_arith = Some(parse_enum::<PointerArith>(l, "ptr", v)?);
    }
    if let Some(v) = l.opt("value") {
        r.value_snapshot = Some(bytes("value", v)?);
    }
    if let Some(v) = l.opt("origins") {
        r.operand_origins = v
            .split(';')
            .map(|s| parse_offsets(s).ok_or_else(|| perr(l.no, format!("`origins`: bad offset set `{s}`"))))
            .collect::<Result<_, _>>()?;
    }
    Ok((msg, r))
}

fn parse_message(l: &Line<'_>) -> Result<Message, FormatError> {
    l.check_keys(&["id", "bytes"])?;
    let v = l.req("bytes")?;
    let bytes = parse_hex(v).ok_or_else(|| perr(l.no, format!("`bytes`: bad hex `{v}`")))?;
    Message::new(l.req("id")?, bytes).map_err(|source| FormatError::Record { line: l.no, source })
}

/// Parses a corpus. Every message gets a trace, empty when it has no `inst`
/// lines. `field` lines are skipped so one file may hold both.
pub fn parse_corpus(text: &str) -> Result<Corpus, FormatError> {
    let mut messages: Vec<Message> = Vec::new();
    let mut records: BTreeMap<String, Vec<(usize, InstructionRecord)>> = BTreeMap::new();
    for l in lines(text) {
        let l = l?;
        match l.kind {
            "message" => {
                let m = parse_message(&l)?;
                if messages.iter().any(|x| x.id == m.id) {
                    return Err(FormatError::Record { line: l.no, source: TraceError::DuplicateMessage(m.id) });
                }
                messages.push(m);
            }
            "inst" => {
                let (msg, r) = parse_inst(&l)?;
                records.entry(msg).or_default().push((l.no, r));
            }
            "field" => {}
            k => return Err(perr(l.no, format!("unknown record kind `{k}`"))),
        }
    }
    if let Some((id, recs)) = records.iter().find(|(id, _)| !messages.iter().any(|m| &m.id == *id)) {
        return Err(FormatError::Record { line: recs[0].0, source: TraceError::UnknownMessage(id.clone()) });
    }
    let mut traces = Vec::with_capacity(messages.len());
    for m in &messages {
        let mut t = ExecutionTrace::new(m.id.clone());
        let mut last = None;
        for (line, r) in records.remove(&m.id).unwrap_or_default() {
            let bad = |source| FormatError::Record { line, source };
            if last.is_some_and(|s| r.seq <= s) {
                return Err(bad(TraceError::SeqNotIncreasing { seq: r.seq }));
            }
            last = Some(r.seq);
            r.check(m.len()).map_err(bad)?;
            t.records.push(r);
        }
        traces.push(t);
    }
    Ok(Corpus { messages, traces })
}

/// Parses `field` records. Other record kinds are ignored.
pub fn parse_truth(text: &str) -> Result<GroundTruth, FormatError> {
    let mut fields: BTreeMap<String, Vec<TrueField>> = BTreeMap::new();
    for l in lines(text) {
        let l = l?;
        if l.kind != "field" {
            continue;
        }
        l.check_keys(&["msg", "start", "end", "type", "functions", "accessed"])?;
        let start = l.num("start", l.req("start")?)?;
        let end = l.num("end", l.req("end")?)?;
        if end < start {
            return Err(perr(l.no, format!("field end {end} before start {start}")));
        }
        let t = l.req("type")?;
        let ty = SemanticType::from_name(t).ok_or_else(|| perr(l.no, format!("`type`: unknown value `{t}`")))?;
        let mut f = TrueField::new(start, end, ty, &[]);
        match l.opt("functions") {
            None | Some("-") => {}
            Some(list) => {
                for name in list.split(',') {
                    let func = SemanticFunction::from_name(name)
                        .ok_or_else(|| perr(l.no, format!("`functions`: unknown value `{name}`")))?;
                    f.functions.insert(func);
                }
            }
        }
        if let Some(v) = l.opt("accessed") {
            f.accessed = parse_bool(&l, "accessed", v)?;
        }
        fields.entry(l.req("msg")?.to_string()).or_default().push(f);
    }
    let mut gt = GroundTruth::new();
    for (id, fs) in fields {
        gt.insert(id, fs)?;
    }
    Ok(gt)
}

pub fn write_message(out: &mut String, m: &Message) {
    let _ = writeln!(out, "message id={} bytes={}", m.id, fmt_hex(&m.bytes));
}

pub fn write_record(out: &mut String, msg: &str, r: &InstructionRecord) {
    let _ = write!(out, "inst msg={msg} seq={} op={} class={} acc={}", r.seq, r.operator, r.op_class.name(), fmt_offsets(&r.accessed));
    if let Some(c) = &r.compared_const {
        let _ = write!(out, " const={}", fmt_hex(c));
    }
    if let Some(b) = r.cmp_result {
        let _ = write!(out, " result={b}");
    }
    if r.triggered_jump {
        out.push_str(" jump=true");
    }
    if let Some(id) = r.loop_id {
        let _ = write!(out, " loop={id}");
    }
    if let Some(role) = r.loop_role {
        let _ = write!(out, " role={}", enum_name(role));
    }
    if let Some(a) = &r.api_call {
        let _ = write!(out, " api={} arg={}", a.name, enum_name(a.tainted_arg_role));
    }
    if let Some(p) = r.pointer_arith {
        let _ = write!(out, " ptr={}", enum_name(p));
    }
    if let Some(v) = &r.value_snapshot {
        let _ = write!(out, " value={}", fmt_hex(v));
    }
    if !r.operand_origins.is_empty() {
        let o: Vec<String> = r.operand_origins.iter().map(fmt_offsets).collect();
        let _ = write!(out, " origins={}", o.join(";"));
    }
    out.push('\n');
}

/// Messages first, then each message's records.
pub fn serialize_corpus(c: &Corpus) -> String {
    let mut out = String::new();
    for m in &c.messages {
        write_message(&mut out, m);
    }
    for t in &c.traces {
        for r in &t.records {
            write_record(&mut out, &t.message_id, r);
        }
    }
    out
}

pub fn serialize_truth(gt: &GroundTruth) -> String {
    let mut out = String::new();
    for (id, fields) in &gt.messages {
        for f in fields {
            let fs: Vec<&str> = f.functions.iter().map(|x| x.name()).collect();
            let fs = if fs.is_empty() { "-".to_string() } else { fs.join(",") };
            let _ = write!(out, "field msg={id} start={} end={} type={} functions={fs}", f.start, f.end, f.ty.name());
            if !f.accessed {
                out.push_str(" accessed=false");
            }
            out.push('\n');
        }
    }
    out
}
