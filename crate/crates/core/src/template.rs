//! Generation-fuzzer template model built from final annotations.
//!
//! Each inferred field becomes one primitive. Fields without a usable type
//! are emitted as `random` but keep their boundaries.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::semantics::{CorpusAnnotations, FieldAnnotation, SemanticFunction, SemanticType};
use crate::trace::Message;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrimitiveKind {
    Static,
    Integer,
    Group,
    Bytes,
    String,
    SizeOf,
    Checksum,
    Delim,
    Random,
}

impl PrimitiveKind {
    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Static => "static",
            PrimitiveKind::Integer => "integer",
            PrimitiveKind::Group => "group",
            PrimitiveKind::Bytes => "bytes",
            PrimitiveKind::String => "string",
            PrimitiveKind::SizeOf => "size-of",
            PrimitiveKind::Checksum => "checksum",
            PrimitiveKind::Delim => "delim",
            PrimitiveKind::Random => "random",
        }
    }

    /// Functions that change generation behaviour win over the type.
    pub fn of(a: &FieldAnnotation) -> Self {
        let fs = &a.inferred_functions;
        if fs.contains(&SemanticFunction::Length) {
            return PrimitiveKind::SizeOf;
        }
        if fs.contains(&SemanticFunction::Checksum) {
            return PrimitiveKind::Checksum;
        }
        if fs.contains(&SemanticFunction::Delim) {
            return PrimitiveKind::Delim;
        }
        match a.inferred_type {
            SemanticType::Static => PrimitiveKind::Static,
            SemanticType::Integer => PrimitiveKind::Integer,
            SemanticType::Group => PrimitiveKind::Group,
            SemanticType::Bytes => PrimitiveKind::Bytes,
            SemanticType::String => PrimitiveKind::String,
            SemanticType::Unknown => PrimitiveKind::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateEntry {
    pub start: usize,
    pub end: usize,
    pub kind: PrimitiveKind,
    pub ty: SemanticType,
    pub functions: BTreeSet<SemanticFunction>,
    /// Observed value, used as the default.
    pub default: Vec<u8>,
    /// Range a size-of field measures: everything after it.
    pub target: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageTemplate {
    pub message_id: String,
    pub length: usize,
    pub fields: Vec<TemplateEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzTemplate {
    pub name: String,
    pub messages: Vec<MessageTemplate>,
}

pub fn build_template(name: &str, annotations: &CorpusAnnotations, messages: &[Message]) -> FuzzTemplate {
    let mut out = FuzzTemplate { name: name.into(), messages: Vec::new() };
    for m in messages {
        let Some(anns) = annotations.get(&m.id) else { continue };
        let fields = anns
            .iter()
            .map(|a| {
                let kind = PrimitiveKind::of(a);
                let target = (kind == PrimitiveKind::SizeOf && a.field.end + 1 < m.len()).then(|| (a.field.end + 1, m.len() - 1));
                TemplateEntry {
                    start: a.field.start,
                    end: a.field.end,
                    kind,
                    ty: a.inferred_type,
                    functions: a.inferred_functions.clone(),
                    default: m.slice(a.field.start, a.field.end).unwrap_or_default().to_vec(),
                    target,
                }
            })
            .collect();
        out.messages.push(MessageTemplate { message_id: m.id.clone(), length: m.len(), fields });
    }
    out
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::from("0x");
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Line-oriented rendering:
///
/// ```text
/// # fuzz-template <name>
/// # message <id> <length> / field <start> <end> <kind> <type> <functions|-> <default> [target=<s>-<e>]
/// ```
pub fn render_text(t: &FuzzTemplate) -> String {
    let mut s = format!("# fuzz-template {}\n# message <id> <length>\n# field <start> <end> <kind> <type> <functions|-> <default> [target=<start>-<end>]\n", t.name);
    for m in &t.messages {
        let _ = writeln!(s, "message {} {}", m.message_id, m.length);
        for f in &m.fields {
            let fs: Vec<&str> = f.functions.iter().map(|x| x.name()).collect();
            let fs = if fs.is_empty() { String::from("-") } else { fs.join(",") };
            let _ = write!(s, "field {} {} {} {} {} {}", f.start, f.end, f.kind.name(), f.ty.name(), fs, hex(&f.default));
            if let Some((a, b)) = f.target {
                let _ = write!(s, " target={a}-{b}");
            }
            s.push('\n');
        }
    }
    s
}
