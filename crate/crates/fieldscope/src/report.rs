//! Human-readable summaries of metric reports.

use std::fmt::Write as _;

use fieldscope_core::refine::AuditEntry;
use fieldscope_core::semantics::CorpusAnnotations;
use fieldscope_core::MetricsReport;

/// One row per corpus: format accuracy/F1/perfection, semantic F1 and
/// segmentation error counts.
pub fn summary_table(rows: &[(&str, &MetricsReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:>5} {:>6} {:>6} {:>6} {:>8} {:>8} {:>5} {:>6}",
        "protocol", "msgs", "acc", "f1", "perf", "type-f1", "func-f1", "over", "under"
    );
    for (name, m) in rows {
        let sem = |f: fn(&fieldscope_core::eval::SemanticMetrics) -> f64| {
            m.semantics.as_ref().map_or_else(|| "-".to_string(), |x| format!("{:.2}", f(x)))
        };
        let _ = writeln!(
            s,
            "{:<14} {:>5} {:>6.2} {:>6.2} {:>6.2} {:>8} {:>8} {:>5} {:>6}",
            name,
            m.messages,
            m.format.accuracy,
            m.format.f1,
            m.format.perfection,
            sem(|x| x.types.f1),
            sem(|x| x.functions.f1),
            m.over_seg,
            m.under_seg
        );
    }
    s
}

/// Per-field listing of final labels and the rules that produced them.
pub fn explain(annotations: &CorpusAnnotations) -> String {
    let mut s = String::new();
    for (id, anns) in annotations {
        let _ = writeln!(s, "{id}");
        for a in anns {
            let fs: Vec<&str> = a.inferred_functions.iter().map(|f| f.name()).collect();
            let mut rules: Vec<String> = a
                .evidence
                .iter()
                .map(|e| match e.seq {
                    Some(q) => format!("{}@{q}", e.rule.info().id),
                    None => e.rule.info().id.to_string(),
                })
                .collect();
            rules.dedup();
            let _ = writeln!(
                s,
                "  f{},{} {} [{}] {}",
                a.field.start,
                a.field.end,
                a.inferred_type,
                fs.join(","),
                rules.join(" ")
            );
        }
    }
    s
}

pub fn audit_lines(audit: &[AuditEntry]) -> String {
    let mut s = String::new();
    for e in audit {
        let _ = writeln!(s, "{}", serde_json::to_string(e).unwrap_or_default());
    }
    s
}
