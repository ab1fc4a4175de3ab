//! End-to-end wiring: traces -> formats -> annotations -> refinement -> metrics.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{AlignmentParams, ParamsError};
use crate::eval::{score_corpus, EvalError, GroundTruth, MetricsReport};
use crate::format::{extract_format, extract_format_baseline};
use crate::refine::{constraint_refine, entropy_refine, explore_optimal, AuditEntry, Clustering, ConstraintTable, RefineError};
use crate::semantics::{annotate, CorpusAnnotations, DetectorConfig};
use crate::trace::{check_corpus, ExecutionTrace, FormatResult, Message, TraceError};
use crate::vm::{run, ParserScript, Termination, DEFAULT_STEP_BUDGET};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("messages without a trace: {}", .0.join(", "))]
    MissingTraces(Vec<String>),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// The three refinement switches; any subset may be enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementToggles {
    pub clustering: bool,
    pub entropy: bool,
    pub constraints: bool,
}

impl Default for RefinementToggles {
    fn default() -> Self {
        Self { clustering: true, entropy: true, constraints: true }
    }
}

impl RefinementToggles {
    pub const NONE: Self = Self { clustering: false, entropy: false, constraints: false };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub params: AlignmentParams,
    pub step_budget: u64,
    pub detectors: DetectorConfig,
    pub refinement: RefinementToggles,
    /// Use the one-instruction-one-field segmentation.
    pub baseline: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            params: AlignmentParams::default(),
            step_budget: DEFAULT_STEP_BUDGET,
            detectors: DetectorConfig::default(),
            refinement: RefinementToggles::default(),
            baseline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub formats: Vec<FormatResult>,
    /// Detector output before refinement.
    pub initial: CorpusAnnotations,
    pub clustering: Option<Clustering>,
    pub annotations: CorpusAnnotations,
    pub audit: Vec<AuditEntry>,
    pub metrics: Option<MetricsReport>,
}

/// Runs `script` over every message.
pub fn generate_traces(script: &ParserScript, messages: &[Message], step_budget: u64) -> Vec<(ExecutionTrace, Termination)> {
    messages
        .iter()
        .map(|m| {
            let r = run(script, m, step_budget);
            (r.trace, r.terminated)
        })
        .collect()
}

/// Pairs every message with its trace, checking integrity.
pub fn bind_traces<'a>(
    messages: &'a [Message],
    traces: &'a [ExecutionTrace],
) -> Result<Vec<(&'a Message, &'a ExecutionTrace)>, PipelineError> {
    check_corpus(messages)?;
    let by_id: BTreeMap<&str, &ExecutionTrace> = traces.iter().map(|t| (t.message_id.as_str(), t)).collect();
    if let Some(t) = traces.iter().find(|t| !messages.iter().any(|m| m.id == t.message_id)) {
        return Err(TraceError::UnknownMessage(t.message_id.clone()).into());
    }
    let missing: Vec<String> = messages.iter().filter(|m| !by_id.contains_key(m.id.as_str())).map(|m| m.id.clone()).collect();
    if !missing.is_empty() {
        return Err(PipelineError::MissingTraces(missing));
    }
    messages
        .iter()
        .map(|m| {
            let t = by_id[m.id.as_str()];
            t.check(m)?;
            Ok((m, t))
        })
        .collect()
}

pub fn extract_all(messages: &[Message], traces: &[ExecutionTrace], cfg: &PipelineConfig) -> Result<Vec<FormatResult>, PipelineError> {
    cfg.params.validate()?;
    Ok(bind_traces(messages, traces)?
        .into_iter()
        .map(|(m, t)| if cfg.baseline { extract_format_baseline(m, t) } else { extract_format(m, t, &cfg.params) })
        .collect())
}

pub fn infer_all(
    messages: &[Message],
    traces: &[ExecutionTrace],
    formats: &[FormatResult],
    cfg: &PipelineConfig,
) -> Result<CorpusAnnotations, PipelineError> {
    let by_id: BTreeMap<&str, &FormatResult> = formats.iter().map(|f| (f.message_id.as_str(), f)).collect();
    let mut out = CorpusAnnotations::new();
    for (m, t) in bind_traces(messages, traces)? {
        let f = by_id.get(m.id.as_str()).ok_or_else(|| RefineError::MissingFormat(m.id.clone()))?;
        f.check(m.len())?;
        out.insert(m.id.clone(), annotate(f, t, m, &cfg.detectors));
    }
    Ok(out)
}

/// Refinement stages in order: clustering, entropy, constraints.
pub fn refine_all(
    messages: &[Message],
    formats: &[FormatResult],
    initial: &CorpusAnnotations,
    cfg: &PipelineConfig,
) -> Result<(Option<Clustering>, CorpusAnnotations, Vec<AuditEntry>), PipelineError> {
    if let Some(m) = messages.iter().find(|m| !initial.contains_key(&m.id)) {
        return Err(RefineError::MissingAnnotations(m.id.clone()).into());
    }
    let t = cfg.refinement;
    let clustering = if t.clustering {
        let fm: BTreeMap<String, FormatResult> = formats.iter().map(|f| (f.message_id.clone(), f.clone())).collect();
        Some(explore_optimal(messages, &fm, &cfg.params)?)
    } else {
        None
    };
    let mut audit = Vec::new();
    let mut anns = initial.clone();
    if t.entropy {
        let basis = clustering.clone().unwrap_or_else(|| Clustering::single(messages));
        let (a, log) = entropy_refine(&anns, &basis, messages);
        anns = a;
        audit.extend(log);
    }
    if t.constraints {
        let (a, log) = constraint_refine(&anns, &ConstraintTable::default(), clustering.as_ref());
        anns = a;
        audit.extend(log);
    } else if let Some(pos) = clustering.as_ref().and_then(|c| c.command_pos) {
        for (id, a) in anns.iter_mut() {
            crate::refine::apply_command(id, a, pos, &mut audit);
        }
    }
    Ok((clustering, anns, audit))
}

pub fn run_pipeline(
    messages: &[Message],
    traces: &[ExecutionTrace],
    truth: Option<&GroundTruth>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    let formats = extract_all(messages, traces, cfg)?;
    let initial = infer_all(messages, traces, &formats, cfg)?;
    let (clustering, annotations, audit) = refine_all(messages, &formats, &initial, cfg)?;
    let metrics = truth.map(|gt| score_corpus(&formats, Some(&annotations), gt)).transpose()?;
    Ok(PipelineOutput { formats, initial, clustering, annotations, audit, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::bundled;

    #[test]
    fn missing_trace_lists_ids() {
        let c = bundled::text_kv().generate(2, 1);
        let err = run_pipeline(&c.messages, &[], None, &PipelineConfig::default()).unwrap_err();
        assert_eq!(err, PipelineError::MissingTraces(c.messages.iter().map(|m| m.id.clone()).collect()));
    }

    #[test]
    fn invalid_params_rejected() {
        let cfg = PipelineConfig { params: AlignmentParams { gap_score: 1, ..Default::default() }, ..Default::default() };
        assert!(matches!(run_pipeline(&[], &[], None, &cfg), Err(PipelineError::Params(_))));
    }
}
