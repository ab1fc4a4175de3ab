//! One line per acceptance criterion. Exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::TestRunner;

use fieldscope::{load_corpus, load_truth, Corpus};
use fieldscope_core::eval::{count_segmentation_errors, format_counts, score_format, GroundTruth, SemanticMetrics, TrueField};
use fieldscope_core::format::{extract_format_explained, nw_score};
use fieldscope_core::pipeline::{generate_traces, refine_all, run_pipeline, PipelineConfig, RefinementToggles};
use fieldscope_core::refine::{entropy_refine, explore_optimal, nw_format_score, shannon_entropy, AuditAction, AuditRule};
use fieldscope_core::semantics::{annotate_field, CorpusAnnotations, DetectorConfig};
use fieldscope_core::vm::bundled;
use fieldscope_core::{
    extract_format, extract_format_baseline, AlignmentParams, ConstraintTable, ExecutionTrace, Field, FieldAnnotation, FormatResult,
    Message, OperatorSequence, SemanticFunction, SemanticType,
};

const FIXTURE_TIME_LIMIT: Duration = Duration::from_secs(1);
const E2E_TIME_LIMIT: Duration = Duration::from_secs(120);
const E2E_MESSAGES: usize = 50;
const E2E_SEED: u64 = 42;
const PERFECTION_MIN: f64 = 0.95;
const F1_TARGET: f64 = 1.0;
const FLOAT_TOL: f64 = 1e-12;
const SEG_GAP_RATIO: f64 = 1.6;
const NW_PAIRS: usize = 1000;
const NW_MAX_LEN: usize = 6;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn frame() -> Result<(Message, ExecutionTrace), String> {
    let c = load_corpus(fixture("frame_segmentation.trace")).map_err(|e| e.to_string())?;
    Ok((c.messages[0].clone(), c.traces[0].clone()))
}

fn ranges(f: &FormatResult) -> Vec<(usize, usize)> {
    f.fields.iter().map(Field::range).collect()
}

fn sync_bytes_merge() -> Outcome {
    let (m, t) = frame()?;
    let t0 = Instant::now();
    let ex = extract_format_explained(&m, &t, &AlignmentParams::default());
    let base = extract_format_baseline(&m, &t);
    let took = t0.elapsed();
    let step = ex
        .steps
        .iter()
        .find(|s| s.left.range() == (0, 0) && s.right.range() == (1, 1))
        .ok_or("no merge decision for f0,0 / f1,1")?;
    check(step.merged && step.similarity.fraction == 1.0, format!("similarity {} merged {}", step.similarity.fraction, step.merged))?;
    check(ex.format.field_at(0, 1).is_some(), "f0,1 missing")?;
    check(base.field_at(0, 0).is_some() && base.field_at(1, 1).is_some(), "baseline merged the sync bytes")?;
    check(took < FIXTURE_TIME_LIMIT, format!("took {took:?}"))?;
    Ok(format!("similarity 1.0, merged to f0,1; baseline keeps f0,0 f1,1; {took:?}"))
}

fn loop_checksum_split() -> Outcome {
    let (m, t) = frame()?;
    let t0 = Instant::now();
    let f = extract_format(&m, &t, &AlignmentParams::default());
    let took = t0.elapsed();
    let want = [(0, 1), (2, 2), (3, 3), (4, 5), (6, 7), (8, 9), (10, 20), (21, 22)];
    check(ranges(&f) == want, format!("got {:?}", ranges(&f)))?;
    check(took < FIXTURE_TIME_LIMIT, format!("took {took:?}"))?;
    Ok(format!("f10,20 and f21,22 separate, full format {want:?}; {took:?}"))
}

fn checksum_semantics() -> Outcome {
    let c = load_corpus(fixture("frame_checksum.trace")).map_err(|e| e.to_string())?;
    let (m, t) = (&c.messages[0], &c.traces[0]);
    let f = extract_format(m, t, &AlignmentParams::default());
    let field = *f.field_at(21, 22).ok_or_else(|| format!("f21,22 not extracted: {:?}", ranges(&f)))?;
    let a = annotate_field(&field, t, m, &DetectorConfig::default());
    check(a.inferred_type == SemanticType::Integer, format!("type {}", a.inferred_type))?;
    check(a.inferred_functions.contains(&SemanticFunction::Checksum), format!("functions {:?}", a.inferred_functions))?;
    let cited: Vec<&str> =
        a.evidence.iter().filter_map(|e| e.seq).filter_map(|s| t.get(s)).map(|r| r.operator.as_str()).collect();
    let last_cmp = t.records.iter().rev().find(|r| r.operator == "cmp").map(|r| r.seq);
    let cites_cmp = a.evidence.iter().any(|e| e.seq == last_cmp);
    check(cited.contains(&"or") && cited.contains(&"shl") && cites_cmp, format!("evidence cites {cited:?}"))?;
    Ok(format!("f21,22 integer + checksum; evidence operators {cited:?}"))
}

fn modbus() -> Result<(Vec<Message>, Vec<FormatResult>, CorpusAnnotations), String> {
    let c = load_corpus(fixture("modbus_refinement.txt")).map_err(|e| e.to_string())?;
    let gt = load_truth(fixture("modbus_refinement.txt")).map_err(|e| e.to_string())?;
    let mut formats = Vec::new();
    let mut anns = CorpusAnnotations::new();
    for m in &c.messages {
        formats.push(gt.format(&m.id).map_err(|e| e.to_string())?);
        let list = gt
            .fields(&m.id)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|f| FieldAnnotation {
                field: Field::new(f.start, f.end),
                inferred_type: f.ty,
                inferred_functions: f.functions.clone(),
                evidence: Vec::new(),
            })
            .collect();
        anns.insert(m.id.clone(), list);
    }
    Ok((c.messages, formats, anns))
}

fn modbus_refinement() -> Outcome {
    let (msgs, formats, anns) = modbus()?;
    let (cl, out, audit) = refine_all(&msgs, &formats, &anns, &PipelineConfig::default()).map_err(|e| e.to_string())?;
    let pos = cl.as_ref().and_then(|c| c.command_pos);
    check(pos == Some((7, 7)), format!("command position {pos:?}"))?;
    let first: Vec<&str> = ["a", "b", "c"].into();
    for id in &first {
        let revoked = audit.iter().any(|e| {
            e.message_id == *id && e.field == Some((4, 5)) && e.action == AuditAction::Revoked && e.rule == AuditRule::BytesEntropy
        });
        let dropped = audit.iter().any(|e| {
            e.message_id == *id && e.field == Some((4, 5)) && e.action == AuditAction::Dropped && e.label.as_deref() == Some("delim")
        });
        let f45 = out[*id].iter().find(|a| a.field.range() == (4, 5)).ok_or("f4,5 missing")?;
        check(revoked && dropped, format!("{id}: bytes revoked {revoked}, delim dropped {dropped}"))?;
        check(
            f45.inferred_type != SemanticType::Bytes && !f45.inferred_functions.contains(&SemanticFunction::Delim),
            format!("{id}: f4,5 still {} {:?}", f45.inferred_type, f45.inferred_functions),
        )?;
    }
    let table = ConstraintTable::default();
    let mut pairs = 0;
    for a in out.values().flatten() {
        for &f in &a.inferred_functions {
            pairs += 1;
            check(table.allows(f, a.inferred_type), format!("{f} on {} at {:?}", a.inferred_type, a.field.range()))?;
        }
    }
    let f45 = &out["a"][2];
    Ok(format!(
        "basis f7; f4,5 -> {} {:?}; {pairs} (field, function) pairs all allowed",
        f45.inferred_type,
        f45.inferred_functions.iter().map(|f| f.name()).collect::<Vec<_>>()
    ))
}

/// Maximum over every alignment, enumerated as explicit move strings.
fn brute_force<T: PartialEq>(a: &[T], b: &[T], p: &AlignmentParams) -> i64 {
    if a.is_empty() || b.is_empty() {
        return (a.len() + b.len()) as i64 * p.gap_score;
    }
    let diag = if a[0] == b[0] { p.match_score } else { p.mismatch_score };
    (diag + brute_force(&a[1..], &b[1..], p))
        .max(p.gap_score + brute_force(&a[1..], b, p))
        .max(p.gap_score + brute_force(a, &b[1..], p))
}

fn nw_oracle() -> Outcome {
    let p = AlignmentParams::default();
    let mut runner = TestRunner::deterministic();
    let ops = prop::collection::vec(prop::sample::select(vec!["mov", "movzx", "cmp", "xor"]), 0..=NW_MAX_LEN);
    let cuts = prop::collection::btree_set(1usize..12, 0..=NW_MAX_LEN);
    let pairs = ((ops.clone(), ops), (cuts.clone(), cuts));
    for i in 0..NW_PAIRS {
        let ((a, b), (ca, cb)) = pairs.new_tree(&mut runner).map_err(|e| e.to_string())?.current();
        let (sa, sb): (OperatorSequence, OperatorSequence) = (a.iter().collect(), b.iter().collect());
        let got = nw_score(&sa, &sb, &p);
        let want = brute_force(&a, &b, &p);
        check(got == want, format!("pair {i}: nw_score {got} vs {want} for {a:?} {b:?}"))?;
        let fa = FormatResult::from_boundaries("a", ca.iter().copied(), 12).map_err(|e| e.to_string())?;
        let fb = FormatResult::from_boundaries("b", cb.iter().copied(), 12).map_err(|e| e.to_string())?;
        let (va, vb): (Vec<usize>, Vec<usize>) = (ca.into_iter().collect(), cb.into_iter().collect());
        let got = nw_format_score(&fa, &fb, &p);
        let want = brute_force(&va, &vb, &p);
        check(got == want, format!("pair {i}: nw_format_score {got} vs {want} for {va:?} {vb:?}"))?;
    }
    Ok(format!("{NW_PAIRS} operator pairs and {NW_PAIRS} boundary pairs agree exactly"))
}

struct Bench {
    name: &'static str,
    corpus: Corpus,
    truth: GroundTruth,
}

fn benches() -> Vec<Bench> {
    bundled::bundled_parsers()
        .into_iter()
        .map(|p| {
            let g = p.generate(E2E_MESSAGES, E2E_SEED);
            let traces = generate_traces(&p.script, &g.messages, PipelineConfig::default().step_budget).into_iter().map(|(t, _)| t).collect();
            Bench { name: p.name, corpus: Corpus { messages: g.messages, traces }, truth: g.truth }
        })
        .collect()
}

fn end_to_end() -> Outcome {
    let t0 = Instant::now();
    let mut parts = Vec::new();
    for b in benches() {
        let out = run_pipeline(&b.corpus.messages, &b.corpus.traces, Some(&b.truth), &PipelineConfig::default())
            .map_err(|e| e.to_string())?;
        let m = out.metrics.ok_or("no metrics")?;
        let s = m.semantics.ok_or("no semantic metrics")?;
        let perf = m.format.perfection;
        check(perf >= PERFECTION_MIN, format!("{}: perfection {perf:.3}", b.name))?;
        check(
            (s.types.f1 - F1_TARGET).abs() < FLOAT_TOL && (s.functions.f1 - F1_TARGET).abs() < FLOAT_TOL,
            format!("{}: type F1 {:.4} function F1 {:.4}", b.name, s.types.f1, s.functions.f1),
        )?;
        parts.push(format!("{} perf {perf:.2} type-F1 {:.2} func-F1 {:.2}", b.name, s.types.f1, s.functions.f1));
    }
    let took = t0.elapsed();
    check(took < E2E_TIME_LIMIT, format!("took {took:?}"))?;
    Ok(format!("{} messages each: {}; {took:?}", E2E_MESSAGES, parts.join(", ")))
}

fn seg_errors(b: &Bench, baseline: bool) -> Result<usize, String> {
    let mut total = 0;
    for (m, t) in b.corpus.messages.iter().zip(&b.corpus.traces) {
        let f = if baseline { extract_format_baseline(m, t) } else { extract_format(m, t, &AlignmentParams::default()) };
        let (o, u) = count_segmentation_errors(&f, &b.truth).map_err(|e| e.to_string())?;
        total += o + u;
    }
    Ok(total)
}

fn segmentation() -> Outcome {
    let b = benches().into_iter().find(|b| b.name == "dnp3_like").ok_or("no dnp3_like parser")?;
    let ours = seg_errors(&b, false)?;
    let base = seg_errors(&b, true)?;
    check(base > ours && base as f64 >= SEG_GAP_RATIO * ours as f64, format!("baseline {base} vs ours {ours}"))?;
    Ok(format!("baseline {base} errors vs {ours}"))
}

fn boundary_metric_hand_case() -> Outcome {
    let mut gt = GroundTruth::new();
    gt.insert(
        "m",
        vec![
            TrueField::new(0, 1, SemanticType::Static, &[]),
            TrueField::new(2, 4, SemanticType::Integer, &[]),
            TrueField::new(5, 7, SemanticType::Bytes, &[]),
        ],
    )
    .map_err(|e| e.to_string())?;
    let inferred = FormatResult::from_boundaries("m", [2, 4], 8).map_err(|e| e.to_string())?;
    let c = format_counts(&inferred, &gt).map_err(|e| e.to_string())?;
    let m = score_format(&inferred, &gt).map_err(|e| e.to_string())?;
    check((c.tp, c.fp, c.fn_, c.tn) == (1, 1, 1, 4), format!("counts {c:?}"))?;
    check((m.f1 - 0.5).abs() < FLOAT_TOL, format!("F1 {}", m.f1))?;
    check((m.perfection - 1.0 / 3.0).abs() < FLOAT_TOL, format!("perfection {}", m.perfection))?;
    Ok("TP=1 FP=1 FN=1 TN=4, F1=0.5, perfection=1/3".into())
}

fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let x = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, x.clone());
            out.push(p);
        }
    }
    out
}

fn entropy_invariants() -> Outcome {
    check(shannon_entropy([&[9u8][..]; 6]) == 0.0, "constant field has non-zero entropy")?;
    for n in [2usize, 4, 8] {
        let vals: Vec<[u8; 1]> = (0..4 * n).map(|i| [(i % n) as u8]).collect();
        let h = shannon_entropy(vals.iter().map(|v| &v[..]));
        check((h - (n as f64).log2()).abs() < FLOAT_TOL, format!("n={n}: H={h}"))?;
    }
    let (msgs, formats, anns) = modbus()?;
    let fm: BTreeMap<String, FormatResult> = formats.into_iter().map(|f| (f.message_id.clone(), f)).collect();
    let p = AlignmentParams::default();
    let key = |msgs: &[Message]| -> Result<_, String> {
        let cl = explore_optimal(msgs, &fm, &p).map_err(|e| e.to_string())?;
        let (out, audit) = entropy_refine(&anns, &cl, msgs);
        let mut log: Vec<String> = audit.iter().filter(|e| e.action == AuditAction::Revoked).map(|e| format!("{e:?}")).collect();
        log.sort();
        Ok((out, log))
    };
    let reference = key(&msgs)?;
    check(!reference.1.is_empty(), "no revocation to compare")?;
    let perms = permutations(&msgs);
    for perm in &perms {
        check(key(perm)? == reference, "revocations depend on message order")?;
    }
    Ok(format!("H=0 constant, H=log2 n for n in 2,4,8; {} revocations identical across {} orders", reference.1.len(), perms.len()))
}

fn command_f1(s: &SemanticMetrics) -> f64 {
    s.per_function.iter().find(|l| l.label == "command").map_or(0.0, |l| l.f1)
}

fn ablation() -> Outcome {
    let table = ConstraintTable::default();
    let mut lines = Vec::new();
    for b in benches() {
        let mut viol: BTreeMap<(bool, bool, bool), usize> = BTreeMap::new();
        let mut cmd: BTreeMap<(bool, bool, bool), f64> = BTreeMap::new();
        for bits in 0..8u8 {
            let t = RefinementToggles { clustering: bits & 1 != 0, entropy: bits & 2 != 0, constraints: bits & 4 != 0 };
            let cfg = PipelineConfig { refinement: t, ..Default::default() };
            let out = run_pipeline(&b.corpus.messages, &b.corpus.traces, Some(&b.truth), &cfg).map_err(|e| e.to_string())?;
            let k = (t.clustering, t.entropy, t.constraints);
            viol.insert(k, table.violations(&out.annotations));
            let sem = out.metrics.and_then(|m| m.semantics).ok_or("no semantic metrics")?;
            cmd.insert(k, command_f1(&sem));
        }
        for c in [false, true] {
            for e in [false, true] {
                let (off, on) = (viol[&(c, e, false)], viol[&(c, e, true)]);
                check(on == 0 && on <= off, format!("{}: violations {off} -> {on}", b.name))?;
                let (det, clu) = (cmd[&(false, e, c)], cmd[&(true, e, c)]);
                check(clu >= det, format!("{}: command F1 {det} -> {clu} with clustering", b.name))?;
            }
        }
        let detector_only = RefinementToggles::NONE;
        lines.push(format!(
            "{}: max violations without constraints {}, command F1 detector-only {:.2} / full {:.2}",
            b.name,
            viol.values().max().copied().unwrap_or(0),
            cmd[&(detector_only.clustering, detector_only.entropy, detector_only.constraints)],
            cmd[&(true, true, true)]
        ));
    }
    let (msgs, formats, anns) = modbus()?;
    let before = table.violations(&anns);
    for bits in 0..8u8 {
        let t = RefinementToggles { clustering: bits & 1 != 0, entropy: bits & 2 != 0, constraints: bits & 4 != 0 };
        let cfg = PipelineConfig { refinement: t, ..Default::default() };
        let (_, out, _) = refine_all(&msgs, &formats, &anns, &cfg).map_err(|e| e.to_string())?;
        let after = table.violations(&out);
        if t.constraints {
            check(after == 0, format!("modbus {t:?}: {after} violations"))?;
        }
    }
    lines.push(format!("modbus fixture: {before} violations before refinement, 0 with constraints"));
    Ok(lines.join("; "))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("sync bytes merge", sync_bytes_merge),
        ("loop / checksum split", loop_checksum_split),
        ("checksum semantics", checksum_semantics),
        ("modbus refinement", modbus_refinement),
        ("nw brute-force oracle", nw_oracle),
        ("end-to-end synthetic benchmark", end_to_end),
        ("segmentation errors vs baseline", segmentation),
        ("boundary metric hand case", boundary_metric_hand_case),
        ("entropy invariants", entropy_invariants),
        ("ablation monotonicity", ablation),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS AC{:02} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL AC{:02} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
