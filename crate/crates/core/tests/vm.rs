use std::collections::BTreeSet;

use fieldscope_core::trace::{LoopRole, Message, OpClass};
use fieldscope_core::vm::{assemble, bundled, run, ParserScript, Termination, DEFAULT_STEP_BUDGET};

fn msg(bytes: &[u8]) -> Message {
    Message::new("m", bytes.to_vec()).unwrap()
}

#[test]
fn sync_bytes_compared_one_by_one() {
    let s = assemble("sync", "ldb r0, [0]\ncmp r0, 0x05\njne bad\nldb r1, [1]\ncmp r1, 0x64\njne bad\naccept\nbad: reject").unwrap();
    let r = run(&s, &msg(&[0x05, 0x64, 0x0b, 0x44]), DEFAULT_STEP_BUDGET);
    assert_eq!(r.terminated, Termination::Accept);
    let cmps: Vec<_> = r.trace.records.iter().filter(|x| x.op_class == OpClass::Compare).collect();
    assert_eq!(cmps.len(), 2);
    assert_eq!(cmps[0].accessed, BTreeSet::from([0]));
    assert_eq!(cmps[1].accessed, BTreeSet::from([1]));
    assert!(cmps.iter().all(|c| c.cmp_result == Some(true) && !c.triggered_jump));
    assert_eq!(cmps[0].compared_const.as_deref(), Some(&[0x05][..]));

    let r = run(&s, &msg(&[0x05, 0x65]), DEFAULT_STEP_BUDGET);
    assert_eq!(r.terminated, Termination::Reject);
}

const XOR_LOOP: &str = "
        movi r5, 10
        movi r7, 21
loop x
top:    cmp  r5, r7
        jge  out
        ldb  r0, [r5]
        xor  r0, r8
        mov  r9, r0
        add  r5, 1
        jmp  top
endloop x
out:    accept
";

#[test]
fn xor_loop_groups_per_byte() {
    let s = assemble("x", XOR_LOOP).unwrap();
    let r = run(&s, &msg(&[0u8; 23]), DEFAULT_STEP_BUDGET);
    assert_eq!(r.terminated, Termination::Accept);
    let mut groups: Vec<Vec<&str>> = Vec::new();
    for k in 10..=20 {
        let ops: Vec<&str> = r.trace.records.iter().filter(|x| x.accessed.contains(&k)).map(|x| x.operator.as_str()).collect();
        groups.push(ops);
    }
    assert_eq!(groups.len(), 11);
    assert!(groups.iter().all(|g| *g == ["movzx", "xor", "mov"]));
    assert!(r.trace.records.iter().all(|x| x.loop_id == Some(1) && x.loop_role == Some(LoopRole::Body)));
}

#[test]
fn empty_script_accepts_with_empty_trace() {
    let r = run(&ParserScript::empty("e"), &msg(&[1, 2, 3]), DEFAULT_STEP_BUDGET);
    assert_eq!(r.terminated, Termination::Accept);
    assert!(r.trace.records.is_empty());
}

#[test]
fn out_of_bounds_read_rejects() {
    let s = assemble("oob", "ldb r0, [0]\nldw r1, [2]\naccept").unwrap();
    let r = run(&s, &msg(&[1, 2, 3]), DEFAULT_STEP_BUDGET);
    assert_eq!(r.terminated, Termination::Reject);
    assert_eq!(r.trace.records.len(), 1);
}

#[test]
fn step_budget_exhaustion() {
    let s = assemble("spin", "top: jmp top").unwrap();
    let r = run(&s, &msg(&[1]), 1000);
    assert_eq!((r.terminated, r.steps), (Termination::StepLimit, 1000));
    let s = assemble("short", "movi r0, 1\nmovi r0, 2").unwrap();
    assert_eq!(run(&s, &msg(&[1]), 2).terminated, Termination::Accept);
    assert_eq!(run(&s, &msg(&[1]), 1).terminated, Termination::StepLimit);
}

#[test]
fn loop_exit_compare_is_termination_and_jump_flagged() {
    let s = assemble(
        "scan",
        "movi r5, 0\nloop s\ntop: ldb r0, [r5]\ncmp r0, 0x0a\njeq done\nadd r5, 1\njmp top\nendloop s\ndone: accept",
    )
    .unwrap();
    let r = run(&s, &msg(b"ab\n"), DEFAULT_STEP_BUDGET);
    let cmps: Vec<_> = r.trace.records.iter().filter(|x| x.op_class == OpClass::Compare).collect();
    assert_eq!(cmps.len(), 3);
    assert!(cmps.iter().all(|c| c.loop_role == Some(LoopRole::Termination)));
    assert_eq!(cmps.iter().map(|c| c.triggered_jump).collect::<Vec<_>>(), [false, false, true]);
}

#[test]
fn api_and_pointer_annotations() {
    let s = assemble("api", "ldb r2, [0]\napi recv len r2\ndec r2, 1\nmovi r5, 1\nadvp r5, r2\nmovi r6, 2\napi open buf r5, r6\naccept").unwrap();
    let r = run(&s, &msg(&[1, 0x41, 0x42, 0x43]), DEFAULT_STEP_BUDGET);
    let t = &r.trace.records;
    assert_eq!(t[1].api_call.as_ref().unwrap().name, "recv");
    assert_eq!(t[1].accessed, BTreeSet::from([0]));
    assert!(t[2].pointer_arith.is_some() && t[3].pointer_arith.is_some());
    // r2 was decremented to 0 so the buffer starts at offset 1
    assert_eq!(t[4].accessed, BTreeSet::from([1, 2]));
}

#[test]
fn table_lookup_keeps_origin_not_taint() {
    let s = assemble("crc", "ldb r0, [0]\ntbl r1, r0\nldb r2, [1]\ncmp r1, r2\naccept").unwrap();
    let r = run(&s, &msg(&[3, 4]), DEFAULT_STEP_BUDGET);
    let c = r.trace.records.last().unwrap();
    assert_eq!(c.accessed, BTreeSet::from([1]));
    assert_eq!(c.operand_origins, vec![BTreeSet::from([0]), BTreeSet::from([1])]);
}

#[test]
fn runs_are_deterministic() {
    for p in bundled::bundled_parsers() {
        for m in p.generate(10, 5).messages {
            let a = run(&p.script, &m, DEFAULT_STEP_BUDGET);
            let b = run(&p.script, &m, DEFAULT_STEP_BUDGET);
            assert_eq!(a, b);
        }
    }
}

#[test]
fn every_read_byte_is_recorded() {
    for p in bundled::bundled_parsers() {
        for m in p.generate(20, 11).messages {
            let r = run(&p.script, &m, DEFAULT_STEP_BUDGET);
            let seen: BTreeSet<usize> = r.trace.records.iter().flat_map(|x| x.accessed.iter().copied()).collect();
            assert_eq!(seen, (0..m.len()).collect(), "{}", m.id);
        }
    }
}

#[test]
fn text_message_delimiter_truth() {
    let c = bundled::text_kv().generate(5, 2);
    for m in &c.messages {
        let last = c.truth.fields(&m.id).unwrap().last().unwrap();
        assert_eq!(&m.bytes[last.start..=last.end], b"\r\n");
        assert!(last.functions.contains(&fieldscope_core::SemanticFunction::Delim));
    }
}
