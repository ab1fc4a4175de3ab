//! Deterministic micro-VM producing byte-level taint traces.
//!
//! A [`ParserScript`] is a list of register ops over a read-only message
//! buffer. Every register carries a value, a taint label set and an origin
//! set. Taint is what an instruction is recorded as accessing; origin also
//! survives table lookups (address-dependent reads), which is how loop
//! accumulators such as CRCs remember the bytes they were computed from
//! without tainting every later instruction.
//!
//! Loop regions are explicit (`loop NAME` / `endloop NAME`) so loop ids and
//! roles come straight from the script.

mod asm;
pub mod bundled;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::trace::{ApiCall, ArgRole, ExecutionTrace, InstructionRecord, LoopRole, Message, OffsetSet, OpClass, PointerArith};

pub use asm::{assemble, AsmError};

pub const DEFAULT_STEP_BUDGET: u64 = 1_000_000;
pub const NUM_REGS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Reg(pub u8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    /// Immediate with its written width in bytes (used for `compared_const`).
    Imm { value: u64, width: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

impl AluOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::And => "and",
            AluOp::Or => "or",
            AluOp::Xor => "xor",
            AluOp::Shl => "shl",
            AluOp::Shr => "shr",
        }
    }

    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::And => a & b,
            AluOp::Or => a | b,
            AluOp::Xor => a ^ b,
            AluOp::Shl => a.checked_shl(b as u32).unwrap_or(0),
            AluOp::Shr => a.checked_shr(b as u32).unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cond {
    Always,
    Eq,
    Ne,
    Lt,
    Gt,
    Le,
    Ge,
}

impl Cond {
    fn holds(self, flags: Option<Ordering>) -> bool {
        use Ordering::*;
        match (self, flags) {
            (Cond::Always, _) => true,
            (_, None) => false,
            (Cond::Eq, Some(o)) => o == Equal,
            (Cond::Ne, Some(o)) => o != Equal,
            (Cond::Lt, Some(o)) => o == Less,
            (Cond::Gt, Some(o)) => o == Greater,
            (Cond::Le, Some(o)) => o != Greater,
            (Cond::Ge, Some(o)) => o != Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApiArg {
    /// Register passed as a length argument.
    Len(Reg),
    /// Message buffer `[ptr, ptr + len)` passed by address.
    Buf { ptr: Reg, len: Reg },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    /// Little-endian load of `width` message bytes at `base + disp`.
    Load { width: u8, dst: Reg, base: Option<Reg>, disp: i64 },
    Mov { dst: Reg, src: Reg },
    Movi { dst: Reg, value: u64 },
    Alu { op: AluOp, dst: Reg, src: Operand },
    /// Counter decrement.
    Dec { dst: Reg, amount: u64 },
    /// Pointer advance by a register amount.
    Advp { dst: Reg, src: Reg },
    Cmp { lhs: Reg, rhs: Operand },
    /// Compares message bytes at `base + disp` with a literal.
    Cmps { base: Option<Reg>, disp: i64, lit: Vec<u8> },
    /// `dst = CRC16_TABLE[src & 0xff]`.
    Tbl { dst: Reg, src: Reg },
    Jump { cond: Cond, target: usize },
    Api { name: String, arg: ApiArg },
    Accept,
    Reject,
}

/// Half-open op-index range of one loop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopRegion {
    pub id: u32,
    pub name: String,
    pub begin: usize,
    pub end: usize,
}

impl LoopRegion {
    fn contains(&self, pc: usize) -> bool {
        (self.begin..self.end).contains(&pc)
    }
}

/// An assembled parser script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParserScript {
    pub name: String,
    pub ops: Vec<Op>,
    pub loops: Vec<LoopRegion>,
    pub labels: BTreeMap<String, usize>,
}

impl ParserScript {
    pub fn empty(name: impl Into<String>) -> Self {
        Self { name: name.into(), ops: Vec::new(), loops: Vec::new(), labels: BTreeMap::new() }
    }

    /// Innermost loop containing `pc`.
    fn loop_at(&self, pc: usize) -> Option<&LoopRegion> {
        self.loops.iter().filter(|l| l.contains(pc)).min_by_key(|l| l.end - l.begin)
    }

    /// A compare whose following op is a conditional jump leaving the
    /// innermost loop is that loop's termination check.
    fn loop_annotation(&self, pc: usize) -> Option<(u32, LoopRole)> {
        let region = self.loop_at(pc)?;
        let exits = matches!(self.ops[pc], Op::Cmp { .. } | Op::Cmps { .. })
            && matches!(self.ops.get(pc + 1), Some(Op::Jump { cond, target }) if *cond != Cond::Always && !region.contains(*target));
        Some((region.id, if exits { LoopRole::Termination } else { LoopRole::Body }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Accept,
    Reject,
    StepLimit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmRunReport {
    pub trace: ExecutionTrace,
    pub terminated: Termination,
    pub steps: u64,
}

/// CRC-16 lookup table, reflected polynomial 0xA6BC.
pub const CRC16_TABLE: [u16; 256] = crc_table();

const fn crc_table() -> [u16; 256] {
    let mut t = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u16;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { (c >> 1) ^ 0xA6BC } else { c >> 1 };
            k += 1;
        }
        t[i] = c;
        i += 1;
    }
    t
}

/// CRC over `bytes` as computed by the bundled parsers (init 0, no final xor).
pub fn crc16(bytes: &[u8]) -> u16 {
    bytes.iter().fold(0u16, |crc, &b| (crc >> 8) ^ CRC16_TABLE[((crc ^ b as u16) & 0xff) as usize])
}

#[derive(Debug, Clone, Default)]
struct RegState {
    value: u64,
    taint: OffsetSet,
    origin: OffsetSet,
}

fn le_bytes(v: u64, width: usize) -> Vec<u8> {
    v.to_le_bytes()[..width.clamp(1, 8)].to_vec()
}

struct Machine<'a> {
    script: &'a ParserScript,
    msg: &'a [u8],
    regs: [RegState; NUM_REGS],
    flags: Option<Ordering>,
    records: Vec<InstructionRecord>,
    /// pc of the previous step, when that step emitted a record
    last_pc: Option<usize>,
}

impl Machine<'_> {
    fn r(&self, r: Reg) -> &RegState {
        &self.regs[r.0 as usize]
    }

    fn operand(&self, o: &Operand) -> (u64, OffsetSet, OffsetSet) {
        match *o {
            Operand::Reg(r) => {
                let s = self.r(r);
                (s.value, s.taint.clone(), s.origin.clone())
            }
            Operand::Imm { value, .. } => (value, OffsetSet::new(), OffsetSet::new()),
        }
    }

    fn addr(&self, base: Option<Reg>, disp: i64, width: usize) -> Option<usize> {
        let b = base.map_or(0, |r| self.r(r).value as i64);
        let a = b.checked_add(disp)?;
        let a = usize::try_from(a).ok()?;
        (a.checked_add(width)? <= self.msg.len()).then_some(a)
    }

    fn emit(&mut self, pc: usize, op: &str, class: OpClass, accessed: OffsetSet) -> &mut InstructionRecord {
        let mut rec = InstructionRecord::new(self.records.len() as u64, op, class, accessed);
        if let Some((id, role)) = self.script.loop_annotation(pc) {
            rec.loop_id = Some(id);
            rec.loop_role = Some(role);
        }
        self.records.push(rec);
        self.records.last_mut().expect("just pushed")
    }

    /// Executes one op. Returns the next pc, or a termination.
    fn step(&mut self, pc: usize) -> Result<usize, Termination> {
        let op = &self.script.ops[pc];
        match op {
            Op::Load { width, dst, base, disp } => {
                let w = *width as usize;
                let a = self.addr(*base, *disp, w).ok_or(Termination::Reject)?;
                let bytes = &self.msg[a..a + w];
                let value = bytes.iter().rev().fold(0u64, |acc, &b| (acc << 8) | b as u64);
                let set: OffsetSet = (a..a + w).collect();
                let mnemonic = if w >= 4 { "mov" } else { "movzx" };
                let snapshot = bytes.to_vec();
                self.emit(pc, mnemonic, OpClass::MovSeries, set.clone()).value_snapshot = Some(snapshot);
                self.regs[dst.0 as usize] = RegState { value, taint: set.clone(), origin: set };
            }
            Op::Mov { dst, src } => {
                let s = self.r(*src).clone();
                if !s.taint.is_empty() {
                    self.emit(pc, "mov", OpClass::MovSeries, s.taint.clone()).value_snapshot = Some(le_bytes(s.value, 8));
                }
                self.regs[dst.0 as usize] = s;
            }
            Op::Movi { dst, value } => {
                self.regs[dst.0 as usize] = RegState { value: *value, ..Default::default() };
            }
            Op::Alu { op, dst, src } => {
                let (v, t, o) = self.operand(src);
                let d = &mut self.regs[dst.0 as usize];
                d.value = op.apply(d.value, v);
                d.taint.extend(t);
                d.origin.extend(o);
                let (taint, value) = (d.taint.clone(), d.value);
                if !taint.is_empty() {
                    self.emit(pc, op.mnemonic(), OpClass::ArithBitwise, taint).value_snapshot = Some(le_bytes(value, 8));
                }
            }
            Op::Dec { dst, amount } => {
                let d = &mut self.regs[dst.0 as usize];
                d.value = d.value.wrapping_sub(*amount);
                let (taint, value) = (d.taint.clone(), d.value);
                if !taint.is_empty() {
                    let rec = self.emit(pc, "sub", OpClass::ArithBitwise, taint);
                    rec.pointer_arith = Some(PointerArith::CounterDecrement);
                    rec.value_snapshot = Some(le_bytes(value, 8));
                }
            }
            Op::Advp { dst, src } => {
                let s = self.r(*src).clone();
                let d = &mut self.regs[dst.0 as usize];
                d.value = d.value.wrapping_add(s.value);
                d.taint.extend(s.taint.iter().copied());
                d.origin.extend(s.origin);
                let (taint, value) = (d.taint.clone(), d.value);
                if !s.taint.is_empty() {
                    let rec = self.emit(pc, "add", OpClass::ArithBitwise, taint);
                    rec.pointer_arith = Some(PointerArith::PointerIncrement);
                    rec.value_snapshot = Some(le_bytes(value, 8));
                }
            }
            Op::Cmp { lhs, rhs } => {
                let l = self.r(*lhs).clone();
                let (rv, rt, ro) = self.operand(rhs);
                self.flags = Some(l.value.cmp(&rv));
                let accessed: OffsetSet = l.taint.union(&rt).copied().collect();
                if !accessed.is_empty() {
                    let rec = self.emit(pc, "cmp", OpClass::Compare, accessed);
                    rec.cmp_result = Some(l.value == rv);
                    rec.value_snapshot = Some(le_bytes(l.value, 8));
                    rec.operand_origins = alloc::vec![l.origin, ro];
                    if let Operand::Imm { value, width } = *rhs {
                        rec.compared_const = Some(le_bytes(value, width as usize));
                    }
                }
            }
            Op::Cmps { base, disp, lit } => {
                let a = self.addr(*base, *disp, lit.len()).ok_or(Termination::Reject)?;
                let bytes = &self.msg[a..a + lit.len()];
                self.flags = Some(bytes.cmp(lit.as_slice()));
                let set: OffsetSet = (a..a + lit.len()).collect();
                let (eq, snapshot) = (bytes == lit.as_slice(), bytes.to_vec());
                let rec = self.emit(pc, "cmp", OpClass::Compare, set.clone());
                rec.cmp_result = Some(eq);
                rec.compared_const = Some(lit.clone());
                rec.value_snapshot = Some(snapshot);
                rec.operand_origins = alloc::vec![set, OffsetSet::new()];
            }
            Op::Tbl { dst, src } => {
                let s = self.r(*src).clone();
                let value = CRC16_TABLE[(s.value & 0xff) as usize] as u64;
                if !s.taint.is_empty() {
                    self.emit(pc, "mov", OpClass::MovSeries, s.taint).value_snapshot = Some(le_bytes(value, 2));
                }
                // the index is an address: its taint does not reach the loaded value
                self.regs[dst.0 as usize] = RegState { value, taint: OffsetSet::new(), origin: s.origin };
            }
            Op::Jump { cond, target } => {
                if cond.holds(self.flags) {
                    if *cond != Cond::Always && pc > 0 {
                        self.mark_triggered(pc - 1);
                    }
                    return Ok(*target);
                }
            }
            Op::Api { name, arg } => {
                let (accessed, role) = match arg {
                    ApiArg::Len(r) => (self.r(*r).taint.clone(), ArgRole::LengthArg),
                    ApiArg::Buf { ptr, len } => {
                        let (p, n) = (self.r(*ptr).value, self.r(*len).value);
                        let a = self.addr(None, p as i64, n as usize).ok_or(Termination::Reject)?;
                        ((a..a + n as usize).collect(), ArgRole::BufferArg)
                    }
                };
                if !accessed.is_empty() {
                    let rec = self.emit(pc, "call", OpClass::Call, accessed);
                    rec.api_call = Some(ApiCall { name: name.clone(), tainted_arg_role: role });
                }
            }
            Op::Accept => return Err(Termination::Accept),
            Op::Reject => return Err(Termination::Reject),
        }
        Ok(pc + 1)
    }

    /// Flags the compare just executed at `pc` (if it produced a record and
    /// was true) as having triggered the jump that follows it.
    fn mark_triggered(&mut self, cmp_pc: usize) {
        if !matches!(self.script.ops[cmp_pc], Op::Cmp { .. } | Op::Cmps { .. }) {
            return;
        }
        if let Some(last) = self.records.last_mut() {
            if last.op_class == OpClass::Compare && last.cmp_result == Some(true) && self.last_pc == Some(cmp_pc) {
                last.triggered_jump = true;
            }
        }
    }
}

/// Runs `script` over `message` for at most `step_budget` executed ops.
pub fn run(script: &ParserScript, message: &Message, step_budget: u64) -> VmRunReport {
    let mut m = Machine {
        script,
        msg: &message.bytes,
        regs: Default::default(),
        flags: None,
        records: Vec::new(),
        last_pc: None,
    };
    let mut pc = 0;
    let mut steps = 0;
    let terminated = loop {
        if pc >= script.ops.len() {
            break Termination::Accept;
        }
        if steps >= step_budget {
            break Termination::StepLimit;
        }
        steps += 1;
        let before = m.records.len();
        match m.step(pc) {
            Ok(next) => {
                m.last_pc = (m.records.len() > before).then_some(pc);
                pc = next;
            }
            Err(t) => break t,
        }
    };
    VmRunReport { trace: ExecutionTrace { message_id: message.id.clone(), records: m.records }, terminated, steps }
}
