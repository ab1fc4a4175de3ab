//! Text assembler for parser scripts.
//!
//! One statement per line; `;` and `#` start comments.
//!
//! ```text
//! .name  demo            ; script name
//! top:                   ; label
//!     ldb  r0, [0]       ; load 1 byte (ldw: 2, ldd: 4), address [imm] | [rN] | [rN+imm]
//!     cmp  r0, 0x05      ; register or immediate; hex width follows the digits
//!     jne  bad           ; jmp jeq jne jlt jgt jle jge
//!     cmps [1], "GET"    ; memory compare against a string or 0xhex literal
//!     loop body          ; loop region start / end markers
//!     endloop body
//!     api  recv len r2   ; length argument, or: api fopen buf r5, r6
//!     accept
//! bad:
//!     reject
//! ```
//!
//! Other ops: `mov rD, rS`, `movi rD, imm`, `add|sub|and|or|xor|shl|shr rD, rS|imm`,
//! `dec rD, imm` (counter decrement), `advp rD, rS` (pointer advance),
//! `tbl rD, rS` (CRC table lookup).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

use super::{AluOp, ApiArg, Cond, LoopRegion, Op, Operand, ParserScript, Reg, NUM_REGS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct AsmError {
    pub line: usize,
    pub message: String,
}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, AsmError> {
    Err(AsmError { line, message: message.into() })
}

/// Splits operands on commas outside string literals.
fn split_args(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut escaped = false;
    for c in s.chars() {
        match c {
            _ if escaped => {
                escaped = false;
                cur.push(c);
            }
            '\\' if quoted => {
                escaped = true;
                cur.push(c);
            }
            '"' => {
                quoted = !quoted;
                cur.push(c);
            }
            ',' if !quoted => out.push(core::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out.into_iter().map(|a| a.trim().to_string()).filter(|a| !a.is_empty()).collect()
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            ';' | '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn reg(line: usize, s: &str) -> Result<Reg, AsmError> {
    match s.strip_prefix('r').and_then(|n| n.parse::<u8>().ok()) {
        Some(n) if (n as usize) < NUM_REGS => Ok(Reg(n)),
        _ => err(line, format!("bad register `{s}`")),
    }
}

/// Parses an immediate and its byte width.
fn imm(line: usize, s: &str) -> Result<(u64, u8), AsmError> {
    if let Some(h) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        let v = u64::from_str_radix(h, 16).or_else(|_| err(line, format!("bad hex `{s}`")))?;
        return Ok((v, h.len().div_ceil(2).clamp(1, 8) as u8));
    }
    if let Some(c) = s.strip_prefix('\'').and_then(|r| r.strip_suffix('\'')) {
        let b = unescape(line, c)?;
        if b.len() != 1 {
            return err(line, format!("bad char literal `{s}`"));
        }
        return Ok((b[0] as u64, 1));
    }
    let v: u64 = s.parse().or_else(|_| err(line, format!("bad immediate `{s}`")))?;
    let width = (8 - v.leading_zeros() / 8).max(1) as u8;
    Ok((v, width))
}

fn operand(line: usize, s: &str) -> Result<Operand, AsmError> {
    if s.starts_with('r') {
        return Ok(Operand::Reg(reg(line, s)?));
    }
    let (value, width) = imm(line, s)?;
    Ok(Operand::Imm { value, width })
}

fn signed(line: usize, s: &str) -> Result<i64, AsmError> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let (v, _) = imm(line, body.trim())?;
    let v = i64::try_from(v).or_else(|_| err(line, "displacement too large"))?;
    Ok(if neg { -v } else { v })
}

/// `[imm]`, `[rN]` or `[rN+imm]` / `[rN-imm]`.
fn mem(line: usize, s: &str) -> Result<(Option<Reg>, i64), AsmError> {
    let Some(inner) = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')) else {
        return err(line, format!("expected memory operand, got `{s}`"));
    };
    let inner = inner.trim();
    if !inner.starts_with('r') {
        return Ok((None, signed(line, inner)?));
    }
    match inner.find(['+', '-']) {
        Some(i) => Ok((Some(reg(line, inner[..i].trim())?), signed(line, &inner[i..])?)),
        None => Ok((Some(reg(line, inner)?), 0)),
    }
}

fn unescape(line: usize, s: &str) -> Result<Vec<u8>, AsmError> {
    let mut out = Vec::new();
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match it.next() {
            Some('n') => out.push(b'\n'),
            Some('r') => out.push(b'\r'),
            Some('t') => out.push(b'\t'),
            Some('0') => out.push(0),
            Some('\\') => out.push(b'\\'),
            Some('"') => out.push(b'"'),
            Some('\'') => out.push(b'\''),
            other => return err(line, format!("bad escape `\\{}`", other.unwrap_or(' '))),
        }
    }
    Ok(out)
}

fn literal(line: usize, s: &str) -> Result<Vec<u8>, AsmError> {
    if let Some(body) = s.strip_prefix('"').and_then(|r| r.strip_suffix('"')) {
        return unescape(line, body);
    }
    if let Some(h) = s.strip_prefix("0x") {
        if h.len() % 2 == 0 && !h.is_empty() {
            if let Some(bytes) = (0..h.len()).step_by(2).map(|i| u8::from_str_radix(&h[i..i + 2], 16).ok()).collect() {
                return Ok(bytes);
            }
        }
    }
    err(line, format!("bad literal `{s}`"))
}

fn expect_args(line: usize, mnemonic: &str, args: &[String], n: usize) -> Result<(), AsmError> {
    if args.len() != n {
        return err(line, format!("`{mnemonic}` takes {n} operand(s), got {}", args.len()));
    }
    Ok(())
}

enum Pending {
    Op(Op),
    Jump(Cond, String),
}

/// Assembles script text. Labels may point one past the last op (falling off
/// the end accepts).
pub fn assemble(name: &str, src: &str) -> Result<ParserScript, AsmError> {
    let mut script_name = name.to_string();
    let mut ops: Vec<(usize, Pending)> = Vec::new();
    let mut labels = BTreeMap::new();
    let mut loops = Vec::new();
    let mut open: Vec<(String, usize, usize)> = Vec::new();

    for (idx, raw) in src.lines().enumerate() {
        let line = idx + 1;
        let mut text = strip_comment(raw).trim();
        if text.is_empty() {
            continue;
        }
        if let Some(rest) = text.strip_prefix(".name") {
            script_name = rest.trim().to_string();
            continue;
        }
        if let Some((label, rest)) = text.split_once(':') {
            let label = label.trim();
            if !label.is_empty() && !label.contains(char::is_whitespace) && !label.contains('"') {
                if labels.insert(label.to_string(), ops.len()).is_some() {
                    return err(line, format!("duplicate label `{label}`"));
                }
                text = rest.trim();
                if text.is_empty() {
                    continue;
                }
            }
        }
        let (mnemonic, rest) = text.split_once(char::is_whitespace).unwrap_or((text, ""));
        let mnemonic = mnemonic.to_ascii_lowercase();
        let args = split_args(rest);
        let cond = match mnemonic.as_str() {
            "jmp" => Some(Cond::Always),
            "jeq" | "je" => Some(Cond::Eq),
            "jne" => Some(Cond::Ne),
            "jlt" => Some(Cond::Lt),
            "jgt" => Some(Cond::Gt),
            "jle" => Some(Cond::Le),
            "jge" => Some(Cond::Ge),
            _ => None,
        };
        if let Some(cond) = cond {
            expect_args(line, &mnemonic, &args, 1)?;
            ops.push((line, Pending::Jump(cond, args[0].clone())));
            continue;
        }
        let alu = match mnemonic.as_str() {
            "add" => Some(AluOp::Add),
            "sub" => Some(AluOp::Sub),
            "and" => Some(AluOp::And),
            "or" => Some(AluOp::Or),
            "xor" => Some(AluOp::Xor),
            "shl" => Some(AluOp::Shl),
            "shr" => Some(AluOp::Shr),
            _ => None,
        };
        let op = if let Some(op) = alu {
            expect_args(line, &mnemonic, &args, 2)?;
            Op::Alu { op, dst: reg(line, &args[0])?, src: operand(line, &args[1])? }
        } else {
            match mnemonic.as_str() {
                "ldb" | "ldw" | "ldd" => {
                    expect_args(line, &mnemonic, &args, 2)?;
                    let width = match mnemonic.as_str() {
                        "ldb" => 1,
                        "ldw" => 2,
                        _ => 4,
                    };
                    let (base, disp) = mem(line, &args[1])?;
                    Op::Load { width, dst: reg(line, &args[0])?, base, disp }
                }
                "mov" => {
                    expect_args(line, &mnemonic, &args, 2)?;
                    Op::Mov { dst: reg(line, &args[0])?, src: reg(line, &args[1])? }
                }
                "movi" => {
                    expect_args(line, &mnemonic, &args, 2)?;
                    Op::Movi { dst: reg(line, &args[0])?, value: imm(line, &args[1])?.0 }
                }
                "dec" => {
                    expect_args(line, &mnemonic, &args, 2)?;
                    Op::Dec { dst: reg(line, &args[0])?, amount: imm(line, &args[1])?.0 }
                }
                "advp" => {
                    expect_args(line, &mnemonic, &args, 2)?;
                    Op::Advp { dst: reg(line, &args[0])?, src: reg(line, &args[1])? }
                }
                "tbl" => {
                    expect_args(line, &mnemonic, &args, 2)?;
                    Op::Tbl { dst: reg(line, &args[0])?, src: reg(line, &args[1])? }
                }
                "cmp" => {
                    expect_args(line, &mnemonic, &args, 2)?;
                    Op::Cmp { lhs: reg(line, &args[0])?, rhs: operand(line, &args[1])? }
                }
                "cmps" => {
                    expect_args(line, &mnemonic, &args, 2)?;
                    let (base, disp) = mem(line, &args[0])?;
                    let lit = literal(line, &args[1])?;
                    Op::Cmps { base, disp, lit }
                }
                "api" => {
                    // api NAME len rX | api NAME buf rP, rN
                    let mut words = rest.split_whitespace();
                    let (Some(fname), Some(kind)) = (words.next(), words.next()) else {
                        return err(line, "`api` needs a name and an argument kind");
                    };
                    let tail: String = words.collect::<Vec<_>>().join(" ");
                    let regs = split_args(&tail);
                    let arg = match (kind, regs.as_slice()) {
                        ("len", [r]) => ApiArg::Len(reg(line, r)?),
                        ("buf", [p, n]) => ApiArg::Buf { ptr: reg(line, p)?, len: reg(line, n)? },
                        _ => return err(line, format!("bad api arguments `{rest}`")),
                    };
                    Op::Api { name: fname.to_string(), arg }
                }
                "loop" => {
                    expect_args(line, &mnemonic, &args, 1)?;
                    open.push((args[0].clone(), ops.len(), line));
                    continue;
                }
                "endloop" => {
                    expect_args(line, &mnemonic, &args, 1)?;
                    match open.pop() {
                        Some((n, begin, _)) if n == args[0] => {
                            let id = loops.len() as u32 + 1;
                            loops.push(LoopRegion { id, name: n, begin, end: ops.len() });
                        }
                        Some((n, _, _)) => return err(line, format!("`endloop {}` closes open loop `{n}`", args[0])),
                        None => return err(line, format!("`endloop {}` without loop", args[0])),
                    }
                    continue;
                }
                "accept" => Op::Accept,
                "reject" => Op::Reject,
                _ => return err(line, format!("unknown mnemonic `{mnemonic}`")),
            }
        };
        ops.push((line, Pending::Op(op)));
    }
    if let Some((n, _, line)) = open.pop() {
        return err(line, format!("loop `{n}` is never closed"));
    }
    // ids follow declaration (begin) order
    loops.sort_by_key(|l: &LoopRegion| (l.begin, core::cmp::Reverse(l.end)));
    for (i, l) in loops.iter_mut().enumerate() {
        l.id = i as u32 + 1;
    }
    let ops = ops
        .into_iter()
        .map(|(line, p)| match p {
            Pending::Op(op) => Ok(op),
            Pending::Jump(cond, label) => match labels.get(&label) {
                Some(&target) => Ok(Op::Jump { cond, target }),
                None => err(line, format!("unknown label `{label}`")),
            },
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ParserScript { name: script_name, ops, loops, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn parses_operands() {
        let s = assemble(
            "t",
            "top: ldw r1, [r2+3] ; c\n cmp r1, 0x0001\n cmps [r4-1], \"a,b\\r\"\n api recv len r1\n api fopen buf r5, r6\n jne top\n",
        )
        .unwrap();
        assert_eq!(s.ops[0], Op::Load { width: 2, dst: Reg(1), base: Some(Reg(2)), disp: 3 });
        assert_eq!(s.ops[1], Op::Cmp { lhs: Reg(1), rhs: Operand::Imm { value: 1, width: 2 } });
        assert_eq!(s.ops[2], Op::Cmps { base: Some(Reg(4)), disp: -1, lit: b"a,b\r".to_vec() });
        assert_eq!(s.ops[3], Op::Api { name: "recv".into(), arg: ApiArg::Len(Reg(1)) });
        assert_eq!(s.ops[5], Op::Jump { cond: Cond::Ne, target: 0 });
    }

    #[test]
    fn immediates() {
        assert_eq!(imm(1, "13").unwrap(), (13, 1));
        assert_eq!(imm(1, "300").unwrap(), (300, 2));
        assert_eq!(imm(1, "0x0a0d").unwrap(), (0x0a0d, 2));
        assert_eq!(imm(1, "'/'").unwrap(), (b'/' as u64, 1));
        assert_eq!(literal(1, "0x0d0a").unwrap(), vec![0x0d, 0x0a]);
    }

    #[test]
    fn loops_nest_and_number_in_order() {
        let s = assemble("t", "loop a\nmovi r0, 1\nloop b\nmovi r0, 2\nendloop b\nendloop a\nloop c\nendloop c").unwrap();
        let ids: Vec<(&str, u32, usize, usize)> = s.loops.iter().map(|l| (l.name.as_str(), l.id, l.begin, l.end)).collect();
        assert_eq!(ids, vec![("a", 1, 0, 2), ("b", 2, 1, 2), ("c", 3, 2, 2)]);
    }

    #[test]
    fn errors_name_line() {
        assert_eq!(assemble("t", "movi r0, 1\njmp nowhere").unwrap_err().line, 2);
        assert_eq!(assemble("t", "\n\nldb r99, [0]").unwrap_err().line, 3);
        assert!(assemble("t", "loop a\nloop b\nendloop a").is_err());
        assert!(assemble("t", "loop a").is_err());
        assert!(assemble("t", "frob r1").is_err());
        assert!(assemble("t", "x:\nx:").is_err());
    }

    #[test]
    fn empty_source() {
        let s = assemble("e", "; nothing\n").unwrap();
        assert!(s.ops.is_empty());
        assert_eq!(s.name, "e");
    }
}
