//! Textual assembler / disassembler.
//!
//! Grammar (one instruction per line):
//!
//! ```text
//! [U<hex>|]B<6 x dot-or-digit>|R<.|0-7>|W<.|0-7>|Y<0|1>|S<hex>| [@[!]Rn] MNEMONIC operands... ;
//! ```
//!
//! `B012...` sets wait barriers {0,1,2}; a dot leaves the slot clear. `R.`
//! and `W.` mean barrier-none (index 7). The optional leading `U<hex>|`
//! carries the 4-bit reuse flags and is omitted when zero, so lines in the
//! native notation parse unchanged. Memory operands are bracketed
//! (`LDG R5, [R6];`), immediates are written bare in decimal or 0x-hex,
//! qualifier suffixes on mnemonics (`IMAD.U32`) are accepted and ignored.

use super::{
    ControlInfo, Instruction, IsaError, Opcode, Operand, Predicate, BARRIER_NONE,
};

fn syntax(col: usize, msg: impl Into<String>) -> IsaError {
    IsaError::Syntax {
        col,
        msg: msg.into(),
    }
}

fn overflow(col: usize, msg: impl Into<String>) -> IsaError {
    IsaError::FieldOverflow {
        col,
        msg: msg.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(s: &'a str) -> Self {
        Cursor {
            bytes: s.as_bytes(),
            pos: 0,
        }
    }

    fn col(&self) -> usize {
        self.pos + 1
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let c = self.peek();
        if c.is_some() {
            self.pos += 1;
        }
        c
    }

    fn expect(&mut self, c: u8) -> Result<(), IsaError> {
        match self.bump() {
            Some(got) if got == c => Ok(()),
            _ => Err(syntax(self.col() - 1, format!("expected '{}'", c as char))),
        }
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ') | Some(b'\t')) {
            self.pos += 1;
        }
    }
}

fn hex_digit(c: u8) -> Option<u8> {
    match c {
        b'0'..=b'9' => Some(c - b'0'),
        b'a'..=b'f' => Some(c - b'a' + 10),
        b'A'..=b'F' => Some(c - b'A' + 10),
        _ => None,
    }
}

fn parse_control(cur: &mut Cursor) -> Result<ControlInfo, IsaError> {
    let mut ctrl = ControlInfo::zero();
    // optional reuse-flag field
    if cur.peek() == Some(b'U') {
        cur.bump();
        let col = cur.col();
        let d = cur
            .bump()
            .and_then(hex_digit)
            .ok_or_else(|| syntax(col, "expected hex digit after 'U'"))?;
        ctrl.reuse_flags = d;
        cur.expect(b'|')?;
    }
    cur.expect(b'B')?;
    let mut mask = 0u8;
    for i in 0..6 {
        let col = cur.col();
        match cur.bump() {
            Some(b'.') => {}
            Some(c) if c == b'0' + i => mask |= 1 << i,
            Some(_) => {
                return Err(syntax(
                    col,
                    format!("barrier slot {i} must be '.' or '{i}'"),
                ))
            }
            None => return Err(syntax(col, "truncated barrier mask")),
        }
    }
    ctrl.wait_barrier_mask = mask;
    cur.expect(b'|')?;

    for (tag, slot) in [(b'R', 0), (b'W', 1)] {
        cur.expect(tag)?;
        let col = cur.col();
        let idx = match cur.bump() {
            Some(b'.') => BARRIER_NONE,
            Some(c @ b'0'..=b'7') => c - b'0',
            Some(_) => {
                return Err(syntax(col, "barrier index must be '.' or 0-7"));
            }
            None => return Err(syntax(col, "truncated barrier index")),
        };
        if slot == 0 {
            ctrl.read_barrier = idx;
        } else {
            ctrl.write_barrier = idx;
        }
        cur.expect(b'|')?;
    }

    cur.expect(b'Y')?;
    let col = cur.col();
    ctrl.yield_flag = match cur.bump() {
        Some(b'0') => false,
        Some(b'1') => true,
        _ => return Err(syntax(col, "yield must be 0 or 1")),
    };
    cur.expect(b'|')?;

    cur.expect(b'S')?;
    let col = cur.col();
    ctrl.stall_cycles = cur
        .bump()
        .and_then(hex_digit)
        .ok_or_else(|| syntax(col, "stall must be a hex digit"))?;
    cur.expect(b'|')?;
    Ok(ctrl)
}

fn parse_register(cur: &mut Cursor) -> Result<u8, IsaError> {
    let col = cur.col();
    cur.expect(b'R')?;
    let mut val: u32 = 0;
    let mut any = false;
    while let Some(c @ b'0'..=b'9') = cur.peek() {
        cur.bump();
        val = val * 10 + (c - b'0') as u32;
        any = true;
        if val > 255 {
            return Err(overflow(col, "register number too large"));
        }
    }
    if !any {
        return Err(syntax(cur.col(), "expected register number"));
    }
    if val >= 32 {
        return Err(overflow(col, format!("register R{val} out of range (0-31)")));
    }
    Ok(val as u8)
}

fn parse_immediate(cur: &mut Cursor) -> Result<u32, IsaError> {
    let col = cur.col();
    let (radix, mut digits) = if cur.peek() == Some(b'0')
        && matches!(cur.bytes.get(cur.pos + 1), Some(b'x') | Some(b'X'))
    {
        cur.bump();
        cur.bump();
        (16u64, String::new())
    } else {
        (10u64, String::new())
    };
    while let Some(c) = cur.peek() {
        if (c as char).is_ascii_hexdigit() {
            digits.push(c as char);
            cur.bump();
        } else {
            break;
        }
    }
    if digits.is_empty() {
        return Err(syntax(col, "expected immediate value"));
    }
    let v = u64::from_str_radix(&digits, radix as u32)
        .map_err(|_| overflow(col, "immediate does not parse"))?;
    if v > u32::MAX as u64 {
        return Err(overflow(col, "immediate exceeds 32 bits"));
    }
    Ok(v as u32)
}

fn parse_operand(cur: &mut Cursor) -> Result<Operand, IsaError> {
    match cur.peek() {
        Some(b'R') => Ok(Operand::Reg(parse_register(cur)?)),
        Some(b'[') => {
            cur.bump();
            let inner = match cur.peek() {
                Some(b'R') => Operand::Reg(parse_register(cur)?),
                _ => Operand::Imm(parse_immediate(cur)?),
            };
            cur.expect(b']')?;
            Ok(inner)
        }
        _ => Ok(Operand::Imm(parse_immediate(cur)?)),
    }
}

fn mnemonic_of(op: Opcode) -> &'static str {
    use Opcode::*;
    match op {
        Imad => "IMAD",
        LeaHi => "LEA.HI",
        ShfL => "SHF.L",
        ShfR => "SHF.R",
        LopXor => "LOP.XOR",
        LopAnd => "LOP.AND",
        Iadd => "IADD",
        Mov => "MOV",
        Ldg => "LDG",
        Stg => "STG",
        Stc => "STC",
        AtomAdd => "ATOM.ADD",
        BarSync => "BAR.SYNC",
        Bra => "BRA",
        Nop => "NOP",
        Lepc => "LEPC",
        Icinv => "ICINV",
    }
}

fn lookup_mnemonic(tokens: &[&str]) -> Option<(Opcode, usize)> {
    // longest match first so LEA.HI wins over a hypothetical bare LEA
    for take in (1..=tokens.len().min(2)).rev() {
        let candidate = tokens[..take].join(".");
        for op in Opcode::all() {
            if mnemonic_of(op) == candidate {
                return Some((op, take));
            }
        }
    }
    None
}

/// Parses one line of assembly.
pub fn parse_asm(line: &str) -> Result<Instruction, IsaError> {
    let mut cur = Cursor::new(line.trim_end());
    cur.skip_ws();
    let control = parse_control(&mut cur)?;
    cur.skip_ws();

    let predicate = if cur.peek() == Some(b'@') {
        cur.bump();
        let negate = if cur.peek() == Some(b'!') {
            cur.bump();
            true
        } else {
            false
        };
        let reg = parse_register(&mut cur)?;
        cur.skip_ws();
        Some(Predicate { reg, negate })
    } else {
        None
    };

    let mn_col = cur.col();
    let mut mnemonic = String::new();
    while let Some(c) = cur.peek() {
        if (c as char).is_ascii_alphanumeric() || c == b'.' || c == b'_' {
            mnemonic.push(c as char);
            cur.bump();
        } else {
            break;
        }
    }
    if mnemonic.is_empty() {
        return Err(syntax(mn_col, "expected mnemonic"));
    }
    let tokens: Vec<&str> = mnemonic.split('.').collect();
    let (opcode, _) = lookup_mnemonic(&tokens)
        .ok_or_else(|| syntax(mn_col, format!("unknown mnemonic '{mnemonic}'")))?;

    let (nsrc, has_dst) = opcode.shape();
    let mut dst = 0u8;
    let mut srcs: Vec<Operand> = Vec::new();
    let mut first = true;
    loop {
        cur.skip_ws();
        match cur.peek() {
            Some(b';') => {
                cur.bump();
                break;
            }
            None => return Err(syntax(cur.col(), "missing ';'")),
            _ => {}
        }
        if !first {
            cur.expect(b',')?;
            cur.skip_ws();
        }
        if first && has_dst {
            dst = parse_register(&mut cur)?;
        } else {
            srcs.push(parse_operand(&mut cur)?);
        }
        first = false;
    }
    if srcs.len() != nsrc {
        return Err(syntax(
            cur.col(),
            format!(
                "{} expects {} source operand(s), found {}",
                mnemonic_of(opcode),
                nsrc,
                srcs.len()
            ),
        ));
    }
    let mut instr = Instruction::new(opcode, dst, &srcs, control);
    instr.predicate = predicate;
    instr.validate().map_err(|e| match e {
        IsaError::BadOperands { .. } | IsaError::InvalidRegister(_) => overflow(1, e.to_string()),
        other => other,
    })?;
    Ok(instr)
}

/// Emits the canonical textual form; `parse_asm(emit_asm(i)) == i`.
pub fn emit_asm(instr: &Instruction) -> String {
    let c = &instr.control;
    let mut out = String::new();
    if c.reuse_flags != 0 {
        out.push_str(&format!("U{:X}|", c.reuse_flags));
    }
    out.push('B');
    for i in 0..6 {
        if c.wait_barrier_mask & (1 << i) != 0 {
            out.push((b'0' + i) as char);
        } else {
            out.push('.');
        }
    }
    out.push('|');
    for (tag, idx) in [('R', c.read_barrier), ('W', c.write_barrier)] {
        out.push(tag);
        if idx == BARRIER_NONE {
            out.push('.');
        } else {
            out.push((b'0' + idx) as char);
        }
        out.push('|');
    }
    out.push_str(&format!("Y{}|", c.yield_flag as u8));
    out.push_str(&format!("S{:X}| ", c.stall_cycles));

    if let Some(Predicate { reg, negate }) = instr.predicate {
        out.push('@');
        if negate {
            out.push('!');
        }
        out.push_str(&format!("R{reg} "));
    }
    out.push_str(mnemonic_of(instr.opcode));
    let (_, has_dst) = instr.opcode.shape();
    let mut parts: Vec<String> = Vec::new();
    if has_dst {
        parts.push(format!("R{}", instr.dst));
    }
    for (i, op) in instr.srcs().iter().enumerate() {
        let txt = match op {
            Operand::Reg(r) => format!("R{r}"),
            Operand::Imm(v) => format!("{v}"),
        };
        if instr.opcode.bracketed_src(i) {
            parts.push(format!("[{txt}]"));
        } else {
            parts.push(txt);
        }
    }
    if !parts.is_empty() {
        out.push(' ');
        out.push_str(&parts.join(", "));
    }
    out.push(';');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_native_imad_line() {
        let i = parse_asm("B......|R.|W.|Y1|S1| IMAD.U32 R28, R28, 2048, R28;").unwrap();
        assert_eq!(i.opcode, Opcode::Imad);
        assert_eq!(i.dst, 28);
        assert_eq!(
            i.srcs(),
            &[Operand::Reg(28), Operand::Imm(2048), Operand::Reg(28)]
        );
        assert!(i.control.yield_flag);
        assert_eq!(i.control.stall_cycles, 1);
        assert_eq!(i.control.wait_barrier_mask, 0);
        assert_eq!(i.control.read_barrier, BARRIER_NONE);
        assert_eq!(i.control.write_barrier, BARRIER_NONE);
    }

    #[test]
    fn native_line_normalizes_stably() {
        let line = "B......|R.|W.|Y1|S1| IMAD.U32 R28, R28, 2048, R28;";
        let first = emit_asm(&parse_asm(line).unwrap());
        assert_eq!(first, "B......|R.|W.|Y1|S1| IMAD R28, R28, 2048, R28;");
        let second = emit_asm(&parse_asm(&first).unwrap());
        assert_eq!(first, second);
    }

    #[test]
    fn parses_ldg_with_barriers() {
        let i = parse_asm("B012...|R3|W4|Y0|S2| LDG R5, [R6];").unwrap();
        assert_eq!(i.opcode, Opcode::Ldg);
        assert_eq!(i.control.wait_barrier_mask, 0b111);
        assert_eq!(i.control.read_barrier, 3);
        assert_eq!(i.control.write_barrier, 4);
        assert_eq!(i.control.stall_cycles, 2);
        assert_eq!(i.dst, 5);
        assert_eq!(i.srcs(), &[Operand::Reg(6)]);
    }

    #[test]
    fn yield_2_is_a_syntax_error() {
        let e = parse_asm("B......|R.|W.|Y2|S1| NOP;").unwrap_err();
        assert!(matches!(e, IsaError::Syntax { .. }), "{e:?}");
    }

    #[test]
    fn nop_emits_canonical_form() {
        assert_eq!(emit_asm(&Instruction::nop()), "B......|R.|W.|Y0|S0| NOP;");
    }

    #[test]
    fn register_32_overflows() {
        let e = parse_asm("B......|R.|W.|Y0|S0| MOV R32, R0;").unwrap_err();
        assert!(matches!(e, IsaError::FieldOverflow { .. }), "{e:?}");
    }

    #[test]
    fn predicated_branch_roundtrips() {
        let line = "B......|R.|W.|Y0|S1| @!R7 BRA 12;";
        let i = parse_asm(line).unwrap();
        assert_eq!(
            i.predicate,
            Some(Predicate {
                reg: 7,
                negate: true
            })
        );
        assert_eq!(emit_asm(&i), line);
    }

    #[test]
    fn reuse_flags_roundtrip() {
        let mut i = Instruction::nop();
        i.control.reuse_flags = 0xA;
        let text = emit_asm(&i);
        assert!(text.starts_with("UA|B"));
        assert_eq!(parse_asm(&text).unwrap(), i);
    }
}
