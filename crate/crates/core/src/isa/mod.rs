//! Fixed-length 128-bit instruction set with scheduling control information.
//!
//! Every instruction occupies one [`Word128`]: a payload section holding the
//! opcode, predicate and operands, and a 21-bit control section holding the
//! scheduling fields the hardware enforces (reuse flags, wait barrier mask,
//! read/write barrier indices, yield flag, stall cycles).
//!
//! The module provides the binary codec ([`encode`]/[`decode`]), a textual
//! assembler matching the `B......|R.|W.|Y1|S1| IMAD ...;` notation
//! ([`parse_asm`]/[`emit_asm`]) and the `.vfbin` image container.

mod asm;
mod encode;
mod image;
pub mod test_support;

pub use asm::{emit_asm, parse_asm};
pub use encode::{decode, encode};
pub use encode::{immediate_of, patch_immediate};
pub use image::{assemble_image, read_image, write_image, ImageHeader, HEADER_BYTES, VFBIN_MAGIC};

use thiserror::Error;

/// Number of addressable general-purpose registers per thread.
pub const NUM_REGS: u8 = 32;
/// Barrier index meaning "no barrier".
pub const BARRIER_NONE: u8 = 7;
/// Bytes per encoded instruction word.
pub const WORD_BYTES: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IsaError {
    #[error("invalid register R{0} (must be < 32)")]
    InvalidRegister(u8),
    #[error("immediate {0:#x} does not fit in 32 bits")]
    ImmediateOutOfRange(u64),
    #[error("unknown opcode bit pattern {0:#x}")]
    UnknownOpcode(u8),
    #[error("malformed instruction word: {0}")]
    Malformed(&'static str),
    #[error("syntax error at column {col}: {msg}")]
    Syntax { col: usize, msg: String },
    #[error("field overflow at column {col}: {msg}")]
    FieldOverflow { col: usize, msg: String },
    #[error("operand shape invalid for {opcode:?}: {msg}")]
    BadOperands { opcode: Opcode, msg: &'static str },
    #[error("bad image magic")]
    BadMagic,
    #[error("image too large: {0} bytes")]
    ImageTooLarge(usize),
    #[error("truncated image")]
    TruncatedImage,
}

/// One 128-bit instruction word, stored as two little-endian 64-bit halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Word128 {
    pub lo: u64,
    pub hi: u64,
}

impl Word128 {
    pub fn as_u128(self) -> u128 {
        (self.hi as u128) << 64 | self.lo as u128
    }

    pub fn from_u128(v: u128) -> Self {
        Word128 {
            lo: v as u64,
            hi: (v >> 64) as u64,
        }
    }

    pub fn to_bytes(self) -> [u8; WORD_BYTES] {
        let mut b = [0u8; WORD_BYTES];
        b[..8].copy_from_slice(&self.lo.to_le_bytes());
        b[8..].copy_from_slice(&self.hi.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Self {
        let mut lo = [0u8; 8];
        let mut hi = [0u8; 8];
        lo.copy_from_slice(&b[..8]);
        hi.copy_from_slice(&b[8..16]);
        Word128 {
            lo: u64::from_le_bytes(lo),
            hi: u64::from_le_bytes(hi),
        }
    }
}

/// Scheduling control information carried by every instruction (21 bits).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ControlInfo {
    /// Operand reuse flags, 4 bits.
    pub reuse_flags: u8,
    /// Wait barrier mask, 6 bits. Instruction stalls until every barrier in
    /// the mask has been signalled.
    pub wait_barrier_mask: u8,
    /// Read barrier index, 3 bits, 7 = none.
    pub read_barrier: u8,
    /// Write barrier index, 3 bits, 7 = none. Signalled when a
    /// variable-latency instruction completes.
    pub write_barrier: u8,
    /// Yield flag, 1 bit.
    pub yield_flag: bool,
    /// Stall cycles before the next instruction of the same warp may issue,
    /// 4 bits.
    pub stall_cycles: u8,
}

impl Default for ControlInfo {
    fn default() -> Self {
        ControlInfo {
            reuse_flags: 0,
            wait_barrier_mask: 0,
            read_barrier: BARRIER_NONE,
            write_barrier: BARRIER_NONE,
            yield_flag: false,
            stall_cycles: 0,
        }
    }
}

impl ControlInfo {
    /// Zero mask, no barriers, no yield, no stall.
    pub fn zero() -> Self {
        Self::default()
    }

    /// Default control for generated code: stall 1, no barriers.
    pub fn stall(stall_cycles: u8) -> Self {
        ControlInfo {
            stall_cycles,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), IsaError> {
        if self.reuse_flags > 0xF {
            return Err(IsaError::Malformed("reuse flags exceed 4 bits"));
        }
        if self.wait_barrier_mask > 0x3F {
            return Err(IsaError::Malformed("wait barrier mask exceeds 6 bits"));
        }
        if self.read_barrier > 7 || self.write_barrier > 7 {
            return Err(IsaError::Malformed("barrier index exceeds 3 bits"));
        }
        if self.stall_cycles > 0xF {
            return Err(IsaError::Malformed("stall cycles exceed 4 bits"));
        }
        Ok(())
    }
}

/// Operation codes. A minimal projection of a native accelerator ISA:
/// one FMA-pipeline op (`IMAD`), ALU ops, memory ops, and control ops.
/// `STC` (store-to-code) rewrites the immediate field of a code word and is
/// the self-modification primitive; `ICINV` invalidates the instruction
/// cache of the issuing SM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    Imad = 0,
    LeaHi = 1,
    ShfL = 2,
    ShfR = 3,
    LopXor = 4,
    LopAnd = 5,
    Iadd = 6,
    Mov = 7,
    Ldg = 8,
    Stg = 9,
    Stc = 10,
    AtomAdd = 11,
    BarSync = 12,
    Bra = 13,
    Nop = 14,
    Lepc = 15,
    Icinv = 16,
}

pub const NUM_OPCODES: u8 = 17;

impl Opcode {
    pub fn from_u8(v: u8) -> Result<Self, IsaError> {
        use Opcode::*;
        Ok(match v {
            0 => Imad,
            1 => LeaHi,
            2 => ShfL,
            3 => ShfR,
            4 => LopXor,
            5 => LopAnd,
            6 => Iadd,
            7 => Mov,
            8 => Ldg,
            9 => Stg,
            10 => Stc,
            11 => AtomAdd,
            12 => BarSync,
            13 => Bra,
            14 => Nop,
            15 => Lepc,
            16 => Icinv,
            other => return Err(IsaError::UnknownOpcode(other)),
        })
    }

    pub fn all() -> impl Iterator<Item = Opcode> {
        (0..NUM_OPCODES).map(|v| Opcode::from_u8(v).unwrap())
    }

    /// (number of source operands, writes a destination register)
    pub fn shape(self) -> (usize, bool) {
        use Opcode::*;
        match self {
            Imad | LeaHi => (3, true),
            ShfL | ShfR | LopXor | LopAnd | Iadd => (2, true),
            Mov | Ldg => (1, true),
            Stg | Stc | AtomAdd => (2, false),
            Bra => (1, false),
            Lepc => (0, true),
            BarSync | Nop | Icinv => (0, false),
        }
    }

    /// Whether source operand `idx` is printed in brackets (a memory or
    /// code address).
    pub fn bracketed_src(self, idx: usize) -> bool {
        use Opcode::*;
        match self {
            Ldg => idx == 0,
            Stg | Stc | AtomAdd => idx == 0,
            _ => false,
        }
    }
}

/// A source operand: register or 32-bit immediate. At most one immediate
/// per instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(u8),
    Imm(u32),
}

/// Optional guard predicate: the LSB of a general-purpose register,
/// optionally negated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Predicate {
    pub reg: u8,
    pub negate: bool,
}

/// A decoded instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub predicate: Option<Predicate>,
    pub opcode: Opcode,
    /// Destination register. Only meaningful when the opcode writes one.
    pub dst: u8,
    srcs: [Operand; 3],
    src_count: u8,
    pub control: ControlInfo,
}

impl Instruction {
    pub fn new(opcode: Opcode, dst: u8, srcs: &[Operand], control: ControlInfo) -> Self {
        let mut s = [Operand::Reg(0); 3];
        s[..srcs.len()].copy_from_slice(srcs);
        Instruction {
            predicate: None,
            opcode,
            dst,
            srcs: s,
            src_count: srcs.len() as u8,
            control,
        }
    }

    pub fn with_predicate(mut self, reg: u8, negate: bool) -> Self {
        self.predicate = Some(Predicate { reg, negate });
        self
    }

    pub fn nop() -> Self {
        Instruction::new(Opcode::Nop, 0, &[], ControlInfo::zero())
    }

    pub fn srcs(&self) -> &[Operand] {
        &self.srcs[..self.src_count as usize]
    }

    /// Checks register ranges, immediate count and operand shape.
    pub fn validate(&self) -> Result<(), IsaError> {
        self.control.validate()?;
        let (nsrc, has_dst) = self.opcode.shape();
        if self.src_count as usize != nsrc {
            return Err(IsaError::BadOperands {
                opcode: self.opcode,
                msg: "wrong source operand count",
            });
        }
        if has_dst {
            if self.dst >= NUM_REGS {
                return Err(IsaError::InvalidRegister(self.dst));
            }
        } else if self.dst != 0 {
            return Err(IsaError::BadOperands {
                opcode: self.opcode,
                msg: "destination not applicable",
            });
        }
        let mut imms = 0;
        for op in self.srcs() {
            match op {
                Operand::Reg(r) => {
                    if *r >= NUM_REGS {
                        return Err(IsaError::InvalidRegister(*r));
                    }
                }
                Operand::Imm(_) => imms += 1,
            }
        }
        if imms > 1 {
            return Err(IsaError::BadOperands {
                opcode: self.opcode,
                msg: "more than one immediate operand",
            });
        }
        if let Some(p) = &self.predicate {
            if p.reg >= NUM_REGS {
                return Err(IsaError::InvalidRegister(p.reg));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opcode_roundtrip() {
        for op in Opcode::all() {
            assert_eq!(Opcode::from_u8(op as u8).unwrap(), op);
        }
        assert_eq!(
            Opcode::from_u8(NUM_OPCODES),
            Err(IsaError::UnknownOpcode(NUM_OPCODES))
        );
    }

    #[test]
    fn validate_rejects_two_immediates() {
        let i = Instruction::new(
            Opcode::Imad,
            1,
            &[Operand::Imm(1), Operand::Imm(2), Operand::Reg(0)],
            ControlInfo::zero(),
        );
        assert!(matches!(i.validate(), Err(IsaError::BadOperands { .. })));
    }

    #[test]
    fn validate_rejects_register_33() {
        let i = Instruction::new(
            Opcode::Mov,
            33,
            &[Operand::Reg(0)],
            ControlInfo::zero(),
        );
        assert_eq!(i.validate(), Err(IsaError::InvalidRegister(33)));
    }
}
