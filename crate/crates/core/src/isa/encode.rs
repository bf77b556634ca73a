//! Binary codec for the 128-bit instruction word.
//!
//! Bit layout (LSB numbering over the full 128-bit word). The control
//! section widths come from the hardware encoding; the offsets within the
//! word are fixed by this implementation so that encodings are reproducible:
//!
//! ```text
//! bits   0..8    opcode
//! bits   8..13   predicate register
//! bit    13      predicate negate
//! bit    14      predicate present
//! bits  16..21   destination register
//! bits  21..23   immediate slot (0 = none, k+1 = source slot k)
//! bits  23..25   source operand count
//! bits  25..30   source 0 register
//! bits  30..35   source 1 register
//! bits  35..40   source 2 register
//! bits  40..72   32-bit immediate payload
//! bits 105..109  reuse flags
//! bits 109..115  wait barrier mask
//! bits 115..118  read barrier index (stored as index ^ 7)
//! bits 118..121  write barrier index (stored as index ^ 7)
//! bit  121       yield flag
//! bits 122..126  stall cycles
//! ```
//!
//! All remaining bits are zero in canonical encodings. Control fields are
//! disjoint: flipping a single control bit changes exactly one field.

use super::{ControlInfo, Instruction, IsaError, Opcode, Operand, Predicate, Word128};

const OPCODE_LSB: u32 = 0;
const PRED_REG_LSB: u32 = 8;
const PRED_NEG_BIT: u32 = 13;
const PRED_PRESENT_BIT: u32 = 14;
const DST_LSB: u32 = 16;
const IMM_SLOT_LSB: u32 = 21;
const SRC_COUNT_LSB: u32 = 23;
const SRC_REG_LSB: [u32; 3] = [25, 30, 35];
const IMM_LSB: u32 = 40;

const CTRL_REUSE_LSB: u32 = 105;
const CTRL_WAIT_LSB: u32 = 109;
const CTRL_READ_LSB: u32 = 115;
const CTRL_WRITE_LSB: u32 = 118;
const CTRL_YIELD_BIT: u32 = 121;
const CTRL_STALL_LSB: u32 = 122;

// immediate-slot wire values: 0 = no immediate, k+1 = source slot k
const NO_IMM_SLOT: u64 = 0;

fn field(word: u128, lsb: u32, width: u32) -> u64 {
    ((word >> lsb) as u64) & ((1u64 << width) - 1)
}

fn put(word: &mut u128, lsb: u32, width: u32, value: u64) {
    debug_assert!(value < (1u64 << width));
    *word |= (value as u128) << lsb;
}

/// Encodes a valid instruction into its canonical 128-bit word.
pub fn encode(instr: &Instruction) -> Result<Word128, IsaError> {
    instr.validate()?;
    let mut w: u128 = 0;
    put(&mut w, OPCODE_LSB, 8, instr.opcode as u64);
    if let Some(Predicate { reg, negate }) = instr.predicate {
        put(&mut w, PRED_REG_LSB, 5, reg as u64);
        put(&mut w, PRED_NEG_BIT, 1, negate as u64);
        put(&mut w, PRED_PRESENT_BIT, 1, 1);
    }
    let (_, has_dst) = instr.opcode.shape();
    if has_dst {
        put(&mut w, DST_LSB, 5, instr.dst as u64);
    }
    let srcs = instr.srcs();
    put(&mut w, SRC_COUNT_LSB, 2, srcs.len() as u64);
    let mut imm_slot = NO_IMM_SLOT;
    for (i, op) in srcs.iter().enumerate() {
        match op {
            Operand::Reg(r) => put(&mut w, SRC_REG_LSB[i], 5, *r as u64),
            Operand::Imm(v) => {
                imm_slot = i as u64 + 1;
                put(&mut w, IMM_LSB, 32, *v as u64);
            }
        }
    }
    put(&mut w, IMM_SLOT_LSB, 2, imm_slot);

    let c = &instr.control;
    put(&mut w, CTRL_REUSE_LSB, 4, c.reuse_flags as u64);
    put(&mut w, CTRL_WAIT_LSB, 6, c.wait_barrier_mask as u64);
    // barrier indices are stored inverted so that "none" (7) encodes as
    // zero bits and an all-default control section is all-zero on the wire
    put(&mut w, CTRL_READ_LSB, 3, (c.read_barrier ^ 7) as u64);
    put(&mut w, CTRL_WRITE_LSB, 3, (c.write_barrier ^ 7) as u64);
    put(&mut w, CTRL_YIELD_BIT, 1, c.yield_flag as u64);
    put(&mut w, CTRL_STALL_LSB, 4, c.stall_cycles as u64);
    Ok(Word128::from_u128(w))
}

/// Decodes a 128-bit word. Returns `UnknownOpcode` for unassigned opcode
/// patterns and `Malformed` for inconsistent operand metadata.
pub fn decode(word: Word128) -> Result<Instruction, IsaError> {
    let w = word.as_u128();
    let opcode = Opcode::from_u8(field(w, OPCODE_LSB, 8) as u8)?;
    let predicate = if field(w, PRED_PRESENT_BIT, 1) == 1 {
        Some(Predicate {
            reg: field(w, PRED_REG_LSB, 5) as u8,
            negate: field(w, PRED_NEG_BIT, 1) == 1,
        })
    } else {
        None
    };
    let dst = field(w, DST_LSB, 5) as u8;
    let count = field(w, SRC_COUNT_LSB, 2) as usize;
    if count > 3 {
        return Err(IsaError::Malformed("source count exceeds 3"));
    }
    let imm_slot = field(w, IMM_SLOT_LSB, 2);
    if imm_slot != NO_IMM_SLOT && imm_slot as usize > count {
        return Err(IsaError::Malformed("immediate slot beyond operand count"));
    }
    let mut srcs = Vec::with_capacity(count);
    for i in 0..count {
        if imm_slot == i as u64 + 1 {
            srcs.push(Operand::Imm(field(w, IMM_LSB, 32) as u32));
        } else {
            srcs.push(Operand::Reg(field(w, SRC_REG_LSB[i], 5) as u8));
        }
    }
    let control = ControlInfo {
        reuse_flags: field(w, CTRL_REUSE_LSB, 4) as u8,
        wait_barrier_mask: field(w, CTRL_WAIT_LSB, 6) as u8,
        read_barrier: field(w, CTRL_READ_LSB, 3) as u8 ^ 7,
        write_barrier: field(w, CTRL_WRITE_LSB, 3) as u8 ^ 7,
        yield_flag: field(w, CTRL_YIELD_BIT, 1) == 1,
        stall_cycles: field(w, CTRL_STALL_LSB, 4) as u8,
    };
    let mut instr = Instruction::new(opcode, dst, &srcs, control);
    instr.predicate = predicate;
    instr.validate()?;
    Ok(instr)
}

/// Overwrites the 32-bit immediate payload of an already-encoded word.
/// This is the store-to-code patch primitive: only the immediate field
/// changes, everything else (including control bits) is preserved.
pub fn patch_immediate(word: Word128, value: u32) -> Word128 {
    let mut w = word.as_u128();
    w &= !(((u32::MAX as u128)) << IMM_LSB);
    w |= (value as u128) << IMM_LSB;
    Word128::from_u128(w)
}

/// Reads the immediate payload field of an encoded word.
pub fn immediate_of(word: Word128) -> u32 {
    field(word.as_u128(), IMM_LSB, 32) as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::test_support::random_instruction;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn nop_zero_control_has_zero_control_field() {
        let w = encode(&Instruction::nop()).unwrap();
        let raw = w.as_u128();
        assert_eq!(field(raw, CTRL_REUSE_LSB, 21), 0);
        // the only set bits select the NOP opcode (14)
        assert_eq!(raw, 14);
    }

    #[test]
    fn imad_example_roundtrips() {
        let i = Instruction::new(
            Opcode::Imad,
            28,
            &[Operand::Reg(28), Operand::Imm(2048), Operand::Reg(28)],
            ControlInfo {
                yield_flag: true,
                stall_cycles: 1,
                ..ControlInfo::zero()
            },
        );
        let w = encode(&i).unwrap();
        assert_eq!(decode(w).unwrap(), i);
    }

    #[test]
    fn unknown_opcode_rejected() {
        let w = Word128::from_u128(0x42);
        assert_eq!(decode(w), Err(IsaError::UnknownOpcode(0x42)));
    }

    #[test]
    fn control_bits_do_not_alias() {
        // flipping any single control bit changes exactly one field
        let base = encode(&Instruction::nop()).unwrap();
        let base_ctrl = decode(base).unwrap().control;
        for bit in CTRL_REUSE_LSB..CTRL_STALL_LSB + 4 {
            let flipped = Word128::from_u128(base.as_u128() ^ (1u128 << bit));
            let c = decode(flipped).unwrap().control;
            let mut changed = 0;
            changed += (c.reuse_flags != base_ctrl.reuse_flags) as u32;
            changed += (c.wait_barrier_mask != base_ctrl.wait_barrier_mask) as u32;
            changed += (c.read_barrier != base_ctrl.read_barrier) as u32;
            changed += (c.write_barrier != base_ctrl.write_barrier) as u32;
            changed += (c.yield_flag != base_ctrl.yield_flag) as u32;
            changed += (c.stall_cycles != base_ctrl.stall_cycles) as u32;
            assert_eq!(changed, 1, "bit {bit} aliases");
        }
    }

    #[test]
    fn distinct_opcodes_distinct_encodings() {
        let words: Vec<u128> = Opcode::all()
            .map(|op| {
                let (n, has_dst) = op.shape();
                let srcs: Vec<Operand> = (0..n).map(|_| Operand::Reg(0)).collect();
                let i = Instruction::new(op, if has_dst { 0 } else { 0 }, &srcs, ControlInfo::zero());
                encode(&i).unwrap().as_u128()
            })
            .collect();
        for (a, wa) in words.iter().enumerate() {
            for (b, wb) in words.iter().enumerate() {
                if a != b {
                    assert_ne!(wa, wb);
                }
            }
        }
    }

    #[test]
    fn random_roundtrip_sample() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..5_000 {
            let i = random_instruction(&mut rng);
            let w = encode(&i).unwrap();
            assert_eq!(decode(w).unwrap(), i);
        }
    }

    #[test]
    fn patch_immediate_only_touches_payload() {
        let i = Instruction::new(
            Opcode::LeaHi,
            0,
            &[Operand::Reg(0), Operand::Reg(0), Operand::Imm(5)],
            ControlInfo::stall(1),
        );
        let w = encode(&i).unwrap();
        let p = patch_immediate(w, 31);
        let d = decode(p).unwrap();
        assert_eq!(d.srcs()[2], Operand::Imm(31));
        assert_eq!(d.opcode, Opcode::LeaHi);
        assert_eq!(d.control, i.control);
        assert_eq!(immediate_of(p), 31);
    }
}
