//! Samplers over the valid instruction set, used by property tests and the
//! acceptance suite.

use super::{ControlInfo, Instruction, Opcode, Operand, Predicate, BARRIER_NONE, NUM_OPCODES};
use rand::Rng;

/// Draws a uniformly random valid instruction (shape-correct operands,
/// at most one immediate, all control fields in range).
pub fn random_instruction<R: Rng>(rng: &mut R) -> Instruction {
    let opcode = Opcode::from_u8(rng.gen_range(0..NUM_OPCODES)).unwrap();
    let (nsrc, has_dst) = opcode.shape();
    let imm_slot = if nsrc > 0 && rng.gen_bool(0.5) {
        Some(rng.gen_range(0..nsrc))
    } else {
        None
    };
    let srcs: Vec<Operand> = (0..nsrc)
        .map(|i| {
            if imm_slot == Some(i) {
                Operand::Imm(rng.gen())
            } else {
                Operand::Reg(rng.gen_range(0..32))
            }
        })
        .collect();
    let control = ControlInfo {
        reuse_flags: rng.gen_range(0..16),
        wait_barrier_mask: rng.gen_range(0..64),
        read_barrier: if rng.gen_bool(0.5) {
            BARRIER_NONE
        } else {
            rng.gen_range(0..7)
        },
        write_barrier: if rng.gen_bool(0.5) {
            BARRIER_NONE
        } else {
            rng.gen_range(0..7)
        },
        yield_flag: rng.gen_bool(0.5),
        stall_cycles: rng.gen_range(0..16),
    };
    let mut instr = Instruction::new(
        opcode,
        if has_dst { rng.gen_range(0..32) } else { 0 },
        &srcs,
        control,
    );
    if rng.gen_bool(0.25) {
        instr.predicate = Some(Predicate {
            reg: rng.gen_range(0..32),
            negate: rng.gen_bool(0.5),
        });
    }
    instr
}
