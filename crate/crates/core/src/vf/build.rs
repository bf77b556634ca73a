//! Emission of the checksum program.

use super::{regs, Challenge, VFImage, VFParams, VfError, NUM_ACCUMULATORS};
use crate::device::{DeviceConfig, LaunchConfig, ThreadCoord, ThreadInit};
use crate::isa::{ControlInfo, Instruction, Opcode, Operand, WORD_BYTES};
use crate::rng::{seed_mix, XorShift64Star};
use std::sync::Arc;

/// Positions of everything the verifier and the attack harness need to
/// know about a built image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VfLayout {
    pub code_words: u32,
    pub body_words: u32,
    pub entry_word: u32,
    pub outer_branch_word: u32,
    pub inner_loops: Vec<InnerLoop>,
    /// Word index of the self-modifying `x += x >> N` site per global
    /// block (empty when not self-modifying).
    pub site_words: Vec<u32>,
    /// Word index of the store-to-code patch instruction per body copy.
    pub stc_words: Vec<u32>,
    /// Byte address of the per-SM output cells.
    pub out_base: u64,
    /// Data-pointer register value (buffer base; zero for honest images).
    pub dp_value: u64,
    /// Word-index mask implementing `C mod (data_size / 4)`.
    pub measured_mask: u64,
    pub kernel_entry: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InnerLoop {
    pub head_word: u32,
    pub branch_word: u32,
}

/// Derived per-position constants, shared between the generator and the
/// reference computation (they define the program; execution paths stay
/// separate).
pub(super) struct DerivedConstants {
    pub filler_mult: Vec<u64>,
    pub filler_shift: Vec<u32>,
    pub inner_mult: Vec<u64>,
    pub inner_shift: Vec<u32>,
}

pub(super) fn derive_constants(fill_seed: u64, fillers: u32, inner_fillers: u32) -> DerivedConstants {
    let mut c = XorShift64Star::new(seed_mix(fill_seed, 1));
    let mut filler_mult = Vec::new();
    let mut filler_shift = Vec::new();
    for _ in 0..fillers {
        filler_mult.push((c.next_u64() as u32 as u64) | 1);
        filler_shift.push(1 + (c.next_u64() % 31) as u32);
    }
    let mut ic = XorShift64Star::new(seed_mix(fill_seed, 2));
    let mut inner_mult = Vec::new();
    let mut inner_shift = Vec::new();
    for _ in 0..inner_fillers {
        inner_mult.push((ic.next_u64() as u32 as u64) | 1);
        inner_shift.push(1 + (ic.next_u64() % 31) as u32);
    }
    DerivedConstants {
        filler_mult,
        filler_shift,
        inner_mult,
        inner_shift,
    }
}

pub(super) struct BodyShape {
    pub fillers: u32,
    pub inner_fillers: u32,
    pub sites: u32,
}

/// Splits the requested body size into its sections, or explains why it
/// cannot hold them.
pub(super) fn body_shape(
    params: &VFParams,
    total_blocks: u32,
) -> Result<BodyShape, VfError> {
    // per logical iteration: counter, addressing (3), load
    let prefix = 5u32;
    let d_folds = 2u32;
    let state_folds = 2 + NUM_ACCUMULATORS as u32;
    let sites = if params.self_modifying { total_blocks } else { 0 };
    let patch = if params.self_modifying { 2 } else { 0 };
    let inner = if params.inner_loop_instructions > 0 {
        if params.inner_loop_instructions < 5 {
            return Err(VfError::BadParams(
                "inner loop needs at least 5 instructions".into(),
            ));
        }
        if params.inner_loop_iterations == 0 {
            return Err(VfError::BadParams(
                "inner loop declared without iterations".into(),
            ));
        }
        1 + params.inner_loop_instructions
    } else {
        0
    };
    let control = 2u32;
    let fixed = prefix + d_folds + sites + patch + inner + state_folds + control;
    let l = params.loop_body_instructions;
    if l < fixed + 30 {
        return Err(VfError::LayoutOverflow(format!(
            "loop body of {l} instructions cannot hold the load, the hiding \
             pattern (>= 30 fillers) and {fixed} fixed instructions"
        )));
    }
    Ok(BodyShape {
        fillers: l - fixed,
        inner_fillers: params.inner_loop_instructions.saturating_sub(3),
        sites,
    })
}

fn validate(params: &VFParams, device: &DeviceConfig, launch: &LaunchConfig) -> Result<(), VfError> {
    if !params.buffer_size.is_power_of_two() || params.buffer_size < 1024 {
        return Err(VfError::BadParams(
            "buffer size must be a power of two >= 1024".into(),
        ));
    }
    if params.unroll_factor == 0 {
        return Err(VfError::BadParams("unroll factor must be >= 1".into()));
    }
    if params.self_modifying && params.unroll_factor != 1 {
        return Err(VfError::BadParams(
            "self-modifying profiles do not support unrolling".into(),
        ));
    }
    if params.iterations == 0 || params.iterations % params.unroll_factor as u64 != 0 {
        return Err(VfError::BadParams(
            "iterations must be a positive multiple of the unroll factor".into(),
        ));
    }
    if params.self_modifying {
        let body_bytes = params.loop_body_instructions as u64 * WORD_BYTES as u64;
        if body_bytes <= device.l2_icache_bytes as u64 {
            return Err(VfError::BadParams(format!(
                "self-modifying loop body ({body_bytes} B) must exceed the \
                 instruction cache ({} B) so eviction-by-overflow refreshes \
                 the patched site",
                device.l2_icache_bytes
            )));
        }
    }
    launch.validate(device)?;
    Ok(())
}

struct Emitter {
    prog: Vec<Instruction>,
}

impl Emitter {
    fn push(&mut self, op: Opcode, dst: u8, srcs: &[Operand], ctrl: ControlInfo) -> u32 {
        self.prog.push(Instruction::new(op, dst, srcs, ctrl));
        self.prog.len() as u32 - 1
    }

    fn pc(&self) -> u32 {
        self.prog.len() as u32
    }
}

fn r(x: u8) -> Operand {
    Operand::Reg(x)
}

fn imm(v: u32) -> Operand {
    Operand::Imm(v)
}

fn s1() -> ControlInfo {
    ControlInfo::stall(1)
}

/// Body instructions carry the read-after-write distance in their stall
/// field, the way production microcode schedules dependency latency; the
/// chain then never stalls dynamically at any occupancy.
fn sdep(device: &DeviceConfig) -> ControlInfo {
    ControlInfo::stall(device.raw_dependency_latency.min(15) as u8)
}

/// Builds the verification-function image for the given grid. The result
/// is byte-deterministic in (params, fill_seed, topology).
pub fn build_vf(
    params: &VFParams,
    fill_seed: u64,
    device: &DeviceConfig,
    launch: &LaunchConfig,
) -> Result<VFImage, VfError> {
    build_vf_with_kernel(params, fill_seed, device, launch, &[])
}

/// Like [`build_vf`] but appends a user kernel directly after the checksum
/// epilog, so control falls from the attested program into the kernel with
/// no scheduling gap.
pub fn build_vf_with_kernel(
    params: &VFParams,
    fill_seed: u64,
    device: &DeviceConfig,
    launch: &LaunchConfig,
    user_kernel: &[Instruction],
) -> Result<VFImage, VfError> {
    validate(params, device, launch)?;
    let total_blocks = device.num_sms * launch.blocks_per_sm;
    let shape = body_shape(params, total_blocks)?;
    let consts = derive_constants(fill_seed, shape.fillers, shape.inner_fillers);
    let unroll = params.unroll_factor;

    let mut e = Emitter { prog: Vec::new() };
    let mut site_words: Vec<u32> = Vec::new();
    let mut stc_words: Vec<u32> = Vec::new();
    let mut inner_loops: Vec<InnerLoop> = Vec::new();

    let dep = sdep(device);
    for copy in 0..unroll {
        emit_iteration_core(
            &mut e,
            params,
            &shape,
            &consts,
            dep,
            &mut site_words,
            &mut stc_words,
            &mut inner_loops,
            copy == 0,
        );
    }
    // loop control: keep iterating while the counter has not wrapped
    e.push(Opcode::ShfR, regs::FLAG, &[r(regs::ITER), imm(63)], dep);
    let outer_branch_word = e.pc();
    e.prog.push(
        Instruction::new(Opcode::Bra, 0, &[imm(0)], dep).with_predicate(regs::FLAG, true),
    );

    let body_words = e.pc();
    // epilog: every thread adds its checksum into its SM's output cell
    e.push(Opcode::ShfR, regs::ADDR, &[r(regs::OUT_PACKED), imm(1)], s1());
    e.push(Opcode::AtomAdd, 0, &[r(regs::ADDR), r(regs::C)], s1());
    let kernel_entry = if user_kernel.is_empty() {
        None
    } else {
        let entry = e.pc();
        e.prog.extend_from_slice(user_kernel);
        Some(entry)
    };
    let code_words = e.pc();

    let code_bytes = code_words as usize * WORD_BYTES;
    if code_bytes + device.num_sms as usize * 8 + 64 > params.buffer_size as usize {
        return Err(VfError::LayoutOverflow(format!(
            "{code_bytes} code bytes do not leave room in a {}-byte buffer",
            params.buffer_size
        )));
    }
    let out_base = (code_bytes as u64).div_ceil(64) * 64;

    // serialize the program and fill the rest of the buffer
    let mut bytes = Vec::with_capacity(params.buffer_size as usize);
    for i in &e.prog {
        bytes.extend_from_slice(&crate::isa::encode(i)?.to_bytes());
    }
    let mut fill = XorShift64Star::new(seed_mix(fill_seed, 3));
    let mut tail = vec![0u8; params.buffer_size as usize - bytes.len()];
    fill.fill_bytes(&mut tail);
    bytes.extend_from_slice(&tail);
    // output cells start zeroed
    let cells = device.num_sms as usize * 8;
    bytes[out_base as usize..out_base as usize + cells].fill(0);

    let layout = VfLayout {
        code_words,
        body_words,
        entry_word: 0,
        outer_branch_word,
        inner_loops,
        site_words,
        stc_words,
        out_base,
        dp_value: 0,
        measured_mask: (params.buffer_size / 4) as u64 - 1,
        kernel_entry,
    };
    Ok(VFImage {
        params: params.clone(),
        fill_seed,
        num_sms: device.num_sms,
        launch: *launch,
        bytes,
        layout,
    })
}

#[allow(clippy::too_many_arguments)]
fn emit_iteration_core(
    e: &mut Emitter,
    params: &VFParams,
    shape: &BodyShape,
    consts: &DerivedConstants,
    dep: ControlInfo,
    site_words: &mut Vec<u32>,
    stc_words: &mut Vec<u32>,
    inner_loops: &mut Vec<InnerLoop>,
    first_copy: bool,
) {
    let acc = |k: usize| regs::ACC_BASE + (k % NUM_ACCUMULATORS) as u8;

    // counter and pseudo-random address: DP + 4 * (C mod data_size/4)
    e.push(Opcode::Iadd, regs::ITER, &[r(regs::ITER), imm(u32::MAX)], dep);
    e.push(Opcode::LopAnd, regs::ADDR, &[r(regs::C), r(regs::ADDR_MASK)], dep);
    e.push(Opcode::ShfL, regs::ADDR, &[r(regs::ADDR), imm(2)], dep);
    e.push(Opcode::Iadd, regs::ADDR, &[r(regs::ADDR), r(regs::DP)], dep);
    let mut ldg_ctrl = dep;
    ldg_ctrl.write_barrier = 0;
    e.push(Opcode::Ldg, regs::DATA, &[r(regs::ADDR)], ldg_ctrl);

    // busy-wait fillers: a strongly-ordered alternating FMA/ALU
    // shift-and-add chain over the accumulators; each instruction reads
    // the previous instruction's destination
    for j in 0..shape.fillers as usize {
        let dst = acc(j);
        let prev = acc(j + NUM_ACCUMULATORS - 1);
        if j % 2 == 0 {
            e.push(
                Opcode::Imad,
                dst,
                &[r(dst), imm(consts.filler_mult[j] as u32), r(prev)],
                dep,
            );
        } else {
            e.push(
                Opcode::LeaHi,
                dst,
                &[r(dst), r(prev), imm(consts.filler_shift[j])],
                dep,
            );
        }
    }

    // fold the loaded word (first consumer waits on the load barrier)
    let mut wait = dep;
    wait.wait_barrier_mask = 1;
    e.push(Opcode::LopXor, regs::ACC_BASE, &[r(regs::ACC_BASE), r(regs::DATA)], wait);
    e.push(Opcode::Iadd, regs::C, &[r(regs::C), r(regs::DATA)], dep);

    // self-modifying sites: one `x += x >> N` slot per block, each patched
    // by its owning block's warp 0
    for _ in 0..shape.sites {
        let w = e.push(Opcode::LeaHi, regs::C, &[r(regs::C), r(regs::C), imm(0)], dep);
        if first_copy {
            site_words.push(w);
        }
    }

    // inner busy loop
    if params.inner_loop_instructions > 0 {
        e.push(
            Opcode::Mov,
            regs::FLAG,
            &[imm((params.inner_loop_iterations - 1) as u32)],
            dep,
        );
        let head_word = e.pc();
        for j in 0..shape.inner_fillers as usize {
            let dst = acc(j + 7);
            let prev = acc(j + 7 + NUM_ACCUMULATORS - 1);
            if j % 2 == 0 {
                e.push(
                    Opcode::Imad,
                    dst,
                    &[r(dst), imm(consts.inner_mult[j] as u32), r(prev)],
                    dep,
                );
            } else {
                e.push(
                    Opcode::LeaHi,
                    dst,
                    &[r(dst), r(prev), imm(consts.inner_shift[j])],
                    dep,
                );
            }
        }
        e.push(Opcode::Iadd, regs::FLAG, &[r(regs::FLAG), imm(u32::MAX)], dep);
        e.push(Opcode::ShfR, regs::ADDR, &[r(regs::FLAG), imm(63)], dep);
        let branch_word = e.pc();
        e.prog.push(
            Instruction::new(Opcode::Bra, 0, &[imm(head_word)], dep)
                .with_predicate(regs::ADDR, true),
        );
        inner_loops.push(InnerLoop {
            head_word,
            branch_word,
        });
    }

    // fold pointer, counter and every accumulator into the checksum
    e.push(Opcode::LopXor, regs::C, &[r(regs::C), r(regs::DP)], dep);
    e.push(Opcode::Iadd, regs::C, &[r(regs::C), r(regs::ITER)], dep);
    for k in 0..NUM_ACCUMULATORS {
        e.push(Opcode::LopXor, regs::C, &[r(regs::C), r(acc(k))], dep);
    }

    // patch the site immediate with N = C mod 32
    if params.self_modifying {
        e.push(Opcode::LopAnd, regs::PATCH, &[r(regs::C), imm(31)], dep);
        let w = e.pc();
        e.prog.push(
            Instruction::new(Opcode::Stc, 0, &[r(regs::SITE), r(regs::PATCH)], dep)
                .with_predicate(regs::OUT_PACKED, false),
        );
        stc_words.push(w);
    }
}

/// Register initialization for a run of `image` under `challenge`: the
/// per-SM seed expands into per-thread random state, the counter counts
/// `iterations` down, and the support registers carry the layout.
pub fn thread_init(image: &VFImage, challenge: &Challenge) -> Result<ThreadInit, VfError> {
    if challenge.seeds.len() != image.num_sms as usize {
        return Err(VfError::ShapeMismatch(format!(
            "{} seeds for {} SMs",
            challenge.seeds.len(),
            image.num_sms
        )));
    }
    if challenge.iterations == 0
        || challenge.iterations % image.params.unroll_factor as u64 != 0
    {
        return Err(VfError::BadParams(
            "challenge iterations must be a positive multiple of the unroll factor".into(),
        ));
    }
    let seeds = challenge.seeds.clone();
    let iterations = challenge.iterations;
    let layout = image.layout.clone();
    let blocks_per_sm = image.launch.blocks_per_sm;
    Ok(Arc::new(move |coord: &ThreadCoord| {
        let mut regs_out = [0u64; 32];
        let mut stream = XorShift64Star::new(seed_mix(
            seeds[coord.sm as usize],
            coord.global_thread,
        ));
        regs_out[regs::C as usize] = stream.next_u64();
        for k in 0..NUM_ACCUMULATORS {
            regs_out[regs::ACC_BASE as usize + k] = stream.next_u64();
        }
        regs_out[regs::DP as usize] = layout.dp_value;
        regs_out[regs::ITER as usize] = iterations - 1;
        regs_out[regs::ADDR_MASK as usize] = layout.measured_mask;
        let out_cell = layout.out_base + coord.sm as u64 * 8;
        regs_out[regs::OUT_PACKED as usize] =
            (out_cell << 1) | (coord.warp_in_block == 0) as u64;
        let block = coord.sm * blocks_per_sm + coord.block_in_sm;
        regs_out[regs::SITE as usize] = layout
            .site_words
            .get(block as usize)
            .copied()
            .unwrap_or(0) as u64;
        regs_out
    }))
}
