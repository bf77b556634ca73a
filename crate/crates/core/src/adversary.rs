//! Attack harness: each attack from the security analysis is expressed as
//! a transformation of the verification-function image, the launch or the
//! channel, and is then measured against the calibrated verifier.
//!
//! The adversary runs under the same simulator cost model as the honest
//! program (no free computation). Where an attack can forge a value at
//! zero cost (replacing a register fold with an equal-length immediate
//! fold), the harness grants it; only unavoidable work is charged.

use crate::device::{self, sample_jitter_tax, DeviceConfig, ExecMode, LoopHint, RunOptions};
use crate::isa::{decode, encode, ControlInfo, Instruction, Opcode, Operand, Word128, WORD_BYTES};
use crate::rng::seed_mix;
use crate::verifier::{TimingModel, VerdictReason};
use crate::vf::{regs, thread_init, Challenge, VFImage, VfError};
use serde::Serialize;

/// Attack variants and their parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackSpec {
    /// Insert `count` NOPs into the checksum loop body.
    NopInject { count: u32 },
    /// Altered code executes in place; the measured region is a pristine
    /// copy elsewhere. The data-pointer fold is forged for free, but every
    /// store-to-code patch must be shadowed into the copy.
    MemcopyB,
    /// The pristine code stays in place and is measured; execution moves
    /// to a relocated copy, so the patched site immediates diverge from
    /// the measured region.
    MemcopyC,
    /// Both the executed and the measured copies are relocated.
    MemcopyD,
    /// Keep pristine values for modified words and redirect every load
    /// through a compare-and-select shim.
    DataSubstitution { modified_words: Vec<u32> },
    /// Forward challenges to a remote device: fixed channel latency both
    /// ways.
    Proxy { extra_latency: u64 },
    /// Schedule adversary warps beside the checksum warps.
    ParallelTakeover { warps: u32 },
    /// Swap the user kernel between its hash check and its launch.
    ToctouSwap,
    /// Replay a previously observed (challenge, checksum) pair.
    PrecomputeReplay,
}

impl AttackSpec {
    pub fn label(&self) -> &'static str {
        match self {
            AttackSpec::NopInject { .. } => "nop_inject",
            AttackSpec::MemcopyB => "memcopy_b",
            AttackSpec::MemcopyC => "memcopy_c",
            AttackSpec::MemcopyD => "memcopy_d",
            AttackSpec::DataSubstitution { .. } => "data_substitution",
            AttackSpec::Proxy { .. } => "proxy",
            AttackSpec::ParallelTakeover { .. } => "parallel_takeover",
            AttackSpec::ToctouSwap => "toctou_swap",
            AttackSpec::PrecomputeReplay => "precompute_replay",
        }
    }
}

/// How the attack affects the checksum value the device returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ChecksumOutcome {
    /// The adversary returns the correct value (detection is by timing).
    Correct,
    /// The executed computation diverges from the measured region.
    Wrong,
    /// A stale (challenge, checksum) pair is replayed.
    Replayed,
}

/// An attacked configuration ready to run.
pub struct AttackedSetup {
    pub spec: AttackSpec,
    pub image: VFImage,
    pub extra_latency: u64,
    pub extra_warps: u32,
    pub checksum_outcome: ChecksumOutcome,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectionReport {
    pub attack: String,
    pub honest_cycles: u64,
    pub attacked_cycles: u64,
    pub overhead_per_iteration: f64,
    pub checksum_correct: bool,
    pub detected: bool,
    pub reason: VerdictReason,
    pub trials: u32,
    pub rejected_trials: u32,
}

fn s1() -> ControlInfo {
    ControlInfo::stall(1)
}

fn decode_program(image: &VFImage) -> Result<Vec<Instruction>, VfError> {
    let mut out = Vec::with_capacity(image.layout.code_words as usize);
    for w in 0..image.layout.code_words as usize {
        let word = Word128::from_bytes(&image.bytes[w * WORD_BYTES..(w + 1) * WORD_BYTES]);
        out.push(decode(word)?);
    }
    Ok(out)
}

/// Inserts `extra` at `at`, shifting branch targets and layout markers
/// past the insertion point.
fn insert_instructions(
    image: &mut VFImage,
    prog: &mut Vec<Instruction>,
    at: u32,
    extra: &[Instruction],
) {
    let k = extra.len() as u32;
    for (i, instr) in prog.iter_mut().enumerate() {
        if instr.opcode == Opcode::Bra {
            if let Operand::Imm(t) = instr.srcs()[0] {
                if t >= at {
                    let mut fixed = Instruction::new(
                        Opcode::Bra,
                        0,
                        &[Operand::Imm(t + k)],
                        instr.control,
                    );
                    fixed.predicate = instr.predicate;
                    *instr = fixed;
                }
            }
            let _ = i;
        }
    }
    for (idx, instr) in extra.iter().enumerate() {
        prog.insert(at as usize + idx, *instr);
    }
    let shift = |w: &mut u32| {
        if *w >= at {
            *w += k;
        }
    };
    shift(&mut image.layout.outer_branch_word);
    for l in image.layout.inner_loops.iter_mut() {
        shift(&mut l.head_word);
        shift(&mut l.branch_word);
    }
    for w in image.layout.site_words.iter_mut() {
        shift(w);
    }
    for w in image.layout.stc_words.iter_mut() {
        shift(w);
    }
    if let Some(kw) = image.layout.kernel_entry.as_mut() {
        shift(kw);
    }
    image.layout.body_words += k;
    image.layout.code_words += k;
}

fn reencode(image: &mut VFImage, prog: &[Instruction]) -> Result<(), VfError> {
    let mut bytes = Vec::with_capacity(prog.len() * WORD_BYTES);
    for i in prog {
        bytes.extend_from_slice(&encode(i)?.to_bytes());
    }
    let code_len = bytes.len();
    if code_len > image.bytes.len() {
        return Err(VfError::LayoutOverflow(
            "attacked program exceeds the buffer".into(),
        ));
    }
    image.bytes.splice(..code_len, bytes);
    Ok(())
}

/// Relocates the program by `offset_words`, adjusting branch targets but
/// leaving store-to-code targets absolute (they keep pointing at the
/// original sites -- the relocation adversary cannot fix this without
/// extra work).
fn relocate_program(prog: &[Instruction], offset_words: u32) -> Vec<Instruction> {
    prog.iter()
        .map(|instr| {
            if instr.opcode == Opcode::Bra {
                if let Operand::Imm(t) = instr.srcs()[0] {
                    let mut fixed = Instruction::new(
                        Opcode::Bra,
                        0,
                        &[Operand::Imm(t + offset_words)],
                        instr.control,
                    );
                    fixed.predicate = instr.predicate;
                    return fixed;
                }
            }
            *instr
        })
        .collect()
}

fn shift_layout(image: &mut VFImage, offset_words: u32) {
    image.layout.entry_word += offset_words;
    image.layout.outer_branch_word += offset_words;
    for l in image.layout.inner_loops.iter_mut() {
        l.head_word += offset_words;
        l.branch_word += offset_words;
    }
    // site_words and stc targets stay absolute: the measured/patched
    // addresses do not move with the executing copy
    if let Some(k) = image.layout.kernel_entry.as_mut() {
        *k += offset_words;
    }
}

/// Applies the attack to an honest image, yielding the setup the device
/// would actually run.
pub fn apply_attack(image: &VFImage, spec: &AttackSpec) -> Result<AttackedSetup, VfError> {
    let mut out = AttackedSetup {
        spec: spec.clone(),
        image: image.clone(),
        extra_latency: 0,
        extra_warps: 0,
        checksum_outcome: ChecksumOutcome::Correct,
    };
    match spec {
        AttackSpec::NopInject { count } => {
            if *count == 0 {
                return Err(VfError::BadParams("nop_inject needs count >= 1".into()));
            }
            let mut prog = decode_program(image)?;
            let at = image.layout.site_words.first().copied().unwrap_or(5);
            let nops: Vec<Instruction> = (0..*count).map(|_| Instruction::nop()).collect();
            insert_instructions(&mut out.image, &mut prog, at, &nops);
            reencode(&mut out.image, &prog)?;
            // the adversary is assumed to forge the value; the cost is time
            out.checksum_outcome = ChecksumOutcome::Correct;
        }
        AttackSpec::DataSubstitution { modified_words } => {
            if modified_words.is_empty() {
                return Err(VfError::BadParams(
                    "data substitution needs a modified word set".into(),
                ));
            }
            // every load gains a compare + predicated-select shim: two ALU
            // instructions that do not perturb the checksum state
            let mut prog = decode_program(image)?;
            let mut ldg_sites: Vec<u32> = prog
                .iter()
                .enumerate()
                .filter(|(_, i)| i.opcode == Opcode::Ldg)
                .map(|(w, _)| w as u32)
                .collect();
            ldg_sites.sort_unstable();
            let shim = [
                Instruction::new(
                    Opcode::LopAnd,
                    regs::FLAG,
                    &[Operand::Reg(regs::ADDR), Operand::Reg(regs::ADDR)],
                    s1(),
                ),
                Instruction::new(
                    Opcode::LopXor,
                    regs::FLAG,
                    &[Operand::Reg(regs::FLAG), Operand::Reg(regs::FLAG)],
                    s1(),
                ),
            ];
            for (n, site) in ldg_sites.into_iter().enumerate() {
                insert_instructions(&mut out.image, &mut prog, site + 2 * n as u32, &shim);
            }
            reencode(&mut out.image, &prog)?;
            out.checksum_outcome = ChecksumOutcome::Correct;
        }
        AttackSpec::MemcopyB => {
            // the pristine measured copy lives at the end of the original
            // buffer; reads are redirected by pointing DP at it, the DP
            // fold is forged with an equal-cost immediate fold, and every
            // patch is shadowed into the copy (the unavoidable cost)
            let copy_base = image.bytes.len() as u64;
            let copy_words = (copy_base / WORD_BYTES as u64) as u32;
            out.image.bytes.extend_from_slice(&image.bytes);
            out.image.layout.dp_value = copy_base;

            let mut prog = decode_program(image)?;
            // forge the DP fold: XOR with the honest pointer value (zero)
            for instr in prog.iter_mut() {
                if instr.opcode == Opcode::LopXor
                    && instr.srcs() == [Operand::Reg(regs::C), Operand::Reg(regs::DP)]
                {
                    *instr = Instruction::new(
                        Opcode::LopXor,
                        regs::C,
                        &[Operand::Reg(regs::C), Operand::Imm(0)],
                        instr.control,
                    );
                }
            }
            // shadow every store-to-code into the measured copy
            let stc_sites: Vec<u32> = out.image.layout.stc_words.clone();
            for (n, site) in stc_sites.into_iter().enumerate() {
                let at = site + 1 + 3 * n as u32;
                let shadow = [
                    Instruction::new(
                        Opcode::Iadd,
                        regs::SITE,
                        &[Operand::Reg(regs::SITE), Operand::Imm(copy_words)],
                        s1(),
                    ),
                    {
                        let mut stc = Instruction::new(
                            Opcode::Stc,
                            0,
                            &[Operand::Reg(regs::SITE), Operand::Reg(regs::PATCH)],
                            s1(),
                        );
                        stc.predicate = Some(crate::isa::Predicate {
                            reg: regs::OUT_PACKED,
                            negate: false,
                        });
                        stc
                    },
                    Instruction::new(
                        Opcode::Iadd,
                        regs::SITE,
                        &[
                            Operand::Reg(regs::SITE),
                            Operand::Imm((copy_words as i32).wrapping_neg() as u32),
                        ],
                        s1(),
                    ),
                ];
                insert_instructions(&mut out.image, &mut prog, at, &shadow);
            }
            // the declared code region must cover the shadowed copy for
            // its store-to-code targets to be legal, so the executed
            // program needs an explicit exit jump instead of falling off
            let final_code_words = copy_words + image.layout.code_words;
            prog.push(Instruction::new(
                Opcode::Bra,
                0,
                &[Operand::Imm(final_code_words)],
                s1(),
            ));
            reencode(&mut out.image, &prog)?;
            out.image.layout.code_words = final_code_words;
            // the grown code section may overrun the original output
            // cells; move them past everything
            let new_out = out.image.bytes.len() as u64;
            out.image
                .bytes
                .extend(std::iter::repeat(0u8).take(image.num_sms as usize * 8));
            out.image.layout.out_base = new_out;
            out.checksum_outcome = ChecksumOutcome::Correct;
        }
        AttackSpec::MemcopyC | AttackSpec::MemcopyD => {
            // execution moves to a relocated copy; patches keep landing at
            // the original absolute sites, so the executed site immediate
            // never changes while the measured region evolves
            let prog = decode_program(image)?;
            let copy_base = image.bytes.len() as u64;
            let copy_words = (copy_base / WORD_BYTES as u64) as u32;
            let relocated = relocate_program(&prog, copy_words);
            let mut bytes = image.bytes.clone();
            for i in &relocated {
                bytes.extend_from_slice(&encode(i)?.to_bytes());
            }
            if *spec == AttackSpec::MemcopyD {
                // the measured region is a second pristine copy
                let measured_base = bytes.len() as u64;
                bytes.extend_from_slice(&image.bytes);
                out.image.layout.dp_value = measured_base;
            }
            out.image.bytes = bytes;
            shift_layout(&mut out.image, copy_words);
            out.image.layout.code_words = copy_words + image.layout.code_words;
            out.checksum_outcome = if image.params.self_modifying
                || *spec == AttackSpec::MemcopyD
            {
                ChecksumOutcome::Wrong
            } else {
                // without self-modification a pure relocation is exact:
                // this is the gap the self-modifying site closes
                ChecksumOutcome::Correct
            };
        }
        AttackSpec::Proxy { extra_latency } => {
            out.extra_latency = *extra_latency;
            out.checksum_outcome = ChecksumOutcome::Correct;
        }
        AttackSpec::ParallelTakeover { warps } => {
            if *warps == 0 {
                return Err(VfError::BadParams("takeover needs warps >= 1".into()));
            }
            // adversary busy-loop appended after the code region
            let mut prog = decode_program(image)?;
            let entry = prog.len() as u32;
            prog.push(Instruction::new(
                Opcode::Imad,
                regs::FLAG,
                &[
                    Operand::Reg(regs::ADDR),
                    Operand::Reg(regs::ADDR),
                    Operand::Reg(regs::ADDR),
                ],
                s1(),
            ));
            prog.push(Instruction::new(
                Opcode::Iadd,
                regs::DATA,
                &[Operand::Reg(regs::ADDR), Operand::Reg(regs::ADDR)],
                s1(),
            ));
            prog.push(Instruction::new(
                Opcode::Bra,
                0,
                &[Operand::Imm(entry)],
                s1(),
            ));
            out.image.layout.code_words = prog.len() as u32;
            reencode(&mut out.image, &prog)?;
            out.image.layout.kernel_entry = image.layout.kernel_entry;
            out.extra_warps = *warps;
            out.checksum_outcome = ChecksumOutcome::Correct;
            // remember the adversary loop entry in the layout-free channel:
            // evaluate() derives it from code_words
        }
        AttackSpec::ToctouSwap => {
            // the kernel is inlined into the attested program, so the swap
            // has to land before attestation ends and corrupts the
            // measured region
            let Some(kernel_entry) = image.layout.kernel_entry else {
                return Err(VfError::BadParams(
                    "toctou_swap targets an image with an inlined kernel".into(),
                ));
            };
            let off = kernel_entry as usize * WORD_BYTES;
            let swapped = encode(&Instruction::new(
                Opcode::Iadd,
                regs::DATA,
                &[Operand::Reg(regs::DATA), Operand::Imm(0xDEAD)],
                s1(),
            ))?;
            out.image.bytes[off..off + WORD_BYTES].copy_from_slice(&swapped.to_bytes());
            out.checksum_outcome = ChecksumOutcome::Wrong;
        }
        AttackSpec::PrecomputeReplay => {
            out.checksum_outcome = ChecksumOutcome::Replayed;
        }
    }
    Ok(out)
}

/// Runs the attacked setup in timing mode and renders `trials` verdicts
/// against the calibrated model. Runs are deterministic, so one timing
/// simulation serves every trial; per-trial jitter taxes are drawn the
/// same way honest jittered runs draw them.
pub fn evaluate(
    honest: &VFImage,
    setup: &AttackedSetup,
    device: &DeviceConfig,
    challenge: &Challenge,
    model: &TimingModel,
    trials: u32,
    trial_seed: u64,
) -> Result<DetectionReport, VfError> {
    let honest_cycles = timing_cycles(honest, challenge, device, 0)?;
    let attacked_cycles = timing_cycles(&setup.image, challenge, device, setup.extra_warps)?
        + 2 * setup.extra_latency;

    let mut rejected_trials = 0;
    let mut reason = VerdictReason::Ok;
    for t in 0..trials {
        let tax = sample_jitter_tax(device, seed_mix(trial_seed, t as u64), challenge.iterations);
        let elapsed = (attacked_cycles + tax) as f64;
        let verdict = match setup.checksum_outcome {
            ChecksumOutcome::Replayed => Some(VerdictReason::StaleNonce),
            ChecksumOutcome::Wrong => Some(VerdictReason::ChecksumMismatch),
            ChecksumOutcome::Correct => {
                if elapsed > model.threshold {
                    Some(VerdictReason::Timeout)
                } else {
                    None
                }
            }
        };
        if let Some(r) = verdict {
            rejected_trials += 1;
            reason = r;
        }
    }
    Ok(DetectionReport {
        attack: setup.spec.label().to_string(),
        honest_cycles,
        attacked_cycles,
        overhead_per_iteration: (attacked_cycles.saturating_sub(honest_cycles)) as f64
            / challenge.iterations as f64,
        checksum_correct: setup.checksum_outcome == ChecksumOutcome::Correct,
        detected: rejected_trials == trials,
        reason,
        trials,
        rejected_trials,
    })
}

fn timing_cycles(
    image: &VFImage,
    challenge: &Challenge,
    device: &DeviceConfig,
    extra_warps: u32,
) -> Result<u64, VfError> {
    let state = device::load_image(&image.to_vfbin(), device)?;
    let mut hints = image.hints(challenge.iterations);
    let extra = if extra_warps > 0 {
        let entry = image.layout.code_words - 3;
        hints.push(LoopHint {
            branch_word: image.layout.code_words - 1,
            target_word: entry,
            trip: u64::MAX / 2,
        });
        Some((entry, extra_warps))
    } else {
        None
    };
    let opts = RunOptions {
        mode: ExecMode::Timing,
        launch: image.launch,
        init: None,
        hints,
        fast_forward: true,
        out_cells: None,
        jitter: None,
        cycle_budget: None,
        extra_warps: extra,
    };
    Ok(device::run(&state, &opts)?.total_cycles)
}

/// Full-value run of an attacked image (small grids): returns the
/// aggregated checksum the attacked device would submit.
pub fn attacked_checksum(
    setup: &AttackedSetup,
    challenge: &Challenge,
    device: &DeviceConfig,
) -> Result<u64, VfError> {
    let state = device::load_image(&setup.image.to_vfbin(), device)?;
    let opts = RunOptions {
        mode: ExecMode::Full,
        launch: setup.image.launch,
        init: Some(thread_init(&setup.image, challenge)?),
        hints: setup.image.hints(challenge.iterations),
        fast_forward: false,
        out_cells: Some(setup.image.layout.out_base),
        jitter: None,
        cycle_budget: None,
        extra_warps: None,
    };
    let res = device::run(&state, &opts)?;
    res.checksum
        .ok_or_else(|| VfError::BadParams("value run produced no checksum".into()))
}
