//! Verifier-side recomputation of the expected checksum.
//!
//! This walks the same update schedule the generator emits, directly in
//! Rust, without decoding instructions or running the simulator. Agreement
//! with the simulated run is bit-exact and is what the cross-oracle tests
//! check.

use super::build::{body_shape, derive_constants};
use super::{regs, Challenge, VFImage, VfError, NUM_ACCUMULATORS};
use crate::isa::{encode, Instruction, Opcode, Operand, WORD_BYTES};
use crate::rng::{seed_mix, XorShift64Star};

struct ThreadState {
    c: u64,
    iter: u64,
    accs: [u64; NUM_ACCUMULATORS],
    sm: u32,
}

/// Computes the expected checksum plus the per-SM partial sums.
pub fn reference_outputs(
    image: &VFImage,
    challenge: &Challenge,
) -> Result<(Vec<u64>, u64), VfError> {
    let params = &image.params;
    let launch = &image.launch;
    if challenge.seeds.len() != image.num_sms as usize {
        return Err(VfError::ShapeMismatch(format!(
            "{} seeds for {} SMs",
            challenge.seeds.len(),
            image.num_sms
        )));
    }
    if challenge.iterations == 0
        || challenge.iterations % params.unroll_factor as u64 != 0
    {
        return Err(VfError::BadParams(
            "challenge iterations must be a positive multiple of the unroll factor".into(),
        ));
    }
    let total_blocks = image.num_sms * launch.blocks_per_sm;
    if params.self_modifying && total_blocks != 1 {
        return Err(VfError::BadParams(
            "self-modifying checksums are value-exact only for single-block grids".into(),
        ));
    }
    let shape = body_shape(params, total_blocks)?;
    let consts = derive_constants(image.fill_seed, shape.fillers, shape.inner_fillers);
    let dp = image.layout.dp_value;
    let mask = image.layout.measured_mask;

    // per-thread state, global thread order
    let threads_per_sm = launch.blocks_per_sm as u64 * launch.threads_per_block as u64;
    let total_threads = image.num_sms as u64 * threads_per_sm;
    let mut threads: Vec<ThreadState> = Vec::with_capacity(total_threads as usize);
    for sm in 0..image.num_sms {
        for t in 0..threads_per_sm {
            let global_thread = sm as u64 * threads_per_sm + t;
            let mut stream =
                XorShift64Star::new(seed_mix(challenge.seeds[sm as usize], global_thread));
            let c = stream.next_u64();
            let mut accs = [0u64; NUM_ACCUMULATORS];
            for a in accs.iter_mut() {
                *a = stream.next_u64();
            }
            threads.push(ThreadState {
                c,
                iter: challenge.iterations - 1,
                accs,
                sm,
            });
        }
    }

    // self-modifying site: the immediate starts at the built value (0) and
    // is patched from block warp 0 lane 0's checksum at iteration end
    let mut site_shift: u32 = 0;
    let site_byte = image
        .layout
        .site_words
        .first()
        .map(|w| *w as u64 * WORD_BYTES as u64);

    for _ in 0..challenge.iterations {
        for th in threads.iter_mut() {
            step_thread(th, params, &shape, &consts, image, dp, mask, site_shift, site_byte)?;
        }
        if params.self_modifying {
            site_shift = (threads[0].c & 31) as u32;
        }
    }

    let mut per_sm = vec![0u64; image.num_sms as usize];
    for th in &threads {
        per_sm[th.sm as usize] = per_sm[th.sm as usize].wrapping_add(th.c);
    }
    let total = per_sm.iter().fold(0u64, |a, v| a.wrapping_add(*v));
    Ok((per_sm, total))
}

/// The expected 64-bit checksum for `(image, challenge)`.
pub fn checksum_reference(image: &VFImage, challenge: &Challenge) -> Result<u64, VfError> {
    reference_outputs(image, challenge).map(|(_, total)| total)
}

#[allow(clippy::too_many_arguments)]
fn step_thread(
    th: &mut ThreadState,
    params: &super::VFParams,
    shape: &super::build::BodyShape,
    consts: &super::build::DerivedConstants,
    image: &VFImage,
    dp: u64,
    mask: u64,
    site_shift: u32,
    site_byte: Option<u64>,
) -> Result<(), VfError> {
    // counter and pseudo-random address
    th.iter = th.iter.wrapping_sub(1);
    let addr = ((th.c & mask) << 2).wrapping_add(dp);
    let d = load_word(image, addr, site_shift, site_byte)?;

    // busy-wait filler chain
    for j in 0..shape.fillers as usize {
        let dst = j % NUM_ACCUMULATORS;
        let prev = (j + NUM_ACCUMULATORS - 1) % NUM_ACCUMULATORS;
        if j % 2 == 0 {
            th.accs[dst] = th.accs[dst]
                .wrapping_mul(consts.filler_mult[j])
                .wrapping_add(th.accs[prev]);
        } else {
            th.accs[dst] =
                th.accs[dst].wrapping_add(th.accs[prev] >> consts.filler_shift[j]);
        }
    }

    // fold the loaded word
    th.accs[0] ^= d;
    th.c = th.c.wrapping_add(d);

    // self-modifying sites
    for _ in 0..shape.sites {
        th.c = th.c.wrapping_add(th.c >> site_shift);
    }

    // inner busy loop
    if params.inner_loop_instructions > 0 {
        for _ in 0..params.inner_loop_iterations {
            for j in 0..shape.inner_fillers as usize {
                let dst = (j + 7) % NUM_ACCUMULATORS;
                let prev = (j + 7 + NUM_ACCUMULATORS - 1) % NUM_ACCUMULATORS;
                if j % 2 == 0 {
                    th.accs[dst] = th.accs[dst]
                        .wrapping_mul(consts.inner_mult[j])
                        .wrapping_add(th.accs[prev]);
                } else {
                    th.accs[dst] =
                        th.accs[dst].wrapping_add(th.accs[prev] >> consts.inner_shift[j]);
                }
            }
        }
    }

    // fold pointer, counter, accumulators
    th.c ^= dp;
    th.c = th.c.wrapping_add(th.iter);
    for k in 0..NUM_ACCUMULATORS {
        th.c ^= th.accs[k];
    }
    Ok(())
}

fn load_word(
    image: &VFImage,
    addr: u64,
    site_shift: u32,
    site_byte: Option<u64>,
) -> Result<u64, VfError> {
    let a = addr as usize;
    if a + 4 > image.bytes.len() {
        return Err(VfError::BadParams(format!(
            "reference load out of range: {addr:#x}"
        )));
    }
    if let Some(base) = site_byte {
        if addr >= base && addr < base + WORD_BYTES as u64 {
            // the site word carries the live shift immediate
            let site = Instruction::new(
                Opcode::LeaHi,
                regs::C,
                &[
                    Operand::Reg(regs::C),
                    Operand::Reg(regs::C),
                    Operand::Imm(site_shift),
                ],
                crate::isa::ControlInfo::stall(1),
            );
            let bytes = encode(&site)
                .expect("site instruction is valid")
                .to_bytes();
            let off = (addr - base) as usize;
            return Ok(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as u64);
        }
    }
    Ok(u32::from_le_bytes(image.bytes[a..a + 4].try_into().unwrap()) as u64)
}
