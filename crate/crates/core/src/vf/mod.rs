//! The verification function: a self-checksumming program whose value and
//! runtime are checked by the verifier.
//!
//! [`build_vf`] emits the checksum program as an instruction image:
//! an iterated loop that pseudo-randomly reads the buffer containing the
//! program itself, updates a running checksum through a strongly-ordered
//! chain of alternating FMA/ALU shift-and-add instructions, folds in the
//! data pointer, the iteration counter and every accumulator register, and
//! (in self-modifying profiles) rewrites the shift immediate of a
//! `x += x >> N` site from the live checksum each iteration.
//!
//! [`checksum_reference`] is the verifier-side pure recomputation; it
//! mirrors the emitted semantics directly in Rust without touching the
//! codec or the simulator, and must agree with the simulated run
//! bit-for-bit.

mod build;
mod reference;

pub use build::{build_vf, build_vf_with_kernel, thread_init, InnerLoop, VfLayout};
pub use reference::{checksum_reference, reference_outputs};

use crate::device::{
    load_image, run as device_run, DeviceError, ExecMode, JitterRun, RunOptions, RunResult,
};

use crate::device::{DeviceConfig, LaunchConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of accumulator registers beside the checksum, counter and
/// pointer state.
pub const NUM_ACCUMULATORS: usize = 22;

pub mod regs {
    //! Register conventions of the generated program (all 32 consumed).
    pub const C: u8 = 0;
    pub const DP: u8 = 1;
    pub const ITER: u8 = 2;
    pub const DATA: u8 = 3;
    pub const ADDR_MASK: u8 = 4;
    pub const ADDR: u8 = 5;
    pub const PATCH: u8 = 6;
    pub const FLAG: u8 = 7;
    pub const ACC_BASE: u8 = 8; // R8..=R29
    pub const OUT_PACKED: u8 = 30;
    pub const SITE: u8 = 31;
}

#[derive(Debug, Error)]
pub enum VfError {
    #[error("layout overflow: {0}")]
    LayoutOverflow(String),
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("challenge shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Device(#[from] crate::device::DeviceError),
    #[error(transparent)]
    Isa(#[from] crate::isa::IsaError),
}

/// Checksum program parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct VFParams {
    /// Total buffer size in bytes (program + pseudo-random fill). Must be a
    /// power of two so the pseudo-random address can be masked.
    pub buffer_size: u32,
    /// Instructions per logical loop iteration, including loop control.
    pub loop_body_instructions: u32,
    /// Copies of the iteration body emitted per branch.
    pub unroll_factor: u32,
    /// Default iteration count (a challenge may override it).
    pub iterations: u64,
    pub self_modifying: bool,
    /// Inner busy-loop executed once per iteration: trip count and body
    /// size in instructions (0 = no inner loop).
    pub inner_loop_iterations: u64,
    pub inner_loop_instructions: u32,
}

impl Default for VFParams {
    fn default() -> Self {
        VFParams {
            buffer_size: 524_288,
            loop_body_instructions: 428,
            unroll_factor: 1,
            iterations: 100_000,
            self_modifying: false,
            inner_loop_iterations: 0,
            inner_loop_instructions: 0,
        }
    }
}

/// Per-SM challenge seeds plus the iteration count and a session nonce.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Challenge {
    pub seeds: Vec<u64>,
    pub iterations: u64,
    pub nonce: u64,
}

/// A built verification-function image: the buffer bytes plus the layout
/// metadata the verifier needs to recompute the checksum.
#[derive(Debug, Clone)]
pub struct VFImage {
    pub params: VFParams,
    pub fill_seed: u64,
    pub num_sms: u32,
    pub launch: LaunchConfig,
    pub bytes: Vec<u8>,
    pub layout: VfLayout,
}

impl VFImage {
    /// Serializes as a `.vfbin` stream.
    pub fn to_vfbin(&self) -> Vec<u8> {
        crate::isa::write_image(
            &crate::isa::ImageHeader {
                word_count: self.layout.code_words,
                entry_word: self.layout.entry_word,
                buffer_bytes: self.bytes.len() as u32,
            },
            &self.bytes,
        )
    }

    /// Loop-trip declarations for timing-mode runs at `iterations`.
    pub fn hints(&self, iterations: u64) -> Vec<crate::device::LoopHint> {
        let mut hints = vec![crate::device::LoopHint {
            branch_word: self.layout.outer_branch_word,
            target_word: self.layout.entry_word,
            trip: iterations / self.params.unroll_factor as u64,
        }];
        for copy in &self.layout.inner_loops {
            hints.push(crate::device::LoopHint {
                branch_word: copy.branch_word,
                target_word: copy.head_word,
                trip: self.params.inner_loop_iterations,
            });
        }
        hints
    }

    /// Dumps the program as assembly text, one instruction per line.
    pub fn dump_asm(&self) -> Result<String, VfError> {
        use crate::isa::{decode, emit_asm, Word128, WORD_BYTES};
        let mut out = String::new();
        for w in 0..self.layout.code_words as usize {
            let word = Word128::from_bytes(&self.bytes[w * WORD_BYTES..(w + 1) * WORD_BYTES]);
            out.push_str(&emit_asm(&decode(word)?));
            out.push('\n');
        }
        Ok(out)
    }
}

/// Loads the image and executes it under `challenge`. Full mode yields
/// the aggregated checksum; timing mode yields cycle counts only.
pub fn run_vf(
    image: &VFImage,
    challenge: &Challenge,
    device: &DeviceConfig,
    mode: ExecMode,
    jitter: Option<u64>,
) -> Result<RunResult, VfError> {
    if device.num_sms != image.num_sms {
        return Err(VfError::BadParams(format!(
            "image built for {} SMs, device has {}",
            image.num_sms, device.num_sms
        )));
    }
    let total_blocks = image.num_sms * image.launch.blocks_per_sm;
    if mode == ExecMode::Full && image.params.self_modifying && total_blocks != 1 {
        return Err(VfError::Device(DeviceError::Unsupported(
            "self-modifying value runs require a single-block grid; use              timing mode for larger grids"
                .into(),
        )));
    }
    let state = load_image(&image.to_vfbin(), device)?;
    let opts = RunOptions {
        mode,
        launch: image.launch,
        init: if mode == ExecMode::Full {
            Some(thread_init(image, challenge)?)
        } else {
            None
        },
        hints: image.hints(challenge.iterations),
        fast_forward: true,
        out_cells: Some(image.layout.out_base),
        jitter: jitter.map(|seed| JitterRun {
            seed,
            iterations: challenge.iterations,
        }),
        cycle_budget: None,
        extra_warps: None,
    };
    Ok(device_run(&state, &opts)?)
}

/// The patched shift amount: `N = C mod 32`.
pub fn self_modify_shift(c: u64) -> u32 {
    (c & 31) as u32
}

/// Pairwise tree aggregation of per-thread checksums: warp level, then
/// block level, then grid level, all in wrap-around arithmetic. The result
/// is order-independent and equals the flat modular sum.
pub fn aggregate(
    per_thread: &[u64],
    cfg: &DeviceConfig,
    launch: &LaunchConfig,
) -> Result<u64, VfError> {
    let expected = launch.resident_threads(cfg);
    if per_thread.len() as u64 != expected {
        return Err(VfError::ShapeMismatch(format!(
            "{} thread checksums for a {}-thread launch",
            per_thread.len(),
            expected
        )));
    }
    let warp = cfg.warp_size as usize;
    let block = launch.threads_per_block as usize;
    let mut block_sums: Vec<u64> = Vec::new();
    for block_vals in per_thread.chunks(block) {
        let warp_sums: Vec<u64> = block_vals.chunks(warp).map(pairwise_sum).collect();
        block_sums.push(pairwise_sum(&warp_sums));
    }
    Ok(pairwise_sum(&block_sums))
}

fn pairwise_sum(values: &[u64]) -> u64 {
    match values.len() {
        0 => 0,
        1 => values[0],
        _ => {
            let reduced: Vec<u64> = values
                .chunks(2)
                .map(|p| {
                    if p.len() == 2 {
                        p[0].wrapping_add(p[1])
                    } else {
                        p[0]
                    }
                })
                .collect();
            pairwise_sum(&reduced)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo(sms: u32, blocks: u32, threads: u32) -> (DeviceConfig, LaunchConfig) {
        (
            DeviceConfig {
                num_sms: sms,
                ..DeviceConfig::default()
            },
            LaunchConfig {
                blocks_per_sm: blocks,
                threads_per_block: threads,
            },
        )
    }

    #[test]
    fn aggregate_of_ones_counts_threads() {
        let (cfg, launch) = topo(108, 2, 1024);
        let vals = vec![1u64; 221_184];
        assert_eq!(aggregate(&vals, &cfg, &launch).unwrap(), 221_184);
    }

    #[test]
    fn aggregate_single_thread_is_identity() {
        let (cfg, launch) = topo(1, 1, 32);
        let mut vals = vec![0u64; 32];
        vals[0] = 0xDEADBEEF;
        assert_eq!(
            aggregate(&vals, &cfg, &launch).unwrap(),
            0xDEADBEEF,
            "other lanes are zero"
        );
    }

    #[test]
    fn tree_sum_equals_flat_modular_sum() {
        use crate::rng::XorShift64Star;
        let (cfg, launch) = topo(2, 2, 128);
        let mut rng = XorShift64Star::new(99);
        let vals: Vec<u64> = (0..512).map(|_| rng.next_u64()).collect();
        let flat = vals.iter().fold(0u64, |a, v| a.wrapping_add(*v));
        assert_eq!(aggregate(&vals, &cfg, &launch).unwrap(), flat);
    }

    #[test]
    fn aggregate_rejects_wrong_shape() {
        let (cfg, launch) = topo(1, 1, 32);
        assert!(matches!(
            aggregate(&[1, 2, 3], &cfg, &launch),
            Err(VfError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn self_modify_shift_is_mod_32() {
        assert_eq!(self_modify_shift(0), 0);
        assert_eq!(self_modify_shift(0x2A), 10);
        assert_eq!(self_modify_shift(u64::MAX), 31);
    }
}
