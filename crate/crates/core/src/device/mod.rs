//! Deterministic cycle-counting simulator of a many-SM accelerator.
//!
//! The machine executes `.vfbin` images under a round-robin warp scheduler:
//! each cycle every SM issues up to `sched_width` ready warps, one
//! instruction each. A warp is ready when it is past the control-field
//! stall window of its previous instruction, its instruction line is
//! resident in the SM's instruction cache, its wait barriers have been
//! signalled, its source registers are readable and its target pipeline's
//! dispatch port is free.
//!
//! Two execution modes share the scheduling engine:
//!
//! * [`ExecMode::Full`] interprets every lane of every warp and produces
//!   output values. Branches follow real predicate registers.
//! * [`ExecMode::Timing`] tracks scheduling state only. Predicated
//!   branches follow declared [`LoopHint`]s, which also enables the
//!   steady-state fast-forward for long loops. Cycle counts are identical
//!   to full mode for hint-consistent programs.
//!
//! Runs are pure functions of (image, config, options): repeated runs of
//! the same machine state give bit-identical results and cycle counts.

mod config;
mod engine;
mod state;

pub use config::{DeviceConfig, LaunchConfig};
pub use engine::{run, sample_jitter_tax, seed_mix, ExecMode, JitterRun, LoopHint, RunOptions, ThreadCoord, ThreadInit, ICACHE_LINE_BYTES};
pub use state::{load_image, ImmField, MachineState};

use crate::isa::IsaError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("bad image magic")]
    BadMagic,
    #[error("image too large: {0} bytes (limit {1})")]
    ImageTooLarge(usize, usize),
    #[error("image malformed: {0}")]
    BadImage(IsaError),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("trap at pc {pc}: {reason}")]
    Trap { pc: u32, reason: String },
    #[error("program exceeded cycle budget of {0}")]
    NonTermination(u64),
    #[error("address {0:#x} out of range")]
    OutOfRange(u64),
    #[error("word at {0} has no immediate operand to patch")]
    NotAnImmediate(u32),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// Stall cycles partitioned by cause. `none` counts cycles where a warp
/// was ready but lost scheduler arbitration; the other three are real
/// blockages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StallBreakdown {
    /// Instruction line not resident.
    pub icache: u64,
    /// Waiting on a memory barrier or a load result.
    pub memory: u64,
    /// Read-after-write distance, dispatch-port conflict or block barrier.
    pub pipeline: u64,
    /// Ready but not selected (issue-width contention).
    pub none: u64,
}

impl StallBreakdown {
    pub fn total(&self) -> u64 {
        self.icache + self.memory + self.pipeline + self.none
    }

    /// Stall cycles from real blockages (excludes arbitration losses).
    pub fn blocked(&self) -> u64 {
        self.icache + self.memory + self.pipeline
    }
}

/// Outcome of a completed run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    /// Total simulated cycles until the last warp retired, including any
    /// sampled jitter tax.
    pub total_cycles: u64,
    /// Per-SM output cell values (empty when no output window was declared
    /// or in timing mode).
    pub per_sm_outputs: Vec<u64>,
    /// Wrap-around sum of the per-SM outputs; `None` in timing mode.
    pub checksum: Option<u64>,
    /// Instructions issued per SM.
    pub issued_per_sm: u64,
    /// Stall-cycle breakdown summed over all warps of one SM.
    pub stalls: StallBreakdown,
    /// Fraction of issue slots filled: `issued / (cycles * sched_width)`.
    pub utilization: f64,
    /// Cycles before the jitter tax was added.
    pub deterministic_cycles: u64,
    /// Whether the steady-state fast-forward engaged.
    pub fast_forwarded: bool,
}

impl RunResult {
    pub fn seconds(&self, cfg: &DeviceConfig) -> f64 {
        self.total_cycles as f64 / (cfg.clock_ghz * 1e9)
    }
}

/// Stall accounting view over a [`RunResult`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StallReport {
    pub icache: u64,
    pub memory: u64,
    pub pipeline: u64,
    pub none: u64,
    pub total: u64,
    /// `icache / (icache + memory + pipeline)`, 0 when there were no
    /// blocked cycles.
    pub icache_share_of_blocked: f64,
}

/// Partitions the stall cycles of a completed run.
pub fn stall_report(result: &RunResult) -> StallReport {
    let s = &result.stalls;
    let blocked = s.blocked();
    StallReport {
        icache: s.icache,
        memory: s.memory,
        pipeline: s.pipeline,
        none: s.none,
        total: s.total(),
        icache_share_of_blocked: if blocked == 0 {
            0.0
        } else {
            s.icache as f64 / blocked as f64
        },
    }
}
