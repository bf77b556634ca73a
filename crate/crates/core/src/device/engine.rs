//! The cycle-stepping execution engine.

use super::{DeviceConfig, DeviceError, LaunchConfig, MachineState, RunResult, StallBreakdown};
use crate::isa::{self, Instruction, Opcode, Operand, Word128, WORD_BYTES};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Binomial, Distribution};
use std::collections::VecDeque;
use std::sync::Arc;

pub const ICACHE_LINE_BYTES: usize = 128;
const WORDS_PER_LINE: u32 = (ICACHE_LINE_BYTES / WORD_BYTES) as u32;

/// Execution fidelity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Interpret every lane; branches follow predicate registers.
    Full,
    /// Scheduling only; branches follow loop hints, long loops are
    /// fast-forwarded once the schedule is periodic.
    Timing,
}

/// Trip-count declaration for a branch, used by timing mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopHint {
    /// Word index of the backward branch closing the loop.
    pub branch_word: u32,
    /// Word index of the loop head (branch target).
    pub target_word: u32,
    /// Number of times the loop body executes.
    pub trip: u64,
}

/// Per-run jitter: a seed and the iteration count controlling the sampled
/// interference tax.
#[derive(Debug, Clone, Copy)]
pub struct JitterRun {
    pub seed: u64,
    pub iterations: u64,
}

/// Coordinates identifying one thread of the launch.
#[derive(Debug, Clone, Copy)]
pub struct ThreadCoord {
    pub sm: u32,
    pub block_in_sm: u32,
    pub global_block: u32,
    pub warp_in_block: u32,
    pub lane: u32,
    pub thread_in_block: u32,
    pub global_thread: u64,
}

/// Produces the initial register file of a thread.
pub type ThreadInit = Arc<dyn Fn(&ThreadCoord) -> [u64; 32] + Send + Sync>;

#[derive(Clone)]
pub struct RunOptions {
    pub mode: ExecMode,
    pub launch: LaunchConfig,
    /// Initial register values; zero when absent.
    pub init: Option<ThreadInit>,
    /// Loop trip declarations for timing mode.
    pub hints: Vec<LoopHint>,
    /// Enable steady-state fast-forward (timing mode only).
    pub fast_forward: bool,
    /// Byte address of the per-SM output cell window (8 bytes per SM).
    pub out_cells: Option<u64>,
    /// Jitter seed and iteration count; `None` runs deterministically.
    pub jitter: Option<JitterRun>,
    /// Overrides the config cycle budget when set.
    pub cycle_budget: Option<u64>,
    /// Additional warps per SM competing for issue slots (resource
    /// takeover): entry point and count. They do not belong to any block
    /// and the run ends when the primary warps retire.
    pub extra_warps: Option<(u32, u32)>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            mode: ExecMode::Full,
            launch: LaunchConfig::default(),
            init: None,
            hints: Vec::new(),
            fast_forward: true,
            out_cells: None,
            jitter: None,
            cycle_budget: None,
            extra_warps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pipe {
    Fma = 0,
    Alu = 1,
    Mem = 2,
    Ctrl = 3,
}

fn pipe_of(op: Opcode) -> Pipe {
    use Opcode::*;
    match op {
        Imad => Pipe::Fma,
        LeaHi | ShfL | ShfR | LopXor | LopAnd | Iadd | Mov | Lepc => Pipe::Alu,
        Ldg | Stg | Stc | AtomAdd | Icinv => Pipe::Mem,
        BarSync | Bra | Nop => Pipe::Ctrl,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Blocked {
    Icache,
    Memory,
    Pipeline,
}

#[derive(Debug, Clone)]
struct CachedLine {
    decoded: Vec<Option<Instruction>>,
}

#[derive(Debug, Clone)]
struct ICache {
    capacity_lines: usize,
    lines: Vec<Option<CachedLine>>, // indexed by line id
    fifo: VecDeque<u32>,
    pending: Option<(u32, u64)>, // (line, ready cycle)
}

impl ICache {
    fn new(capacity_lines: usize, total_lines: usize) -> Self {
        ICache {
            capacity_lines: capacity_lines.max(1),
            lines: vec![None; total_lines],
            fifo: VecDeque::new(),
            pending: None,
        }
    }

    fn resident(&self, line: u32) -> bool {
        self.lines
            .get(line as usize)
            .map(|l| l.is_some())
            .unwrap_or(false)
    }

    fn invalidate_all(&mut self) {
        for l in self.lines.iter_mut() {
            *l = None;
        }
        self.fifo.clear();
        self.pending = None;
    }

    fn complete_pending(&mut self, now: u64, mem: &[u8]) {
        if let Some((line, ready)) = self.pending {
            if now >= ready {
                self.pending = None;
                self.insert(line, mem);
            }
        }
    }

    fn insert(&mut self, line: u32, mem: &[u8]) {
        let base = line as usize * ICACHE_LINE_BYTES;
        let mut decoded = Vec::with_capacity(WORDS_PER_LINE as usize);
        for w in 0..WORDS_PER_LINE as usize {
            let off = base + w * WORD_BYTES;
            if off + WORD_BYTES <= mem.len() {
                let word = Word128::from_bytes(&mem[off..off + WORD_BYTES]);
                decoded.push(isa::decode(word).ok());
            } else {
                decoded.push(None);
            }
        }
        self.lines[line as usize] = Some(CachedLine { decoded });
        self.fifo.push_back(line);
        while self.fifo.len() > self.capacity_lines {
            let evicted = self.fifo.pop_front().unwrap();
            self.lines[evicted as usize] = None;
        }
    }

    fn instruction(&self, pc: u32) -> Option<Instruction> {
        let line = pc / WORDS_PER_LINE;
        self.lines[line as usize]
            .as_ref()
            .and_then(|l| l.decoded[(pc % WORDS_PER_LINE) as usize])
    }
}

#[derive(Debug, Clone)]
struct Warp {
    pc: u32,
    retired: bool,
    /// Earliest cycle the next instruction may issue (control stall window).
    next_issue: u64,
    /// Issue cycle + 1 per pipe; 0 = never issued.
    last_pipe_issue: [u64; 4],
    reg_ready: [u64; 32],
    /// Bit set when the last producer of the register was a memory load.
    mem_pending: u32,
    barrier_signal: [u64; 6],
    bar_waiting: bool,
    loop_counts: Vec<u64>,
    lanes: Vec<[u64; 32]>, // empty in timing mode
    extra: bool,
}

impl Warp {
    fn live(&self) -> bool {
        !self.retired
    }
}

struct SmSim<'a> {
    cfg: &'a DeviceConfig,
    opts: &'a RunOptions,
    // mem and warps are owned; everything else borrows the run inputs
    mem: Vec<u8>,
    code_words: u32,
    warps: Vec<Warp>,
    warps_per_block: u32,
    icache: ICache,
    bar_arrived: Vec<u32>,
    rr_cursor: usize,
    cycle: u64,
    issued: u64,
    stalls: StallBreakdown,
    mem_rng: Option<ChaCha12Rng>,
    detector: Option<Detector>,
    trace: bool,
}

struct Detector {
    anchor: u32,
    outer_hint: usize,
    armed: bool,
    done: bool,
    jumped: bool,
    probes: u32,
    last: Option<(Snapshot, u64, Stats, Vec<Vec<u64>>)>,
}

#[derive(PartialEq, Eq, Clone)]
struct Snapshot(Vec<u64>);

#[derive(Clone, Copy)]
struct Stats {
    issued: u64,
    stalls: StallBreakdown,
}

enum Classify {
    Issueable(Instruction),
    Latent(u64),
    BlockedUntil(Blocked, u64),
    BlockedUnknown(Blocked),
    Retired,
}

impl<'a> SmSim<'a> {
    fn new(state: &'a MachineState, opts: &'a RunOptions, sm: u32) -> Result<Self, DeviceError> {
        let cfg = &state.config;
        let launch = &opts.launch;
        let warps_per_block = launch.warps_per_block(cfg);
        let n_warps = launch.warps_per_sm(cfg) as usize;
        let total_lines = state.buffer.len().div_ceil(ICACHE_LINE_BYTES);
        let mut warps = Vec::with_capacity(n_warps);
        for w in 0..n_warps as u32 {
            let block_in_sm = w / warps_per_block;
            let warp_in_block = w % warps_per_block;
            let lanes = if opts.mode == ExecMode::Full {
                let mut lanes = Vec::with_capacity(cfg.warp_size as usize);
                for lane in 0..cfg.warp_size {
                    let coord = ThreadCoord {
                        sm,
                        block_in_sm,
                        global_block: sm * launch.blocks_per_sm + block_in_sm,
                        warp_in_block,
                        lane,
                        thread_in_block: warp_in_block * cfg.warp_size + lane,
                        global_thread: (sm as u64 * launch.blocks_per_sm as u64
                            + block_in_sm as u64)
                            * launch.threads_per_block as u64
                            + (warp_in_block * cfg.warp_size + lane) as u64,
                    };
                    lanes.push(match &opts.init {
                        Some(f) => f(&coord),
                        None => [0u64; 32],
                    });
                }
                lanes
            } else {
                Vec::new()
            };
            warps.push(Warp {
                pc: state.entry_word,
                retired: state.entry_word >= state.code_words,
                next_issue: 0,
                last_pipe_issue: [0; 4],
                reg_ready: [0; 32],
                mem_pending: 0,
                barrier_signal: [0; 6],
                bar_waiting: false,
                loop_counts: vec![0; opts.hints.len()],
                lanes,
                extra: false,
            });
        }
        if let Some((entry, count)) = opts.extra_warps {
            if launch.warps_per_sm(cfg) + count > cfg.max_warps_per_sm {
                return Err(DeviceError::BadConfig(format!(
                    "takeover warps exceed SM capacity: {} + {count}",
                    launch.warps_per_sm(cfg)
                )));
            }
            for _ in 0..count {
                warps.push(Warp {
                    pc: entry,
                    retired: entry >= state.code_words,
                    next_issue: 0,
                    last_pipe_issue: [0; 4],
                    reg_ready: [0; 32],
                    mem_pending: 0,
                    barrier_signal: [0; 6],
                    bar_waiting: false,
                    loop_counts: vec![0; opts.hints.len()],
                    lanes: if opts.mode == ExecMode::Full {
                        vec![[0u64; 32]; cfg.warp_size as usize]
                    } else {
                        Vec::new()
                    },
                    extra: true,
                });
            }
        }
        let detector = if opts.mode == ExecMode::Timing
            && opts.fast_forward
            && !opts.hints.is_empty()
            && !(cfg.mem_jitter.is_some() && opts.jitter.is_some())
        {
            let (outer_hint, outer) = opts
                .hints
                .iter()
                .enumerate()
                .max_by_key(|(_, h)| h.branch_word)
                .unwrap();
            Some(Detector {
                anchor: outer.target_word,
                outer_hint,
                armed: true,
                done: false,
                jumped: false,
                probes: 0,
                last: None,
            })
        } else {
            None
        };
        let mem_rng = match (cfg.mem_jitter, opts.jitter) {
            (Some(_), Some(j)) => Some(ChaCha12Rng::seed_from_u64(j.seed ^ 0x6d656d5f6a6974)),
            _ => None,
        };
        // the image arrives through the cache hierarchy: the front of the
        // code region starts resident, up to cache capacity
        let capacity = cfg.l2_icache_bytes as usize / ICACHE_LINE_BYTES;
        let mut icache = ICache::new(capacity, total_lines);
        let code_lines =
            (state.code_words as usize * WORD_BYTES).div_ceil(ICACHE_LINE_BYTES);
        for line in 0..code_lines.min(capacity).min(total_lines) {
            icache.insert(line as u32, &state.buffer);
        }
        Ok(SmSim {
            cfg,
            opts,
            mem: state.buffer.clone(),
            code_words: state.code_words,
            warps,
            warps_per_block,
            icache,
            bar_arrived: vec![0; launch.blocks_per_sm as usize],
            rr_cursor: 0,
            cycle: 0,
            issued: 0,
            stalls: StallBreakdown::default(),
            mem_rng,
            detector,
            trace: std::env::var_os("ATTEST_TRACE").is_some(),
        })
    }

    fn dispatch_latency(&self, pipe: Pipe) -> u64 {
        match pipe {
            Pipe::Fma => self.cfg.fma_dispatch_latency as u64,
            Pipe::Alu => self.cfg.alu_dispatch_latency as u64,
            Pipe::Mem | Pipe::Ctrl => 1,
        }
    }

    fn mem_latency(&mut self) -> u64 {
        match (self.cfg.mem_jitter, &mut self.mem_rng) {
            (Some([lo, hi]), Some(rng)) => rng.gen_range(lo..=hi) as u64,
            _ => self.cfg.global_mem_latency as u64,
        }
    }

    fn classify(&mut self, w: usize) -> Result<Classify, DeviceError> {
        let warp = &self.warps[w];
        if warp.retired {
            return Ok(Classify::Retired);
        }
        if warp.bar_waiting {
            return Ok(Classify::BlockedUnknown(Blocked::Pipeline));
        }
        if self.cycle < warp.next_issue {
            return Ok(Classify::Latent(warp.next_issue));
        }
        if warp.pc >= self.code_words {
            // fell past the code region: retires without issuing
            self.warps[w].retired = true;
            return Ok(Classify::Retired);
        }
        let line = warp.pc / WORDS_PER_LINE;
        if !self.icache.resident(line) {
            match self.icache.pending {
                Some((_, ready)) => return Ok(Classify::BlockedUntil(Blocked::Icache, ready)),
                None => {
                    let ready = self.cycle + self.cfg.icache_fetch_penalty as u64;
                    self.icache.pending = Some((line, ready));
                    return Ok(Classify::BlockedUntil(Blocked::Icache, ready));
                }
            }
        }
        let pc = warp.pc;
        let instr = self.icache.instruction(pc).ok_or(DeviceError::Trap {
            pc,
            reason: "illegal instruction".into(),
        })?;
        let warp = &self.warps[w];
        // wait barriers (variable-latency producers)
        let mut until: u64 = 0;
        for b in 0..6 {
            if instr.control.wait_barrier_mask & (1 << b) != 0 {
                until = until.max(warp.barrier_signal[b]);
            }
        }
        if until > self.cycle {
            return Ok(Classify::BlockedUntil(Blocked::Memory, until));
        }
        // source and predicate register readiness
        let mut regs: Vec<u8> = Vec::new();
        if let Some(p) = instr.predicate {
            regs.push(p.reg);
        }
        for s in instr.srcs() {
            if let Operand::Reg(r) = s {
                regs.push(*r);
            }
        }
        for &r in &regs {
            let ready = warp.reg_ready[r as usize];
            if ready > self.cycle {
                let cause = if warp.mem_pending & (1 << r) != 0 {
                    Blocked::Memory
                } else {
                    Blocked::Pipeline
                };
                return Ok(Classify::BlockedUntil(cause, ready));
            }
        }
        // dispatch port
        let pipe = pipe_of(instr.opcode);
        let last_plus1 = warp.last_pipe_issue[pipe as usize];
        if last_plus1 > 0 {
            let free = (last_plus1 - 1) + self.dispatch_latency(pipe);
            if free > self.cycle {
                return Ok(Classify::BlockedUntil(Blocked::Pipeline, free));
            }
        }
        Ok(Classify::Issueable(instr))
    }

    fn lane_operand(&self, warp: usize, lane: usize, op: &Operand, opcode: Opcode) -> u64 {
        match op {
            Operand::Reg(r) => self.warps[warp].lanes[lane][*r as usize],
            Operand::Imm(v) => {
                if opcode == Opcode::Iadd {
                    *v as i32 as i64 as u64
                } else {
                    *v as u64
                }
            }
        }
    }

    fn lane_active(&self, warp: usize, lane: usize, instr: &Instruction) -> bool {
        match instr.predicate {
            None => true,
            Some(p) => {
                let v = self.warps[warp].lanes[lane][p.reg as usize] & 1 == 1;
                v != p.negate
            }
        }
    }

    fn uniform_active(&self, warp: usize, instr: &Instruction, pc: u32) -> Result<bool, DeviceError> {
        let first = self.lane_active(warp, 0, instr);
        for lane in 1..self.cfg.warp_size as usize {
            if self.lane_active(warp, lane, instr) != first {
                return Err(DeviceError::Trap {
                    pc,
                    reason: "divergent predicate on uniform-control instruction".into(),
                });
            }
        }
        Ok(first)
    }

    fn load_u32(&self, addr: u64, pc: u32) -> Result<u64, DeviceError> {
        if addr % 4 != 0 || addr + 4 > self.mem.len() as u64 {
            return Err(DeviceError::Trap {
                pc,
                reason: format!("bad load address {addr:#x}"),
            });
        }
        let a = addr as usize;
        Ok(u32::from_le_bytes(self.mem[a..a + 4].try_into().unwrap()) as u64)
    }

    fn store_u32(&mut self, addr: u64, value: u32, pc: u32) -> Result<(), DeviceError> {
        if addr % 4 != 0 || addr + 4 > self.mem.len() as u64 {
            return Err(DeviceError::Trap {
                pc,
                reason: format!("bad store address {addr:#x}"),
            });
        }
        let a = addr as usize;
        self.mem[a..a + 4].copy_from_slice(&value.to_le_bytes());
        Ok(())
    }

    fn atom_add_u64(&mut self, addr: u64, value: u64, pc: u32) -> Result<(), DeviceError> {
        if addr % 8 != 0 || addr + 8 > self.mem.len() as u64 {
            return Err(DeviceError::Trap {
                pc,
                reason: format!("bad atomic address {addr:#x}"),
            });
        }
        let a = addr as usize;
        let old = u64::from_le_bytes(self.mem[a..a + 8].try_into().unwrap());
        self.mem[a..a + 8].copy_from_slice(&old.wrapping_add(value).to_le_bytes());
        Ok(())
    }

    /// Executes one issued instruction for warp `w` at the current cycle.
    fn issue(&mut self, w: usize, instr: Instruction) -> Result<(), DeviceError> {
        use Opcode::*;
        let pc = self.warps[w].pc;
        let now = self.cycle;
        let full = self.opts.mode == ExecMode::Full;
        let n_lanes = self.cfg.warp_size as usize;
        self.issued += 1;

        let mut next_pc = pc + 1;
        let mut dst_ready: Option<(u8, u64, bool)> = None; // (reg, ready, mem)

        match instr.opcode {
            Nop => {}
            Icinv => self.icache.invalidate_all(),
            BarSync => {
                if self.warps[w].extra {
                    return Err(DeviceError::Trap {
                        pc,
                        reason: "takeover warps have no block barrier".into(),
                    });
                }
                let block = w as u32 / self.warps_per_block;
                self.bar_arrived[block as usize] += 1;
                if self.bar_arrived[block as usize] == self.warps_per_block {
                    self.bar_arrived[block as usize] = 0;
                    let lo = (block * self.warps_per_block) as usize;
                    let hi = lo + self.warps_per_block as usize;
                    for other in lo..hi {
                        self.warps[other].bar_waiting = false;
                    }
                } else {
                    self.warps[w].bar_waiting = true;
                }
            }
            Bra => {
                let target = match instr.srcs()[0] {
                    Operand::Imm(t) => t,
                    Operand::Reg(_) => {
                        return Err(DeviceError::Trap {
                            pc,
                            reason: "register branch target unsupported".into(),
                        })
                    }
                };
                let hint_idx = self
                    .opts
                    .hints
                    .iter()
                    .position(|h| h.branch_word == pc);
                let taken = if full {
                    match instr.predicate {
                        None => true,
                        Some(_) => self.uniform_active(w, &instr, pc)?,
                    }
                } else if let Some(idx) = hint_idx {
                    let hint = self.opts.hints[idx];
                    let count = &mut self.warps[w].loop_counts[idx];
                    *count += 1;
                    *count % hint.trip != 0
                } else if instr.predicate.is_none() {
                    true
                } else {
                    return Err(DeviceError::Unsupported(format!(
                        "predicated branch at pc {pc} has no loop hint in timing mode"
                    )));
                };
                if full {
                    if let Some(idx) = hint_idx {
                        self.warps[w].loop_counts[idx] += 1;
                    }
                }
                if taken {
                    next_pc = target;
                }
            }
            _ if full => {
                // lane-level semantics
                match instr.opcode {
                    Imad | LeaHi | ShfL | ShfR | LopXor | LopAnd | Iadd | Mov | Lepc => {
                        for lane in 0..n_lanes {
                            if !self.lane_active(w, lane, &instr) {
                                continue;
                            }
                            let s: Vec<u64> = instr
                                .srcs()
                                .iter()
                                .map(|op| self.lane_operand(w, lane, op, instr.opcode))
                                .collect();
                            let v = match instr.opcode {
                                Imad => s[0].wrapping_mul(s[1]).wrapping_add(s[2]),
                                LeaHi => s[0].wrapping_add(s[1] >> (s[2] & 63)),
                                ShfL => s[0] << (s[1] & 63),
                                ShfR => s[0] >> (s[1] & 63),
                                LopXor => s[0] ^ s[1],
                                LopAnd => s[0] & s[1],
                                Iadd => s[0].wrapping_add(s[1]),
                                Mov => s[0],
                                Lepc => pc as u64,
                                _ => unreachable!(),
                            };
                            self.warps[w].lanes[lane][instr.dst as usize] = v;
                        }
                        dst_ready = Some((
                            instr.dst,
                            now + self.cfg.raw_dependency_latency as u64,
                            false,
                        ));
                    }
                    Ldg => {
                        let latency = self.mem_latency();
                        for lane in 0..n_lanes {
                            if !self.lane_active(w, lane, &instr) {
                                continue;
                            }
                            let addr = self.lane_operand(w, lane, &instr.srcs()[0], Ldg);
                            let v = self.load_u32(addr, pc)?;
                            self.warps[w].lanes[lane][instr.dst as usize] = v;
                        }
                        let ready = now + latency + 1;
                        dst_ready = Some((instr.dst, ready, true));
                        if instr.control.write_barrier < 6 {
                            self.warps[w].barrier_signal
                                [instr.control.write_barrier as usize] = ready;
                        }
                    }
                    Stg => {
                        for lane in 0..n_lanes {
                            if !self.lane_active(w, lane, &instr) {
                                continue;
                            }
                            let addr = self.lane_operand(w, lane, &instr.srcs()[0], Stg);
                            let v = self.lane_operand(w, lane, &instr.srcs()[1], Stg);
                            self.store_u32(addr, v as u32, pc)?;
                        }
                    }
                    AtomAdd => {
                        for lane in 0..n_lanes {
                            if !self.lane_active(w, lane, &instr) {
                                continue;
                            }
                            let addr = self.lane_operand(w, lane, &instr.srcs()[0], AtomAdd);
                            let v = self.lane_operand(w, lane, &instr.srcs()[1], AtomAdd);
                            self.atom_add_u64(addr, v, pc)?;
                        }
                    }
                    Stc => {
                        // store-to-code: lane 0 supplies address and value,
                        // the patch must be warp-uniform
                        if self.uniform_active(w, &instr, pc)? {
                            let target =
                                self.lane_operand(w, 0, &instr.srcs()[0], Stc);
                            let value =
                                self.lane_operand(w, 0, &instr.srcs()[1], Stc) as u32;
                            if target >= self.code_words as u64 {
                                return Err(DeviceError::Trap {
                                    pc,
                                    reason: format!("store-to-code beyond code region: {target}"),
                                });
                            }
                            let off = target as usize * WORD_BYTES;
                            let word =
                                Word128::from_bytes(&self.mem[off..off + WORD_BYTES]);
                            let patched = isa::patch_immediate(word, value);
                            self.mem[off..off + WORD_BYTES]
                                .copy_from_slice(&patched.to_bytes());
                        }
                    }
                    _ => unreachable!(),
                }
            }
            _ => {
                // timing mode: structural effects only
                let (_, has_dst) = instr.opcode.shape();
                match instr.opcode {
                    Ldg => {
                        let latency = self.mem_latency();
                        let ready = now + latency + 1;
                        dst_ready = Some((instr.dst, ready, true));
                        if instr.control.write_barrier < 6 {
                            self.warps[w].barrier_signal
                                [instr.control.write_barrier as usize] = ready;
                        }
                    }
                    _ if has_dst => {
                        dst_ready = Some((
                            instr.dst,
                            now + self.cfg.raw_dependency_latency as u64,
                            false,
                        ));
                    }
                    _ => {}
                }
            }
        }

        let warp = &mut self.warps[w];
        if let Some((reg, ready, is_mem)) = dst_ready {
            warp.reg_ready[reg as usize] = ready;
            if is_mem {
                warp.mem_pending |= 1 << reg;
            } else {
                warp.mem_pending &= !(1 << reg);
            }
        }
        // spilled register accesses pay the shared-memory latency
        let mut spill = 0u64;
        let ceiling = self.cfg.regs_per_thread.min(32) as u8;
        let mut touched: Vec<u8> = Vec::new();
        let (_, has_dst) = instr.opcode.shape();
        if has_dst {
            touched.push(instr.dst);
        }
        for s in instr.srcs() {
            if let Operand::Reg(r) = s {
                touched.push(*r);
            }
        }
        for r in touched {
            if r >= ceiling {
                spill += self.cfg.shared_mem_latency as u64;
            }
        }
        let pipe = pipe_of(instr.opcode);
        warp.last_pipe_issue[pipe as usize] = now + 1;
        warp.next_issue = now + (instr.control.stall_cycles as u64).max(1) + spill;
        warp.pc = next_pc;
        if warp.pc >= self.code_words {
            warp.retired = true;
        }
        Ok(())
    }

    fn snapshot(&self, exclude_hint: usize) -> (Snapshot, Vec<Vec<u64>>) {
        let c = self.cycle;
        let mut sig: Vec<u64> = Vec::with_capacity(self.warps.len() * 48);
        let rel = |t: u64| t.saturating_sub(c);
        for w in &self.warps {
            sig.push(w.pc as u64);
            sig.push(w.retired as u64);
            sig.push(w.bar_waiting as u64);
            sig.push(rel(w.next_issue));
            for p in 0..4 {
                sig.push((c + 1).saturating_sub(w.last_pipe_issue[p]).min(16));
            }
            for r in 0..32 {
                sig.push(rel(w.reg_ready[r]));
            }
            sig.push(w.mem_pending as u64);
            for b in 0..6 {
                sig.push(rel(w.barrier_signal[b]));
            }
            // the outer counter advances monotonically across periods and
            // is what the jump extrapolates; inner counters are phase state
            for (k, (h, cnt)) in self.opts.hints.iter().zip(&w.loop_counts).enumerate() {
                if k != exclude_hint {
                    sig.push(cnt % h.trip.max(1));
                }
            }
        }
        for b in &self.bar_arrived {
            sig.push(*b as u64);
        }
        sig.push(self.rr_cursor as u64);
        for l in &self.icache.fifo {
            sig.push(*l as u64 + 1);
        }
        sig.push(u64::MAX); // fifo terminator
        match self.icache.pending {
            Some((line, ready)) => {
                sig.push(line as u64 + 1);
                sig.push(rel(ready));
            }
            None => sig.push(0),
        }
        let counts = self.warps.iter().map(|w| w.loop_counts.clone()).collect();
        (Snapshot(sig), counts)
    }

    /// Jumps the machine `periods` periods forward.
    fn apply_jump(
        &mut self,
        periods: u64,
        period_cycles: u64,
        stat_delta: (u64, StallBreakdown),
        count_delta: &[Vec<u64>],
    ) {
        let shift = periods.checked_mul(period_cycles).unwrap_or_else(|| {
            panic!("jump overflow: periods={periods} period_cycles={period_cycles}")
        });
        self.cycle += shift;
        self.issued += periods * stat_delta.0;
        self.stalls.icache += periods * stat_delta.1.icache;
        self.stalls.memory += periods * stat_delta.1.memory;
        self.stalls.pipeline += periods * stat_delta.1.pipeline;
        self.stalls.none += periods * stat_delta.1.none;
        for (w, deltas) in self.warps.iter_mut().zip(count_delta) {
            w.next_issue += shift;
            for p in 0..4 {
                if w.last_pipe_issue[p] > 0 {
                    w.last_pipe_issue[p] += shift;
                }
            }
            for r in 0..32 {
                w.reg_ready[r] += shift;
            }
            for b in 0..6 {
                w.barrier_signal[b] += shift;
            }
            for (cnt, d) in w.loop_counts.iter_mut().zip(deltas) {
                *cnt += periods * d;
            }
        }
        if let Some((_, ready)) = &mut self.icache.pending {
            *ready += shift;
        }
    }

    fn try_detect(&mut self) {
        let Some(det) = self.detector.take() else {
            return;
        };
        if det.done {
            self.detector = Some(det);
            return;
        }
        let (sig, counts) = self.snapshot(det.outer_hint);
        let stats = Stats {
            issued: self.issued,
            stalls: self.stalls,
        };
        let mut det = det;
        if let Some((prev_sig, prev_cycle, prev_stats, prev_counts)) = &det.last {
            if *prev_sig == sig {
                let period = self.cycle - prev_cycle;
                let stat_delta = (
                    stats.issued - prev_stats.issued,
                    StallBreakdown {
                        icache: stats.stalls.icache - prev_stats.stalls.icache,
                        memory: stats.stalls.memory - prev_stats.stalls.memory,
                        pipeline: stats.stalls.pipeline - prev_stats.stalls.pipeline,
                        none: stats.stalls.none - prev_stats.stalls.none,
                    },
                );
                let count_delta: Vec<Vec<u64>> = counts
                    .iter()
                    .zip(prev_counts)
                    .map(|(now, before)| {
                        now.iter().zip(before).map(|(n, b)| n - b).collect()
                    })
                    .collect();
                // how many whole periods fit before any hinted loop is near
                // its trip count (two-period guard before the exit)
                let mut periods = u64::MAX;
                for (w, deltas) in counts.iter().zip(&count_delta) {
                    for ((cnt, d), hint) in
                        w.iter().zip(deltas).zip(self.opts.hints.iter())
                    {
                        if *d == 0 {
                            continue;
                        }
                        let remaining = hint.trip.saturating_sub(*cnt);
                        let guard = 2 * d;
                        let fit = remaining.saturating_sub(guard) / d;
                        periods = periods.min(fit);
                    }
                }
                if period > 0 && periods != u64::MAX && periods > 0 {
                    self.apply_jump(periods, period, stat_delta, &count_delta);
                    det.jumped = true;
                }
                det.done = true;
                det.last = None;
            } else {
                det.last = Some((sig, self.cycle, stats, counts));
            }
        } else {
            det.last = Some((sig, self.cycle, stats, counts));
        }
        det.probes += 1;
        self.detector = Some(det);
    }

    fn run(&mut self) -> Result<(), DeviceError> {
        let budget = self.opts.cycle_budget.unwrap_or(self.cfg.cycle_budget);
        let width = self.cfg.sched_width as usize;
        loop {
            if self.warps.iter().all(|w| w.extra || !w.live()) {
                return Ok(());
            }
            if self.cycle > budget {
                return Err(DeviceError::NonTermination(budget));
            }
            if self.trace && self.cycle % 500_000 == 0 {
                eprintln!(
                    "trace: cycle={} issued={} pc0={} probes={:?}",
                    self.cycle,
                    self.issued,
                    self.warps[0].pc,
                    self.detector.as_ref().map(|d| d.probes)
                );
            }
            self.icache.complete_pending(self.cycle, &self.mem);

            let n = self.warps.len();
            let mut issueable: Vec<(usize, Instruction)> = Vec::new();
            let mut blocked: Vec<(usize, Blocked)> = Vec::new();
            let mut next_event: u64 = u64::MAX;
            for i in 0..n {
                match self.classify(i)? {
                    Classify::Issueable(instr) => issueable.push((i, instr)),
                    Classify::Latent(t) => next_event = next_event.min(t),
                    Classify::BlockedUntil(cause, t) => {
                        blocked.push((i, cause));
                        next_event = next_event.min(t);
                    }
                    Classify::BlockedUnknown(cause) => blocked.push((i, cause)),
                    Classify::Retired => {}
                }
            }

            if issueable.is_empty() {
                if blocked.is_empty() && next_event == u64::MAX {
                    return Ok(()); // everything retired between checks
                }
                if next_event == u64::MAX {
                    return Err(DeviceError::Trap {
                        pc: self.warps.iter().find(|w| w.live()).map(|w| w.pc).unwrap_or(0),
                        reason: "block barrier deadlock".into(),
                    });
                }
                let delta = next_event.saturating_sub(self.cycle).max(1);
                for (_, cause) in &blocked {
                    match cause {
                        Blocked::Icache => self.stalls.icache += delta,
                        Blocked::Memory => self.stalls.memory += delta,
                        Blocked::Pipeline => self.stalls.pipeline += delta,
                    }
                }
                self.cycle += delta;
                continue;
            }

            // round-robin pick of up to `width` issueable warps
            issueable.sort_by_key(|(i, _)| {
                (n + i - self.rr_cursor % n) % n
            });
            let selected: Vec<(usize, Instruction)> =
                issueable.iter().take(width).cloned().collect();
            let unselected = issueable.len().saturating_sub(width) as u64;
            self.stalls.none += unselected;
            for (_, cause) in &blocked {
                match cause {
                    Blocked::Icache => self.stalls.icache += 1,
                    Blocked::Memory => self.stalls.memory += 1,
                    Blocked::Pipeline => self.stalls.pipeline += 1,
                }
            }
            let mut anchor_hit = false;
            let anchor = self.detector.as_ref().map(|d| (d.armed, d.anchor));
            if let Some((last, _)) = selected.last().map(|(i, _)| (*i, ())) {
                self.rr_cursor = (last + 1) % n;
            }
            for (i, instr) in selected {
                if let Some((true, a)) = anchor {
                    if i == 0 && self.warps[0].pc == a {
                        anchor_hit = true;
                    }
                }
                self.issue(i, instr)?;
            }
            self.cycle += 1;
            if anchor_hit {
                self.try_detect();
            }
        }
    }
}

fn xorshift_mix(mut x: u64) -> u64 {
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    x.wrapping_mul(0x2545F4914F6CDD1D)
}

/// Executes the loaded machine. In full mode every SM is simulated and
/// the per-SM output cells are collected; in timing mode one
/// representative SM is simulated (launches are SM-symmetric) and outputs
/// are absent.
pub fn run(state: &MachineState, opts: &RunOptions) -> Result<RunResult, DeviceError> {
    let cfg = &state.config;
    cfg.validate()?;
    opts.launch.validate(cfg)?;

    let sms_to_simulate = match opts.mode {
        ExecMode::Full => cfg.num_sms,
        ExecMode::Timing => 1,
    };
    let mut per_sm_cycles: Vec<u64> = Vec::new();
    let mut per_sm_outputs: Vec<u64> = Vec::new();
    let mut issued = 0u64;
    let mut stalls = StallBreakdown::default();
    let mut fast_forwarded = false;
    for sm in 0..sms_to_simulate {
        let mut sim = SmSim::new(state, opts, sm)?;
        sim.run()?;
        fast_forwarded |= sim.detector.as_ref().map(|d| d.jumped).unwrap_or(false);
        per_sm_cycles.push(sim.cycle);
        issued = sim.issued;
        stalls = sim.stalls;
        if opts.mode == ExecMode::Full {
            if let Some(base) = opts.out_cells {
                let addr = base as usize + sm as usize * 8;
                if addr + 8 <= sim.mem.len() {
                    per_sm_outputs.push(u64::from_le_bytes(
                        sim.mem[addr..addr + 8].try_into().unwrap(),
                    ));
                }
            }
        }
    }
    let deterministic_cycles = per_sm_cycles.iter().copied().max().unwrap_or(0);
    let mut total = deterministic_cycles;
    if let Some(j) = opts.jitter {
        total += sample_jitter_tax(cfg, j.seed, j.iterations);
    }
    let checksum = if opts.mode == ExecMode::Full && opts.out_cells.is_some() {
        Some(
            per_sm_outputs
                .iter()
                .fold(0u64, |acc, v| acc.wrapping_add(*v)),
        )
    } else {
        None
    };
    let utilization = if deterministic_cycles == 0 {
        0.0
    } else {
        issued as f64 / (deterministic_cycles as f64 * cfg.sched_width as f64)
    };
    Ok(RunResult {
        total_cycles: total,
        per_sm_outputs,
        checksum,
        issued_per_sm: issued,
        stalls,
        utilization,
        deterministic_cycles,
        fast_forwarded,
    })
}

/// Samples the per-run interference tax that jittered runs add to the
/// deterministic cycle count: a binomial draw over the iteration count.
pub fn sample_jitter_tax(cfg: &DeviceConfig, seed: u64, iterations: u64) -> u64 {
    if cfg.iter_jitter_prob <= 0.0 || iterations == 0 {
        return 0;
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dist = Binomial::new(iterations, cfg.iter_jitter_prob).expect("valid parameters");
    dist.sample(&mut rng) * cfg.iter_jitter_cycles as u64
}

/// Convenience: xorshift64* mix used for deterministic seed expansion.
pub fn seed_mix(a: u64, b: u64) -> u64 {
    let x = a ^ b.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    xorshift_mix(if x == 0 { 0x9E3779B97F4A7C15 } else { x })
}
