//! Simulated accelerator topology and latency parameters.

use super::DeviceError;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Topology, latency and cache parameters of the simulated accelerator.
/// Defaults model a 108-SM part with 64-warp SMs, quad-issue schedulers
/// and dual FMA/ALU dispatch ports.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DeviceConfig {
    pub num_sms: u32,
    pub max_warps_per_sm: u32,
    pub warp_size: u32,
    /// Warps issued per SM per cycle.
    pub sched_width: u32,
    pub regs_per_sm: u32,
    pub regs_per_thread: u32,
    /// Minimum cycles between two same-pipeline issues of one warp.
    pub fma_dispatch_latency: u32,
    pub alu_dispatch_latency: u32,
    /// Minimum producer-to-consumer distance for register results.
    pub raw_dependency_latency: u32,
    /// Deterministic global-memory load latency in cycles.
    pub global_mem_latency: u32,
    pub register_access_latency: u32,
    /// Extra cycles paid per access to a spilled register.
    pub shared_mem_latency: u32,
    /// Reserved: the instruction-cache model is a single level sized by
    /// `l2_icache_bytes`; this knob exists for profile compatibility and
    /// has no effect.
    pub l0_icache_words: u32,
    pub l2_icache_bytes: u32,
    /// Cycles to fetch one 128-byte instruction line on a miss.
    pub icache_fetch_penalty: u32,
    /// Cycle budget after which a run is aborted as non-terminating.
    pub cycle_budget: u64,
    pub max_image_bytes: u32,
    /// Clock used to convert cycles to seconds in wall-clock displays.
    pub clock_ghz: f64,
    /// Optional per-access memory latency range `[lo, hi]`, drawn uniformly
    /// when a run provides a jitter seed. Bounded overhead in this range is
    /// hidden by the scheduler for compliant loop bodies.
    pub mem_jitter: Option<[u32; 2]>,
    /// Probability per checksum iteration of an unhideable scheduling
    /// hiccup (interference noise), applied when a run provides a jitter
    /// seed.
    pub iter_jitter_prob: f64,
    /// Cycles lost per jitter hiccup.
    pub iter_jitter_cycles: u32,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            num_sms: 108,
            max_warps_per_sm: 64,
            warp_size: 32,
            sched_width: 4,
            regs_per_sm: 65_536,
            regs_per_thread: 32,
            fma_dispatch_latency: 2,
            alu_dispatch_latency: 2,
            raw_dependency_latency: 4,
            global_mem_latency: 250,
            register_access_latency: 4,
            shared_mem_latency: 30,
            l0_icache_words: 1024,
            l2_icache_bytes: 131_072,
            icache_fetch_penalty: 55,
            cycle_budget: 1_000_000_000,
            max_image_bytes: 64 << 20,
            clock_ghz: 1.41,
            mem_jitter: None,
            iter_jitter_prob: 0.02,
            iter_jitter_cycles: 8,
        }
    }
}

impl DeviceConfig {
    pub fn validate(&self) -> Result<(), DeviceError> {
        let positive = [
            self.num_sms,
            self.max_warps_per_sm,
            self.warp_size,
            self.sched_width,
            self.regs_per_sm,
            self.regs_per_thread,
            self.fma_dispatch_latency,
            self.alu_dispatch_latency,
            self.raw_dependency_latency,
            self.global_mem_latency,
            self.register_access_latency,
            self.shared_mem_latency,
            self.l2_icache_bytes,
            self.icache_fetch_penalty,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(DeviceError::BadConfig(
                "all latency and topology parameters must be positive".into(),
            ));
        }
        if self.regs_per_thread as u64 * self.warp_size as u64 * self.max_warps_per_sm as u64
            > self.regs_per_sm as u64
        {
            return Err(DeviceError::BadConfig(format!(
                "register file overcommitted: {} regs/thread x {} lanes x {} warps > {}",
                self.regs_per_thread, self.warp_size, self.max_warps_per_sm, self.regs_per_sm
            )));
        }
        if let Some([lo, hi]) = self.mem_jitter {
            if lo > hi || lo == 0 {
                return Err(DeviceError::BadConfig("bad mem_jitter range".into()));
            }
        }
        if !(0.0..1.0).contains(&self.iter_jitter_prob) {
            return Err(DeviceError::BadConfig("iter_jitter_prob must be in [0,1)".into()));
        }
        Ok(())
    }

    /// Loads a profile from TOML (`.toml`) or JSON (anything else).
    pub fn from_file(path: &Path) -> Result<Self, DeviceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DeviceError::BadConfig(format!("{}: {e}", path.display())))?;
        let cfg: DeviceConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| DeviceError::BadConfig(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| DeviceError::BadConfig(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Grid shape of a kernel launch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct LaunchConfig {
    pub blocks_per_sm: u32,
    pub threads_per_block: u32,
}

impl Default for LaunchConfig {
    fn default() -> Self {
        LaunchConfig {
            blocks_per_sm: 2,
            threads_per_block: 1024,
        }
    }
}

impl LaunchConfig {
    pub fn warps_per_block(&self, cfg: &DeviceConfig) -> u32 {
        self.threads_per_block / cfg.warp_size
    }

    pub fn warps_per_sm(&self, cfg: &DeviceConfig) -> u32 {
        self.blocks_per_sm * self.warps_per_block(cfg)
    }

    pub fn resident_threads(&self, cfg: &DeviceConfig) -> u64 {
        cfg.num_sms as u64 * self.blocks_per_sm as u64 * self.threads_per_block as u64
    }

    pub fn validate(&self, cfg: &DeviceConfig) -> Result<(), DeviceError> {
        if self.blocks_per_sm == 0 || self.threads_per_block == 0 {
            return Err(DeviceError::BadConfig("empty launch".into()));
        }
        if self.threads_per_block % cfg.warp_size != 0 {
            return Err(DeviceError::BadConfig(
                "threads per block must be a multiple of the warp size".into(),
            ));
        }
        if self.warps_per_sm(cfg) > cfg.max_warps_per_sm {
            return Err(DeviceError::BadConfig(format!(
                "launch needs {} warps/SM, device supports {}",
                self.warps_per_sm(cfg),
                cfg.max_warps_per_sm
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        DeviceConfig::default().validate().unwrap();
    }

    #[test]
    fn default_launch_fills_the_device() {
        let cfg = DeviceConfig::default();
        let launch = LaunchConfig::default();
        launch.validate(&cfg).unwrap();
        // 2 blocks x 1024 threads x 108 SMs
        assert_eq!(launch.resident_threads(&cfg), 221_184);
        assert_eq!(launch.warps_per_sm(&cfg), 64);
    }

    #[test]
    fn overcommitted_registers_rejected() {
        let cfg = DeviceConfig {
            regs_per_thread: 33,
            ..DeviceConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
