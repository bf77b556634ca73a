use attest_core::device::{stall_report, DeviceConfig, ExecMode, LaunchConfig};
use attest_core::vf::{build_vf, run_vf, Challenge, VFParams};
use std::time::Instant;

fn main() {
    let mut dev = DeviceConfig::default();
    if let Ok(p) = std::env::var("PENALTY") {
        dev.icache_fetch_penalty = p.parse().unwrap();
    }
    let lc = LaunchConfig::default();
    let ch = |i: u64| Challenge {
        seeds: (0..108).map(|s| s + 1).collect(),
        iterations: i,
        nonce: 0,
    };

    let p1 = VFParams::default();
    let img1 = build_vf(&p1, 1, &dev, &lc).unwrap();
    let t = Instant::now();
    let r1 = run_vf(&img1, &ch(100_000), &dev, ExecMode::Timing, None).unwrap();
    println!(
        "exp1: cycles={} util={:.4} ff={} wall={:?}",
        r1.total_cycles,
        r1.utilization,
        r1.fast_forwarded,
        t.elapsed()
    );

    let p3 = VFParams {
        loop_body_instructions: 8342,
        iterations: 1000,
        self_modifying: true,
        ..VFParams::default()
    };
    let img3 = build_vf(&p3, 1, &dev, &lc).unwrap();
    let t = Instant::now();
    let r3 = run_vf(&img3, &ch(1000), &dev, ExecMode::Timing, None).unwrap();
    let rep = stall_report(&r3);
    println!(
        "exp3: cycles={} util={:.4} icache_share={:.4} ff={} wall={:?}",
        r3.total_cycles,
        r3.utilization,
        rep.icache_share_of_blocked,
        r3.fast_forwarded,
        t.elapsed()
    );
    println!(
        "exp3 stalls: icache={} mem={} pipe={} none={}",
        rep.icache, rep.memory, rep.pipeline, rep.none
    );
}
