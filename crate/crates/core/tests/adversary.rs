//! Detection characteristics of every attack variant.

use attest_core::adversary::{
    apply_attack, attacked_checksum, evaluate, AttackSpec, ChecksumOutcome,
};
use attest_core::device::{DeviceConfig, LaunchConfig};
use attest_core::rng::XorShift64Star;
use attest_core::verifier::{calibrate, VerdictReason};
use attest_core::vf::{build_vf, checksum_reference, Challenge, VFParams};

fn challenge(seed: u64, sms: u32, iterations: u64) -> Challenge {
    let mut rng = XorShift64Star::new(seed);
    Challenge {
        seeds: (0..sms).map(|_| rng.next_u64()).collect(),
        iterations,
        nonce: seed,
    }
}

fn small_full_device() -> DeviceConfig {
    DeviceConfig {
        num_sms: 1,
        ..DeviceConfig::default()
    }
}

fn plain_params() -> VFParams {
    VFParams {
        buffer_size: 65_536,
        loop_body_instructions: 96,
        iterations: 1000,
        ..VFParams::default()
    }
}

fn selfmod_device() -> DeviceConfig {
    DeviceConfig {
        num_sms: 1,
        l2_icache_bytes: 2048,
        ..DeviceConfig::default()
    }
}

fn selfmod_params() -> VFParams {
    VFParams {
        buffer_size: 65_536,
        loop_body_instructions: 160, // 2560 B > 2048 B cache
        iterations: 1000,
        self_modifying: true,
        ..VFParams::default()
    }
}

#[test]
fn nop_injection_grows_the_body_and_costs_cycles() {
    let dev = small_full_device();
    let lc = LaunchConfig::default();
    let img = build_vf(&plain_params(), 3, &dev, &lc).unwrap();
    let atk = apply_attack(&img, &AttackSpec::NopInject { count: 1 }).unwrap();
    assert_eq!(atk.image.layout.body_words, img.layout.body_words + 1);

    let ch = challenge(10, 1, 1000);
    let model = calibrate(&img, &dev, &ch, 40, Some(77)).unwrap();
    let rep = evaluate(&img, &atk, &dev, &ch, &model, 100, 5).unwrap();
    // one extra issue slot per iteration across 64 warps at width 4
    assert!(rep.attacked_cycles >= rep.honest_cycles + ch.iterations);
    assert!(rep.detected, "{rep:?}");
    assert_eq!(rep.rejected_trials, 100);
    assert_eq!(rep.reason, VerdictReason::Timeout);
    assert!(rep.checksum_correct);
}

#[test]
fn nop_injection_overhead_is_monotone_in_count() {
    let dev = small_full_device();
    let lc = LaunchConfig::default();
    let img = build_vf(&plain_params(), 3, &dev, &lc).unwrap();
    let ch = challenge(10, 1, 200);
    let model = calibrate(&img, &dev, &ch, 30, Some(77)).unwrap();
    let mut last = 0u64;
    for count in [1u32, 2, 4, 8] {
        let atk = apply_attack(&img, &AttackSpec::NopInject { count }).unwrap();
        let rep = evaluate(&img, &atk, &dev, &ch, &model, 1, 5).unwrap();
        let overhead = rep.attacked_cycles - rep.honest_cycles;
        assert!(overhead >= count as u64 * ch.iterations);
        assert!(overhead > last);
        last = overhead;
    }
}

#[test]
fn data_substitution_pays_two_instructions_per_load() {
    let dev = small_full_device();
    let lc = LaunchConfig::default();
    let img = build_vf(&plain_params(), 3, &dev, &lc).unwrap();
    let atk = apply_attack(
        &img,
        &AttackSpec::DataSubstitution {
            modified_words: vec![100],
        },
    )
    .unwrap();
    assert_eq!(atk.image.layout.body_words, img.layout.body_words + 2);

    let ch = challenge(11, 1, 1000);
    let model = calibrate(&img, &dev, &ch, 40, Some(78)).unwrap();
    let rep = evaluate(&img, &atk, &dev, &ch, &model, 100, 6).unwrap();
    assert!(rep.attacked_cycles >= rep.honest_cycles + 2 * ch.iterations);
    assert!(rep.detected);
    assert!(rep.checksum_correct);
}

#[test]
fn memcopy_b_checksum_is_correct_but_shadowing_costs_time() {
    // single-block grid so the value run is exact
    let dev = selfmod_device();
    let lc = LaunchConfig {
        blocks_per_sm: 1,
        threads_per_block: 128,
    };
    let img = build_vf(&selfmod_params(), 9, &dev, &lc).unwrap();
    let atk = apply_attack(&img, &AttackSpec::MemcopyB).unwrap();
    assert_eq!(atk.checksum_outcome, ChecksumOutcome::Correct);

    // the attacked device really does produce the honest checksum: reads
    // go to the pristine copy and patches are shadowed into it
    let ch = challenge(21, 1, 60);
    let expected = checksum_reference(&img, &ch).unwrap();
    let got = attacked_checksum(&atk, &ch, &dev).unwrap();
    assert_eq!(got, expected, "memcopy_b must forge a correct value");

    // and the shadow patching shows up in time
    let ch_t = challenge(22, 1, 1000);
    let model = calibrate(&img, &dev, &ch_t, 40, Some(79)).unwrap();
    let rep = evaluate(&img, &atk, &dev, &ch_t, &model, 100, 7).unwrap();
    assert!(
        rep.attacked_cycles > rep.honest_cycles,
        "shadowing must cost cycles"
    );
    assert!(rep.detected, "{rep:?}");
    assert_eq!(rep.reason, VerdictReason::Timeout);
}

#[test]
fn memcopy_c_diverges_from_the_measured_region() {
    let dev = selfmod_device();
    let lc = LaunchConfig {
        blocks_per_sm: 1,
        threads_per_block: 128,
    };
    let img = build_vf(&selfmod_params(), 9, &dev, &lc).unwrap();
    let atk = apply_attack(&img, &AttackSpec::MemcopyC).unwrap();
    assert_eq!(atk.checksum_outcome, ChecksumOutcome::Wrong);

    let ch = challenge(31, 1, 60);
    let expected = checksum_reference(&img, &ch).unwrap();
    let got = attacked_checksum(&atk, &ch, &dev).unwrap();
    assert_ne!(
        got, expected,
        "executing a relocated copy must break the checksum"
    );
}

#[test]
fn memcopy_c_without_self_modification_goes_undetected() {
    // the gap the self-modifying site exists to close: a pure relocation
    // of a non-self-modifying checksum is value-exact
    let dev = small_full_device();
    let lc = LaunchConfig {
        blocks_per_sm: 1,
        threads_per_block: 128,
    };
    let img = build_vf(&plain_params(), 9, &dev, &lc).unwrap();
    let atk = apply_attack(&img, &AttackSpec::MemcopyC).unwrap();
    assert_eq!(atk.checksum_outcome, ChecksumOutcome::Correct);
    let ch = challenge(32, 1, 60);
    let expected = checksum_reference(&img, &ch).unwrap();
    let got = attacked_checksum(&atk, &ch, &dev).unwrap();
    assert_eq!(got, expected);
}

#[test]
fn memcopy_d_relocated_pointer_breaks_the_checksum() {
    let dev = selfmod_device();
    let lc = LaunchConfig {
        blocks_per_sm: 1,
        threads_per_block: 128,
    };
    let img = build_vf(&selfmod_params(), 9, &dev, &lc).unwrap();
    let atk = apply_attack(&img, &AttackSpec::MemcopyD).unwrap();
    assert_eq!(atk.checksum_outcome, ChecksumOutcome::Wrong);
    assert_ne!(atk.image.layout.dp_value, 0);

    let ch = challenge(41, 1, 60);
    let expected = checksum_reference(&img, &ch).unwrap();
    let got = attacked_checksum(&atk, &ch, &dev).unwrap();
    assert_ne!(got, expected);
}

#[test]
fn proxy_latency_exceeds_the_threshold() {
    let dev = small_full_device();
    let lc = LaunchConfig::default();
    let img = build_vf(&plain_params(), 3, &dev, &lc).unwrap();
    let ch = challenge(51, 1, 1000);
    let model = calibrate(&img, &dev, &ch, 40, Some(80)).unwrap();
    let margin = (model.threshold - model.mean).ceil() as u64 + 1;
    let atk = apply_attack(
        &img,
        &AttackSpec::Proxy {
            extra_latency: margin,
        },
    )
    .unwrap();
    let rep = evaluate(&img, &atk, &dev, &ch, &model, 100, 8).unwrap();
    assert!(rep.detected);
    assert_eq!(rep.reason, VerdictReason::Timeout);
}

#[test]
fn parallel_takeover_defers_the_checksum_warps() {
    let dev = DeviceConfig {
        num_sms: 1,
        max_warps_per_sm: 68, // leaves room for the takeover warps
        regs_per_sm: 68 * 32 * 32,
        ..DeviceConfig::default()
    };
    let lc = LaunchConfig::default(); // 64 checksum warps
    let img = build_vf(&plain_params(), 3, &dev, &lc).unwrap();
    let ch = challenge(61, 1, 1000);
    let model = calibrate(&img, &dev, &ch, 40, Some(81)).unwrap();
    let atk = apply_attack(&img, &AttackSpec::ParallelTakeover { warps: 4 }).unwrap();
    let rep = evaluate(&img, &atk, &dev, &ch, &model, 100, 9).unwrap();
    // 68 warps share slots that 64 filled before: ~6% slower
    assert!(rep.attacked_cycles > rep.honest_cycles + ch.iterations);
    assert!(rep.detected, "{rep:?}");
    assert_eq!(rep.reason, VerdictReason::Timeout);
}

#[test]
fn toctou_swap_corrupts_the_attested_image() {
    use attest_core::isa::{ControlInfo, Instruction, Opcode, Operand};
    use attest_core::vf::build_vf_with_kernel;
    let dev = small_full_device();
    let lc = LaunchConfig {
        blocks_per_sm: 1,
        threads_per_block: 128,
    };
    let kernel = vec![Instruction::new(
        Opcode::Iadd,
        3,
        &[Operand::Reg(4), Operand::Imm(1)],
        ControlInfo::stall(1),
    )];
    let img = build_vf_with_kernel(&plain_params(), 3, &dev, &lc, &kernel).unwrap();
    let atk = apply_attack(&img, &AttackSpec::ToctouSwap).unwrap();
    assert_eq!(atk.checksum_outcome, ChecksumOutcome::Wrong);

    // the swapped kernel word sits in the measured region: the checksum
    // over the attacked image differs from the attested one
    let ch = challenge(71, 1, 400);
    let expected = checksum_reference(&img, &ch).unwrap();
    let got = attacked_checksum(&atk, &ch, &dev).unwrap();
    assert_ne!(got, expected);

    // and the kernel hash no longer matches
    use attest_core::sake::authenticate_kernel;
    let r = [9u8; 32];
    let entry = img.layout.kernel_entry.unwrap() as usize * 16;
    let honest_code = &img.bytes[entry..entry + 16];
    let swapped_code = &atk.image.bytes[entry..entry + 16];
    assert_ne!(
        authenticate_kernel(&r, honest_code),
        authenticate_kernel(&r, swapped_code)
    );
}

#[test]
fn replayed_responses_are_stale() {
    let dev = small_full_device();
    let lc = LaunchConfig::default();
    let img = build_vf(&plain_params(), 3, &dev, &lc).unwrap();
    let ch = challenge(81, 1, 1000);
    let model = calibrate(&img, &dev, &ch, 40, Some(82)).unwrap();
    let atk = apply_attack(&img, &AttackSpec::PrecomputeReplay).unwrap();
    let rep = evaluate(&img, &atk, &dev, &ch, &model, 100, 10).unwrap();
    assert!(rep.detected);
    assert_eq!(rep.reason, VerdictReason::StaleNonce);
}

#[test]
fn honest_runs_pass_the_calibrated_verifier() {
    use attest_core::device::sample_jitter_tax;
    use attest_core::rng::seed_mix;
    use attest_core::vf::run_vf;
    let dev = small_full_device();
    let lc = LaunchConfig::default();
    let img = build_vf(&plain_params(), 3, &dev, &lc).unwrap();
    let ch = challenge(91, 1, 1000);
    let model = calibrate(&img, &dev, &ch, 100, Some(83)).unwrap();
    let base = run_vf(&img, &ch, &dev, attest_core::device::ExecMode::Timing, None)
        .unwrap()
        .total_cycles;
    let mut accepted = 0;
    let trials = 1000;
    for t in 0..trials {
        let elapsed = base + sample_jitter_tax(&dev, seed_mix(999, t), ch.iterations);
        if (elapsed as f64) <= model.threshold {
            accepted += 1;
        }
    }
    // nominal false-positive rate is ~0.5%
    assert!(accepted >= 980, "only {accepted}/{trials} accepted");
}
