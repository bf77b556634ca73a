//! Protocol-level properties: key agreement, tamper detection, timing
//! aborts, payload protection and state-machine safety.

use attest_core::rng::XorShift64Star;
use attest_core::sake::{
    authenticate_kernel, protect_payload, run_protocol, run_protocol_with_secrets,
    unprotect_payload, Channel, DeviceSake, DhGroup, MsgId, ProtectMode, SakeError, TimingPolicy,
    VerifierSake, WireMessage,
};
use num_bigint::BigUint;
use rand::rngs::StdRng;
use rand::SeedableRng;

/// Stand-in checksum for protocol tests: a fast deterministic function of
/// the delivered challenge, so tampering with v2 yields a different value
/// exactly as the real checksum would.
fn stub_checksum(v2: &[u8; 32]) -> u64 {
    let seed = u64::from_le_bytes(v2[..8].try_into().unwrap());
    let mut x = XorShift64Star::new(seed);
    x.next_u64() ^ x.next_u64()
}

fn relaxed_policy() -> TimingPolicy {
    TimingPolicy {
        threshold_cycles: 1_000_000.0,
        slack: 0.05,
    }
}

#[test]
fn honest_run_agrees_on_the_test_group_key() {
    // a = 6, b = 15 in (p=23, g=5): v0 = 8, k = 19, shared key = 2
    let group = DhGroup::test_group();
    let mut channel = Channel::default();
    let (sk_v, sk_d) = run_protocol_with_secrets(
        &group,
        BigUint::from(6u32),
        BigUint::from(15u32),
        vec![0xAB, 0xCD],
        &mut |v2| (stub_checksum(v2), 1000),
        stub_checksum,
        relaxed_policy(),
        &mut channel,
    )
    .unwrap();
    assert_eq!(sk_v, vec![2u8]);
    assert_eq!(sk_d, vec![2u8]);
    assert_eq!(channel.transcript.len(), 6);
    assert!(channel.transcript_json().contains("W2Mac"));
}

#[test]
fn honest_runs_agree_on_the_production_group() {
    let group = DhGroup::modp_2048();
    let mut vr = StdRng::seed_from_u64(1);
    let mut dr = StdRng::seed_from_u64(2);
    let mut channel = Channel::default();
    let (sk_v, sk_d) = run_protocol(
        &group,
        &mut vr,
        &mut dr,
        |v2| (stub_checksum(v2), 1000),
        stub_checksum,
        relaxed_policy(),
        &mut channel,
    )
    .unwrap();
    assert_eq!(sk_v, sk_d);
    assert_eq!(sk_v.len(), 256);
}

#[test]
fn chain_values_are_hash_consistent_by_construction() {
    use attest_core::sake::sha256;
    let group = DhGroup::test_group();
    let (vs, m_v2) = VerifierSake::start_with_exponent(
        &group,
        BigUint::from(6u32),
        0,
        relaxed_policy(),
    );
    // v2 = H(H(v0)) with v0 = 5^6 mod 23 = 8
    let v0 = vec![8u8];
    assert_eq!(vs.v2().to_vec(), sha256(&sha256(&v0)).to_vec());
    assert_eq!(m_v2.payload, vs.v2().to_vec());
}

#[test]
fn device_chain_is_reproducible_and_mac_binds_the_checksum() {
    use attest_core::sake::{aes_cmac, cmac_verify, mac_key};
    let group = DhGroup::test_group();
    let c = 0x1122_3344_5566_7788u64;
    let (_, m1) = DeviceSake::respond_with_secrets(
        &group,
        [7u8; 32],
        c,
        vec![1, 2],
        BigUint::from(15u32),
    );
    let (_, m2) = DeviceSake::respond_with_secrets(
        &group,
        [7u8; 32],
        c,
        vec![1, 2],
        BigUint::from(15u32),
    );
    assert_eq!(m1, m2, "fixed (c, r) reproduces the commitment");

    let w2: [u8; 32] = m1.payload[..32].try_into().unwrap();
    let tag = &m1.payload[32..48];
    assert!(cmac_verify(&mac_key(&c.to_le_bytes()), &w2, tag));
    // under a flipped checksum the MAC must fail
    let wrong = mac_key(&(c ^ 1).to_le_bytes());
    assert_ne!(aes_cmac(&wrong, &w2).to_vec(), tag.to_vec());
}

#[test]
fn tampering_any_message_aborts_before_agreement() {
    // exhaustive over the six messages and the first 64 payload bits
    let group = DhGroup::modp_2048();
    for (n, id) in [
        MsgId::V2,
        MsgId::W2Mac,
        MsgId::V1,
        MsgId::W1K,
        MsgId::V0,
        MsgId::W0,
    ]
    .into_iter()
    .enumerate()
    {
        for bit in 0..64u32 {
            let mut channel = Channel {
                tamper: Some(Box::new(move |mid, bytes: &mut Vec<u8>| {
                    if mid == id {
                        // flip inside the payload, after the 5-byte header
                        let idx = 5 + (bit / 8) as usize;
                        bytes[idx] ^= 1 << (bit % 8);
                    }
                })),
                ..Channel::default()
            };
            let mut vr = StdRng::seed_from_u64(100 + n as u64);
            let mut dr = StdRng::seed_from_u64(200 + n as u64);
            let res = run_protocol(
                &group,
                &mut vr,
                &mut dr,
                |v2| (stub_checksum(v2), 1000),
                stub_checksum,
                relaxed_policy(),
                &mut channel,
            );
            match res {
                Err(
                    SakeError::AbortChainMismatch(_)
                    | SakeError::AbortMac(_)
                    | SakeError::Malformed(_),
                ) => {}
                other => panic!("tamper {id:?} bit {bit} not caught: {other:?}"),
            }
        }
    }
}

#[test]
fn delayed_response_aborts_on_timing() {
    let group = DhGroup::test_group();
    let policy = TimingPolicy {
        threshold_cycles: 1000.0,
        slack: 0.05,
    };
    let mut channel = Channel {
        delay_cycles: 600, // 1000 run + 2x600 delay > 1050 limit
        ..Channel::default()
    };
    let mut vr = StdRng::seed_from_u64(1);
    let mut dr = StdRng::seed_from_u64(2);
    let res = run_protocol(
        &group,
        &mut vr,
        &mut dr,
        |v2| (stub_checksum(v2), 1000),
        stub_checksum,
        policy,
        &mut channel,
    );
    assert!(
        matches!(res, Err(SakeError::AbortTiming { .. })),
        "{res:?}"
    );
}

#[test]
fn forged_macs_without_the_checksum_never_verify() {
    use attest_core::sake::{cmac_verify, mac_key};
    // an adversary who does not know c cannot produce an accepted MAC:
    // random tags over 1e5 attempts never verify
    let c = 0xDEAD_BEEF_0BAD_F00Du64;
    let key = mac_key(&c.to_le_bytes());
    let w2 = [0x5Au8; 32];
    let mut rng = XorShift64Star::new(77);
    for _ in 0..100_000 {
        let mut tag = [0u8; 16];
        for b in tag.iter_mut() {
            *b = rng.next_u64() as u8;
        }
        assert!(!cmac_verify(&key, &w2, &tag));
    }
}

#[test]
fn out_of_order_reveals_are_state_errors() {
    let group = DhGroup::test_group();
    let (mut ds, _) = DeviceSake::respond_with_secrets(
        &group,
        [1u8; 32],
        42,
        vec![9],
        BigUint::from(15u32),
    );
    // v0 before v1 is a protocol violation
    let v0 = WireMessage {
        id: MsgId::V0,
        payload: vec![8],
    };
    assert!(matches!(
        ds.receive_v0(&v0),
        Err(SakeError::StateMachine(_))
    ));
}

#[test]
fn kernel_authenticity_hash() {
    // H(r || code) with r = 32 zero bytes and empty code is the SHA-256
    // of 32 zero bytes
    let h = authenticate_kernel(&[0u8; 32], &[]);
    assert_eq!(
        hex::encode(h),
        "66687aadf862bd776c8fc18b8e9f8e20089714856ee233b3902a591d0d5f2925"
    );
    // any single-bit flip in the code changes the hash
    let code = b"kernel bytes".to_vec();
    let base = authenticate_kernel(&[0u8; 32], &code);
    for byte in 0..code.len() {
        for bit in 0..8 {
            let mut flipped = code.clone();
            flipped[byte] ^= 1 << bit;
            assert_ne!(authenticate_kernel(&[0u8; 32], &flipped), base);
        }
    }
    // deterministic
    assert_eq!(authenticate_kernel(&[0u8; 32], &code), base);
}

#[test]
fn payload_protection_roundtrip_and_tamper_detection() {
    let sk = vec![0x42u8; 32];
    let mut rng = StdRng::seed_from_u64(3);
    for mode in [ProtectMode::Authenticate, ProtectMode::EncryptAuthenticate] {
        for len in [0usize, 1, 15, 16, 17, 100] {
            let data: Vec<u8> = (0..len).map(|i| i as u8).collect();
            let blob = protect_payload(&sk, &data, mode, &mut rng);
            assert_eq!(unprotect_payload(&sk, &blob).unwrap(), data);
            if !blob.is_empty() {
                let mut bad = blob.clone();
                let idx = bad.len() / 2;
                bad[idx] ^= 1;
                assert!(matches!(
                    unprotect_payload(&sk, &bad),
                    Err(SakeError::TagMismatch)
                ));
            }
        }
    }
    // ciphertext actually hides the data
    let blob = protect_payload(&sk, b"secret", ProtectMode::EncryptAuthenticate, &mut rng);
    assert!(!blob.windows(6).any(|w| w == b"secret"));
}
