//! Key establishment between the verifier and the device.
//!
//! The attestation checksum serves as a short-lived shared secret: the
//! device commits to a hash chain rooted in the checksum and a fresh
//! random value, the verifier commits to a chain rooted in its ephemeral
//! public key, and both sides disclose their chains step by step
//! (commit-then-reveal), each reveal checked against the previously
//! received successor. The final key is plain modular Diffie-Hellman:
//!
//! ```text
//! V: v0 = g^a mod p   v1 = H(v0)   v2 = H(v1)
//! [t0]  V -> D: v2                       (challenge)
//! D: c = checksum(v2), w0 = H(c || r), w1 = H(w0), w2 = H(w1)
//! [t1]  D -> V: w2, MAC_c(w2)
//! V: abort unless t1 - t0 within the calibrated bound
//! D: k = g^b mod p
//! V -> D: v1          D -> V: w1, k, MAC_w2(k)
//! V -> D: v0          D -> V: w0
//! sk = k^a = v0^b = g^ab mod p
//! ```

mod crypto;

pub use crypto::{aes_cmac, aes_ctr, cmac_verify, mac_key, sha256, sha256_concat, DhGroup};

use num_bigint::BigUint;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SakeError {
    #[error("timing abort: elapsed {elapsed} exceeds limit {limit}")]
    AbortTiming { elapsed: u64, limit: u64 },
    #[error("hash-chain mismatch on {0}")]
    AbortChainMismatch(&'static str),
    #[error("MAC verification failed on {0}")]
    AbortMac(&'static str),
    #[error("malformed message: {0}")]
    Malformed(&'static str),
    #[error("protocol state violation: {0}")]
    StateMachine(&'static str),
    #[error("authentication tag mismatch")]
    TagMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MsgId {
    V2,
    W2Mac,
    V1,
    W1K,
    V0,
    W0,
}

/// A protocol message in wire form: type byte, little-endian length,
/// payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub id: MsgId,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.payload.len());
        out.push(match self.id {
            MsgId::V2 => 0,
            MsgId::W2Mac => 1,
            MsgId::V1 => 2,
            MsgId::W1K => 3,
            MsgId::V0 => 4,
            MsgId::W0 => 5,
        });
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SakeError> {
        if bytes.len() < 5 {
            return Err(SakeError::Malformed("short frame"));
        }
        let id = match bytes[0] {
            0 => MsgId::V2,
            1 => MsgId::W2Mac,
            2 => MsgId::V1,
            3 => MsgId::W1K,
            4 => MsgId::V0,
            5 => MsgId::W0,
            _ => return Err(SakeError::Malformed("unknown message type")),
        };
        let len = u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize;
        if bytes.len() != 5 + len {
            return Err(SakeError::Malformed("length mismatch"));
        }
        Ok(WireMessage {
            id,
            payload: bytes[5..].to_vec(),
        })
    }
}

/// Expected-time policy for the challenge/response round: the calibrated
/// detection threshold plus a fixed protocol slack.
#[derive(Debug, Clone, Copy)]
pub struct TimingPolicy {
    pub threshold_cycles: f64,
    pub slack: f64,
}

impl TimingPolicy {
    pub fn limit(&self) -> u64 {
        (self.threshold_cycles * (1.0 + self.slack)) as u64
    }
}

impl Default for TimingPolicy {
    fn default() -> Self {
        TimingPolicy {
            threshold_cycles: f64::MAX,
            slack: 0.05,
        }
    }
}

/// Message channel with optional adversarial tampering and added delay.
/// The tamper hook operates on serialized frames.
pub struct Channel {
    pub tamper: Option<Box<dyn FnMut(MsgId, &mut Vec<u8>)>>,
    pub delay_cycles: u64,
    pub transcript: Vec<TranscriptEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TranscriptEntry {
    pub id: MsgId,
    pub from_verifier: bool,
    pub bytes_hex: String,
}

impl Default for Channel {
    fn default() -> Self {
        Channel {
            tamper: None,
            delay_cycles: 0,
            transcript: Vec::new(),
        }
    }
}

impl Channel {
    pub fn deliver(
        &mut self,
        msg: &WireMessage,
        from_verifier: bool,
    ) -> Result<WireMessage, SakeError> {
        let mut bytes = msg.to_bytes();
        if let Some(t) = &mut self.tamper {
            t(msg.id, &mut bytes);
        }
        self.transcript.push(TranscriptEntry {
            id: msg.id,
            from_verifier,
            bytes_hex: bytes.iter().map(|b| format!("{b:02x}")).collect(),
        });
        WireMessage::from_bytes(&bytes)
    }

    pub fn transcript_json(&self) -> String {
        serde_json::to_string_pretty(&self.transcript).unwrap_or_default()
    }
}

fn expect_len(payload: &[u8], len: usize, what: &'static str) -> Result<(), SakeError> {
    if payload.len() != len {
        return Err(SakeError::Malformed(what));
    }
    Ok(())
}

enum VState {
    SentV2,
    GotW2 { w2: [u8; 32] },
    GotW1K { w1: [u8; 32], k: Vec<u8> },
    Done,
}

/// Verifier-side session.
pub struct VerifierSake {
    group: DhGroup,
    a: BigUint,
    v0: Vec<u8>,
    v1: [u8; 32],
    v2: [u8; 32],
    t0: u64,
    expected_c: u64,
    policy: TimingPolicy,
    state: VState,
}

impl VerifierSake {
    /// Sets up the verifier chain with a random exponent and emits the v2
    /// commitment; `t0` starts the response clock.
    pub fn start<R: Rng>(
        group: &DhGroup,
        rng: &mut R,
        expected_c: u64,
        policy: TimingPolicy,
    ) -> (Self, WireMessage) {
        let a = group.random_exponent(rng);
        Self::start_with_exponent(group, a, expected_c, policy)
    }

    /// Deterministic variant for known-answer tests.
    pub fn start_with_exponent(
        group: &DhGroup,
        a: BigUint,
        expected_c: u64,
        policy: TimingPolicy,
    ) -> (Self, WireMessage) {
        let v0 = group.public_of(&a);
        let v1 = sha256(&v0);
        let v2 = sha256(&v1);
        let msg = WireMessage {
            id: MsgId::V2,
            payload: v2.to_vec(),
        };
        (
            VerifierSake {
                group: group.clone(),
                a,
                v0,
                v1,
                v2,
                t0: 0,
                expected_c,
                policy,
                state: VState::SentV2,
            },
            msg,
        )
    }

    pub fn v2(&self) -> [u8; 32] {
        self.v2
    }

    /// Processes the device commitment at time `t1`: the response must be
    /// on time and MACed under the checksum the verifier computed itself.
    pub fn receive_w2(&mut self, msg: &WireMessage, t1: u64) -> Result<WireMessage, SakeError> {
        if !matches!(self.state, VState::SentV2) {
            return Err(SakeError::StateMachine("receive_w2 before start"));
        }
        if msg.id != MsgId::W2Mac {
            return Err(SakeError::Malformed("expected w2 commitment"));
        }
        expect_len(&msg.payload, 48, "w2 frame")?;
        let elapsed = t1.saturating_sub(self.t0);
        let limit = self.policy.limit();
        if elapsed > limit {
            return Err(SakeError::AbortTiming { elapsed, limit });
        }
        let w2: [u8; 32] = msg.payload[..32].try_into().unwrap();
        let tag = &msg.payload[32..48];
        let key = mac_key(&self.expected_c.to_le_bytes());
        if !cmac_verify(&key, &w2, tag) {
            return Err(SakeError::AbortMac("w2 commitment"));
        }
        self.state = VState::GotW2 { w2 };
        Ok(WireMessage {
            id: MsgId::V1,
            payload: self.v1.to_vec(),
        })
    }

    /// Checks the device's w1/k reveal: chain consistency first, then the
    /// MAC under the previously committed w2.
    pub fn receive_w1k(&mut self, msg: &WireMessage) -> Result<WireMessage, SakeError> {
        let w2 = match &self.state {
            VState::GotW2 { w2 } => *w2,
            _ => return Err(SakeError::StateMachine("receive_w1k out of order")),
        };
        if msg.id != MsgId::W1K {
            return Err(SakeError::Malformed("expected w1/k reveal"));
        }
        if msg.payload.len() < 34 + 16 {
            return Err(SakeError::Malformed("w1k frame"));
        }
        let w1: [u8; 32] = msg.payload[..32].try_into().unwrap();
        let klen = u16::from_le_bytes(msg.payload[32..34].try_into().unwrap()) as usize;
        expect_len(&msg.payload, 34 + klen + 16, "w1k frame")?;
        let k = msg.payload[34..34 + klen].to_vec();
        let tag = &msg.payload[34 + klen..];
        if sha256(&w1) != w2 {
            return Err(SakeError::AbortChainMismatch("w1"));
        }
        if !cmac_verify(&mac_key(&w2), &k, tag) {
            return Err(SakeError::AbortMac("k"));
        }
        self.state = VState::GotW1K { w1, k };
        Ok(WireMessage {
            id: MsgId::V0,
            payload: self.v0.clone(),
        })
    }

    /// Final reveal from the device; on success derives `sk = k^a mod p`.
    pub fn receive_w0(&mut self, msg: &WireMessage) -> Result<Vec<u8>, SakeError> {
        let (w1, k) = match &self.state {
            VState::GotW1K { w1, k } => (*w1, k.clone()),
            _ => return Err(SakeError::StateMachine("receive_w0 out of order")),
        };
        if msg.id != MsgId::W0 {
            return Err(SakeError::Malformed("expected w0 reveal"));
        }
        expect_len(&msg.payload, 32, "w0 frame")?;
        let w0: [u8; 32] = msg.payload[..32].try_into().unwrap();
        if sha256(&w0) != w1 {
            return Err(SakeError::AbortChainMismatch("w0"));
        }
        let k_int = BigUint::from_bytes_be(&k) % &self.group.p;
        let sk = k_int.modpow(&self.a, &self.group.p);
        self.state = VState::Done;
        Ok(self.group.to_element_bytes(&sk))
    }
}

enum DState {
    Committed { v2: [u8; 32] },
    RevealedW1 { v1: [u8; 32] },
    Done,
}

/// Device-side session.
pub struct DeviceSake {
    group: DhGroup,
    b: BigUint,
    c: u64,
    w0: [u8; 32],
    w1: [u8; 32],
    w2: [u8; 32],
    k: Vec<u8>,
    state: DState,
}

impl DeviceSake {
    /// Builds the device chain from the freshly computed checksum `c` and
    /// a random value, and commits with `w2, MAC_c(w2)`.
    pub fn respond<R: Rng>(
        group: &DhGroup,
        v2_challenge: [u8; 32],
        c: u64,
        rng: &mut R,
    ) -> (Self, WireMessage) {
        let mut r = vec![0u8; group.exponent_bits.div_ceil(8)];
        rng.fill_bytes(&mut r);
        let b = group.random_exponent(rng);
        Self::respond_with_secrets(group, v2_challenge, c, r, b)
    }

    /// Deterministic variant for known-answer tests.
    pub fn respond_with_secrets(
        group: &DhGroup,
        v2_challenge: [u8; 32],
        c: u64,
        r: Vec<u8>,
        b: BigUint,
    ) -> (Self, WireMessage) {
        let w0 = sha256_concat(&[&c.to_le_bytes(), &r]);
        let w1 = sha256(&w0);
        let w2 = sha256(&w1);
        let k = group.public_of(&b);
        let tag = aes_cmac(&mac_key(&c.to_le_bytes()), &w2);
        let mut payload = w2.to_vec();
        payload.extend_from_slice(&tag);
        (
            DeviceSake {
                group: group.clone(),
                b,
                c,
                w0,
                w1,
                w2,
                k,
                state: DState::Committed { v2: v2_challenge },
            },
            WireMessage {
                id: MsgId::W2Mac,
                payload,
            },
        )
    }

    pub fn checksum(&self) -> u64 {
        self.c
    }

    /// Verifies the verifier's v1 reveal against the committed v2 and
    /// reveals `w1, k, MAC_w2(k)`.
    pub fn receive_v1(&mut self, msg: &WireMessage) -> Result<WireMessage, SakeError> {
        let v2 = match &self.state {
            DState::Committed { v2 } => *v2,
            _ => return Err(SakeError::StateMachine("receive_v1 out of order")),
        };
        if msg.id != MsgId::V1 {
            return Err(SakeError::Malformed("expected v1 reveal"));
        }
        expect_len(&msg.payload, 32, "v1 frame")?;
        let v1: [u8; 32] = msg.payload[..32].try_into().unwrap();
        if sha256(&v1) != v2 {
            return Err(SakeError::AbortChainMismatch("v1"));
        }
        let tag = aes_cmac(&mac_key(&self.w2), &self.k);
        let mut payload = self.w1.to_vec();
        payload.extend_from_slice(&(self.k.len() as u16).to_le_bytes());
        payload.extend_from_slice(&self.k);
        payload.extend_from_slice(&tag);
        self.state = DState::RevealedW1 { v1 };
        Ok(WireMessage {
            id: MsgId::W1K,
            payload,
        })
    }

    /// Verifies the v0 reveal, derives `sk = v0^b mod p` and sends the
    /// final w0 reveal.
    pub fn receive_v0(&mut self, msg: &WireMessage) -> Result<(Vec<u8>, WireMessage), SakeError> {
        let v1 = match &self.state {
            DState::RevealedW1 { v1 } => *v1,
            _ => return Err(SakeError::StateMachine("receive_v0 out of order")),
        };
        if msg.id != MsgId::V0 {
            return Err(SakeError::Malformed("expected v0 reveal"));
        }
        if sha256(&msg.payload) != v1 {
            return Err(SakeError::AbortChainMismatch("v0"));
        }
        let v0 = BigUint::from_bytes_be(&msg.payload) % &self.group.p;
        let sk = v0.modpow(&self.b, &self.group.p);
        self.state = DState::Done;
        Ok((
            self.group.to_element_bytes(&sk),
            WireMessage {
                id: MsgId::W0,
                payload: self.w0.to_vec(),
            },
        ))
    }
}

/// Drives a complete protocol run over `channel`. `device_checksum` maps
/// the delivered challenge to the device's checksum result and the
/// simulated cycles it took; `expected_checksum` is the verifier's own
/// recomputation for the challenge it sent. Returns both derived keys.
#[allow(clippy::too_many_arguments)]
pub fn run_protocol<R: Rng>(
    group: &DhGroup,
    verifier_rng: &mut R,
    device_rng: &mut R,
    mut device_checksum: impl FnMut(&[u8; 32]) -> (u64, u64),
    expected_checksum: impl FnOnce(&[u8; 32]) -> u64,
    policy: TimingPolicy,
    channel: &mut Channel,
) -> Result<(Vec<u8>, Vec<u8>), SakeError> {
    let a = group.random_exponent(verifier_rng);
    let b = group.random_exponent(device_rng);
    let mut r = vec![0u8; group.exponent_bits.div_ceil(8)];
    device_rng.fill_bytes(&mut r);
    run_protocol_with_secrets(
        group,
        a,
        b,
        r,
        &mut device_checksum,
        expected_checksum,
        policy,
        channel,
    )
}

/// [`run_protocol`] with pinned secrets, for known-answer tests.
#[allow(clippy::too_many_arguments)]
pub fn run_protocol_with_secrets(
    group: &DhGroup,
    a: BigUint,
    b: BigUint,
    r: Vec<u8>,
    device_checksum: &mut dyn FnMut(&[u8; 32]) -> (u64, u64),
    expected_checksum: impl FnOnce(&[u8; 32]) -> u64,
    policy: TimingPolicy,
    channel: &mut Channel,
) -> Result<(Vec<u8>, Vec<u8>), SakeError> {
    let (mut vs, m_v2) = VerifierSake::start_with_exponent(
        group,
        a,
        0, // patched below once the expected checksum is known
        policy,
    );
    let expected_c = expected_checksum(&vs.v2());
    vs.expected_c = expected_c;

    // V -> D: v2 (challenge), clock starts
    let d_v2 = channel.deliver(&m_v2, true)?;
    expect_len(&d_v2.payload, 32, "v2 frame")?;
    let v2_seen: [u8; 32] = d_v2.payload[..32].try_into().unwrap();

    // device runs the checksum on what it received
    let (c_dev, vf_cycles) = device_checksum(&v2_seen);
    let (mut ds, m_w2) = DeviceSake::respond_with_secrets(group, v2_seen, c_dev, r, b);

    // D -> V: w2 commitment; elapsed includes the run and both transfers
    let t1 = vf_cycles + 2 * channel.delay_cycles;
    let v_w2 = channel.deliver(&m_w2, false)?;
    let m_v1 = vs.receive_w2(&v_w2, t1)?;

    let d_v1 = channel.deliver(&m_v1, true)?;
    let m_w1k = ds.receive_v1(&d_v1)?;

    let v_w1k = channel.deliver(&m_w1k, false)?;
    let m_v0 = vs.receive_w1k(&v_w1k)?;

    let d_v0 = channel.deliver(&m_v0, true)?;
    let (sk_d, m_w0) = ds.receive_v0(&d_v0)?;

    let v_w0 = channel.deliver(&m_w0, false)?;
    let sk_v = vs.receive_w0(&v_w0)?;
    Ok((sk_v, sk_d))
}

/// Hash of the user kernel bound to a verifier nonce: `H(r || code)`.
pub fn authenticate_kernel(r: &[u8; 32], code: &[u8]) -> [u8; 32] {
    sha256_concat(&[r, code])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtectMode {
    Authenticate,
    EncryptAuthenticate,
}

fn payload_keys(sk: &[u8]) -> ([u8; 16], [u8; 16]) {
    let enc = sha256_concat(&[b"enc", sk]);
    let mac = sha256_concat(&[b"mac", sk]);
    (
        enc[..16].try_into().unwrap(),
        mac[..16].try_into().unwrap(),
    )
}

/// Protects data under the established key: CMAC-authenticated, optionally
/// AES-CTR encrypted (encrypt-then-MAC).
pub fn protect_payload<R: Rng>(
    sk: &[u8],
    data: &[u8],
    mode: ProtectMode,
    rng: &mut R,
) -> Vec<u8> {
    let (enc_key, mac_k) = payload_keys(sk);
    let mut blob = Vec::new();
    match mode {
        ProtectMode::Authenticate => {
            blob.push(1u8);
            blob.extend_from_slice(data);
        }
        ProtectMode::EncryptAuthenticate => {
            blob.push(2u8);
            let mut iv = [0u8; 16];
            rng.fill_bytes(&mut iv);
            blob.extend_from_slice(&iv);
            blob.extend_from_slice(&aes_ctr(&enc_key, &iv, data));
        }
    }
    let tag = aes_cmac(&mac_k, &blob);
    blob.extend_from_slice(&tag);
    blob
}

/// Reverses [`protect_payload`]; any bit flip yields `TagMismatch`.
pub fn unprotect_payload(sk: &[u8], blob: &[u8]) -> Result<Vec<u8>, SakeError> {
    if blob.len() < 17 {
        return Err(SakeError::Malformed("short blob"));
    }
    let (enc_key, mac_k) = payload_keys(sk);
    let (body, tag) = blob.split_at(blob.len() - 16);
    if !cmac_verify(&mac_k, body, tag) {
        return Err(SakeError::TagMismatch);
    }
    match body[0] {
        1 => Ok(body[1..].to_vec()),
        2 => {
            if body.len() < 17 {
                return Err(SakeError::Malformed("short ciphertext"));
            }
            let iv: [u8; 16] = body[1..17].try_into().unwrap();
            Ok(aes_ctr(&enc_key, &iv, &body[17..]))
        }
        _ => Err(SakeError::Malformed("unknown mode byte")),
    }
}
