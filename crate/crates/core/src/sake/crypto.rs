//! Cryptographic primitives: SHA-256, AES-CMAC (RFC 4493 subkey schedule
//! over the AES block cipher), AES-CTR, and modular-exponentiation groups.

use aes::cipher::{generic_array::GenericArray, BlockEncrypt, KeyInit};
use aes::Aes128;
use num_bigint::BigUint;
use sha2::{Digest, Sha256};

pub fn sha256(data: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(data);
    h.finalize().into()
}

pub fn sha256_concat(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

fn aes_block(key: &[u8; 16], block: &mut [u8; 16]) {
    let cipher = Aes128::new(GenericArray::from_slice(key));
    let mut b = GenericArray::clone_from_slice(block);
    cipher.encrypt_block(&mut b);
    block.copy_from_slice(&b);
}

fn dbl(block: &[u8; 16]) -> [u8; 16] {
    let mut out = [0u8; 16];
    let mut carry = 0u8;
    for i in (0..16).rev() {
        out[i] = (block[i] << 1) | carry;
        carry = block[i] >> 7;
    }
    if carry == 1 {
        out[15] ^= 0x87; // the GF(2^128) modulus constant
    }
    out
}

/// AES-CMAC over `msg`.
pub fn aes_cmac(key: &[u8; 16], msg: &[u8]) -> [u8; 16] {
    let mut l = [0u8; 16];
    aes_block(key, &mut l);
    let k1 = dbl(&l);
    let k2 = dbl(&k1);

    let n_blocks = msg.len().div_ceil(16).max(1);
    let complete = !msg.is_empty() && msg.len() % 16 == 0;

    let mut x = [0u8; 16];
    for i in 0..n_blocks - 1 {
        for j in 0..16 {
            x[j] ^= msg[i * 16 + j];
        }
        aes_block(key, &mut x);
    }
    let tail = &msg[(n_blocks - 1) * 16..];
    let mut last = [0u8; 16];
    if complete {
        last.copy_from_slice(tail);
        for j in 0..16 {
            last[j] ^= k1[j];
        }
    } else {
        last[..tail.len()].copy_from_slice(tail);
        last[tail.len()] = 0x80;
        for j in 0..16 {
            last[j] ^= k2[j];
        }
    }
    for j in 0..16 {
        x[j] ^= last[j];
    }
    aes_block(key, &mut x);
    x
}

pub fn cmac_verify(key: &[u8; 16], msg: &[u8], tag: &[u8]) -> bool {
    let expected = aes_cmac(key, msg);
    // constant-time-ish comparison
    tag.len() == 16
        && expected
            .iter()
            .zip(tag)
            .fold(0u8, |acc, (a, b)| acc | (a ^ b))
            == 0
}

/// AES-CTR with a big-endian 128-bit counter block.
pub fn aes_ctr(key: &[u8; 16], counter: &[u8; 16], data: &[u8]) -> Vec<u8> {
    let mut ctr = *counter;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(16) {
        let mut keystream = ctr;
        aes_block(key, &mut keystream);
        for (i, b) in chunk.iter().enumerate() {
            out.push(b ^ keystream[i]);
        }
        for i in (0..16).rev() {
            ctr[i] = ctr[i].wrapping_add(1);
            if ctr[i] != 0 {
                break;
            }
        }
    }
    out
}

/// A Diffie-Hellman group: modulus, generator and the secret-exponent
/// width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DhGroup {
    pub p: BigUint,
    pub g: BigUint,
    pub exponent_bits: usize,
}

impl DhGroup {
    /// Tiny test group (p = 23, g = 5), for protocol-level tests where
    /// values must be hand-checkable.
    pub fn test_group() -> Self {
        DhGroup {
            p: BigUint::from(23u32),
            g: BigUint::from(5u32),
            exponent_bits: 16,
        }
    }

    /// The 2048-bit MODP group (RFC 3526 group 14), generator 2.
    pub fn modp_2048() -> Self {
        let hex = "\
            FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD1\
            29024E088A67CC74020BBEA63B139B22514A08798E3404DD\
            EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245\
            E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED\
            EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3D\
            C2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F\
            83655D23DCA3AD961C62F356208552BB9ED529077096966D\
            670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B\
            E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9\
            DE2BCBF6955817183995497CEA956AE515D2261898FA0510\
            15728E5A8AACAA68FFFFFFFFFFFFFFFF";
        DhGroup {
            p: BigUint::parse_bytes(hex.as_bytes(), 16).expect("valid hex"),
            g: BigUint::from(2u32),
            exponent_bits: 256,
        }
    }

    /// Byte length of serialized group elements.
    pub fn element_bytes(&self) -> usize {
        (self.p.bits() as usize).div_ceil(8)
    }

    /// `g^exp mod p`, serialized big-endian and zero-padded to the group
    /// element width.
    pub fn public_of(&self, exp: &BigUint) -> Vec<u8> {
        self.to_element_bytes(&self.g.modpow(exp, &self.p))
    }

    pub fn to_element_bytes(&self, v: &BigUint) -> Vec<u8> {
        let mut bytes = v.to_bytes_be();
        let width = self.element_bytes();
        while bytes.len() < width {
            bytes.insert(0, 0);
        }
        bytes
    }

    /// Draws a random exponent of the configured width.
    pub fn random_exponent<R: rand::Rng>(&self, rng: &mut R) -> BigUint {
        let mut bytes = vec![0u8; self.exponent_bits.div_ceil(8)];
        rng.fill_bytes(&mut bytes);
        let e = BigUint::from_bytes_be(&bytes);
        if e.bits() == 0 {
            BigUint::from(1u32)
        } else {
            e
        }
    }
}

/// Derives a 128-bit MAC key from arbitrary secret bytes.
pub fn mac_key(secret: &[u8]) -> [u8; 16] {
    let h = sha256(secret);
    h[..16].try_into().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(s: &str) -> Vec<u8> {
        hex::decode(s).unwrap()
    }

    #[test]
    fn cmac_rfc4493_vectors() {
        let key: [u8; 16] = h("2b7e151628aed2a6abf7158809cf4f3c").try_into().unwrap();
        // empty message
        assert_eq!(
            aes_cmac(&key, &[]).to_vec(),
            h("bb1d6929e95937287fa37d129b756746")
        );
        // 16-byte message
        let m16 = h("6bc1bee22e409f96e93d7e117393172a");
        assert_eq!(
            aes_cmac(&key, &m16).to_vec(),
            h("070a16b46b4d4144f79bdd9dd04a287c")
        );
        // 40-byte message
        let m40 = h("6bc1bee22e409f96e93d7e117393172aae2d8a571e03ac9c9eb76fac45af8e5130c81c46a35ce411");
        assert_eq!(
            aes_cmac(&key, &m40).to_vec(),
            h("dfa66747de9ae63030ca32611497c827")
        );
        // 64-byte message
        let m64 = h("6bc1bee22e409f96e93d7e117393172aae2d8a571e03ac9c9eb76fac45af8e5130c81c46a35ce411e5fbc1191a0a52eff69f2445df4f9b17ad2b417be66c3710");
        assert_eq!(
            aes_cmac(&key, &m64).to_vec(),
            h("51f0bebf7e3b9d92fc49741779363cfe")
        );
    }

    #[test]
    fn cmac_rejects_wrong_key() {
        let key: [u8; 16] = h("2b7e151628aed2a6abf7158809cf4f3c").try_into().unwrap();
        let mut flipped = key;
        flipped[15] ^= 1;
        let tag = aes_cmac(&key, b"hello");
        assert!(cmac_verify(&key, b"hello", &tag));
        assert!(!cmac_verify(&flipped, b"hello", &tag));
    }

    #[test]
    fn aes_ctr_published_vector() {
        // NIST SP 800-38A F.5.1 CTR-AES128.Encrypt, first block
        let key: [u8; 16] = h("2b7e151628aed2a6abf7158809cf4f3c").try_into().unwrap();
        let ctr: [u8; 16] = h("f0f1f2f3f4f5f6f7f8f9fafbfcfdfeff").try_into().unwrap();
        let pt = h("6bc1bee22e409f96e93d7e117393172a");
        let ct = aes_ctr(&key, &ctr, &pt);
        assert_eq!(ct, h("874d6191b620e3261bef6864990db6ce"));
        // involution
        assert_eq!(aes_ctr(&key, &ctr, &ct), pt);
    }

    #[test]
    fn sha256_of_32_zero_bytes() {
        assert_eq!(
            sha256(&[0u8; 32]).to_vec(),
            h("66687aadf862bd776c8fc18b8e9f8e20089714856ee233b3902a591d0d5f2925")
        );
    }

    #[test]
    fn test_group_exponentiation() {
        let g = DhGroup::test_group();
        // 5^6 mod 23 = 8
        assert_eq!(g.public_of(&BigUint::from(6u32)), vec![8]);
        // 5^15 mod 23 = 19
        assert_eq!(g.public_of(&BigUint::from(15u32)), vec![19]);
    }

    fn miller_rabin(n: &BigUint, bases: &[u32]) -> bool {
        use num_bigint::BigUint as B;
        let one = B::from(1u32);
        let two = B::from(2u32);
        let n_minus_1 = n - &one;
        let mut d = n_minus_1.clone();
        let mut r = 0u32;
        while &d % &two == B::from(0u32) {
            d /= &two;
            r += 1;
        }
        'outer: for &b in bases {
            let mut x = B::from(b).modpow(&d, n);
            if x == one || x == n_minus_1 {
                continue;
            }
            for _ in 0..r - 1 {
                x = x.modpow(&two, n);
                if x == n_minus_1 {
                    continue 'outer;
                }
            }
            return false;
        }
        true
    }

    #[test]
    fn modp_2048_constant_sanity() {
        let g = DhGroup::modp_2048();
        assert_eq!(g.p.bits(), 2048);
        assert_eq!(g.element_bytes(), 256);
        // catches transcription errors with overwhelming probability
        assert!(miller_rabin(&g.p, &[2, 3, 5, 7, 11, 13]));
        // safe prime: (p-1)/2 is also prime
        let q = (&g.p - BigUint::from(1u32)) / BigUint::from(2u32);
        assert!(miller_rabin(&q, &[2, 3, 5]));
    }
}
