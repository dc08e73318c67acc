//! Privacy amplification: seeded Toeplitz hashing over GF(2) plus the final
//! key-length accounting.
//!
//! The hash output is the middle slice of the carryless product of the seed
//! polynomial and the key polynomial, which equals the Toeplitz matrix-vector
//! product T(s)·k with T[i][j] = s[i - j + n - 1].

use rand_chacha::rand_core::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Binary entropy h2(q) in bits.
pub fn binary_entropy(q: f64) -> f64 {
    if q <= 0.0 || q >= 1.0 {
        return 0.0;
    }
    -q * q.log2() - (1.0 - q) * (1.0 - q).log2()
}

/// How the output length is computed from the session's public record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PaAccounting {
    /// out = n - leaked_bits - margin: removes exactly the classically
    /// disclosed information.
    #[default]
    LeakOnly,
    /// out = floor(n * (1 - h2(q_est))) - leaked_bits - margin.
    LeakPlusEntropy,
}

/// Final key length; zero or below means no key is possible.
pub fn pa_output_length(
    n: usize,
    q_est: f64,
    leaked_bits: u64,
    safety_margin: u32,
    accounting: PaAccounting,
) -> usize {
    let base = match accounting {
        PaAccounting::LeakOnly => n as f64,
        PaAccounting::LeakPlusEntropy => (n as f64 * (1.0 - binary_entropy(q_est))).floor(),
    };
    let out = base - leaked_bits as f64 - safety_margin as f64;
    if out <= 0.0 {
        0
    } else {
        out as usize
    }
}

/// Pack one-bit-per-byte into LSB-first u64 words.
pub fn bits_to_words(bits: &[u8]) -> Vec<u64> {
    let mut words = vec![0u64; bits.len().div_ceil(64)];
    for (i, &b) in bits.iter().enumerate() {
        if b & 1 == 1 {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    words
}

pub fn words_to_bits(words: &[u64], count: usize) -> Vec<u8> {
    (0..count).map(|i| ((words[i / 64] >> (i % 64)) & 1) as u8).collect()
}

/// Expand an announced 32-byte seed into `nbits` Toeplitz diagonal bits.
pub fn expand_seed(seed: [u8; 32], nbits: usize) -> Vec<u64> {
    let mut rng = crate::rng::rng_from_key(seed);
    let mut words = vec![0u64; nbits.div_ceil(64)];
    for w in &mut words {
        *w = rng.next_u64();
    }
    // mask tail bits beyond nbits
    let tail = nbits % 64;
    if tail != 0 {
        if let Some(last) = words.last_mut() {
            *last &= (1u64 << tail) - 1;
        }
    }
    words
}

/// Carryless 64x64 -> 128 multiply, portable nibble-table version.
fn clmul64_soft(a: u64, b: u64) -> u128 {
    let mut table = [0u128; 16];
    table[1] = a as u128;
    for v in 1..8usize {
        table[2 * v] = table[v] << 1;
        table[2 * v + 1] = table[2 * v] ^ a as u128;
    }
    let mut acc = 0u128;
    for t in (0..16).rev() {
        acc <<= 4;
        acc ^= table[((b >> (4 * t)) & 0xf) as usize];
    }
    acc
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "pclmulqdq", enable = "sse2")]
unsafe fn clmul_accumulate_pclmul(acc: &mut [u64], key: &[u64], seed: &[u64]) {
    use std::arch::x86_64::*;
    for (i, &kw) in key.iter().enumerate() {
        if kw == 0 {
            continue;
        }
        let ka = _mm_set_epi64x(0, kw as i64);
        for (j, &sw) in seed.iter().enumerate() {
            if sw == 0 {
                continue;
            }
            let sb = _mm_set_epi64x(0, sw as i64);
            let prod = _mm_clmulepi64_si128(ka, sb, 0x00);
            let lo = _mm_cvtsi128_si64(prod) as u64;
            let hi = _mm_extract_epi64(prod, 1) as u64;
            acc[i + j] ^= lo;
            acc[i + j + 1] ^= hi;
        }
    }
}

fn clmul_accumulate_soft(acc: &mut [u64], key: &[u64], seed: &[u64]) {
    for (i, &kw) in key.iter().enumerate() {
        if kw == 0 {
            continue;
        }
        // nibble table of kw, reused across the whole seed row
        let mut table = [0u128; 16];
        table[1] = kw as u128;
        for v in 1..8usize {
            table[2 * v] = table[v] << 1;
            table[2 * v + 1] = table[2 * v] ^ kw as u128;
        }
        for (j, &sw) in seed.iter().enumerate() {
            if sw == 0 {
                continue;
            }
            let mut prod = 0u128;
            for t in (0..16).rev() {
                prod <<= 4;
                prod ^= table[((sw >> (4 * t)) & 0xf) as usize];
            }
            acc[i + j] ^= prod as u64;
            acc[i + j + 1] ^= (prod >> 64) as u64;
        }
    }
}

/// GF(2) carryless product of two bit polynomials (LSB-first words).
pub fn carryless_product(key: &[u64], seed: &[u64]) -> Vec<u64> {
    let mut acc = vec![0u64; key.len() + seed.len() + 1];
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("pclmulqdq") && is_x86_feature_detected!("sse2") {
            unsafe { clmul_accumulate_pclmul(&mut acc, key, seed) };
            return acc;
        }
    }
    clmul_accumulate_soft(&mut acc, key, seed);
    acc
}

fn extract_bit(words: &[u64], idx: usize) -> u8 {
    ((words[idx / 64] >> (idx % 64)) & 1) as u8
}

/// Toeplitz hash of an n-bit key to m bits using an announced seed.
pub fn toeplitz_hash(seed: [u8; 32], key_bits: &[u8], out_len: usize) -> Vec<u8> {
    let n = key_bits.len();
    if out_len == 0 || n == 0 {
        return Vec::new();
    }
    let diag = expand_seed(seed, out_len + n - 1);
    let key = bits_to_words(key_bits);
    let prod = carryless_product(&key, &diag);
    (0..out_len).map(|i| extract_bit(&prod, i + n - 1)).collect()
}

/// 64-bit verification hash of a bit string (first 8 bytes of SHA-256 over
/// the packed bits plus the length).
pub fn key_hash64(bits: &[u8]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update((bits.len() as u64).to_le_bytes());
    hasher.update(super::frame::pack_bits(bits));
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    /// Direct Toeplitz matrix-vector product over GF(2); the independent
    /// check for the carryless-product implementation.
    fn toeplitz_naive(diag_bits: &[u8], key: &[u8], m: usize) -> Vec<u8> {
        let n = key.len();
        (0..m)
            .map(|i| {
                let mut acc = 0u8;
                for (j, &k) in key.iter().enumerate() {
                    acc ^= diag_bits[i + n - 1 - j] & k;
                }
                acc
            })
            .collect()
    }

    #[test]
    fn clmul_soft_matches_shift_and_xor() {
        let mut rng = derive_rng(80, "clmul");
        for _ in 0..200 {
            let a: u64 = rng.gen();
            let b: u64 = rng.gen();
            let mut want = 0u128;
            for bit in 0..64 {
                if (b >> bit) & 1 == 1 {
                    want ^= (a as u128) << bit;
                }
            }
            assert_eq!(clmul64_soft(a, b), want);
        }
    }

    #[test]
    fn toeplitz_matches_naive_matrix_product() {
        let mut rng = derive_rng(81, "toeplitz");
        for trial in 0..20 {
            let n = rng.gen_range(1..300);
            let m = rng.gen_range(1..300);
            let key: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
            let mut seed = [0u8; 32];
            rng.fill(&mut seed);
            let fast = toeplitz_hash(seed, &key, m);
            let diag_words = expand_seed(seed, m + n - 1);
            let diag_bits = words_to_bits(&diag_words, m + n - 1);
            let naive = toeplitz_naive(&diag_bits, &key, m);
            assert_eq!(fast, naive, "trial {trial} n={n} m={m}");
        }
    }

    #[test]
    fn soft_and_detected_paths_agree() {
        let mut rng = derive_rng(82, "paths");
        let key: Vec<u64> = (0..40).map(|_| rng.gen()).collect();
        let seed: Vec<u64> = (0..60).map(|_| rng.gen()).collect();
        let mut soft = vec![0u64; key.len() + seed.len() + 1];
        clmul_accumulate_soft(&mut soft, &key, &seed);
        let auto = carryless_product(&key, &seed);
        assert_eq!(soft, auto);
    }

    #[test]
    fn hash_is_deterministic_and_seed_sensitive() {
        let mut rng = derive_rng(83, "det");
        let key: Vec<u8> = (0..5000).map(|_| rng.gen_range(0..2u8)).collect();
        let seed = [5u8; 32];
        let h1 = toeplitz_hash(seed, &key, 2500);
        let h2 = toeplitz_hash(seed, &key, 2500);
        assert_eq!(h1, h2);
        let h3 = toeplitz_hash([6u8; 32], &key, 2500);
        assert_ne!(h1, h3);
    }

    #[test]
    fn output_length_rules() {
        // q = 0, nothing leaked, no margin: full length retained
        assert_eq!(pa_output_length(128, 0.0, 0, 0, PaAccounting::LeakOnly), 128);
        assert_eq!(pa_output_length(128, 0.0, 0, 0, PaAccounting::LeakPlusEntropy), 128);
        // entropy accounting at q = 0.055
        let n = 100_000;
        let out = pa_output_length(n, 0.055, 41_000, 100, PaAccounting::LeakPlusEntropy);
        let expect = (n as f64 * (1.0 - binary_entropy(0.055))).floor() - 41_000.0 - 100.0;
        assert_eq!(out, expect as usize);
        // exhausted key
        assert_eq!(pa_output_length(1000, 0.5, 2000, 100, PaAccounting::LeakOnly), 0);
    }

    #[test]
    fn binary_entropy_reference_points() {
        assert_eq!(binary_entropy(0.0), 0.0);
        assert!((binary_entropy(0.5) - 1.0).abs() < 1e-12);
        assert!((binary_entropy(0.055) - 0.307268).abs() < 1e-5);
        assert!((binary_entropy(0.11) - binary_entropy(0.89)).abs() < 1e-12);
    }

    #[test]
    fn key_hash_distinguishes_single_bit_flips() {
        let bits = vec![0u8; 1000];
        let mut flipped = bits.clone();
        flipped[777] = 1;
        assert_ne!(key_hash64(&bits), key_hash64(&flipped));
        assert_eq!(key_hash64(&bits), key_hash64(&vec![0u8; 1000]));
    }
}
