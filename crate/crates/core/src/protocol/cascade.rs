//! Interactive parity-exchange error correction (Cascade style).
//!
//! The reference side holds the key unchanged and answers parity queries; the
//! correcting side locates and flips its errors by comparing announced block
//! parities and bisecting mismatched blocks. All randomness (the per-pass
//! permutation seeds) is announced on the wire, so any passive holder of the
//! correcting side's starting key can replay the entire computation from the
//! transcript alone.

use super::frame::ParityQuery;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EcConfig {
    pub passes: u8,
    pub min_block: u32,
    pub max_block: u32,
    /// Initial block size rule: max(min_block, floor(rate_constant / q)).
    pub rate_constant: f64,
}

impl Default for EcConfig {
    fn default() -> Self {
        EcConfig { passes: 4, min_block: 8, max_block: 4096, rate_constant: 0.73 }
    }
}

impl EcConfig {
    pub fn initial_block_size(&self, q_est: f64, key_len: usize) -> u32 {
        let raw = if q_est <= 0.0 {
            self.max_block
        } else {
            (self.rate_constant / q_est).floor() as u32
        };
        raw.clamp(self.min_block, self.max_block).min(key_len.max(1) as u32)
    }
}

/// Announced reconciliation parameters (mirrors the INIT payload).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeParams {
    pub q_est_micro: u32,
    pub key_len: u32,
    pub passes: u8,
    pub initial_block: u32,
    pub perm_seeds: Vec<u64>,
}

impl CascadeParams {
    pub fn derive(q_est: f64, key_len: usize, cfg: &EcConfig, seed_base: u64) -> Self {
        let perm_seeds = (0..cfg.passes)
            .map(|p| crate::rng::derive_seed(seed_base, &format!("ec.perm.{p}")))
            .collect();
        CascadeParams {
            q_est_micro: (q_est * 1e6).round() as u32,
            key_len: key_len as u32,
            passes: cfg.passes,
            initial_block: cfg.initial_block_size(q_est, key_len),
            perm_seeds,
        }
    }

    /// Position maps, one per pass: perm[p][slot] = original key index.
    pub fn permutations(&self) -> Vec<Vec<u32>> {
        let n = self.key_len as usize;
        (0..self.passes as usize)
            .map(|p| {
                let mut perm: Vec<u32> = (0..n as u32).collect();
                let mut rng = ChaCha12Rng::seed_from_u64(self.perm_seeds[p]);
                perm.shuffle(&mut rng);
                perm
            })
            .collect()
    }

    pub fn block_size(&self, pass: u8) -> u32 {
        (self.initial_block << pass).min(self.key_len.max(1))
    }
}

fn range_parity(key: &[u8], perm: &[u32], lo: u32, hi: u32) -> u8 {
    let mut p = 0u8;
    for slot in lo..hi {
        p ^= key[perm[slot as usize] as usize];
    }
    p & 1
}

/// Reference side: answers parity queries over its (fixed) key.
pub struct CascadeReference {
    key: Vec<u8>,
    perms: Vec<Vec<u32>>,
    pub answered_bits: u64,
}

impl CascadeReference {
    pub fn new(key: Vec<u8>, params: &CascadeParams) -> Self {
        let perms = params.permutations();
        CascadeReference { key, perms, answered_bits: 0 }
    }

    pub fn answer(&mut self, queries: &[ParityQuery]) -> Vec<u8> {
        self.answered_bits += queries.len() as u64;
        queries
            .iter()
            .map(|q| range_parity(&self.key, &self.perms[q.pass as usize], q.lo, q.hi))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeOutcome {
    pub corrections: u32,
    /// Parity bits disclosed by the reference side (counted once per distinct
    /// compared range).
    pub leaked_bits: u64,
    pub rounds: u32,
}

/// Run the correcting side against a parity oracle. The oracle receives the
/// round number and the query batch and must return one parity bit per query
/// (the live peer, or the recorded answer frames during replay).
pub fn correct_key<F>(
    key: &mut [u8],
    params: &CascadeParams,
    mut oracle: F,
) -> CascadeOutcome
where
    F: FnMut(u32, &[ParityQuery]) -> Vec<u8>,
{
    let n = params.key_len as usize;
    assert_eq!(key.len(), n);
    let perms = params.permutations();
    let mut cache: HashMap<(u8, u32, u32), u8> = HashMap::new();
    let mut rounds = 0u32;
    let mut leaked = 0u64;
    let mut corrections = 0u32;

    let mut ask = |queries: &[ParityQuery],
                   cache: &mut HashMap<(u8, u32, u32), u8>,
                   rounds: &mut u32,
                   leaked: &mut u64,
                   oracle: &mut F| {
        let fresh: Vec<ParityQuery> = queries
            .iter()
            .filter(|q| !cache.contains_key(&(q.pass, q.lo, q.hi)))
            .copied()
            .collect();
        if fresh.is_empty() {
            return;
        }
        *rounds += 1;
        *leaked += fresh.len() as u64;
        let answers = oracle(*rounds, &fresh);
        assert_eq!(answers.len(), fresh.len(), "oracle answered wrong count");
        for (q, a) in fresh.iter().zip(answers) {
            cache.insert((q.pass, q.lo, q.hi), a & 1);
        }
    };

    let top_blocks = |pass: u8| -> Vec<(u32, u32)> {
        let k = params.block_size(pass);
        let mut v = Vec::new();
        let mut lo = 0u32;
        while lo < n as u32 {
            let hi = (lo + k).min(n as u32);
            v.push((lo, hi));
            lo = hi;
        }
        v
    };

    for pass in 0..params.passes {
        // announce-and-compare every top block of this pass
        let blocks: Vec<ParityQuery> = top_blocks(pass)
            .into_iter()
            .map(|(lo, hi)| ParityQuery { pass, lo, hi })
            .collect();
        ask(&blocks, &mut cache, &mut rounds, &mut leaked, &mut oracle);

        // fix loop over all passes introduced so far
        loop {
            let mut mismatched: Option<(u8, Vec<(u32, u32)>)> = None;
            for q in 0..=pass {
                let bad: Vec<(u32, u32)> = top_blocks(q)
                    .into_iter()
                    .filter(|&(lo, hi)| {
                        cache[&(q, lo, hi)] != range_parity(key, &perms[q as usize], lo, hi)
                    })
                    .collect();
                if !bad.is_empty() {
                    mismatched = Some((q, bad));
                    break; // smallest-block pass first
                }
            }
            let Some((qsel, mut active)) = mismatched else { break };

            // lockstep bisection of all mismatched blocks of the selected pass
            while active.iter().any(|&(lo, hi)| hi - lo > 1) {
                let halves: Vec<ParityQuery> = active
                    .iter()
                    .filter(|&&(lo, hi)| hi - lo > 1)
                    .map(|&(lo, hi)| ParityQuery { pass: qsel, lo, hi: lo + (hi - lo) / 2 })
                    .collect();
                ask(&halves, &mut cache, &mut rounds, &mut leaked, &mut oracle);
                active = active
                    .into_iter()
                    .map(|(lo, hi)| {
                        if hi - lo <= 1 {
                            return (lo, hi);
                        }
                        let mid = lo + (hi - lo) / 2;
                        let alice_left = cache[&(qsel, lo, mid)];
                        if alice_left != range_parity(key, &perms[qsel as usize], lo, mid) {
                            (lo, mid)
                        } else {
                            // block parity is odd and the left half matches,
                            // so the right half must mismatch
                            (mid, hi)
                        }
                    })
                    .collect();
            }
            for &(lo, _) in &active {
                let orig = perms[qsel as usize][lo as usize] as usize;
                key[orig] ^= 1;
                corrections += 1;
            }
        }

        // clean first pass on an error-free key: nothing left to exchange
        if pass == 0 && params.q_est_micro == 0 && corrections == 0 {
            break;
        }
    }

    CascadeOutcome { corrections, leaked_bits: leaked, rounds }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn random_key(n: usize, seed: u64) -> Vec<u8> {
        let mut rng = derive_rng(seed, "ec.key");
        (0..n).map(|_| rng.gen_range(0..2u8)).collect()
    }

    fn flip_fraction(key: &[u8], q: f64, seed: u64) -> Vec<u8> {
        let mut rng = derive_rng(seed, "ec.noise");
        key.iter()
            .map(|&b| if rng.gen::<f64>() < q { b ^ 1 } else { b })
            .collect()
    }

    fn run_pair(alice: &[u8], bob: &mut Vec<u8>, q_est: f64, seed: u64) -> (CascadeOutcome, u64) {
        let cfg = EcConfig::default();
        let params = CascadeParams::derive(q_est, alice.len(), &cfg, seed);
        let mut reference = CascadeReference::new(alice.to_vec(), &params);
        let outcome = correct_key(bob, &params, |_round, queries| reference.answer(queries));
        (outcome, reference.answered_bits)
    }

    #[test]
    fn zero_error_keys_exchange_first_pass_parities_only() {
        let alice = random_key(4096, 1);
        let mut bob = alice.clone();
        let (outcome, answered) = run_pair(&alice, &mut bob, 0.0, 2);
        assert_eq!(outcome.corrections, 0);
        assert_eq!(bob, alice);
        assert_eq!(outcome.rounds, 1);
        // exactly the first pass's block parities
        assert_eq!(answered, (4096u64).div_ceil(4096));
        assert_eq!(outcome.leaked_bits, answered);
    }

    #[test]
    fn single_flip_in_1024_found_by_bisection_within_10_queries() {
        let alice = random_key(1024, 3);
        let mut bob = alice.clone();
        bob[517] ^= 1;
        let params = CascadeParams {
            q_est_micro: 1000,
            key_len: 1024,
            passes: 1,
            initial_block: 1024,
            perm_seeds: vec![99],
        };
        let mut reference = CascadeReference::new(alice.clone(), &params);
        let outcome = correct_key(&mut bob, &params, |_r, q| reference.answer(q));
        assert_eq!(bob, alice);
        assert_eq!(outcome.corrections, 1);
        // one top parity + at most log2(1024) = 10 bisection parities
        assert!(outcome.leaked_bits <= 11, "leaked {}", outcome.leaked_bits);
    }

    #[test]
    fn corrects_realistic_error_rate_with_expected_leakage() {
        let n = 100_000;
        let q = 0.055;
        let alice = random_key(n, 4);
        let mut bob = flip_fraction(&alice, q, 5);
        let (outcome, _) = run_pair(&alice, &mut bob, q, 6);
        assert_eq!(bob, alice, "keys differ after correction");
        let leak_frac = outcome.leaked_bits as f64 / n as f64;
        assert!(
            (0.4..=0.9).contains(&leak_frac),
            "leaked fraction {leak_frac}"
        );
    }

    #[test]
    fn converges_at_8_percent_error_in_at_least_99_of_100_trials() {
        let n = 10_000;
        let q = 0.08;
        let mut converged = 0;
        for trial in 0..100u64 {
            let alice = random_key(n, 100 + trial);
            let mut bob = flip_fraction(&alice, q, 200 + trial);
            let (_, _) = run_pair(&alice, &mut bob, q, 300 + trial);
            if bob == alice {
                converged += 1;
            }
        }
        assert!(converged >= 99, "converged {converged}/100");
    }

    #[test]
    fn replay_from_recorded_answers_reproduces_the_computation() {
        let n = 20_000;
        let q = 0.055;
        let alice = random_key(n, 7);
        let bob_start = flip_fraction(&alice, q, 8);

        let cfg = EcConfig::default();
        let params = CascadeParams::derive(q, n, &cfg, 9);
        let mut reference = CascadeReference::new(alice.clone(), &params);
        let mut transcript: Vec<Vec<u8>> = Vec::new();
        let mut bob = bob_start.clone();
        let live = correct_key(&mut bob, &params, |_r, queries| {
            let a = reference.answer(queries);
            transcript.push(a.clone());
            a
        });

        // a passive holder of bob_start replays using only recorded answers
        let mut replayed = bob_start.clone();
        let mut cursor = 0usize;
        let replay = correct_key(&mut replayed, &params, |_r, queries| {
            let a = transcript[cursor].clone();
            cursor += 1;
            assert_eq!(a.len(), queries.len());
            a
        });
        assert_eq!(replayed, bob);
        assert_eq!(replay, live);
        assert_eq!(cursor, transcript.len());
    }

    #[test]
    fn initial_block_size_rule() {
        let cfg = EcConfig::default();
        assert_eq!(cfg.initial_block_size(0.055, 100_000), 13);
        assert_eq!(cfg.initial_block_size(0.10, 100_000), 8); // max(8, 7)
        assert_eq!(cfg.initial_block_size(0.0, 100_000), 4096);
        assert_eq!(cfg.initial_block_size(0.001, 100_000), 730);
        assert_eq!(cfg.initial_block_size(0.055, 10), 10);
    }
}
