//! Double-click handling, sifting primitives and QBER estimation.

use crate::detector::{ClickRecord, Party};
use crate::photonics::{Basis, PortIndex};
use crate::timetag::{match_coincidences, CoincidenceWindowConfig, Timestamp};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// What the receiver does with simultaneous clicks in more than one detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DoubleClickPolicy {
    /// Treat as noise and drop all clicks in the window.
    #[default]
    Discard,
    /// Keep one event at the earliest click time with a uniformly random
    /// detector among those that fired (hence a random bit in that basis).
    RandomBit,
}

impl DoubleClickPolicy {
    pub fn as_u8(self) -> u8 {
        match self {
            DoubleClickPolicy::Discard => 0,
            DoubleClickPolicy::RandomBit => 1,
        }
    }

    pub fn from_u8(v: u8) -> Self {
        if v == 1 {
            DoubleClickPolicy::RandomBit
        } else {
            DoubleClickPolicy::Discard
        }
    }
}

/// Outcome of the double-click filter.
#[derive(Debug, Clone, Default)]
pub struct FilteredClicks {
    pub clicks: Vec<ClickRecord>,
    /// Number of multi-click windows encountered.
    pub double_click_events: u64,
    /// Clicks swallowed by the filter.
    pub discarded_clicks: u64,
}

/// Group clicks closer than `window_ticks` and apply the policy. Input must
/// be sorted by time; output is sorted.
pub fn filter_double_clicks<R: Rng + ?Sized>(
    clicks: &[ClickRecord],
    window_ticks: u64,
    policy: DoubleClickPolicy,
    rng: &mut R,
) -> FilteredClicks {
    let mut out = FilteredClicks::default();
    let mut i = 0;
    while i < clicks.len() {
        let mut j = i + 1;
        while j < clicks.len() && clicks[j].t.ticks - clicks[j - 1].t.ticks <= window_ticks {
            j += 1;
        }
        let group = &clicks[i..j];
        if group.len() == 1 {
            out.clicks.push(group[0]);
        } else {
            out.double_click_events += 1;
            match policy {
                DoubleClickPolicy::Discard => {
                    out.discarded_clicks += group.len() as u64;
                }
                DoubleClickPolicy::RandomBit => {
                    let pick = group[rng.gen_range(0..group.len())];
                    out.discarded_clicks += group.len() as u64 - 1;
                    out.clicks.push(ClickRecord {
                        t: group[0].t,
                        detector: pick.detector,
                        party: pick.party,
                    });
                }
            }
        }
        i = j;
    }
    out
}

/// A sifted key: bit string plus the (epoch, announcement index) provenance
/// of every bit, labeled with the owning party.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiftedKey {
    pub party: Party,
    pub bits: Vec<u8>,
    pub source: Vec<(u32, u32)>,
}

impl SiftedKey {
    pub fn new(party: Party) -> Self {
        SiftedKey { party, bits: Vec::new(), source: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn push(&mut self, bit: u8, epoch: u32, index: u32) {
        self.bits.push(bit & 1);
        self.source.push((epoch, index));
    }

    /// Remove the given ascending positions (used after QBER sampling).
    pub fn remove_positions(&mut self, positions: &[usize]) {
        let mut keep = vec![true; self.bits.len()];
        for &p in positions {
            keep[p] = false;
        }
        let mut bits = Vec::with_capacity(self.bits.len() - positions.len());
        let mut source = Vec::with_capacity(self.bits.len() - positions.len());
        for (k, (&b, &s)) in self.bits.iter().zip(self.source.iter()).enumerate() {
            if keep[k] {
                bits.push(b);
                source.push(s);
            }
        }
        self.bits = bits;
        self.source = source;
    }
}

/// An announced receiver click, reconstructed to absolute time.
#[derive(Debug, Clone, Copy)]
pub struct AnnouncedClick {
    pub t: Timestamp,
    pub basis: Basis,
    pub epoch: u32,
    pub index_in_epoch: u32,
}

/// The sender-side sift: match own clicks against announced times (after the
/// clock offset), keep same-basis coincidences, and return per-epoch
/// confirmation indices plus the sender's sifted key (bits flipped so that
/// error-free pairs agree).
pub fn sift_confirm(
    own_clicks: &[ClickRecord],
    announced: &[AnnouncedClick],
    window: &CoincidenceWindowConfig,
    offset: i64,
) -> (Vec<(u32, Vec<u32>)>, SiftedKey, Vec<usize>) {
    let own_t: Vec<Timestamp> = own_clicks.iter().map(|c| c.t).collect();
    let own_ch: Vec<u8> = own_clicks.iter().map(|c| c.detector as u8).collect();
    let ann_t: Vec<Timestamp> = announced.iter().map(|a| a.t).collect();
    let ann_ch: Vec<u8> = vec![0; announced.len()];
    let pairs = match_coincidences(&own_t, &own_ch, &ann_t, &ann_ch, window, offset);

    let mut per_epoch: Vec<(u32, Vec<u32>)> = Vec::new();
    let mut key = SiftedKey::new(own_clicks.first().map(|c| c.party).unwrap_or(Party::Alice));
    let mut matched_own = Vec::new();
    for (i, j) in pairs {
        let ann = &announced[j];
        let own = &own_clicks[i];
        if own.detector.basis() != ann.basis {
            continue;
        }
        // singlet anticorrelation: flip so error-free bits agree
        key.push(1 - own.detector.bit(), ann.epoch, ann.index_in_epoch);
        matched_own.push(i);
        match per_epoch.last_mut() {
            Some((e, v)) if *e == ann.epoch => v.push(ann.index_in_epoch),
            _ => per_epoch.push((ann.epoch, vec![ann.index_in_epoch])),
        }
    }
    (per_epoch, key, matched_own)
}

/// Deterministic public sample positions for QBER estimation.
pub fn qber_sample_positions(seed: u64, n: usize, fraction: f64) -> Vec<usize> {
    let k = ((n as f64) * fraction).floor() as usize;
    if k == 0 || n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut positions = rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec();
    positions.sort_unstable();
    positions
}

/// Disagreement fraction over the sampled positions.
pub fn qber_estimate(sample_a: &[u8], sample_b: &[u8]) -> (f64, u32) {
    assert_eq!(sample_a.len(), sample_b.len());
    if sample_a.is_empty() {
        return (0.0, 0);
    }
    let mismatches = sample_a
        .iter()
        .zip(sample_b)
        .filter(|(a, b)| a != b)
        .count() as u32;
    (mismatches as f64 / sample_a.len() as f64, mismatches)
}

/// Port helper: the detector a (basis, bit) outcome lands in.
pub fn port_for_outcome(basis: Basis, bit: u8) -> PortIndex {
    PortIndex::from_basis_bit(basis, bit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn click(ticks: u64, det: PortIndex) -> ClickRecord {
        ClickRecord { t: Timestamp::from_ticks(ticks), detector: det, party: Party::Bob }
    }

    #[test]
    fn single_clicks_pass_through_filter() {
        let mut rng = derive_rng(70, "dc");
        let clicks = vec![click(100, PortIndex::V), click(10_000, PortIndex::H)];
        let f = filter_double_clicks(&clicks, 32, DoubleClickPolicy::Discard, &mut rng);
        assert_eq!(f.clicks.len(), 2);
        assert_eq!(f.double_click_events, 0);
    }

    #[test]
    fn discard_policy_drops_whole_group_and_counts_it() {
        let mut rng = derive_rng(71, "dc2");
        let clicks = vec![
            click(100, PortIndex::V),
            click(110, PortIndex::Plus45),
            click(10_000, PortIndex::H),
        ];
        let f = filter_double_clicks(&clicks, 32, DoubleClickPolicy::Discard, &mut rng);
        assert_eq!(f.clicks.len(), 1);
        assert_eq!(f.clicks[0].detector, PortIndex::H);
        assert_eq!(f.double_click_events, 1);
        assert_eq!(f.discarded_clicks, 2);
    }

    #[test]
    fn random_policy_keeps_one_click_with_random_detector() {
        let mut rng = derive_rng(72, "dc3");
        let mut v_count = 0;
        let n = 2000;
        for _ in 0..n {
            let clicks = vec![click(100, PortIndex::V), click(105, PortIndex::H)];
            let f = filter_double_clicks(&clicks, 32, DoubleClickPolicy::RandomBit, &mut rng);
            assert_eq!(f.clicks.len(), 1);
            assert_eq!(f.clicks[0].t.ticks, 100);
            assert_eq!(f.double_click_events, 1);
            if f.clicks[0].detector == PortIndex::V {
                v_count += 1;
            }
        }
        let frac = v_count as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.05, "V fraction {frac}");
    }

    #[test]
    fn toy_sift_confirms_only_matching_basis_coincidences() {
        // announced clicks at ticks 100 (Z), 300 (X), 500 (Z);
        // own clicks at 100 (Z-basis port) and 500 (X-basis port):
        // only announcement 0 is confirmed
        let announced = vec![
            AnnouncedClick { t: Timestamp::from_ticks(100), basis: Basis::Z, epoch: 0, index_in_epoch: 0 },
            AnnouncedClick { t: Timestamp::from_ticks(300), basis: Basis::X, epoch: 0, index_in_epoch: 1 },
            AnnouncedClick { t: Timestamp::from_ticks(500), basis: Basis::Z, epoch: 0, index_in_epoch: 2 },
        ];
        let own = vec![
            ClickRecord { t: Timestamp::from_ticks(100), detector: PortIndex::H, party: Party::Alice },
            ClickRecord { t: Timestamp::from_ticks(500), detector: PortIndex::Plus45, party: Party::Alice },
        ];
        let window = CoincidenceWindowConfig::default();
        let (acks, key, matched) = sift_confirm(&own, &announced, &window, 0);
        assert_eq!(acks, vec![(0, vec![0])]);
        assert_eq!(key.len(), 1);
        // own bit H=1, flipped to 0
        assert_eq!(key.bits, vec![0]);
        assert_eq!(key.source, vec![(0, 0)]);
        assert_eq!(matched, vec![0]);
    }

    #[test]
    fn no_coincidences_yield_empty_key() {
        let announced = vec![AnnouncedClick {
            t: Timestamp::from_ticks(1_000_000),
            basis: Basis::Z,
            epoch: 0,
            index_in_epoch: 0,
        }];
        let own = vec![ClickRecord {
            t: Timestamp::from_ticks(100),
            detector: PortIndex::V,
            party: Party::Alice,
        }];
        let window = CoincidenceWindowConfig::default();
        let (acks, key, _) = sift_confirm(&own, &announced, &window, 0);
        assert!(acks.is_empty());
        assert!(key.is_empty());
    }

    #[test]
    fn qber_sample_is_deterministic_and_sorted() {
        let a = qber_sample_positions(42, 1000, 0.05);
        let b = qber_sample_positions(42, 1000, 0.05);
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a, qber_sample_positions(43, 1000, 0.05));
    }

    #[test]
    fn qber_counts_mismatches() {
        let a = vec![0u8; 100];
        let mut b = vec![0u8; 100];
        b[3] = 1;
        b[50] = 1;
        b[99] = 1;
        let (q, m) = qber_estimate(&a, &b);
        assert_eq!(m, 3);
        assert!((q - 0.03).abs() < 1e-12);
        assert_eq!(qber_estimate(&a, &a), (0.0, 0));
    }

    #[test]
    fn remove_positions_keeps_order() {
        let mut key = SiftedKey::new(Party::Bob);
        for i in 0..10u32 {
            key.push((i % 2) as u8, 0, i);
        }
        key.remove_positions(&[0, 5, 9]);
        assert_eq!(key.len(), 7);
        assert_eq!(key.source[0], (0, 1));
        assert_eq!(key.source.last(), Some(&(0, 8)));
    }
}
