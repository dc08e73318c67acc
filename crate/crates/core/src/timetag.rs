//! Timestamps, epochs, coincidence matching, cross-correlation clock
//! synchronization and coincidence histograms.
//!
//! The base unit is one tick = 125 ps. An epoch spans 2^29 ns, which is
//! exactly 2^32 ticks, so epoch extraction is a plain shift.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ticks per nanosecond (1 tick = 125 ps).
pub const TICKS_PER_NS: u64 = 8;
/// Ticks per second.
pub const TICKS_PER_SECOND: u64 = 8_000_000_000;
/// Picoseconds per tick.
pub const PS_PER_TICK: u64 = 125;
/// Ticks per epoch (2^29 ns = 2^32 ticks).
pub const EPOCH_TICKS: u64 = 1 << 32;

/// A point in time, in 125 ps ticks since session start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Timestamp {
    pub ticks: u64,
}

impl Timestamp {
    pub fn from_ticks(ticks: u64) -> Self {
        Timestamp { ticks }
    }

    /// Nearest-tick conversion from nanoseconds.
    pub fn from_ns(ns: f64) -> Self {
        Timestamp {
            ticks: (ns * TICKS_PER_NS as f64).round() as u64,
        }
    }

    pub fn as_ns(&self) -> f64 {
        self.ticks as f64 / TICKS_PER_NS as f64
    }

    /// Epoch index of this timestamp.
    pub fn epoch(&self) -> u32 {
        (self.ticks >> 32) as u32
    }

    /// Offset within the epoch (lower 32 bits).
    pub fn intra_epoch(&self) -> u32 {
        (self.ticks & 0xffff_ffff) as u32
    }

    /// Rebuild an absolute timestamp from an epoch index and intra-epoch offset.
    pub fn from_epoch_parts(epoch: u32, offset: u32) -> Self {
        Timestamp {
            ticks: ((epoch as u64) << 32) | offset as u64,
        }
    }
}

/// Epoch index of a raw tick count.
pub fn epoch_index(t: Timestamp) -> u32 {
    t.epoch()
}

#[derive(Debug, Error, PartialEq)]
pub enum SyncError {
    #[error("empty click stream")]
    EmptyStream,
    #[error("no significant correlation peak (peak {peak} < 5x background {background:.2})")]
    NoPeak { peak: u64, background: f64 },
}

/// Parameters for two-stage cross-correlation clock recovery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyncConfig {
    /// Half-width of the offset search range, in ticks.
    pub search_range_ticks: u64,
    /// Coarse histogram bin, in ticks.
    pub coarse_bin_ticks: u64,
    /// Fine histogram bin, in ticks.
    pub fine_bin_ticks: u64,
}

impl Default for SyncConfig {
    fn default() -> Self {
        SyncConfig {
            search_range_ticks: 1 << 17, // +-16.4 us
            coarse_bin_ticks: 256,       // 32 ns
            fine_bin_ticks: 1,
        }
    }
}

/// Histogram of pairwise differences (b - a) restricted to a window.
fn difference_histogram(
    a: &[Timestamp],
    b: &[Timestamp],
    center: i64,
    half_range: i64,
    bin: i64,
) -> Vec<u64> {
    let nbins = (2 * half_range / bin) as usize + 1;
    let mut hist = vec![0u64; nbins];
    let lo_bound = center - half_range;
    let hi_bound = center + half_range;
    let mut j0 = 0usize;
    for &ta in a {
        let ta = ta.ticks as i64;
        // advance lower pointer: such b stay out of window for all later a too
        while j0 < b.len() && (b[j0].ticks as i64) < ta + lo_bound {
            j0 += 1;
        }
        let mut j = j0;
        while j < b.len() && (b[j].ticks as i64) <= ta + hi_bound {
            let d = b[j].ticks as i64 - ta;
            let idx = ((d - lo_bound) / bin) as usize;
            if idx < nbins {
                hist[idx] += 1;
            }
            j += 1;
        }
    }
    hist
}

/// Recover the constant clock offset between two sorted click streams by
/// two-stage cross-correlation: a coarse difference histogram over the full
/// search range, then a fine histogram around the coarse peak.
///
/// Returns the offset `d` (in ticks, signed) that maximizes coincidences of
/// `a + d` with `b`, i.e. stream `b` runs `d` ticks late relative to `a`.
pub fn synchronize(
    a: &[Timestamp],
    b: &[Timestamp],
    cfg: &SyncConfig,
) -> Result<i64, SyncError> {
    if a.is_empty() || b.is_empty() {
        return Err(SyncError::EmptyStream);
    }
    let range = cfg.search_range_ticks as i64;
    let coarse = cfg.coarse_bin_ticks as i64;
    let hist = difference_histogram(a, b, 0, range, coarse);
    let (peak_idx, &peak) = hist
        .iter()
        .enumerate()
        .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
        .unwrap();
    let total: u64 = hist.iter().sum();
    let background = (total - peak) as f64 / (hist.len().max(2) - 1) as f64;
    if (peak as f64) < 5.0 * background || peak == 0 {
        return Err(SyncError::NoPeak { peak, background });
    }
    let coarse_center = -range + peak_idx as i64 * coarse + coarse / 2;

    let fine = cfg.fine_bin_ticks.max(1) as i64;
    let fine_range = 2 * coarse;
    let fhist = difference_histogram(a, b, coarse_center, fine_range, fine);
    let (fpeak_idx, _) = fhist
        .iter()
        .enumerate()
        .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
        .unwrap();
    Ok(coarse_center - fine_range + fpeak_idx as i64 * fine + fine / 2)
}

/// Coincidence window plus per-detector-combination calibration offsets.
///
/// `pair_offset_ticks[a][b]` is subtracted from the raw difference for clicks
/// on Alice-side detector `a` and Bob-side detector `b`; it compensates fixed
/// cable/electronics skews. All offsets default to zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoincidenceWindowConfig {
    pub half_width_ticks: u32,
    pub pair_offset_ticks: [[i32; 4]; 4],
}

impl Default for CoincidenceWindowConfig {
    fn default() -> Self {
        CoincidenceWindowConfig {
            half_width_ticks: 16, // +-2 ns
            pair_offset_ticks: [[0; 4]; 4],
        }
    }
}

impl CoincidenceWindowConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.half_width_ticks == 0 {
            return Err("coincidence half_width_ticks must be > 0".into());
        }
        for row in &self.pair_offset_ticks {
            for &o in row {
                if o.unsigned_abs() > 4096 {
                    return Err(format!("pair calibration offset {o} out of range (+-4096 ticks)"));
                }
            }
        }
        Ok(())
    }

    fn max_abs_offset(&self) -> i64 {
        self.pair_offset_ticks
            .iter()
            .flatten()
            .map(|o| o.unsigned_abs() as i64)
            .max()
            .unwrap_or(0)
    }
}

/// Greedy one-to-one nearest-neighbor coincidence matching.
///
/// A pair (i, j) matches when |t_a[i] - (t_b[j] - offset - calib)| <= half_width,
/// with calib looked up from the detector channels. Each click participates in
/// at most one pair; among candidates the nearest corrected distance wins, and
/// the earlier click wins ties of equal distance. Both index sequences of the
/// result are strictly increasing.
pub fn match_coincidences(
    a: &[Timestamp],
    chan_a: &[u8],
    b: &[Timestamp],
    chan_b: &[u8],
    cfg: &CoincidenceWindowConfig,
    offset: i64,
) -> Vec<(usize, usize)> {
    assert_eq!(a.len(), chan_a.len());
    assert_eq!(b.len(), chan_b.len());
    let hw = cfg.half_width_ticks as i64;
    let slack = hw + cfg.max_abs_offset();
    let corrected = |i: usize, j: usize| -> i64 {
        let calib = cfg.pair_offset_ticks[chan_a[i] as usize][chan_b[j] as usize] as i64;
        a[i].ticks as i64 - (b[j].ticks as i64 - offset - calib)
    };

    let mut pairs = Vec::new();
    let mut j0 = 0usize;
    let mut used_b_from = 0usize; // b indices below this are consumed
    let mut last_b: Option<usize> = None;
    let mut i = 0usize;
    while i < a.len() {
        let ta = a[i].ticks as i64;
        while j0 < b.len() && (b[j0].ticks as i64) - offset < ta - slack {
            j0 += 1;
        }
        let mut best: Option<(i64, usize)> = None;
        let mut j = j0.max(used_b_from);
        while j < b.len() && (b[j].ticks as i64) - offset <= ta + slack {
            if Some(j) > last_b || last_b.is_none() {
                let d = corrected(i, j);
                if d.abs() <= hw {
                    // nearest wins; on equal distance the earlier b click wins
                    let better = match best {
                        None => true,
                        Some((bd, _)) => d.abs() < bd,
                    };
                    if better {
                        best = Some((d.abs(), j));
                    }
                }
            }
            j += 1;
        }
        if let Some((dist, jbest)) = best {
            // check the NEXT a-click does not claim jbest with a strictly
            // smaller distance (earlier a wins ties)
            let steal = a.get(i + 1).is_some_and(|_| {
                let i2 = i + 1;
                let d2 = corrected(i2, jbest);
                d2.abs() <= hw && d2.abs() < dist
            });
            if !steal {
                pairs.push((i, jbest));
                last_b = Some(jbest);
                used_b_from = jbest + 1;
            }
        }
        i += 1;
    }
    pairs
}

/// Per-combination coincidence-difference histograms (4 x 4 detector pairs).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoincidenceHistogram {
    /// Bin width in ticks.
    pub bin_ticks: u32,
    /// Half range around zero, in ticks.
    pub half_range_ticks: u32,
    /// counts[a][b][bin]
    pub counts: Vec<Vec<Vec<u64>>>,
}

impl CoincidenceHistogram {
    pub fn new(bin_ticks: u32, half_range_ticks: u32) -> Self {
        let nbins = (2 * half_range_ticks / bin_ticks) as usize + 1;
        CoincidenceHistogram {
            bin_ticks,
            half_range_ticks,
            counts: vec![vec![vec![0; nbins]; 4]; 4],
        }
    }

    /// Record one matched pair's corrected difference (ticks).
    pub fn record(&mut self, chan_a: u8, chan_b: u8, diff_ticks: i64) {
        let hr = self.half_range_ticks as i64;
        if diff_ticks < -hr || diff_ticks > hr {
            return;
        }
        let idx = ((diff_ticks + hr) / self.bin_ticks as i64) as usize;
        let bins = &mut self.counts[chan_a as usize][chan_b as usize];
        if idx < bins.len() {
            bins[idx] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().flatten().sum()
    }

    pub fn combination_total(&self, chan_a: u8, chan_b: u8) -> u64 {
        self.counts[chan_a as usize][chan_b as usize].iter().sum()
    }

    /// FWHM of one combination's peak in picoseconds, by linear interpolation
    /// at half maximum. Unavailable when the peak count is below 100.
    pub fn fwhm_ps(&self, chan_a: u8, chan_b: u8) -> Option<f64> {
        let bins = &self.counts[chan_a as usize][chan_b as usize];
        let (peak_idx, &peak) = bins.iter().enumerate().max_by_key(|&(_, &c)| c)?;
        if peak < 100 {
            return None;
        }
        let half = peak as f64 / 2.0;
        // walk left from the peak to the half-max crossing
        let mut left = peak_idx as f64;
        for k in (0..peak_idx).rev() {
            if (bins[k] as f64) <= half {
                let y0 = bins[k] as f64;
                let y1 = bins[k + 1] as f64;
                left = k as f64 + (half - y0) / (y1 - y0).max(1e-12);
                break;
            }
            if k == 0 {
                left = 0.0;
            }
        }
        let mut right = peak_idx as f64;
        for k in peak_idx + 1..bins.len() {
            if (bins[k] as f64) <= half {
                let y0 = bins[k - 1] as f64;
                let y1 = bins[k] as f64;
                right = (k - 1) as f64 + (y0 - half) / (y0 - y1).max(1e-12);
                break;
            }
            if k == bins.len() - 1 {
                right = (bins.len() - 1) as f64;
            }
        }
        let width_bins = (right - left).max(1.0);
        Some(width_bins * self.bin_ticks as f64 * PS_PER_TICK as f64)
    }

    /// Mean FWHM over combinations with enough statistics.
    pub fn mean_fwhm_ps(&self) -> Option<f64> {
        let mut vals = Vec::new();
        for ca in 0..4u8 {
            for cb in 0..4u8 {
                if let Some(w) = self.fwhm_ps(ca, cb) {
                    vals.push(w);
                }
            }
        }
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// CSV export: combination, bin_center_ps, count, normalized.
    pub fn to_csv(&self, port_names: &[&str; 4]) -> String {
        let mut out = String::from("combination,bin_center_ps,count,normalized\n");
        for ca in 0..4usize {
            for cb in 0..4usize {
                let bins = &self.counts[ca][cb];
                let peak = *bins.iter().max().unwrap_or(&0);
                for (k, &c) in bins.iter().enumerate() {
                    let center = (k as i64 * self.bin_ticks as i64 - self.half_range_ticks as i64)
                        * PS_PER_TICK as i64
                        + (self.bin_ticks as i64 * PS_PER_TICK as i64) / 2;
                    let norm = if peak > 0 { c as f64 / peak as f64 } else { 0.0 };
                    out.push_str(&format!(
                        "{}x{},{},{},{:.6}\n",
                        port_names[ca], port_names[cb], center, c, norm
                    ));
                }
            }
        }
        out
    }
}
