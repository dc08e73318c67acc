//! Avalanche-photodiode state machine: Geiger-mode single-photon detection
//! with deadtime and timing jitter, blinding under CW illumination, and the
//! threshold-governed classical click response of a blinded diode to bright
//! pulses.

use crate::photonics::PortIndex;
use crate::timetag::Timestamp;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("threshold profile needs at least one row")]
    EmptyProfile,
    #[error("profile rows must be sorted by cw power, ascending")]
    UnsortedProfile,
    #[error("p_never {p_never} must be below p_always {p_always} at cw {cw}")]
    ThresholdOrder { cw: f64, p_never: f64, p_always: f64 },
    #[error("thresholds must be non-decreasing in cw power")]
    DecreasingThresholds,
    #[error("blinded_response called on a detector in Geiger mode")]
    NotBlinded,
    #[error("bad profile row: {0}")]
    ParseRow(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Party {
    Alice = 0,
    Bob = 1,
    Eve = 2,
}

impl Party {
    pub fn from_u8(v: u8) -> Party {
        match v {
            0 => Party::Alice,
            1 => Party::Bob,
            _ => Party::Eve,
        }
    }
}

/// One time-tagged detector click; the atom of all key material.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub t: Timestamp,
    pub detector: PortIndex,
    pub party: Party,
}

/// One anchor row of a click-threshold table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub cw_w: f64,
    pub p_never_w: f64,
    pub p_always_w: f64,
}

/// Click thresholds of a blinded detector versus blinding CW power.
///
/// Rows are interpolated piecewise-linearly in log(cw power); below the first
/// row the thresholds are flat, above the last row they stay at the last row.
/// `scale_factor` models per-detector heterogeneity by multiplying both
/// thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdProfile {
    rows: Vec<ThresholdRow>,
    pub scale_factor: f64,
}

impl ThresholdProfile {
    pub fn from_rows(rows: Vec<ThresholdRow>, scale_factor: f64) -> Result<Self, DetectorError> {
        if rows.is_empty() {
            return Err(DetectorError::EmptyProfile);
        }
        for w in rows.windows(2) {
            if w[1].cw_w <= w[0].cw_w {
                return Err(DetectorError::UnsortedProfile);
            }
            if w[1].p_never_w < w[0].p_never_w || w[1].p_always_w < w[0].p_always_w {
                return Err(DetectorError::DecreasingThresholds);
            }
        }
        for r in &rows {
            if r.p_never_w >= r.p_always_w {
                return Err(DetectorError::ThresholdOrder {
                    cw: r.cw_w,
                    p_never: r.p_never_w * scale_factor,
                    p_always: r.p_always_w * scale_factor,
                });
            }
        }
        Ok(ThresholdProfile { rows, scale_factor })
    }

    /// Default anchor table. The 17 uW row is (2.3 mW, 2.6 mW); the others
    /// rise log-linearly above 1 uW.
    pub fn standard(scale_factor: f64) -> Self {
        ThresholdProfile::from_rows(
            vec![
                ThresholdRow { cw_w: 1e-6, p_never_w: 1.9e-3, p_always_w: 2.15e-3 },
                ThresholdRow { cw_w: 17e-6, p_never_w: 2.3e-3, p_always_w: 2.6e-3 },
                ThresholdRow { cw_w: 272e-6, p_never_w: 2.69e-3, p_always_w: 3.04e-3 },
            ],
            scale_factor,
        )
        .expect("standard profile is valid")
    }

    /// Parse a plain-text table: one `cw p_never p_always` row per line, SI
    /// units, `#` comments allowed.
    pub fn parse(text: &str, scale_factor: f64) -> Result<Self, DetectorError> {
        let mut rows = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(DetectorError::ParseRow(line.to_string()));
            }
            let parse = |s: &str| -> Result<f64, DetectorError> {
                s.parse().map_err(|_| DetectorError::ParseRow(line.to_string()))
            };
            rows.push(ThresholdRow {
                cw_w: parse(fields[0])?,
                p_never_w: parse(fields[1])?,
                p_always_w: parse(fields[2])?,
            });
        }
        ThresholdProfile::from_rows(rows, scale_factor)
    }

    /// (p_never, p_always) at a CW power, scaled by `scale_factor`.
    pub fn thresholds_at(&self, cw_w: f64) -> (f64, f64) {
        let s = self.scale_factor;
        let rows = &self.rows;
        if cw_w <= rows[0].cw_w {
            return (rows[0].p_never_w * s, rows[0].p_always_w * s);
        }
        let last = rows.last().unwrap();
        if cw_w >= last.cw_w {
            return (last.p_never_w * s, last.p_always_w * s);
        }
        let x = cw_w.log10();
        for w in rows.windows(2) {
            if cw_w <= w[1].cw_w {
                let x0 = w[0].cw_w.log10();
                let x1 = w[1].cw_w.log10();
                let f = (x - x0) / (x1 - x0);
                return (
                    s * (w[0].p_never_w + f * (w[1].p_never_w - w[0].p_never_w)),
                    s * (w[0].p_always_w + f * (w[1].p_always_w - w[0].p_always_w)),
                );
            }
        }
        unreachable!()
    }
}

/// Threshold elevation shortly after a previous bright pulse (cross-talk
/// between closely spaced pulses). Both thresholds are multiplied by
/// rho(dt): 1.0 for dt >= full_recovery_ns, rising linearly to max_factor at
/// knee_ns, clamped below that.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub full_recovery_ns: f64,
    pub knee_ns: f64,
    pub max_factor: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            full_recovery_ns: 1000.0,
            knee_ns: 550.0,
            max_factor: 1.3,
        }
    }
}

impl RecoveryConfig {
    pub fn factor(&self, interval_ns: Option<f64>) -> f64 {
        match interval_ns {
            None => 1.0,
            Some(dt) if dt >= self.full_recovery_ns => 1.0,
            Some(dt) => {
                let span = (self.full_recovery_ns - self.knee_ns).max(1e-9);
                let f = 1.0 + (self.max_factor - 1.0) * (self.full_recovery_ns - dt) / span;
                f.min(self.max_factor)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApdMode {
    Geiger,
    Blinded,
}

/// One avalanche photodiode and its operating state.
#[derive(Debug, Clone)]
pub struct Apd {
    pub port: PortIndex,
    pub party: Party,
    pub mode: ApdMode,
    pub cw_power_at_diode_w: f64,
    pub last_click: Option<Timestamp>,
    pub deadtime_ns: f64,
    pub efficiency: f64,
    pub jitter_fwhm_ps: f64,
    /// Click-time jitter while blinded (bright-pulse edge, not avalanche
    /// statistics), typically much tighter than Geiger jitter.
    pub blinded_jitter_fwhm_ps: f64,
    pub dark_rate_hz: f64,
    pub blind_threshold_w: f64,
    pub profile: ThresholdProfile,
    pub recovery: RecoveryConfig,
}

pub const FWHM_TO_SIGMA: f64 = 2.354_820_045; // 2*sqrt(2 ln 2)

impl Apd {
    pub fn new(port: PortIndex, party: Party, profile: ThresholdProfile) -> Self {
        Apd {
            port,
            party,
            mode: ApdMode::Geiger,
            cw_power_at_diode_w: 0.0,
            last_click: None,
            deadtime_ns: 1000.0,
            efficiency: 0.5,
            jitter_fwhm_ps: 520.0,
            blinded_jitter_fwhm_ps: 167.0,
            dark_rate_hz: 100.0,
            blind_threshold_w: 38e-12,
            profile,
            recovery: RecoveryConfig::default(),
        }
    }

    fn jitter_ticks<R: Rng + ?Sized>(&self, fwhm_ps: f64, rng: &mut R) -> i64 {
        if fwhm_ps <= 0.0 {
            return 0;
        }
        let sigma_ps = fwhm_ps / FWHM_TO_SIGMA;
        let normal = Normal::new(0.0, sigma_ps).unwrap();
        (normal.sample(rng) / 125.0).round() as i64
    }

    fn stamp(&self, base: Timestamp, jitter_ticks: i64) -> Timestamp {
        Timestamp::from_ticks((base.ticks as i64 + jitter_ticks).max(0) as u64)
    }

    fn in_deadtime(&self, t: Timestamp) -> bool {
        match self.last_click {
            None => false,
            Some(last) => {
                (t.ticks as i64 - last.ticks as i64) as f64 / 8.0 <= self.deadtime_ns
            }
        }
    }

    /// Single-photon arrival in Geiger mode. A photon arriving while blinded
    /// is silently absorbed.
    pub fn geiger_detect<R: Rng + ?Sized>(
        &mut self,
        photon_time: Timestamp,
        rng: &mut R,
    ) -> Option<ClickRecord> {
        // draw efficiency unconditionally so the stream stays aligned across
        // mode changes
        let detected = rng.gen::<f64>() < self.efficiency;
        if self.mode == ApdMode::Blinded || !detected || self.in_deadtime(photon_time) {
            return None;
        }
        let j = self.jitter_ticks(self.jitter_fwhm_ps, rng);
        let t = self.stamp(photon_time, j);
        self.last_click = Some(t);
        Some(ClickRecord { t, detector: self.port, party: self.party })
    }

    /// Dark-count click (electronic origin: no efficiency thinning).
    pub fn dark_arrival(&mut self, t: Timestamp) -> Option<ClickRecord> {
        if self.mode == ApdMode::Blinded || self.in_deadtime(t) {
            return None;
        }
        self.last_click = Some(t);
        Some(ClickRecord { t, detector: self.port, party: self.party })
    }

    /// Standalone dark-count stream over [t0, t1): Poisson at `dark_rate_hz`,
    /// respecting deadtime. Empty while blinded.
    pub fn dark_counts<R: Rng + ?Sized>(
        &mut self,
        t0: Timestamp,
        t1: Timestamp,
        rng: &mut R,
    ) -> Vec<ClickRecord> {
        let mut out = Vec::new();
        for t in dark_arrival_times(self.dark_rate_hz, t0, t1, rng) {
            if let Some(c) = self.dark_arrival(t) {
                out.push(c);
            }
        }
        out
    }

    /// Set the CW illumination level and the blinding state it implies.
    pub fn update_blinding(&mut self, cw_power_w: f64) {
        self.cw_power_at_diode_w = cw_power_w.max(0.0);
        self.mode = if self.cw_power_at_diode_w >= self.blind_threshold_w {
            ApdMode::Blinded
        } else {
            ApdMode::Geiger
        };
    }

    /// Click probability of a blinded diode for a pulse of the given peak
    /// power, with `extra_cw_w` transient illumination added to the static CW
    /// level for the threshold lookup and the recovery factor applied.
    pub fn blinded_click_probability(
        &self,
        peak_w: f64,
        extra_cw_w: f64,
        last_trigger_interval_ns: Option<f64>,
    ) -> f64 {
        let (mut p_never, mut p_always) =
            self.profile.thresholds_at(self.cw_power_at_diode_w + extra_cw_w);
        let rho = self.recovery.factor(last_trigger_interval_ns);
        p_never *= rho;
        p_always *= rho;
        if peak_w <= p_never {
            0.0
        } else if peak_w >= p_always {
            1.0
        } else {
            (peak_w - p_never) / (p_always - p_never)
        }
    }

    /// Response of a blinded diode to a bright pulse.
    pub fn blinded_response<R: Rng + ?Sized>(
        &mut self,
        peak_w: f64,
        extra_cw_w: f64,
        pulse_time: Timestamp,
        last_trigger_interval_ns: Option<f64>,
        rng: &mut R,
    ) -> Result<Option<ClickRecord>, DetectorError> {
        if self.mode != ApdMode::Blinded {
            return Err(DetectorError::NotBlinded);
        }
        let p = self.blinded_click_probability(peak_w, extra_cw_w, last_trigger_interval_ns);
        let clicked = match p {
            p if p <= 0.0 => false,
            p if p >= 1.0 => true,
            p => rng.gen::<f64>() < p,
        };
        if !clicked {
            return Ok(None);
        }
        let j = self.jitter_ticks(self.blinded_jitter_fwhm_ps, rng);
        let t = self.stamp(pulse_time, j);
        self.last_click = Some(t);
        Ok(Some(ClickRecord { t, detector: self.port, party: self.party }))
    }
}

/// Poisson arrival times at `rate_hz` over [t0, t1), sorted.
pub fn dark_arrival_times<R: Rng + ?Sized>(
    rate_hz: f64,
    t0: Timestamp,
    t1: Timestamp,
    rng: &mut R,
) -> Vec<Timestamp> {
    let mut out = Vec::new();
    if rate_hz <= 0.0 || t1.ticks <= t0.ticks {
        return out;
    }
    let mean_ticks = 8e9 / rate_hz;
    let mut t = t0.ticks as f64;
    loop {
        let e: f64 = rand_distr::Exp1.sample(rng);
        t += e * mean_ticks;
        if t >= t1.ticks as f64 {
            return out;
        }
        out.push(Timestamp::from_ticks(t as u64));
    }
}
