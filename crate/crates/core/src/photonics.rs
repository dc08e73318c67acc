//! Polarization algebra, the entangled-pair source, the fiber channel and the
//! four-port passive-basis polarization analyzer shared by all parties.
//!
//! Polarization is carried as a Stokes triple (s1, s2, s3); only power
//! fractions matter anywhere in this simulator, so there is no phase/Jones
//! bookkeeping. Pair correlations are modeled operationally: a pair is a
//! correlated-bit generator with per-basis intrinsic error flags, not a state
//! vector.

use crate::timetag::{Timestamp, TICKS_PER_SECOND};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PhotonicsError {
    #[error("polarization norm {0} exceeds 1 (fully polarized states only)")]
    NotPolarized(f64),
    #[error("negative power rejected: {0}")]
    NegativePower(f64),
    #[error("pair rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("intrinsic error probability {0} outside [0, 0.5]")]
    BadErrorRate(f64),
}

/// Measurement basis of the passive analyzer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    /// Linear H/V.
    Z,
    /// Linear +-45 degrees.
    X,
}

impl Basis {
    pub fn as_bit(self) -> u8 {
        match self {
            Basis::Z => 0,
            Basis::X => 1,
        }
    }

    pub fn from_bit(b: u8) -> Basis {
        if b & 1 == 0 {
            Basis::Z
        } else {
            Basis::X
        }
    }
}

/// Output port of the four-port analyzer, in fixed index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum PortIndex {
    V = 0,
    Minus45 = 1,
    H = 2,
    Plus45 = 3,
}

pub const ALL_PORTS: [PortIndex; 4] = [
    PortIndex::V,
    PortIndex::Minus45,
    PortIndex::H,
    PortIndex::Plus45,
];

pub const PORT_NAMES: [&str; 4] = ["V", "-45", "H", "+45"];

impl PortIndex {
    pub fn from_u8(v: u8) -> PortIndex {
        ALL_PORTS[(v & 3) as usize]
    }

    pub fn basis(self) -> Basis {
        match self {
            PortIndex::V | PortIndex::H => Basis::Z,
            PortIndex::Minus45 | PortIndex::Plus45 => Basis::X,
        }
    }

    /// Key-bit convention: H->1, V->0, +45->0, -45->1.
    pub fn bit(self) -> u8 {
        match self {
            PortIndex::V | PortIndex::Plus45 => 0,
            PortIndex::H | PortIndex::Minus45 => 1,
        }
    }

    /// The port a photon of this port's own polarization always exits from
    /// when measured in the matching basis.
    pub fn polarization(self) -> PolarizationState {
        match self {
            PortIndex::V => PolarizationState::vertical(),
            PortIndex::H => PolarizationState::horizontal(),
            PortIndex::Plus45 => PolarizationState::plus45(),
            PortIndex::Minus45 => PolarizationState::minus45(),
        }
    }

    /// Port measuring the orthogonal polarization in the same basis.
    pub fn same_basis_opposite(self) -> PortIndex {
        match self {
            PortIndex::V => PortIndex::H,
            PortIndex::H => PortIndex::V,
            PortIndex::Plus45 => PortIndex::Minus45,
            PortIndex::Minus45 => PortIndex::Plus45,
        }
    }

    /// The two ports of the conjugate basis.
    pub fn conjugate_ports(self) -> [PortIndex; 2] {
        match self.basis() {
            Basis::Z => [PortIndex::Minus45, PortIndex::Plus45],
            Basis::X => [PortIndex::V, PortIndex::H],
        }
    }

    /// Port for a (basis, bit) pair under the fixed bit convention.
    pub fn from_basis_bit(basis: Basis, bit: u8) -> PortIndex {
        match (basis, bit & 1) {
            (Basis::Z, 0) => PortIndex::V,
            (Basis::Z, _) => PortIndex::H,
            (Basis::X, 0) => PortIndex::Plus45,
            (Basis::X, _) => PortIndex::Minus45,
        }
    }
}

/// Analyzer port with its derived basis/bit labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzerPort {
    pub index: PortIndex,
    pub basis: Basis,
    pub bit: u8,
}

impl From<PortIndex> for AnalyzerPort {
    fn from(index: PortIndex) -> Self {
        AnalyzerPort {
            index,
            basis: index.basis(),
            bit: index.bit(),
        }
    }
}

/// Fully polarized state as a normalized Stokes triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarizationState {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
}

impl PolarizationState {
    pub fn new(s1: f64, s2: f64, s3: f64) -> Result<Self, PhotonicsError> {
        let norm = s1 * s1 + s2 * s2 + s3 * s3;
        if norm > 1.0 + 1e-9 {
            return Err(PhotonicsError::NotPolarized(norm.sqrt()));
        }
        Ok(PolarizationState { s1, s2, s3 })
    }

    pub fn horizontal() -> Self {
        PolarizationState { s1: 1.0, s2: 0.0, s3: 0.0 }
    }

    pub fn vertical() -> Self {
        PolarizationState { s1: -1.0, s2: 0.0, s3: 0.0 }
    }

    pub fn plus45() -> Self {
        PolarizationState { s1: 0.0, s2: 1.0, s3: 0.0 }
    }

    pub fn minus45() -> Self {
        PolarizationState { s1: 0.0, s2: -1.0, s3: 0.0 }
    }

    pub fn right_circular() -> Self {
        PolarizationState { s1: 0.0, s2: 0.0, s3: 1.0 }
    }

    pub fn left_circular() -> Self {
        PolarizationState { s1: 0.0, s2: 0.0, s3: -1.0 }
    }

    /// Linear polarization at angle theta (radians) from horizontal; s3 = 0.
    pub fn linear(theta_rad: f64) -> Self {
        PolarizationState {
            s1: (2.0 * theta_rad).cos(),
            s2: (2.0 * theta_rad).sin(),
            s3: 0.0,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.s1 * self.s1 + self.s2 * self.s2 + self.s3 * self.s3).sqrt()
    }
}

/// Per-port powers out of the lossless four-port analyzer, indexed by
/// `PortIndex` order (V, -45, H, +45).
pub type PortPowers = [f64; 4];

/// Split an input beam of the given power over the four analyzer ports.
///
/// P(H) = p(1+s1)/4, P(V) = p(1-s1)/4, P(+45) = p(1+s2)/4, P(-45) = p(1-s2)/4.
/// The four outputs always sum to the input power.
pub fn split_powers(pol: PolarizationState, power_w: f64) -> Result<PortPowers, PhotonicsError> {
    if power_w < 0.0 {
        return Err(PhotonicsError::NegativePower(power_w));
    }
    let norm = pol.norm();
    if norm > 1.0 + 1e-9 {
        return Err(PhotonicsError::NotPolarized(norm));
    }
    let quarter = power_w / 4.0;
    Ok([
        quarter * (1.0 - pol.s1), // V
        quarter * (1.0 - pol.s2), // -45
        quarter * (1.0 + pol.s1), // H
        quarter * (1.0 + pol.s2), // +45
    ])
}

/// Single-photon limit of `split_powers`: route one photon to a port with the
/// per-port power fractions as probabilities.
pub fn sample_port<R: Rng + ?Sized>(pol: PolarizationState, rng: &mut R) -> AnalyzerPort {
    let p = split_powers(pol, 1.0).expect("unit power split");
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if x < acc {
            return AnalyzerPort::from(ALL_PORTS[i]);
        }
    }
    AnalyzerPort::from(PortIndex::Plus45)
}

/// One emitted entangled pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEvent {
    pub emission_time: Timestamp,
    pub correlation_id: u64,
    pub intrinsic_error_flag_z: bool,
    pub intrinsic_error_flag_x: bool,
}

/// Poisson-process pair source with per-basis intrinsic error flags.
pub struct PairSource<R: Rng> {
    rate_hz: f64,
    q_intrinsic: f64,
    end: Timestamp,
    t_ticks: f64,
    next_id: u64,
    rng: R,
}

impl<R: Rng> PairSource<R> {
    pub fn new(
        rate_hz: f64,
        duration_s: f64,
        q_intrinsic: f64,
        rng: R,
    ) -> Result<Self, PhotonicsError> {
        if rate_hz <= 0.0 {
            return Err(PhotonicsError::NonPositiveRate(rate_hz));
        }
        if !(0.0..=0.5).contains(&q_intrinsic) {
            return Err(PhotonicsError::BadErrorRate(q_intrinsic));
        }
        Ok(PairSource {
            rate_hz,
            q_intrinsic,
            end: Timestamp::from_ticks((duration_s * TICKS_PER_SECOND as f64) as u64),
            t_ticks: 0.0,
            next_id: 0,
            rng,
        })
    }

    pub fn end_time(&self) -> Timestamp {
        self.end
    }
}

impl<R: Rng> Iterator for PairSource<R> {
    type Item = PairEvent;

    fn next(&mut self) -> Option<PairEvent> {
        let mean_ticks = TICKS_PER_SECOND as f64 / self.rate_hz;
        // strictly increasing emission times: advance at least one tick
        loop {
            let e: f64 = Exp1.sample(&mut self.rng);
            let dt = e * mean_ticks;
            self.t_ticks += dt.max(1.0);
            let ticks = self.t_ticks as u64;
            if ticks >= self.end.ticks {
                return None;
            }
            let flag_z = self.rng.gen::<f64>() < self.q_intrinsic;
            let flag_x = self.rng.gen::<f64>() < self.q_intrinsic;
            let id = self.next_id;
            self.next_id += 1;
            return Some(PairEvent {
                emission_time: Timestamp::from_ticks(ticks),
                correlation_id: id,
                intrinsic_error_flag_z: flag_z,
                intrinsic_error_flag_x: flag_x,
            });
        }
    }
}

/// Joint measurement outcome of one pair in the given bases.
///
/// Same basis: anticorrelated bits unless the pair's error flag for that
/// basis is set (then correlated). Different bases: independent uniform bits.
pub fn measure_pair<R: Rng + ?Sized>(
    pair: &PairEvent,
    basis_a: Basis,
    basis_b: Basis,
    rng: &mut R,
) -> (u8, u8) {
    let bit_a: u8 = rng.gen_range(0..2);
    let bit_b: u8 = if basis_a == basis_b {
        let flag = match basis_a {
            Basis::Z => pair.intrinsic_error_flag_z,
            Basis::X => pair.intrinsic_error_flag_x,
        };
        if flag {
            bit_a
        } else {
            1 - bit_a
        }
    } else {
        rng.gen_range(0..2)
    };
    (bit_a, bit_b)
}

/// Fiber segment parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChannelParams {
    pub length_m: f64,
    pub loss_db: f64,
    pub group_delay_ns_per_m: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            length_m: 290.0,
            loss_db: 3.0,
            group_delay_ns_per_m: 5.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), PhotonicsError> {
        if self.loss_db < 0.0 {
            return Err(PhotonicsError::NegativePower(self.loss_db));
        }
        if self.length_m < 0.0 {
            return Err(PhotonicsError::NegativePower(self.length_m));
        }
        Ok(())
    }

    pub fn survival_probability(&self) -> f64 {
        10f64.powf(-self.loss_db / 10.0)
    }

    pub fn delay_ns(&self) -> f64 {
        self.length_m * self.group_delay_ns_per_m
    }

    /// A sub-span covering `fraction` of both the length and the loss.
    pub fn span(&self, fraction: f64) -> ChannelParams {
        ChannelParams {
            length_m: self.length_m * fraction,
            loss_db: self.loss_db * fraction,
            group_delay_ns_per_m: self.group_delay_ns_per_m,
        }
    }
}

/// Propagate one event through a lossy fiber: `None` when absorbed, otherwise
/// the delayed arrival time.
pub fn apply_channel<R: Rng + ?Sized>(
    t: Timestamp,
    params: &ChannelParams,
    rng: &mut R,
) -> Option<Timestamp> {
    let survive = rng.gen::<f64>() < params.survival_probability();
    if !survive {
        return None;
    }
    let delay = Timestamp::from_ns(params.delay_ns());
    Some(Timestamp::from_ticks(t.ticks + delay.ticks))
}
