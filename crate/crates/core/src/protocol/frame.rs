//! Bit-exact classical-channel wire format.
//!
//! Every message is one frame:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "QKDC"
//! 4       1     version (1)
//! 5       1     frame type
//! 6       4     epoch, u32 LE
//! 10      4     payload length, u32 LE
//! 14      n     payload
//! 14+n    4     CRC-32 (IEEE) over header+payload, u32 LE
//! ```
//!
//! All integers are little-endian. Within one direction of a session the
//! epoch field is non-decreasing.

use crate::photonics::Basis;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"QKDC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 14;

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("truncated frame: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown frame type {0:#x}")]
    BadType(u8),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("payload length {0} exceeds limit")]
    Oversize(u32),
    #[error("malformed {0} payload")]
    BadPayload(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum FrameType {
    Timing = 0x01,
    SiftAck = 0x02,
    EcParity = 0x03,
    EcReply = 0x04,
    PaSeed = 0x05,
    SessionCtl = 0x06,
}

impl FrameType {
    pub fn from_u8(v: u8) -> Result<FrameType, FrameError> {
        Ok(match v {
            0x01 => FrameType::Timing,
            0x02 => FrameType::SiftAck,
            0x03 => FrameType::EcParity,
            0x04 => FrameType::EcReply,
            0x05 => FrameType::PaSeed,
            0x06 => FrameType::SessionCtl,
            other => return Err(FrameError::BadType(other)),
        })
    }
}

/// Maximum payload accepted by the decoder (16 MiB).
pub const MAX_PAYLOAD: u32 = 16 << 20;

/// A classical-channel frame (header fields + raw payload bytes).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_type: FrameType,
    pub epoch: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(frame_type: FrameType, epoch: u32, payload: Vec<u8>) -> Self {
        Frame { frame_type, epoch, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() + 4);
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.frame_type as u8);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Decode one frame from the start of `bytes`; returns the frame and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Frame, usize), FrameError> {
        if bytes.len() < HEADER_LEN + 4 {
            return Err(FrameError::Truncated { need: HEADER_LEN + 4, have: bytes.len() });
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[0..4]);
        if magic != MAGIC {
            return Err(FrameError::BadMagic(magic));
        }
        if bytes[4] != VERSION {
            return Err(FrameError::BadVersion(bytes[4]));
        }
        let frame_type = FrameType::from_u8(bytes[5])?;
        let epoch = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        let payload_len = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
        if payload_len > MAX_PAYLOAD {
            return Err(FrameError::Oversize(payload_len));
        }
        let total = HEADER_LEN + payload_len as usize + 4;
        if bytes.len() < total {
            return Err(FrameError::Truncated { need: total, have: bytes.len() });
        }
        let stored = u32::from_le_bytes(bytes[total - 4..total].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..total - 4]);
        if stored != computed {
            return Err(FrameError::CrcMismatch { stored, computed });
        }
        Ok((
            Frame {
                frame_type,
                epoch,
                payload: bytes[HEADER_LEN..total - 4].to_vec(),
            },
            total,
        ))
    }
}

// ---------------------------------------------------------------------------
// payload layouts

/// One announced click: intra-epoch tick offset plus the basis only. Packed
/// as 5 bytes on the wire (u32 offset LE + 1 flag byte, bit0 = basis); no
/// bit value and no detector identity beyond the basis is ever announced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub offset_ticks: u32,
    pub basis: Basis,
}

/// TIMING payload: count u32 + packed entries, offsets strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TimingPayload {
    pub entries: Vec<TimingEntry>,
}

impl TimingPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 5 * self.entries.len());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.offset_ticks.to_le_bytes());
            out.push(e.basis.as_bit());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() < 4 {
            return Err(FrameError::BadPayload("timing"));
        }
        let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        if bytes.len() != 4 + 5 * count {
            return Err(FrameError::BadPayload("timing"));
        }
        let mut entries = Vec::with_capacity(count);
        let mut prev: Option<u32> = None;
        for k in 0..count {
            let at = 4 + 5 * k;
            let offset = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
            let flags = bytes[at + 4];
            if flags & !1 != 0 {
                return Err(FrameError::BadPayload("timing"));
            }
            if prev.is_some_and(|p| offset <= p) {
                return Err(FrameError::BadPayload("timing"));
            }
            prev = Some(offset);
            entries.push(TimingEntry { offset_ticks: offset, basis: Basis::from_bit(flags) });
        }
        Ok(TimingPayload { entries })
    }
}

/// SIFT_ACK payload: ascending indices into the TIMING entries of the same
/// epoch that the peer confirms.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SiftAckPayload {
    pub indices: Vec<u32>,
}

impl SiftAckPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.indices.len());
        out.extend_from_slice(&(self.indices.len() as u32).to_le_bytes());
        for i in &self.indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() < 4 {
            return Err(FrameError::BadPayload("sift_ack"));
        }
        let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        if bytes.len() != 4 + 4 * count {
            return Err(FrameError::BadPayload("sift_ack"));
        }
        let mut indices = Vec::with_capacity(count);
        let mut prev: Option<u32> = None;
        for k in 0..count {
            let at = 4 + 4 * k;
            let i = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
            if prev.is_some_and(|p| i <= p) {
                return Err(FrameError::BadPayload("sift_ack"));
            }
            prev = Some(i);
            indices.push(i);
        }
        Ok(SiftAckPayload { indices })
    }
}

/// Pack bits LSB-first into bytes (bit i of the stream -> byte i/8, bit i%8).
pub fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b & 1 == 1 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], count: usize) -> Vec<u8> {
    (0..count).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect()
}

/// EC_PARITY payloads (reference side -> correcting side).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EcParityPayload {
    /// Announces the reconciliation parameters before the first pass.
    Init {
        q_est_micro: u32,
        key_len: u32,
        passes: u8,
        initial_block: u32,
        perm_seeds: Vec<u64>,
    },
    /// Parity answers (one bit per query of the referenced round).
    Answers { round: u32, parities: Vec<u8>, count: u32 },
}

impl EcParityPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            EcParityPayload::Init { q_est_micro, key_len, passes, initial_block, perm_seeds } => {
                out.push(0x01);
                out.extend_from_slice(&q_est_micro.to_le_bytes());
                out.extend_from_slice(&key_len.to_le_bytes());
                out.push(*passes);
                out.extend_from_slice(&initial_block.to_le_bytes());
                out.push(perm_seeds.len() as u8);
                for s in perm_seeds {
                    out.extend_from_slice(&s.to_le_bytes());
                }
            }
            EcParityPayload::Answers { round, parities, count } => {
                out.push(0x02);
                out.extend_from_slice(&round.to_le_bytes());
                out.extend_from_slice(&count.to_le_bytes());
                out.extend_from_slice(&pack_bits(parities));
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        let bad = || FrameError::BadPayload("ec_parity");
        if bytes.is_empty() {
            return Err(bad());
        }
        match bytes[0] {
            0x01 => {
                if bytes.len() < 15 {
                    return Err(bad());
                }
                let q_est_micro = u32::from_le_bytes(bytes[1..5].try_into().unwrap());
                let key_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
                let passes = bytes[9];
                let initial_block = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
                let nseeds = bytes[14] as usize;
                if bytes.len() != 15 + 8 * nseeds {
                    return Err(bad());
                }
                let perm_seeds = (0..nseeds)
                    .map(|k| {
                        u64::from_le_bytes(bytes[15 + 8 * k..23 + 8 * k].try_into().unwrap())
                    })
                    .collect();
                Ok(EcParityPayload::Init { q_est_micro, key_len, passes, initial_block, perm_seeds })
            }
            0x02 => {
                if bytes.len() < 9 {
                    return Err(bad());
                }
                let round = u32::from_le_bytes(bytes[1..5].try_into().unwrap());
                let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
                if bytes.len() != 9 + (count as usize).div_ceil(8) {
                    return Err(bad());
                }
                let parities = unpack_bits(&bytes[9..], count as usize);
                Ok(EcParityPayload::Answers { round, parities, count })
            }
            _ => Err(bad()),
        }
    }
}

/// One parity query: XOR of the reference key over permuted positions
/// [lo, hi) of the given pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParityQuery {
    pub pass: u8,
    pub lo: u32,
    pub hi: u32,
}

/// EC_REPLY payloads (correcting side -> reference side).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EcReplyPayload {
    Queries { round: u32, queries: Vec<ParityQuery> },
    Done { corrections: u32 },
}

impl EcReplyPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            EcReplyPayload::Queries { round, queries } => {
                out.push(0x01);
                out.extend_from_slice(&round.to_le_bytes());
                out.extend_from_slice(&(queries.len() as u32).to_le_bytes());
                for q in queries {
                    out.push(q.pass);
                    out.extend_from_slice(&q.lo.to_le_bytes());
                    out.extend_from_slice(&q.hi.to_le_bytes());
                }
            }
            EcReplyPayload::Done { corrections } => {
                out.push(0x02);
                out.extend_from_slice(&corrections.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        let bad = || FrameError::BadPayload("ec_reply");
        if bytes.is_empty() {
            return Err(bad());
        }
        match bytes[0] {
            0x01 => {
                if bytes.len() < 9 {
                    return Err(bad());
                }
                let round = u32::from_le_bytes(bytes[1..5].try_into().unwrap());
                let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
                if bytes.len() != 9 + 9 * count {
                    return Err(bad());
                }
                let mut queries = Vec::with_capacity(count);
                for k in 0..count {
                    let at = 9 + 9 * k;
                    queries.push(ParityQuery {
                        pass: bytes[at],
                        lo: u32::from_le_bytes(bytes[at + 1..at + 5].try_into().unwrap()),
                        hi: u32::from_le_bytes(bytes[at + 5..at + 9].try_into().unwrap()),
                    });
                }
                Ok(EcReplyPayload::Queries { round, queries })
            }
            0x02 => {
                if bytes.len() != 5 {
                    return Err(bad());
                }
                Ok(EcReplyPayload::Done {
                    corrections: u32::from_le_bytes(bytes[1..5].try_into().unwrap()),
                })
            }
            _ => Err(bad()),
        }
    }
}

/// PA_SEED payload: everything a passive party needs to replay privacy
/// amplification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaSeedPayload {
    pub seed: [u8; 32],
    pub input_len: u32,
    pub output_len: u32,
    pub leaked_bits: u32,
    pub safety_margin: u32,
}

impl PaSeedPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48);
        out.extend_from_slice(&self.seed);
        out.extend_from_slice(&self.input_len.to_le_bytes());
        out.extend_from_slice(&self.output_len.to_le_bytes());
        out.extend_from_slice(&self.leaked_bits.to_le_bytes());
        out.extend_from_slice(&self.safety_margin.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() != 48 {
            return Err(FrameError::BadPayload("pa_seed"));
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&bytes[0..32]);
        Ok(PaSeedPayload {
            seed,
            input_len: u32::from_le_bytes(bytes[32..36].try_into().unwrap()),
            output_len: u32::from_le_bytes(bytes[36..40].try_into().unwrap()),
            leaked_bits: u32::from_le_bytes(bytes[40..44].try_into().unwrap()),
            safety_margin: u32::from_le_bytes(bytes[44..48].try_into().unwrap()),
        })
    }
}

/// SESSION_CTL payloads: session bracketing, QBER estimation exchange and the
/// post-correction verification hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionCtlPayload {
    Start { duration_s: u32, double_click_policy: u8, num_epochs: u32 },
    /// Publicly sampled positions (derived from the seed) and the sampler's
    /// bit values at them.
    QberSample { seed: u64, fraction_micro: u32, count: u32, bits: Vec<u8> },
    QberResult { q_est_micro: u32, sample_count: u32, mismatches: u32 },
    EcHash { hash: u64 },
    EcVerdict { ok: u8 },
    End { status: u8, final_len: u32 },
}

impl SessionCtlPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            SessionCtlPayload::Start { duration_s, double_click_policy, num_epochs } => {
                out.push(0x01);
                out.extend_from_slice(&duration_s.to_le_bytes());
                out.push(*double_click_policy);
                out.extend_from_slice(&num_epochs.to_le_bytes());
            }
            SessionCtlPayload::QberSample { seed, fraction_micro, count, bits } => {
                out.push(0x02);
                out.extend_from_slice(&seed.to_le_bytes());
                out.extend_from_slice(&fraction_micro.to_le_bytes());
                out.extend_from_slice(&count.to_le_bytes());
                out.extend_from_slice(&pack_bits(bits));
            }
            SessionCtlPayload::QberResult { q_est_micro, sample_count, mismatches } => {
                out.push(0x03);
                out.extend_from_slice(&q_est_micro.to_le_bytes());
                out.extend_from_slice(&sample_count.to_le_bytes());
                out.extend_from_slice(&mismatches.to_le_bytes());
            }
            SessionCtlPayload::EcHash { hash } => {
                out.push(0x04);
                out.extend_from_slice(&hash.to_le_bytes());
            }
            SessionCtlPayload::EcVerdict { ok } => {
                out.push(0x05);
                out.push(*ok);
            }
            SessionCtlPayload::End { status, final_len } => {
                out.push(0x06);
                out.push(*status);
                out.extend_from_slice(&final_len.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        let bad = || FrameError::BadPayload("session_ctl");
        if bytes.is_empty() {
            return Err(bad());
        }
        match bytes[0] {
            0x01 => {
                if bytes.len() != 10 {
                    return Err(bad());
                }
                Ok(SessionCtlPayload::Start {
                    duration_s: u32::from_le_bytes(bytes[1..5].try_into().unwrap()),
                    double_click_policy: bytes[5],
                    num_epochs: u32::from_le_bytes(bytes[6..10].try_into().unwrap()),
                })
            }
            0x02 => {
                if bytes.len() < 17 {
                    return Err(bad());
                }
                let seed = u64::from_le_bytes(bytes[1..9].try_into().unwrap());
                let fraction_micro = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
                let count = u32::from_le_bytes(bytes[13..17].try_into().unwrap());
                if bytes.len() != 17 + (count as usize).div_ceil(8) {
                    return Err(bad());
                }
                let bits = unpack_bits(&bytes[17..], count as usize);
                Ok(SessionCtlPayload::QberSample { seed, fraction_micro, count, bits })
            }
            0x03 => {
                if bytes.len() != 13 {
                    return Err(bad());
                }
                Ok(SessionCtlPayload::QberResult {
                    q_est_micro: u32::from_le_bytes(bytes[1..5].try_into().unwrap()),
                    sample_count: u32::from_le_bytes(bytes[5..9].try_into().unwrap()),
                    mismatches: u32::from_le_bytes(bytes[9..13].try_into().unwrap()),
                })
            }
            0x04 => {
                if bytes.len() != 9 {
                    return Err(bad());
                }
                Ok(SessionCtlPayload::EcHash {
                    hash: u64::from_le_bytes(bytes[1..9].try_into().unwrap()),
                })
            }
            0x05 => {
                if bytes.len() != 2 {
                    return Err(bad());
                }
                Ok(SessionCtlPayload::EcVerdict { ok: bytes[1] })
            }
            0x06 => {
                if bytes.len() != 6 {
                    return Err(bad());
                }
                Ok(SessionCtlPayload::End {
                    status: bytes[1],
                    final_len: u32::from_le_bytes(bytes[2..6].try_into().unwrap()),
                })
            }
            _ => Err(bad()),
        }
    }
}
