//! Deterministic discrete-event simulator of an entangled-photon QKD link,
//! including a detector-blinding faked-state eavesdropper that controls the
//! receiver and extracts the final key from a classical-channel wiretap.

pub mod detector;
pub mod photonics;
pub mod rng;
pub mod protocol;
pub mod timetag;
