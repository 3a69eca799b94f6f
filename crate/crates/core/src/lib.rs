//! Covert data transfer over BLE advertising.
//!
//! This crate models the full stack of an advertisement-based covert channel:
//!
//! - [`pdu`] — bit-exact construction, serialization, and parsing of
//!   advertising-channel PDUs carrying a service-data AD structure (legacy and
//!   extended advertising).
//! - [`protocol`] — command and segment encoding inside the service-data
//!   bytes, payload segmentation/reassembly, and the peer table mapping
//!   changeable advertiser UUIDs to permanent agent identifiers.
//! - [`controller`] / [`agent`] — the two protocol state machines: the
//!   controller drives discovery, selection, transfer, validation, and
//!   recovery; the agent replies to discovery and transmits segments.
//! - [`medium`] — a deterministic discrete-event broadcast channel with
//!   seeded loss and delay models, driving both state machines.
//! - [`metrics`] — per-run evaluation (data rate, loss, inter-arrival, total
//!   time, received-over-time curve) with duplicate exclusion, plus the CSV
//!   output schema.
//! - [`countermeasures`] — OS-side advertisement filters (rate limiting,
//!   change-frequency limiting, semantic checks, restricted vocabularies) and
//!   the bit-level vocabulary re-encoding they force an attacker into.
//! - [`scenario`] — config-file driven runner sweeping intervals and seeds.
//!
//! Everything is deterministic for a fixed seed: two runs of the same
//! scenario produce byte-identical event logs and CSV output.

use std::fmt;
use std::ops::{Add, AddAssign};

pub mod agent;
pub mod controller;
pub mod countermeasures;
pub mod event;
pub mod medium;
pub mod metrics;
pub mod pdu;
pub mod protocol;
pub mod scenario;
pub mod trace;

/// Simulated time in integer milliseconds from the start of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn ms(v: u64) -> Self {
        SimTime(v)
    }

    pub fn as_ms(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    /// Milliseconds elapsed since `earlier`, zero if `earlier` is later.
    pub fn since(self, earlier: SimTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;

    fn add(self, rhs: u64) -> SimTime {
        SimTime(self.0 + rhs)
    }
}

impl AddAssign<u64> for SimTime {
    fn add_assign(&mut self, rhs: u64) {
        self.0 += rhs;
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifies one simulated radio node. The controller is node 0 by
/// convention in scenario-built simulations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
