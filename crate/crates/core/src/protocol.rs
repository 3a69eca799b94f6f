//! Channel messages carried in the service-data bytes, payload segmentation,
//! and the peer table.
//!
//! Controller-to-agent traffic is a command byte with arguments. Agent-to-
//! controller traffic is either a discovery reply (three-byte `0x000000`
//! marker followed by the agent identifier), a transfer header (reserved
//! first byte 0xFF carrying the segment count and total length), or a payload
//! segment (one number byte, then up to z data bytes). Segments and discovery
//! replies are disambiguated by direction plus whether a transfer is active
//! for the sending UUID, so arbitrary payload bytes can never be misread as a
//! reply marker.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::pdu::ServiceUuid;
use crate::SimTime;

/// Wire length of an agent identifier. Eight bytes fit the legacy
/// service-data budget next to the three-byte reply marker while keeping
/// collisions negligible.
pub const AGENT_ID_LEN: usize = 8;

/// Marker prefix of a discovery reply.
pub const DISCOVERY_REPLY_MARKER: [u8; 3] = [0x00, 0x00, 0x00];

/// Reserved segment-number value; marks a transfer header on the wire.
pub const TRANSFER_HEADER_MARKER: u8 = 0xFF;

/// Highest usable segment number; 255 is reserved.
pub const MAX_SEGMENT_NUMBER: u8 = 254;

/// Segments per transfer are capped by the one-byte wire numbering.
pub const MAX_SEGMENTS_PER_TRANSFER: usize = 255;

/// Legacy segment payload budget: 13 service-data bytes minus the number.
pub const LEGACY_MAX_SEGMENT_BYTES: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("message needs {len} bytes but the service-data budget is {budget}")]
    OversizeMessage { len: usize, budget: usize },
    #[error("unknown command byte 0x{0:02x}")]
    UnknownCommand(u8),
    #[error("malformed arguments for {0}")]
    MalformedArguments(&'static str),
    #[error("payload of {len} bytes exceeds {max} for one transfer")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("segment size must be at least 1")]
    InvalidSegmentSize,
    #[error("conflicting duplicate of segment {0}")]
    ConflictingDuplicate(u8),
    #[error("segment number {number} out of range (n = {n})")]
    OutOfRangeSegment { number: u8, n: usize },
    #[error("agent {0} not present in the peer table")]
    UnknownAgent(AgentId),
    #[error("controller and agent UUIDs must differ")]
    UuidClash,
}

/// Permanent application-level identifier of an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentId(pub [u8; AGENT_ID_LEN]);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// One-byte segment number, 0..=254.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SegmentNumber(u8);

impl SegmentNumber {
    pub fn new(value: u8) -> Option<Self> {
        (value <= MAX_SEGMENT_NUMBER).then_some(SegmentNumber(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl fmt::Display for SegmentNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One payload fragment: number plus data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub number: SegmentNumber,
    pub data: Vec<u8>,
}

/// Command bytes issued by the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum CommandCode {
    Discovery = 0x00,
    Select = 0x01,
    StartTransfer = 0x02,
    StopTransfer = 0x03,
    Retransmit = 0x04,
}

impl CommandCode {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x00 => Some(CommandCode::Discovery),
            0x01 => Some(CommandCode::Select),
            0x02 => Some(CommandCode::StartTransfer),
            0x03 => Some(CommandCode::StopTransfer),
            0x04 => Some(CommandCode::Retransmit),
            _ => None,
        }
    }
}

/// Decoded protocol-level content of one advertisement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelMessage {
    Discovery,
    Select(AgentId),
    StartTransfer { interval_ms: u16 },
    StopTransfer,
    Retransmit { missing: Vec<SegmentNumber>, interval_ms: u16 },
    DiscoveryReply(AgentId),
    /// Announces segment count and total payload length for the transfer.
    /// Marked on the wire by the reserved segment number 0xFF.
    TransferHeader { segment_count: u16, total_len: u32 },
    Segment(Segment),
}

impl ChannelMessage {
    /// Short stable label used in trace lines.
    pub fn label(&self) -> String {
        match self {
            ChannelMessage::Discovery => "discovery".into(),
            ChannelMessage::Select(id) => format!("select:{id}"),
            ChannelMessage::StartTransfer { interval_ms } => format!("start:t={interval_ms}"),
            ChannelMessage::StopTransfer => "stop".into(),
            ChannelMessage::Retransmit { missing, .. } => {
                format!("retransmit:{}", missing.len())
            }
            ChannelMessage::DiscoveryReply(id) => format!("reply:{id}"),
            ChannelMessage::TransferHeader { segment_count, total_len } => {
                format!("header:n={segment_count},len={total_len}")
            }
            ChannelMessage::Segment(s) => format!("segment:{},len={}", s.number, s.data.len()),
        }
    }
}

/// Who sent the bytes; decoding depends on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ControllerToAgent,
    AgentToController,
}

/// Encodes a message into service-data bytes, checking the budget of the
/// active advertising kind.
pub fn encode_message(msg: &ChannelMessage, budget: usize) -> Result<Vec<u8>, ProtocolError> {
    let bytes = match msg {
        ChannelMessage::Discovery => vec![CommandCode::Discovery as u8],
        ChannelMessage::Select(id) => {
            let mut v = vec![CommandCode::Select as u8];
            v.extend_from_slice(&id.0);
            v
        }
        ChannelMessage::StartTransfer { interval_ms } => {
            let mut v = vec![CommandCode::StartTransfer as u8];
            v.extend_from_slice(&interval_ms.to_be_bytes());
            v
        }
        ChannelMessage::StopTransfer => vec![CommandCode::StopTransfer as u8],
        ChannelMessage::Retransmit { missing, interval_ms } => {
            let mut v = vec![CommandCode::Retransmit as u8];
            v.extend(missing.iter().map(|s| s.value()));
            v.extend_from_slice(&interval_ms.to_be_bytes());
            v
        }
        ChannelMessage::DiscoveryReply(id) => {
            let mut v = DISCOVERY_REPLY_MARKER.to_vec();
            v.extend_from_slice(&id.0);
            v
        }
        ChannelMessage::TransferHeader { segment_count, total_len } => {
            let mut v = vec![TRANSFER_HEADER_MARKER];
            v.extend_from_slice(&segment_count.to_be_bytes());
            v.extend_from_slice(&total_len.to_be_bytes());
            v
        }
        ChannelMessage::Segment(s) => {
            let mut v = vec![s.number.value()];
            v.extend_from_slice(&s.data);
            v
        }
    };
    if bytes.len() > budget {
        return Err(ProtocolError::OversizeMessage { len: bytes.len(), budget });
    }
    Ok(bytes)
}

fn read_agent_id(raw: &[u8]) -> Option<AgentId> {
    let mut id = [0u8; AGENT_ID_LEN];
    if raw.len() != AGENT_ID_LEN {
        return None;
    }
    id.copy_from_slice(raw);
    Some(AgentId(id))
}

/// Decodes service-data bytes.
///
/// Controller-to-agent bytes decode by command code. Agent-to-controller
/// bytes decode as a transfer header (0xFF marker), a discovery reply
/// (`0x000000` marker while no transfer is active for the sender), or a
/// segment otherwise. `transfer_active` is the receiver's session state for
/// the sending UUID.
pub fn decode_message(
    direction: Direction,
    raw: &[u8],
    transfer_active: bool,
) -> Result<ChannelMessage, ProtocolError> {
    if raw.is_empty() {
        return Err(ProtocolError::MalformedArguments("empty service data"));
    }
    match direction {
        Direction::ControllerToAgent => match CommandCode::from_byte(raw[0]) {
            Some(CommandCode::Discovery) => {
                if raw.len() != 1 {
                    return Err(ProtocolError::MalformedArguments("discovery"));
                }
                Ok(ChannelMessage::Discovery)
            }
            Some(CommandCode::Select) => read_agent_id(&raw[1..])
                .map(ChannelMessage::Select)
                .ok_or(ProtocolError::MalformedArguments("select")),
            Some(CommandCode::StartTransfer) => {
                if raw.len() != 3 {
                    return Err(ProtocolError::MalformedArguments("start"));
                }
                Ok(ChannelMessage::StartTransfer {
                    interval_ms: u16::from_be_bytes([raw[1], raw[2]]),
                })
            }
            Some(CommandCode::StopTransfer) => {
                if raw.len() != 1 {
                    return Err(ProtocolError::MalformedArguments("stop"));
                }
                Ok(ChannelMessage::StopTransfer)
            }
            Some(CommandCode::Retransmit) => {
                if raw.len() < 3 {
                    return Err(ProtocolError::MalformedArguments("retransmit"));
                }
                let (nums, t) = raw[1..].split_at(raw.len() - 3);
                let missing = nums
                    .iter()
                    .map(|&b| SegmentNumber::new(b))
                    .collect::<Option<Vec<_>>>()
                    .ok_or(ProtocolError::MalformedArguments("retransmit numbers"))?;
                Ok(ChannelMessage::Retransmit {
                    missing,
                    interval_ms: u16::from_be_bytes([t[0], t[1]]),
                })
            }
            None => Err(ProtocolError::UnknownCommand(raw[0])),
        },
        Direction::AgentToController => {
            if raw[0] == TRANSFER_HEADER_MARKER {
                if raw.len() != 7 {
                    return Err(ProtocolError::MalformedArguments("transfer header"));
                }
                return Ok(ChannelMessage::TransferHeader {
                    segment_count: u16::from_be_bytes([raw[1], raw[2]]),
                    total_len: u32::from_be_bytes([raw[3], raw[4], raw[5], raw[6]]),
                });
            }
            if !transfer_active && raw.starts_with(&DISCOVERY_REPLY_MARKER) {
                return read_agent_id(&raw[3..])
                    .map(ChannelMessage::DiscoveryReply)
                    .ok_or(ProtocolError::MalformedArguments("discovery reply"));
            }
            let number = SegmentNumber::new(raw[0]).expect("0xFF handled above");
            Ok(ChannelMessage::Segment(Segment {
                number,
                data: raw[1..].to_vec(),
            }))
        }
    }
}

/// Splits a payload into `ceil(len / z)` segments numbered from zero, all of
/// size `z` except possibly the last.
pub fn segment_payload(payload: &[u8], z: usize) -> Result<Vec<Segment>, ProtocolError> {
    if z == 0 {
        return Err(ProtocolError::InvalidSegmentSize);
    }
    let max = MAX_SEGMENTS_PER_TRANSFER * z;
    if payload.len() > max {
        return Err(ProtocolError::PayloadTooLarge { len: payload.len(), max });
    }
    Ok(payload
        .chunks(z)
        .enumerate()
        .map(|(i, chunk)| Segment {
            number: SegmentNumber::new(i as u8).expect("count capped at 255"),
            data: chunk.to_vec(),
        })
        .collect())
}

/// Result of a reassembly attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reassembly {
    Complete(Vec<u8>),
    Missing(Vec<SegmentNumber>),
}

/// Rebuilds the payload from received segments, or reports the sorted list
/// of missing numbers. Byte-identical duplicates are counted once; a
/// duplicate with different bytes is a hard error.
pub fn reassemble(segments: &[Segment], expected_n: usize) -> Result<Reassembly, ProtocolError> {
    let mut by_number: BTreeMap<u8, &[u8]> = BTreeMap::new();
    for seg in segments {
        let num = seg.number.value();
        if (num as usize) >= expected_n {
            return Err(ProtocolError::OutOfRangeSegment { number: num, n: expected_n });
        }
        match by_number.get(&num) {
            Some(existing) if *existing != seg.data.as_slice() => {
                return Err(ProtocolError::ConflictingDuplicate(num));
            }
            _ => {
                by_number.insert(num, &seg.data);
            }
        }
    }
    if by_number.len() == expected_n {
        let mut payload = Vec::new();
        for data in by_number.values() {
            payload.extend_from_slice(data);
        }
        Ok(Reassembly::Complete(payload))
    } else {
        let missing = (0..expected_n as u8)
            .filter(|n| !by_number.contains_key(n))
            .map(|n| SegmentNumber::new(n).expect("expected_n capped"))
            .collect();
        Ok(Reassembly::Missing(missing))
    }
}

/// Splits a missing-segment list across as many retransmit advertisements as
/// the service-data budget requires.
pub fn split_retransmit(
    missing: &[SegmentNumber],
    interval_ms: u16,
    budget: usize,
) -> Vec<ChannelMessage> {
    let per_msg = budget.saturating_sub(3).max(1);
    missing
        .chunks(per_msg)
        .map(|chunk| ChannelMessage::Retransmit {
            missing: chunk.to_vec(),
            interval_ms,
        })
        .collect()
}

/// The two UUID roles of one session: the controller's fixed service UUID
/// and the agent's OS-assigned, regenerable one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UuidRoles {
    pub uuid_a: ServiceUuid,
    pub uuid_v: ServiceUuid,
}

impl UuidRoles {
    pub fn new(uuid_a: ServiceUuid, uuid_v: ServiceUuid) -> Result<Self, ProtocolError> {
        if uuid_a == uuid_v {
            return Err(ProtocolError::UuidClash);
        }
        Ok(UuidRoles { uuid_a, uuid_v })
    }
}

/// Peer-table entry: the permanent identifier behind a (changeable) UUID.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeerEntry {
    pub agent_id: AgentId,
    pub first_seen: SimTime,
    pub last_seen: SimTime,
}

/// Maps the agents' current advertiser UUIDs to their permanent identifiers,
/// tracking the same agent across UUID changes. Updates are functional:
/// each observation produces a new table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PeerTable {
    entries: BTreeMap<ServiceUuid, PeerEntry>,
}

impl PeerTable {
    pub fn new() -> Self {
        PeerTable::default()
    }

    /// Records a discovery reply. A new UUID for an already-known agent
    /// evicts the stale mapping, so the table always holds one entry per
    /// agent.
    pub fn observe_reply(&self, uuid_v: ServiceUuid, agent_id: AgentId, now: SimTime) -> PeerTable {
        let mut entries = self.entries.clone();
        let first_seen = entries
            .iter()
            .find(|(_, e)| e.agent_id == agent_id)
            .map(|(_, e)| e.first_seen)
            .unwrap_or(now);
        entries.retain(|u, e| !(e.agent_id == agent_id && *u != uuid_v));
        entries.insert(uuid_v, PeerEntry { agent_id, first_seen, last_seen: now });
        PeerTable { entries }
    }

    /// Drops agents that failed to answer since `cutoff` (unreachable).
    pub fn prune_older_than(&self, cutoff: SimTime) -> PeerTable {
        let mut entries = self.entries.clone();
        entries.retain(|_, e| e.last_seen >= cutoff);
        PeerTable { entries }
    }

    pub fn get(&self, uuid_v: &ServiceUuid) -> Option<&PeerEntry> {
        self.entries.get(uuid_v)
    }

    pub fn contains_agent(&self, agent_id: &AgentId) -> bool {
        self.entries.values().any(|e| e.agent_id == *agent_id)
    }

    pub fn uuid_of(&self, agent_id: &AgentId) -> Option<ServiceUuid> {
        self.entries
            .iter()
            .find(|(_, e)| e.agent_id == *agent_id)
            .map(|(u, _)| *u)
    }

    /// The earliest-observed agent, ties broken by UUID order.
    pub fn first_seen(&self) -> Option<(ServiceUuid, AgentId)> {
        self.entries
            .iter()
            .min_by_key(|(u, e)| (e.first_seen, **u))
            .map(|(u, e)| (*u, e.agent_id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ServiceUuid, &PeerEntry)> {
        self.entries.iter()
    }
}
