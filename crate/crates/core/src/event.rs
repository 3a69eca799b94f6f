//! Events and actions exchanged between the simulation driver and the two
//! protocol state machines.
//!
//! Machines are stepped one event at a time and answer with actions; the
//! driver turns `Send` into a scheduled advertisement and echoes an
//! `AdvSent` back to the sender once the advertisement hits the air, which
//! is what paces emission chains.

use crate::pdu::ServiceUuid;
use crate::protocol::ChannelMessage;
use crate::SimTime;

/// Why a timer was armed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerKind {
    /// Initial kick delivered to the controller at time zero.
    Kickoff,
    /// Discovery reply window elapsed.
    DiscoveryDeadline,
    /// No segment arrived for the quiescence window; validate now.
    Quiescence,
    /// Emit the next queued advertisement.
    Emit,
}

/// One input to a state machine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeEvent {
    /// An advertisement was delivered to this node.
    Deliver {
        uuid: ServiceUuid,
        service_data: Vec<u8>,
    },
    /// This node's own advertisement reached the air.
    AdvSent { msg: ChannelMessage },
    /// A previously armed timer fired. Stale timers (superseded by newer
    /// state) are delivered too; machines ignore them by comparing against
    /// the deadline they currently expect.
    Timer(TimerKind),
}

/// One output of a state machine step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// Broadcast a message; the driver wraps it into a PDU and schedules it
    /// with the current time as base.
    Send(ChannelMessage),
    /// Arm a timer at an absolute simulated time.
    ArmTimer { at: SimTime, kind: TimerKind },
    /// Record a protocol violation or noteworthy condition in the trace.
    Note(String),
}
