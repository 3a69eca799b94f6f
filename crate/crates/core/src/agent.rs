//! The victim-side state machine.
//!
//! The agent listens for advertisements carrying the controller's UUID,
//! replies to discovery with its identifier, and once selected and started
//! broadcasts the segmented payload at interval `t`, repeating the full
//! sequence `R` times (or until timeout `T` with unbounded repeats). It
//! serves selective retransmission requests and halts immediately on a stop
//! command. Commands addressed to other agents are ignored.
//!
//! Emission pacing: each advertisement is scheduled one interval after the
//! previous one hit the air, so consecutive emissions are spaced by `t` plus
//! the medium's per-advertisement random delay. At the start of every full
//! pass a transfer header announcing the segment count rides alongside the
//! first segment without consuming a pacing slot.

use std::collections::VecDeque;

use crate::event::{Action, NodeEvent, TimerKind};
use crate::pdu::ServiceUuid;
use crate::protocol::{
    decode_message, segment_payload, AgentId, ChannelMessage, Direction, ProtocolError, Segment,
    SegmentNumber,
};
use crate::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentPhase {
    Listening,
    Replying,
    AwaitSelection,
    Transmitting,
    AwaitInstruction,
}

impl AgentPhase {
    pub fn name(self) -> &'static str {
        match self {
            AgentPhase::Listening => "listening",
            AgentPhase::Replying => "replying",
            AgentPhase::AwaitSelection => "await_selection",
            AgentPhase::Transmitting => "transmitting",
            AgentPhase::AwaitInstruction => "await_instruction",
        }
    }
}

/// Full-sequence repeat count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Repeat {
    Count(u32),
    Infinite,
}

/// Transmission schedule: interval, repeats, optional timeout.
#[derive(Debug, Clone, Copy)]
pub struct AgentSchedule {
    pub interval_ms: u16,
    pub repeat: Repeat,
    /// Stop transmitting once this much time has passed since the start
    /// command. With `Repeat::Infinite` this is the only bound.
    pub timeout_ms: Option<u64>,
    /// Worst-case medium delay; emissions are withheld when the scheduled
    /// advertisement could land at or past the timeout.
    pub delay_margin_ms: u64,
}

/// The agent's identity pair: the OS-assigned, session-scoped advertiser
/// UUID and the permanent application identifier.
#[derive(Debug, Clone, Copy)]
pub struct AgentIdentity {
    pub uuid_v: ServiceUuid,
    pub agent_id: AgentId,
}

#[derive(Debug, Clone)]
pub struct Agent {
    phase: AgentPhase,
    identity: AgentIdentity,
    uuid_a: ServiceUuid,
    segments: Vec<Segment>,
    payload_len: usize,
    schedule: AgentSchedule,
    selected: bool,
    /// Messages left to emit in the current pass or retransmission batch.
    queue: VecDeque<ChannelMessage>,
    /// Passes loaded so far in the current transfer.
    passes_loaded: u32,
    /// Set while the queue holds a retransmission batch (no refill).
    retransmitting: bool,
    transfer_started: Option<SimTime>,
    next_emit_at: Option<SimTime>,
}

impl Agent {
    pub fn new(
        identity: AgentIdentity,
        uuid_a: ServiceUuid,
        payload: &[u8],
        z: usize,
        schedule: AgentSchedule,
    ) -> Result<Self, ProtocolError> {
        let segments = segment_payload(payload, z)?;
        Ok(Agent {
            phase: AgentPhase::Listening,
            identity,
            uuid_a,
            segments,
            payload_len: payload.len(),
            schedule,
            selected: false,
            queue: VecDeque::new(),
            passes_loaded: 0,
            retransmitting: false,
            transfer_started: None,
            next_emit_at: None,
        })
    }

    pub fn phase(&self) -> AgentPhase {
        self.phase
    }

    pub fn identity(&self) -> &AgentIdentity {
        &self.identity
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn is_selected(&self) -> bool {
        self.selected
    }

    fn header(&self) -> ChannelMessage {
        ChannelMessage::TransferHeader {
            segment_count: self.segments.len() as u16,
            total_len: self.payload_len as u32,
        }
    }

    fn halt(&mut self) {
        self.queue.clear();
        self.next_emit_at = None;
        self.retransmitting = false;
        if self.phase == AgentPhase::Transmitting {
            self.phase = AgentPhase::AwaitInstruction;
        }
    }

    /// The timeout bounds the repeat passes only; explicitly requested
    /// retransmissions are served in full.
    fn timed_out(&self, now: SimTime) -> bool {
        if self.retransmitting {
            return false;
        }
        match (self.schedule.timeout_ms, self.transfer_started) {
            (Some(t), Some(started)) => now.since(started) + self.schedule.delay_margin_ms >= t,
            _ => false,
        }
    }

    fn more_passes_allowed(&self) -> bool {
        match self.schedule.repeat {
            Repeat::Count(r) => self.passes_loaded < r,
            Repeat::Infinite => true,
        }
    }

    /// Emits the next queued advertisement, refilling the queue at pass
    /// boundaries. The transfer header accompanies the first advertisement
    /// of each pass.
    fn emit_next(&mut self, now: SimTime, out: &mut Vec<Action>) {
        if self.timed_out(now) {
            out.push(Action::Note("transmission timeout reached".into()));
            self.halt();
            return;
        }
        let mut pass_start = false;
        if self.queue.is_empty() {
            if self.retransmitting || !self.more_passes_allowed() {
                self.halt();
                return;
            }
            self.passes_loaded += 1;
            pass_start = true;
            for seg in &self.segments {
                self.queue.push_back(ChannelMessage::Segment(seg.clone()));
            }
        }
        if pass_start {
            out.push(Action::Send(self.header()));
        }
        match self.queue.pop_front() {
            Some(msg) => out.push(Action::Send(msg)),
            None => {
                // empty payload: the header alone was this pass
                self.halt();
            }
        }
    }

    fn begin_transfer(&mut self, interval_ms: u16, now: SimTime, out: &mut Vec<Action>) {
        self.schedule.interval_ms = interval_ms;
        self.transfer_started = Some(now);
        self.passes_loaded = 0;
        self.retransmitting = false;
        self.queue.clear();
        self.next_emit_at = None;
        self.phase = AgentPhase::Transmitting;
        self.emit_next(now, out);
    }

    /// Queues exactly the requested segments, ascending, for paced emission.
    ///
    /// A request list that did not fit one advertisement arrives as several
    /// retransmit commands in quick succession; requests received while a
    /// batch is already being served are merged into it.
    pub fn retransmit(
        &mut self,
        missing: &[SegmentNumber],
        interval_ms: u16,
        now: SimTime,
    ) -> Result<Vec<Action>, ProtocolError> {
        let n = self.segments.len();
        for m in missing {
            if m.value() as usize >= n {
                return Err(ProtocolError::OutOfRangeSegment { number: m.value(), n });
            }
        }
        let mut out = Vec::new();
        if missing.is_empty() {
            return Ok(out);
        }
        self.schedule.interval_ms = interval_ms;
        let mut sorted: Vec<SegmentNumber> = missing.to_vec();
        sorted.sort();
        sorted.dedup();
        let appending = self.phase == AgentPhase::Transmitting && self.retransmitting;
        if !appending {
            self.queue.clear();
        }
        for num in sorted {
            let msg = ChannelMessage::Segment(self.segments[num.value() as usize].clone());
            if !self.queue.contains(&msg) {
                self.queue.push_back(msg);
            }
        }
        self.retransmitting = true;
        self.phase = AgentPhase::Transmitting;
        if !appending {
            self.emit_next(now, &mut out);
        }
        Ok(out)
    }

    fn handle_command(&mut self, data: &[u8], now: SimTime, out: &mut Vec<Action>) {
        let msg = match decode_message(Direction::ControllerToAgent, data, false) {
            Ok(m) => m,
            Err(e) => {
                out.push(Action::Note(format!("undecodable command: {e}")));
                return;
            }
        };
        match msg {
            ChannelMessage::Discovery => {
                if self.phase == AgentPhase::Transmitting {
                    out.push(Action::Note("discovery ignored mid-transfer".into()));
                    return;
                }
                self.selected = false;
                self.phase = AgentPhase::Replying;
                out.push(Action::Send(ChannelMessage::DiscoveryReply(self.identity.agent_id)));
            }
            ChannelMessage::Select(id) => {
                if self.phase == AgentPhase::Transmitting {
                    return;
                }
                if id == self.identity.agent_id {
                    self.selected = true;
                    self.phase = AgentPhase::AwaitSelection;
                } else {
                    self.selected = false;
                    self.phase = AgentPhase::Listening;
                }
            }
            ChannelMessage::StartTransfer { interval_ms } => {
                if !self.selected {
                    return;
                }
                if self.phase == AgentPhase::Transmitting {
                    out.push(Action::Note("start ignored: transfer already running".into()));
                    return;
                }
                self.begin_transfer(interval_ms, now, out);
            }
            ChannelMessage::StopTransfer => {
                if !self.selected {
                    return;
                }
                self.halt();
            }
            ChannelMessage::Retransmit { missing, interval_ms } => {
                if !self.selected {
                    return;
                }
                if self.phase == AgentPhase::Transmitting && !self.retransmitting {
                    out.push(Action::Note("retransmit ignored mid-pass".into()));
                    return;
                }
                match self.retransmit(&missing, interval_ms, now) {
                    Ok(actions) => out.extend(actions),
                    Err(e) => out.push(Action::Note(format!("retransmit rejected: {e}"))),
                }
            }
            other => {
                out.push(Action::Note(format!("unexpected {}: ignored", other.label())));
            }
        }
    }

    fn handle_adv_sent(&mut self, msg: &ChannelMessage, now: SimTime, out: &mut Vec<Action>) {
        match msg {
            ChannelMessage::DiscoveryReply(_) => {
                if self.phase == AgentPhase::Replying {
                    self.phase = AgentPhase::AwaitSelection;
                }
            }
            ChannelMessage::Segment(_) => {
                if self.phase != AgentPhase::Transmitting {
                    return;
                }
                if self.queue.is_empty() && (self.retransmitting || !self.more_passes_allowed()) {
                    self.halt();
                    return;
                }
                let at = now + self.schedule.interval_ms as u64;
                self.next_emit_at = Some(at);
                out.push(Action::ArmTimer { at, kind: TimerKind::Emit });
            }
            ChannelMessage::TransferHeader { .. }
                // a header-only pass (empty payload) ends immediately
                if self.phase == AgentPhase::Transmitting && self.segments.is_empty() => {
                    self.halt();
                }
            _ => {}
        }
    }

    pub fn step(&mut self, event: &NodeEvent, now: SimTime) -> Vec<Action> {
        let mut out = Vec::new();
        match event {
            NodeEvent::Deliver { uuid, service_data } => {
                if *uuid != self.uuid_a {
                    return out; // another node's advertisement
                }
                self.handle_command(service_data, now, &mut out);
            }
            NodeEvent::AdvSent { msg } => self.handle_adv_sent(msg, now, &mut out),
            NodeEvent::Timer(TimerKind::Emit) => {
                if self.phase == AgentPhase::Transmitting && self.next_emit_at == Some(now) {
                    self.next_emit_at = None;
                    self.emit_next(now, &mut out);
                }
            }
            NodeEvent::Timer(_) => {}
        }
        out
    }
}
