//! The attacker-side state machine.
//!
//! Drives the phases: broadcast discovery and scan for replies, select a
//! target, command the transfer, collect segments, and once the channel goes
//! quiet validate the received set and request retransmission of whatever is
//! missing, until the payload reconstructs or the round cap runs out.
//!
//! The controller alternates advertiser and scanner roles: outbound
//! advertisements are produced only from timer expiries and from the
//! `AdvSent` continuation of its own previous advertisement, never directly
//! from a delivery.

use std::collections::{BTreeMap, VecDeque};

use crate::event::{Action, NodeEvent, TimerKind};
use crate::pdu::ServiceUuid;
use crate::protocol::{
    decode_message, reassemble, split_retransmit, AgentId, ChannelMessage, Direction, PeerTable,
    Reassembly, Segment, SegmentNumber, ProtocolError,
};
use crate::SimTime;

/// Controller phases. `Validating` is entered when the quiescence timer
/// fires and left in the same step, toward `Done`, `Recovering`, or back to
/// `Receiving` when the transfer must restart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtrlPhase {
    Idle,
    Discovering,
    Selecting,
    Receiving,
    Validating,
    Recovering,
    Done,
    Failed,
}

impl CtrlPhase {
    pub fn name(self) -> &'static str {
        match self {
            CtrlPhase::Idle => "idle",
            CtrlPhase::Discovering => "discovering",
            CtrlPhase::Selecting => "selecting",
            CtrlPhase::Receiving => "receiving",
            CtrlPhase::Validating => "validating",
            CtrlPhase::Recovering => "recovering",
            CtrlPhase::Done => "done",
            CtrlPhase::Failed => "failed",
        }
    }
}

/// Outcome of checking the received set against the announced count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Validation {
    Complete,
    Missing(Vec<SegmentNumber>),
}

/// How the controller picks its target among discovered agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSelection {
    FirstSeen,
    Explicit(AgentId),
}

#[derive(Debug, Clone)]
pub struct CtrlParams {
    /// Inter-advertisement interval commanded to the agent.
    pub interval_ms: u16,
    /// How long to scan for discovery replies before acting.
    pub discovery_timeout_ms: u64,
    /// Quiet window after the last segment arrival before validating.
    pub quiescence_ms: u64,
    /// Validation/recovery rounds allowed before reporting failure.
    pub recovery_round_cap: u32,
    /// Service-data budget of the active advertising kind.
    pub message_budget: usize,
}

impl CtrlParams {
    /// Defaults derived from the interval and the medium's delay bound:
    /// discovery waits two full advertisement periods, validation waits
    /// three intervals plus the worst-case delay.
    pub fn from_interval(interval_ms: u16, delay_max_ms: u64, recovery_round_cap: u32, message_budget: usize) -> Self {
        CtrlParams {
            interval_ms,
            discovery_timeout_ms: 2 * (interval_ms as u64 + delay_max_ms),
            quiescence_ms: 3 * interval_ms as u64 + delay_max_ms + 1,
            recovery_round_cap,
            message_budget,
        }
    }
}

/// The controller state machine.
#[derive(Debug, Clone)]
pub struct Controller {
    phase: CtrlPhase,
    peers: PeerTable,
    selected: Option<(AgentId, ServiceUuid)>,
    received: BTreeMap<u8, Vec<u8>>,
    expected_n: Option<u16>,
    expected_len: Option<u32>,
    params: CtrlParams,
    target: TargetSelection,
    outbox: VecDeque<ChannelMessage>,
    discovery_deadline: Option<SimTime>,
    quiescence_deadline: Option<SimTime>,
    last_discovery_at: SimTime,
    rounds_used: u32,
    reconstructed: Option<Vec<u8>>,
}

impl Controller {
    pub fn new(params: CtrlParams, target: TargetSelection) -> Self {
        Controller {
            phase: CtrlPhase::Idle,
            peers: PeerTable::new(),
            selected: None,
            received: BTreeMap::new(),
            expected_n: None,
            expected_len: None,
            params,
            target,
            outbox: VecDeque::new(),
            discovery_deadline: None,
            quiescence_deadline: None,
            last_discovery_at: SimTime::ZERO,
            rounds_used: 0,
            reconstructed: None,
        }
    }

    pub fn phase(&self) -> CtrlPhase {
        self.phase
    }

    pub fn peers(&self) -> &PeerTable {
        &self.peers
    }

    pub fn rounds_used(&self) -> u32 {
        self.rounds_used
    }

    pub fn expected_n(&self) -> Option<u16> {
        self.expected_n
    }

    pub fn unique_received(&self) -> usize {
        self.received.len()
    }

    /// The payload, once `phase` is `Done`.
    pub fn reconstructed(&self) -> Option<&[u8]> {
        self.reconstructed.as_deref()
    }

    /// Checks the received set against the announced segment count. `None`
    /// until a transfer header has arrived.
    pub fn validate(&self) -> Option<Validation> {
        let n = self.expected_n? as usize;
        let missing: Vec<SegmentNumber> = (0..n)
            .filter(|i| !self.received.contains_key(&(*i as u8)))
            .map(|i| SegmentNumber::new(i as u8).expect("n capped at 255"))
            .collect();
        Some(if missing.is_empty() {
            Validation::Complete
        } else {
            Validation::Missing(missing)
        })
    }

    /// Selects `target` as the transfer peer. The target must have been
    /// discovered.
    pub fn select_target(&mut self, target: AgentId) -> Result<ChannelMessage, ProtocolError> {
        let uuid = self
            .peers
            .uuid_of(&target)
            .ok_or(ProtocolError::UnknownAgent(target))?;
        self.selected = Some((target, uuid));
        Ok(ChannelMessage::Select(target))
    }

    fn transfer_active_for(&self, uuid: &ServiceUuid) -> bool {
        matches!(self.phase, CtrlPhase::Receiving | CtrlPhase::Recovering)
            && self.selected.as_ref().is_some_and(|(_, u)| u == uuid)
    }

    fn start_messages(&self) -> Vec<ChannelMessage> {
        let (id, _) = self.selected.expect("selected before start");
        vec![
            ChannelMessage::Select(id),
            ChannelMessage::StartTransfer { interval_ms: self.params.interval_ms },
        ]
    }

    fn enqueue_all(&mut self, msgs: Vec<ChannelMessage>, out: &mut Vec<Action>) {
        for m in msgs {
            if self.outbox.is_empty() {
                out.push(Action::Send(m.clone()));
            }
            self.outbox.push_back(m);
        }
    }

    fn arm_quiescence(&mut self, now: SimTime, out: &mut Vec<Action>) {
        let at = now + self.params.quiescence_ms;
        self.quiescence_deadline = Some(at);
        out.push(Action::ArmTimer { at, kind: TimerKind::Quiescence });
    }

    fn received_segments(&self) -> Vec<Segment> {
        self.received
            .iter()
            .map(|(n, data)| Segment {
                number: SegmentNumber::new(*n).expect("stored numbers are valid"),
                data: data.clone(),
            })
            .collect()
    }

    /// Runs the validation step: reconstruct, recover, restart, or give up.
    fn run_validation(&mut self, out: &mut Vec<Action>) {
        self.phase = CtrlPhase::Validating;
        let n = match self.expected_n {
            Some(n) => n,
            None => {
                // No transfer header ever arrived; ask the agent to start
                // over rather than guessing the segment count.
                self.rounds_used += 1;
                if self.rounds_used > self.params.recovery_round_cap {
                    out.push(Action::Note("recovery rounds exhausted before header arrived".into()));
                    self.phase = CtrlPhase::Failed;
                    return;
                }
                out.push(Action::Note("segment count unknown; restarting transfer".into()));
                self.phase = CtrlPhase::Receiving;
                let msgs = self.start_messages();
                self.enqueue_all(msgs, out);
                return;
            }
        };
        match self.validate().expect("expected_n is known") {
            Validation::Complete => {
                let segments = self.received_segments();
                match reassemble(&segments, n as usize) {
                    Ok(Reassembly::Complete(payload)) => {
                        if let Some(len) = self.expected_len {
                            if payload.len() as u32 != len {
                                out.push(Action::Note(format!(
                                    "reassembled {} bytes but header announced {len}",
                                    payload.len()
                                )));
                                self.phase = CtrlPhase::Failed;
                                return;
                            }
                        }
                        self.reconstructed = Some(payload);
                        self.phase = CtrlPhase::Done;
                        // stop halts agents still repeating (R = infinite)
                        self.enqueue_all(vec![ChannelMessage::StopTransfer], out);
                    }
                    Ok(Reassembly::Missing(_)) => unreachable!("validate said complete"),
                    Err(e) => {
                        out.push(Action::Note(format!("reassembly failed: {e}")));
                        self.phase = CtrlPhase::Failed;
                    }
                }
            }
            Validation::Missing(missing) => {
                self.rounds_used += 1;
                if self.rounds_used > self.params.recovery_round_cap {
                    // give up listening; the agent drains its own schedule
                    out.push(Action::Note(format!(
                        "recovery rounds exhausted with {} segments missing",
                        missing.len()
                    )));
                    self.phase = CtrlPhase::Failed;
                    return;
                }
                self.phase = CtrlPhase::Recovering;
                let msgs = split_retransmit(&missing, self.params.interval_ms, self.params.message_budget);
                self.enqueue_all(msgs, out);
            }
        }
    }

    fn handle_deliver(&mut self, uuid: ServiceUuid, data: &[u8], now: SimTime, out: &mut Vec<Action>) {
        let active = self.transfer_active_for(&uuid);
        let msg = match decode_message(Direction::AgentToController, data, active) {
            Ok(m) => m,
            Err(e) => {
                out.push(Action::Note(format!("undecodable advertisement from {uuid}: {e}")));
                return;
            }
        };
        match msg {
            ChannelMessage::DiscoveryReply(agent_id) => {
                self.peers = self.peers.observe_reply(uuid, agent_id, now);
            }
            ChannelMessage::TransferHeader { segment_count, total_len } => {
                if !matches!(self.phase, CtrlPhase::Receiving | CtrlPhase::Recovering)
                    || self.selected.as_ref().map(|(_, u)| *u) != Some(uuid)
                {
                    out.push(Action::Note(format!(
                        "transfer header from {uuid} ignored in phase {}",
                        self.phase.name()
                    )));
                    return;
                }
                match self.expected_n {
                    Some(n) if n != segment_count => {
                        out.push(Action::Note(format!(
                            "header announced n={segment_count} but n={n} was already known"
                        )));
                    }
                    _ => {
                        self.expected_n = Some(segment_count);
                        self.expected_len = Some(total_len);
                    }
                }
                self.arm_quiescence(now, out);
            }
            ChannelMessage::Segment(seg) => {
                if !active {
                    out.push(Action::Note(format!(
                        "segment {} while {}: dropped",
                        seg.number,
                        self.phase.name()
                    )));
                    return;
                }
                if let Some(n) = self.expected_n {
                    if seg.number.value() as u16 >= n {
                        out.push(Action::Note(format!(
                            "segment {} out of range (n={n}): dropped",
                            seg.number
                        )));
                        return;
                    }
                }
                match self.received.get(&seg.number.value()) {
                    Some(existing) if *existing != seg.data => {
                        out.push(Action::Note(format!(
                            "conflicting duplicate of segment {}: kept first copy",
                            seg.number
                        )));
                    }
                    _ => {
                        self.received.insert(seg.number.value(), seg.data);
                    }
                }
                self.arm_quiescence(now, out);
            }
            other => {
                out.push(Action::Note(format!(
                    "unexpected {} from {uuid}: dropped",
                    other.label()
                )));
            }
        }
    }

    fn handle_adv_sent(&mut self, msg: &ChannelMessage, now: SimTime, out: &mut Vec<Action>) {
        // pop the message that just aired, then continue the chain
        if let Some(front) = self.outbox.front() {
            if front == msg {
                self.outbox.pop_front();
            }
        }
        match msg {
            ChannelMessage::Discovery => {
                self.last_discovery_at = now;
                let at = now + self.params.discovery_timeout_ms;
                self.discovery_deadline = Some(at);
                out.push(Action::ArmTimer { at, kind: TimerKind::DiscoveryDeadline });
            }
            ChannelMessage::StartTransfer { .. } => {
                self.phase = CtrlPhase::Receiving;
                self.arm_quiescence(now, out);
            }
            ChannelMessage::Retransmit { .. } => {
                self.arm_quiescence(now, out);
            }
            _ => {}
        }
        if let Some(next) = self.outbox.front() {
            out.push(Action::Send(next.clone()));
        }
    }

    fn handle_timer(&mut self, kind: TimerKind, now: SimTime, out: &mut Vec<Action>) {
        match kind {
            TimerKind::Kickoff => {
                if self.phase == CtrlPhase::Idle {
                    self.phase = CtrlPhase::Discovering;
                    self.enqueue_all(vec![ChannelMessage::Discovery], out);
                }
            }
            TimerKind::DiscoveryDeadline => {
                if self.phase != CtrlPhase::Discovering || self.discovery_deadline != Some(now) {
                    return; // stale
                }
                self.discovery_deadline = None;
                self.peers = self.peers.prune_older_than(self.last_discovery_at);
                let target = match self.target {
                    TargetSelection::FirstSeen => self.peers.first_seen().map(|(_, id)| id),
                    TargetSelection::Explicit(id) => self.peers.contains_agent(&id).then_some(id),
                };
                match target {
                    Some(id) => {
                        self.select_target(id).expect("target taken from the table");
                        self.phase = CtrlPhase::Selecting;
                        let msgs = self.start_messages();
                        self.enqueue_all(msgs, out);
                    }
                    None => {
                        if !self.peers.is_empty() {
                            out.push(Action::Note("explicit target not in range; rediscovering".into()));
                        }
                        self.enqueue_all(vec![ChannelMessage::Discovery], out);
                    }
                }
            }
            TimerKind::Quiescence => {
                if !matches!(self.phase, CtrlPhase::Receiving | CtrlPhase::Recovering)
                    || self.quiescence_deadline != Some(now)
                {
                    return; // stale
                }
                self.quiescence_deadline = None;
                self.run_validation(out);
            }
            TimerKind::Emit => {}
        }
    }

    /// Advances the machine by one event.
    pub fn step(&mut self, event: &NodeEvent, now: SimTime) -> Vec<Action> {
        let mut out = Vec::new();
        match event {
            NodeEvent::Deliver { uuid, service_data } => {
                self.handle_deliver(*uuid, service_data, now, &mut out)
            }
            NodeEvent::AdvSent { msg } => self.handle_adv_sent(msg, now, &mut out),
            NodeEvent::Timer(kind) => self.handle_timer(*kind, now, &mut out),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{encode_message, AgentId};
    use crate::pdu::ServiceUuid;

    fn params() -> CtrlParams {
        CtrlParams::from_interval(1000, 10, 50, 13)
    }

    fn aid(fill: u8) -> AgentId {
        AgentId([fill; 8])
    }

    fn su(fill: u8) -> ServiceUuid {
        ServiceUuid([fill; 16])
    }

    fn deliver(msg: &ChannelMessage) -> NodeEvent {
        NodeEvent::Deliver {
            uuid: su(9),
            service_data: encode_message(msg, 64).unwrap(),
        }
    }

    fn drive_to_receiving(ctrl: &mut Controller, now: &mut SimTime) {
        let acts = ctrl.step(&NodeEvent::Timer(TimerKind::Kickoff), *now);
        assert!(matches!(acts[0], Action::Send(ChannelMessage::Discovery)));
        ctrl.step(&NodeEvent::AdvSent { msg: ChannelMessage::Discovery }, *now);
        ctrl.step(&deliver(&ChannelMessage::DiscoveryReply(aid(1))), *now);
        *now += ctrl.params.discovery_timeout_ms;
        let acts = ctrl.step(&NodeEvent::Timer(TimerKind::DiscoveryDeadline), *now);
        assert!(matches!(acts[0], Action::Send(ChannelMessage::Select(_))));
        assert_eq!(ctrl.phase(), CtrlPhase::Selecting);
        ctrl.step(&NodeEvent::AdvSent { msg: ChannelMessage::Select(aid(1)) }, *now);
        ctrl.step(
            &NodeEvent::AdvSent { msg: ChannelMessage::StartTransfer { interval_ms: 1000 } },
            *now,
        );
        assert_eq!(ctrl.phase(), CtrlPhase::Receiving);
    }

    #[test]
    fn discovery_retries_on_timeout_without_replies() {
        let mut ctrl = Controller::new(params(), TargetSelection::FirstSeen);
        let now = SimTime::ZERO;
        ctrl.step(&NodeEvent::Timer(TimerKind::Kickoff), now);
        ctrl.step(&NodeEvent::AdvSent { msg: ChannelMessage::Discovery }, now);
        let at = now + ctrl.params.discovery_timeout_ms;
        let acts = ctrl.step(&NodeEvent::Timer(TimerKind::DiscoveryDeadline), at);
        assert!(acts.iter().any(|a| matches!(a, Action::Send(ChannelMessage::Discovery))));
        assert_eq!(ctrl.phase(), CtrlPhase::Discovering);
    }

    #[test]
    fn select_unknown_agent_fails() {
        let mut ctrl = Controller::new(params(), TargetSelection::FirstSeen);
        let err = ctrl.select_target(aid(9)).unwrap_err();
        assert_eq!(err, ProtocolError::UnknownAgent(aid(9)));
    }

    #[test]
    fn validation_complete_reconstructs_and_stops() {
        let mut ctrl = Controller::new(params(), TargetSelection::FirstSeen);
        let mut now = SimTime::ZERO;
        drive_to_receiving(&mut ctrl, &mut now);
        ctrl.step(
            &deliver(&ChannelMessage::TransferHeader { segment_count: 2, total_len: 15 }),
            now,
        );
        for (i, data) in [vec![1u8; 12], vec![2u8; 3]].iter().enumerate() {
            ctrl.step(
                &deliver(&ChannelMessage::Segment(Segment {
                    number: SegmentNumber::new(i as u8).unwrap(),
                    data: data.clone(),
                })),
                now,
            );
        }
        now += ctrl.params.quiescence_ms;
        let deadline = ctrl.quiescence_deadline.unwrap();
        let acts = ctrl.step(&NodeEvent::Timer(TimerKind::Quiescence), deadline);
        assert_eq!(ctrl.phase(), CtrlPhase::Done);
        assert!(acts.iter().any(|a| matches!(a, Action::Send(ChannelMessage::StopTransfer))));
        let mut want = vec![1u8; 12];
        want.extend(vec![2u8; 3]);
        assert_eq!(ctrl.reconstructed().unwrap(), &want[..]);
        let _ = now;
    }

    #[test]
    fn validation_missing_emits_retransmit() {
        let mut ctrl = Controller::new(params(), TargetSelection::FirstSeen);
        let mut now = SimTime::ZERO;
        drive_to_receiving(&mut ctrl, &mut now);
        ctrl.step(
            &deliver(&ChannelMessage::TransferHeader { segment_count: 103, total_len: 1236 }),
            now,
        );
        for i in 0..103u8 {
            if i == 5 || i == 77 {
                continue;
            }
            ctrl.step(
                &deliver(&ChannelMessage::Segment(Segment {
                    number: SegmentNumber::new(i).unwrap(),
                    data: vec![i; 12],
                })),
                now,
            );
        }
        assert_eq!(
            ctrl.validate().unwrap(),
            Validation::Missing(vec![
                SegmentNumber::new(5).unwrap(),
                SegmentNumber::new(77).unwrap()
            ])
        );
        let deadline = ctrl.quiescence_deadline.unwrap();
        let acts = ctrl.step(&NodeEvent::Timer(TimerKind::Quiescence), deadline);
        assert_eq!(ctrl.phase(), CtrlPhase::Recovering);
        match &acts[0] {
            Action::Send(ChannelMessage::Retransmit { missing, .. }) => {
                assert_eq!(missing.iter().map(|s| s.value()).collect::<Vec<_>>(), vec![5, 77]);
            }
            other => panic!("expected retransmit, got {other:?}"),
        }
    }

    #[test]
    fn segments_while_idle_are_dropped_not_fatal() {
        let mut ctrl = Controller::new(params(), TargetSelection::FirstSeen);
        let acts = ctrl.step(
            &deliver(&ChannelMessage::Segment(Segment {
                number: SegmentNumber::new(3).unwrap(),
                data: vec![1, 2],
            })),
            SimTime::ZERO,
        );
        assert!(acts.iter().all(|a| !matches!(a, Action::Send(_))));
        assert!(acts.iter().any(|a| matches!(a, Action::Note(_))));
        assert_eq!(ctrl.phase(), CtrlPhase::Idle);
        assert_eq!(ctrl.unique_received(), 0);
    }

    #[test]
    fn deliveries_never_produce_outbound_messages() {
        // scanner-mode rule: sends happen on timers or send-chain continuations
        let mut ctrl = Controller::new(params(), TargetSelection::FirstSeen);
        let mut now = SimTime::ZERO;
        drive_to_receiving(&mut ctrl, &mut now);
        for msg in [
            ChannelMessage::DiscoveryReply(aid(4)),
            ChannelMessage::TransferHeader { segment_count: 5, total_len: 60 },
            ChannelMessage::Segment(Segment {
                number: SegmentNumber::new(0).unwrap(),
                data: vec![0; 12],
            }),
        ] {
            let acts = ctrl.step(&deliver(&msg), now);
            assert!(acts.iter().all(|a| !matches!(a, Action::Send(_))));
        }
    }

    #[test]
    fn explicit_target_is_selected_over_first_seen() {
        let mut ctrl = Controller::new(params(), TargetSelection::Explicit(aid(2)));
        let now = SimTime::ZERO;
        ctrl.step(&NodeEvent::Timer(TimerKind::Kickoff), now);
        ctrl.step(&NodeEvent::AdvSent { msg: ChannelMessage::Discovery }, now);
        ctrl.step(
            &NodeEvent::Deliver {
                uuid: su(1),
                service_data: encode_message(&ChannelMessage::DiscoveryReply(aid(1)), 13).unwrap(),
            },
            now + 1,
        );
        ctrl.step(
            &NodeEvent::Deliver {
                uuid: su(2),
                service_data: encode_message(&ChannelMessage::DiscoveryReply(aid(2)), 13).unwrap(),
            },
            now + 2,
        );
        let deadline = ctrl.discovery_deadline.unwrap();
        let acts = ctrl.step(&NodeEvent::Timer(TimerKind::DiscoveryDeadline), deadline);
        match &acts[0] {
            Action::Send(ChannelMessage::Select(id)) => assert_eq!(*id, aid(2)),
            other => panic!("expected select, got {other:?}"),
        }
    }

    #[test]
    fn round_cap_reports_failure() {
        let mut p = params();
        p.recovery_round_cap = 0;
        let mut ctrl = Controller::new(p, TargetSelection::FirstSeen);
        let mut now = SimTime::ZERO;
        drive_to_receiving(&mut ctrl, &mut now);
        ctrl.step(
            &deliver(&ChannelMessage::TransferHeader { segment_count: 2, total_len: 24 }),
            now,
        );
        let deadline = ctrl.quiescence_deadline.unwrap();
        ctrl.step(&NodeEvent::Timer(TimerKind::Quiescence), deadline);
        assert_eq!(ctrl.phase(), CtrlPhase::Failed);
    }
}
