//! Deterministic discrete-event broadcast channel and simulation driver.
//!
//! Advertisements are scheduled with a base time; the medium adds the
//! per-advertisement random delay, runs the sender's countermeasure filters,
//! and draws per-receiver loss, all from one seeded generator, so identical
//! configurations produce identical event streams. The driver processes
//! events in timestamp order with stable tie-breaking (node id, then
//! insertion order), delivering each advertisement to the surviving in-range
//! scanners and echoing an `AdvSent` to its sender.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::agent::Agent;
use crate::controller::Controller;
use crate::countermeasures::{apply_policy, CmError, Policy, PolicyAction, PolicyContent, PolicyState};
use crate::event::{Action, NodeEvent, TimerKind};
use crate::pdu::{
    build_pdu, service_data_capacity, AdvertisingPdu, ExtendedConfig, PduError, PduKind,
    ServiceUuid,
};
use crate::protocol::{encode_message, ChannelMessage, ProtocolError};
use crate::trace::{Trace, TraceBody};
use crate::{NodeId, SimTime};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MediumError {
    #[error("event budget of {0} exhausted; livelock guard tripped")]
    LivelockGuard(u64),
    #[error("invalid medium config: {0}")]
    Config(&'static str),
    #[error("outbound message rejected: {0}")]
    Encode(#[from] ProtocolError),
    #[error("outbound frame rejected: {0}")]
    Frame(#[from] PduError),
    #[error("policy rejected: {0}")]
    Policy(#[from] CmError),
}

/// Per-advertisement loss model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossModel {
    /// One delivery draw per (advertisement, receiver) pair.
    Bernoulli(f64),
    /// One draw per advertising channel; the advertisement is delivered if
    /// any of the three channel copies survives.
    PerChannel { p37: f64, p38: f64, p39: f64 },
}

impl LossModel {
    pub fn lossless() -> Self {
        LossModel::Bernoulli(0.0)
    }

    /// Per-(advertisement, receiver) drop probability.
    pub fn drop_probability(&self) -> f64 {
        match self {
            LossModel::Bernoulli(p) => *p,
            LossModel::PerChannel { p37, p38, p39 } => p37 * p38 * p39,
        }
    }

    pub fn validate(&self) -> Result<(), MediumError> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        let valid = match self {
            LossModel::Bernoulli(p) => ok(*p),
            LossModel::PerChannel { p37, p38, p39 } => ok(*p37) && ok(*p38) && ok(*p39),
        };
        if valid {
            Ok(())
        } else {
            Err(MediumError::Config("loss probabilities must be in [0, 1]"))
        }
    }

    fn survives(&self, rng: &mut ChaCha8Rng) -> bool {
        match self {
            LossModel::Bernoulli(p) => rng.random::<f64>() >= *p,
            LossModel::PerChannel { p37, p38, p39 } => {
                // draw all three channels unconditionally to keep the
                // stream position independent of outcomes
                let a = rng.random::<f64>() >= *p37;
                let b = rng.random::<f64>() >= *p38;
                let c = rng.random::<f64>() >= *p39;
                a || b || c
            }
        }
    }
}

/// Symmetric in-range relation between nodes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum RangeMatrix {
    #[default]
    AllInRange,
    Explicit(BTreeSet<(usize, usize)>),
}

impl RangeMatrix {
    /// Builds an explicit relation from unordered pairs.
    pub fn explicit<I: IntoIterator<Item = (NodeId, NodeId)>>(pairs: I) -> Self {
        let set = pairs
            .into_iter()
            .map(|(a, b)| (a.0.min(b.0), a.0.max(b.0)))
            .collect();
        RangeMatrix::Explicit(set)
    }

    pub fn in_range(&self, a: NodeId, b: NodeId) -> bool {
        match self {
            RangeMatrix::AllInRange => true,
            RangeMatrix::Explicit(set) => set.contains(&(a.0.min(b.0), a.0.max(b.0))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MediumConfig {
    pub loss: LossModel,
    /// Random delay added to each advertisement: uniform integer
    /// milliseconds in `[0, delay_max_ms]`.
    pub delay_max_ms: u64,
    pub range: RangeMatrix,
    pub seed: u64,
    /// Hard cap on processed events; exceeding it is a livelock error.
    pub event_budget: u64,
}

impl MediumConfig {
    pub fn new(seed: u64) -> Self {
        MediumConfig {
            loss: LossModel::lossless(),
            delay_max_ms: 10,
            range: RangeMatrix::AllInRange,
            seed,
            event_budget: 2_000_000,
        }
    }
}

/// What an advertisement carried, for the trace and metrics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdvPayload {
    Message(ChannelMessage),
    Raw(Vec<u8>),
}

impl AdvPayload {
    pub fn label(&self) -> String {
        match self {
            AdvPayload::Message(m) => m.label(),
            AdvPayload::Raw(data) => format!("raw:len={}", data.len()),
        }
    }
}

/// One advertisement event: when it aired, what it carried, who got it.
#[derive(Debug, Clone)]
pub struct MediumEvent {
    /// Air time (base plus delay, plus any policy-imposed postponement).
    pub at: SimTime,
    /// Requested emission time.
    pub base: SimTime,
    pub sender: NodeId,
    pub pdu: AdvertisingPdu,
    pub msg: AdvPayload,
    pub delivered_to: Vec<NodeId>,
    pub dropped_for: Vec<NodeId>,
    /// Suppressed by a policy: nothing was delivered or dropped.
    pub blocked: bool,
    /// Names of semantic rules that flagged this advertisement.
    pub flags: Vec<&'static str>,
}

/// The broadcast channel itself: delay, loss, range, and per-sender
/// countermeasure filters.
#[derive(Debug)]
pub struct Medium {
    cfg: MediumConfig,
    rng: ChaCha8Rng,
    nodes: Vec<NodeId>,
    policies: Vec<(NodeId, PolicyState)>,
}

impl Medium {
    pub fn new(cfg: MediumConfig) -> Result<Self, MediumError> {
        cfg.loss.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Medium { cfg, rng, nodes: Vec::new(), policies: Vec::new() })
    }

    pub fn config(&self) -> &MediumConfig {
        &self.cfg
    }

    pub fn register_node(&mut self, id: NodeId) {
        if !self.nodes.contains(&id) {
            self.nodes.push(id);
            self.nodes.sort();
        }
    }

    /// Attaches an OS-side filter to one sender. Filters run in attachment
    /// order.
    pub fn attach_policy(&mut self, sender: NodeId, policy: Policy) -> Result<(), CmError> {
        policy.validate()?;
        self.policies.push((sender, policy.into_state()));
        Ok(())
    }

    /// Schedules one advertisement: samples the delay, runs the sender's
    /// filters, and draws per-receiver loss. Deterministic for a fixed seed
    /// and call order.
    pub fn schedule_advertisement(
        &mut self,
        sender: NodeId,
        pdu: AdvertisingPdu,
        msg: AdvPayload,
        base: SimTime,
    ) -> MediumEvent {
        let delay = self.rng.random_range(0..=self.cfg.delay_max_ms);
        let mut at = base + delay;
        let (uuid, service_data) = match pdu.service_block() {
            Ok(block) => (block.service_uuid, block.service_data),
            Err(_) => (ServiceUuid([0; 16]), pdu.adv_data.clone()),
        };
        let content = PolicyContent { uuid, service_data: &service_data };
        let mut blocked = false;
        let mut flags = Vec::new();
        for (node, state) in &mut self.policies {
            if *node != sender {
                continue;
            }
            match apply_policy(state, &content, at) {
                PolicyAction::Allow => {}
                PolicyAction::Delay(until) => at = at.max(until),
                PolicyAction::Block => blocked = true,
                PolicyAction::Flag => flags.push(state.rule_name()),
            }
        }
        let mut delivered_to = Vec::new();
        let mut dropped_for = Vec::new();
        if !blocked {
            for &node in &self.nodes {
                if node == sender || !self.cfg.range.in_range(node, sender) {
                    continue;
                }
                if self.cfg.loss.survives(&mut self.rng) {
                    delivered_to.push(node);
                } else {
                    dropped_for.push(node);
                }
            }
        }
        MediumEvent { at, base, sender, pdu, msg, delivered_to, dropped_for, blocked, flags }
    }
}

/// A simulated radio node.
#[derive(Debug)]
pub enum Node {
    Controller(Controller),
    Agent(Agent),
}

impl Node {
    fn phase_name(&self) -> &'static str {
        match self {
            Node::Controller(c) => c.phase().name(),
            Node::Agent(a) => a.phase().name(),
        }
    }

    fn step(&mut self, event: &NodeEvent, now: SimTime) -> Vec<Action> {
        match self {
            Node::Controller(c) => c.step(event, now),
            Node::Agent(a) => a.step(event, now),
        }
    }
}

#[derive(Debug)]
enum Work {
    Adv(MediumEvent),
    Timer(TimerKind),
}

#[derive(Debug)]
struct Pending {
    at: SimTime,
    node: NodeId,
    seq: u64,
    work: Work,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.node, self.seq).cmp(&(other.at, other.node, other.seq))
    }
}

/// When `run_until` should stop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunLimit {
    /// Run until no work remains.
    Quiescence,
    /// Process events up to and including this time; later work stays
    /// queued.
    EndTime(SimTime),
}

/// The event loop: owns the medium, the nodes, and the trace.
#[derive(Debug)]
pub struct Simulation {
    medium: Medium,
    nodes: Vec<Node>,
    uuids: Vec<ServiceUuid>,
    addresses: Vec<[u8; 6]>,
    kind: PduKind,
    ext_cfg: Option<ExtendedConfig>,
    message_budget: usize,
    queue: BinaryHeap<Reverse<Pending>>,
    seq: u64,
    now: SimTime,
    processed: u64,
    controller_id: Option<NodeId>,
    pub trace: Trace,
}

impl Simulation {
    pub fn new(
        cfg: MediumConfig,
        kind: PduKind,
        ext_cfg: Option<ExtendedConfig>,
    ) -> Result<Self, MediumError> {
        let message_budget = service_data_capacity(kind, ext_cfg.as_ref())?;
        Ok(Simulation {
            medium: Medium::new(cfg)?,
            nodes: Vec::new(),
            uuids: Vec::new(),
            addresses: Vec::new(),
            kind,
            ext_cfg,
            message_budget,
            queue: BinaryHeap::new(),
            seq: 0,
            now: SimTime::ZERO,
            processed: 0,
            controller_id: None,
            trace: Trace::new(NodeId(0)),
        })
    }

    /// Service-data budget of the active advertising kind.
    pub fn message_budget(&self) -> usize {
        self.message_budget
    }

    pub fn medium_mut(&mut self) -> &mut Medium {
        &mut self.medium
    }

    fn add_node(&mut self, node: Node, uuid: ServiceUuid, address: [u8; 6]) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(node);
        self.uuids.push(uuid);
        self.addresses.push(address);
        self.medium.register_node(id);
        id
    }

    pub fn add_controller(
        &mut self,
        controller: Controller,
        uuid_a: ServiceUuid,
        address: [u8; 6],
    ) -> NodeId {
        let id = self.add_node(Node::Controller(controller), uuid_a, address);
        if self.controller_id.is_none() {
            self.controller_id = Some(id);
            self.trace.controller = id;
        }
        id
    }

    pub fn add_agent(&mut self, agent: Agent, address: [u8; 6]) -> NodeId {
        let uuid = agent.identity().uuid_v;
        self.add_node(Node::Agent(agent), uuid, address)
    }

    pub fn controller(&self) -> Option<&Controller> {
        let id = self.controller_id?;
        match &self.nodes[id.0] {
            Node::Controller(c) => Some(c),
            Node::Agent(_) => None,
        }
    }

    pub fn agent(&self, id: NodeId) -> Option<&Agent> {
        match self.nodes.get(id.0) {
            Some(Node::Agent(a)) => Some(a),
            _ => None,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Delivers the initial kick to the controller at time zero.
    pub fn kickoff(&mut self) {
        if let Some(id) = self.controller_id {
            self.push_timer(id, SimTime::ZERO, TimerKind::Kickoff);
        }
    }

    fn push_timer(&mut self, node: NodeId, at: SimTime, kind: TimerKind) {
        self.seq += 1;
        self.queue.push(Reverse(Pending { at, node, seq: self.seq, work: Work::Timer(kind) }));
    }

    fn push_adv(
        &mut self,
        sender: NodeId,
        msg: ChannelMessage,
        base: SimTime,
    ) -> Result<(), MediumError> {
        let service_data = encode_message(&msg, self.message_budget)?;
        let pdu = build_pdu(
            self.kind,
            self.addresses[sender.0],
            self.uuids[sender.0],
            &service_data,
            self.ext_cfg.as_ref(),
        )?;
        let event =
            self.medium
                .schedule_advertisement(sender, pdu, AdvPayload::Message(msg), base);
        self.seq += 1;
        self.queue.push(Reverse(Pending {
            at: event.at,
            node: sender,
            seq: self.seq,
            work: Work::Adv(event),
        }));
        Ok(())
    }

    fn step_node(&mut self, id: NodeId, event: &NodeEvent) -> Result<(), MediumError> {
        let before = self.nodes[id.0].phase_name();
        let actions = self.nodes[id.0].step(event, self.now);
        let after = self.nodes[id.0].phase_name();
        if before != after {
            self.trace.push(self.now, TraceBody::Phase { node: id, from: before, to: after });
        }
        for action in actions {
            match action {
                Action::Send(msg) => self.push_adv(id, msg, self.now)?,
                Action::ArmTimer { at, kind } => self.push_timer(id, at, kind),
                Action::Note(text) => self.trace.push(self.now, TraceBody::Note { node: id, text }),
            }
        }
        Ok(())
    }

    /// Processes queued events in timestamp order until the limit is
    /// reached, the queue drains, or the event budget trips.
    pub fn run_until(&mut self, limit: RunLimit) -> Result<(), MediumError> {
        loop {
            match self.queue.peek() {
                None => return Ok(()),
                Some(Reverse(p)) => {
                    if let RunLimit::EndTime(end) = limit {
                        if p.at > end {
                            return Ok(());
                        }
                    }
                }
            }
            let Reverse(pending) = self.queue.pop().expect("peeked above");
            self.processed += 1;
            if self.processed > self.medium.cfg.event_budget {
                return Err(MediumError::LivelockGuard(self.medium.cfg.event_budget));
            }
            self.now = pending.at;
            match pending.work {
                Work::Adv(event) => {
                    self.trace.push(self.now, TraceBody::Adv(event.clone()));
                    for rule in &event.flags {
                        self.trace.push(
                            self.now,
                            TraceBody::CmFlag { sender: event.sender, rule: (*rule).to_string() },
                        );
                    }
                    if event.pdu.is_non_connectable() {
                        if let Ok(block) = event.pdu.service_block() {
                            for receiver in &event.delivered_to {
                                self.step_node(
                                    *receiver,
                                    &NodeEvent::Deliver {
                                        uuid: block.service_uuid,
                                        service_data: block.service_data.clone(),
                                    },
                                )?;
                            }
                        }
                    }
                    if let AdvPayload::Message(msg) = &event.msg {
                        self.step_node(event.sender, &NodeEvent::AdvSent { msg: msg.clone() })?;
                    }
                }
                Work::Timer(kind) => {
                    self.step_node(pending.node, &NodeEvent::Timer(kind))?;
                }
            }
        }
    }
}
