//! Structured event log shared by the medium and both state machines.
//!
//! One line per record: advertisement events with their delivery outcome,
//! state-machine phase transitions, protocol notes, and countermeasure
//! flags (kind `cm_flag`). The rendered text is deterministic for a fixed
//! scenario and seed, so logs can be compared byte for byte.

use std::fmt;

use crate::medium::MediumEvent;
use crate::{NodeId, SimTime};

#[derive(Debug, Clone)]
pub enum TraceBody {
    /// An advertisement hit the air (or was blocked by a policy).
    Adv(MediumEvent),
    /// A state machine changed phase.
    Phase {
        node: NodeId,
        from: &'static str,
        to: &'static str,
    },
    /// A protocol violation or other noteworthy condition.
    Note { node: NodeId, text: String },
    /// A semantic-check countermeasure raised a detection flag.
    CmFlag { sender: NodeId, rule: String },
}

#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub at: SimTime,
    pub body: TraceBody,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>9} ", self.at)?;
        match &self.body {
            TraceBody::Adv(ev) => {
                write!(
                    f,
                    "adv sender={} msg={} delivered={:?} dropped={:?}",
                    ev.sender,
                    ev.msg.label(),
                    ev.delivered_to.iter().map(|n| n.0).collect::<Vec<_>>(),
                    ev.dropped_for.iter().map(|n| n.0).collect::<Vec<_>>(),
                )?;
                if ev.blocked {
                    write!(f, " blocked")?;
                }
                if ev.at != ev.base {
                    write!(f, " delayed_from={}", ev.base)?;
                }
                Ok(())
            }
            TraceBody::Phase { node, from, to } => {
                write!(f, "phase node={node} {from}->{to}")
            }
            TraceBody::Note { node, text } => write!(f, "note node={node} {text}"),
            TraceBody::CmFlag { sender, rule } => write!(f, "cm_flag sender={sender} rule={rule}"),
        }
    }
}

/// The full log of one simulation run.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// Node id of the controller, for metrics extraction.
    pub controller: NodeId,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(controller: NodeId) -> Self {
        Trace { controller, records: Vec::new() }
    }

    pub fn push(&mut self, at: SimTime, body: TraceBody) {
        self.records.push(TraceRecord { at, body });
    }

    /// Advertisement events, in order.
    pub fn advertisements(&self) -> impl Iterator<Item = &MediumEvent> {
        self.records.iter().filter_map(|r| match &r.body {
            TraceBody::Adv(ev) => Some(ev),
            _ => None,
        })
    }

    /// Countermeasure flags raised during the run.
    pub fn cm_flags(&self) -> impl Iterator<Item = (&SimTime, &NodeId, &str)> {
        self.records.iter().filter_map(|r| match &r.body {
            TraceBody::CmFlag { sender, rule } => Some((&r.at, sender, rule.as_str())),
            _ => None,
        })
    }

    /// Renders the whole log, one record per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }

    /// Renders the PDU hexdump: one advertisement per line.
    pub fn render_pdus(&self) -> String {
        let mut out = String::new();
        for ev in self.advertisements() {
            if let Ok(line) = crate::pdu::to_hex_line(&ev.pdu) {
                out.push_str(&line);
                out.push('\n');
            }
        }
        out
    }
}
