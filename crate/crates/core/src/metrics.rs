//! Per-run evaluation: data rate, packet loss, inter-arrival, total time,
//! and the received-over-time curve, all with duplicates excluded.
//!
//! Duplicate exclusion: a segment number counts once no matter how many
//! repeat passes deliver it. Total time runs from the start command to the
//! last received packet (duplicates included there, since the repeats are
//! part of the transmission), which is what the data rate divides by.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::agent::Repeat;
use crate::medium::AdvPayload;
use crate::protocol::ChannelMessage;
use crate::trace::Trace;
use crate::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("log holds no transfer attempt")]
    IncompleteLog,
}

/// The transfer the log is evaluated against.
#[derive(Debug, Clone, Copy)]
pub struct TransferParams {
    pub payload_len: usize,
    /// Segment count of the transfer.
    pub n: usize,
    /// Maximum segment payload bytes.
    pub z: usize,
    pub repeat: Repeat,
    pub t_ms: u64,
}

/// One point of the received-over-time curve: milliseconds since the start
/// command, percentage of unique segments received.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub at_ms: u64,
    pub pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferMetrics {
    /// Unique payload bytes per second of transmission time.
    pub data_rate_bps: f64,
    /// Percentage of segments never received across all passes.
    pub packet_loss_pct: f64,
    /// Mean seconds between consecutive first arrivals.
    pub mean_interarrival_s: f64,
    /// Seconds from the start command to the last received packet.
    pub total_time_s: f64,
    pub curve: Vec<CurvePoint>,
}

/// Segment arrivals at the controller: (time, number, payload bytes).
fn segment_arrivals(trace: &Trace, z: usize) -> Vec<(SimTime, u8, usize)> {
    trace
        .advertisements()
        .filter(|ev| ev.delivered_to.contains(&trace.controller))
        .filter_map(|ev| match &ev.msg {
            AdvPayload::Message(ChannelMessage::Segment(seg)) if seg.data.len() <= z => {
                Some((ev.at, seg.number.value(), seg.data.len()))
            }
            _ => None,
        })
        .collect()
}

fn start_time(trace: &Trace) -> Option<SimTime> {
    trace
        .advertisements()
        .find(|ev| matches!(ev.msg, AdvPayload::Message(ChannelMessage::StartTransfer { .. })))
        .map(|ev| ev.at)
}

/// Computes the evaluation record for one complete transfer attempt.
pub fn compute_metrics(
    trace: &Trace,
    params: &TransferParams,
) -> Result<TransferMetrics, MetricsError> {
    let start = start_time(trace).ok_or(MetricsError::IncompleteLog)?;
    let arrivals = segment_arrivals(trace, params.z);

    let mut seen = BTreeSet::new();
    let mut unique_bytes = 0usize;
    let mut first_arrivals: Vec<SimTime> = Vec::new();
    let mut last_received = start;
    for (at, number, len) in &arrivals {
        last_received = last_received.max(*at);
        if seen.insert(*number) {
            unique_bytes += len;
            first_arrivals.push(*at);
        }
    }
    debug_assert!(unique_bytes <= params.payload_len);
    debug_assert!(seen.len() <= params.n);

    let total_ms = last_received.since(start);
    let total_time_s = total_ms as f64 / 1000.0;
    let data_rate_bps = if unique_bytes == 0 {
        0.0
    } else {
        unique_bytes as f64 * 1000.0 / total_ms.max(1) as f64
    };
    let packet_loss_pct = if params.n == 0 {
        0.0
    } else {
        (params.n - seen.len()) as f64 * 100.0 / params.n as f64
    };
    let mean_interarrival_s = if first_arrivals.len() < 2 {
        0.0
    } else {
        let span = first_arrivals.last().unwrap().since(first_arrivals[0]);
        span as f64 / 1000.0 / (first_arrivals.len() - 1) as f64
    };

    Ok(TransferMetrics {
        data_rate_bps,
        packet_loss_pct,
        mean_interarrival_s,
        total_time_s,
        curve: emit_curve(trace, params.n, params.z),
    })
}

/// The received-over-time step curve: one point per unique first arrival,
/// relative to the start command. A log with no received packets yields a
/// single flat-zero point.
pub fn emit_curve(trace: &Trace, n: usize, z: usize) -> Vec<CurvePoint> {
    let start = match start_time(trace) {
        Some(s) => s,
        None => return vec![CurvePoint { at_ms: 0, pct: 0.0 }],
    };
    let mut seen = BTreeSet::new();
    let mut curve = Vec::new();
    for (at, number, _) in segment_arrivals(trace, z) {
        if seen.insert(number) {
            curve.push(CurvePoint {
                at_ms: at.since(start),
                pct: seen.len() as f64 * 100.0 / n.max(1) as f64,
            });
        }
    }
    if curve.is_empty() {
        curve.push(CurvePoint { at_ms: 0, pct: 0.0 });
    }
    curve
}

/// Fixed header of the per-run metrics CSV.
pub const METRICS_CSV_HEADER: &str =
    "run_id,device_profile,ble_mode,t_ms,z,R,loss_p,seed,data_rate_Bps,loss_pct,interarrival_s,total_time_s";

/// Fixed header of the companion curves CSV.
pub const CURVE_CSV_HEADER: &str = "run_id,time_ms,pct";

fn repeat_field(repeat: Repeat) -> String {
    match repeat {
        Repeat::Count(r) => r.to_string(),
        Repeat::Infinite => "inf".to_string(),
    }
}

/// One row of the metrics CSV.
pub struct MetricsRow<'a> {
    pub run_id: &'a str,
    pub device_profile: &'a str,
    pub ble_mode: &'a str,
    pub loss_p: f64,
    pub seed: u64,
    pub params: &'a TransferParams,
    pub metrics: &'a TransferMetrics,
}

impl fmt::Display for MetricsRow<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{},{:.6},{:.4},{:.6},{:.6}",
            self.run_id,
            self.device_profile,
            self.ble_mode,
            self.params.t_ms,
            self.params.z,
            repeat_field(self.params.repeat),
            self.loss_p,
            self.seed,
            self.metrics.data_rate_bps,
            self.metrics.packet_loss_pct,
            self.metrics.mean_interarrival_s,
            self.metrics.total_time_s,
        )
    }
}

/// Renders the curve rows for one run.
pub fn curve_rows(run_id: &str, curve: &[CurvePoint]) -> String {
    let mut out = String::new();
    for p in curve {
        out.push_str(&format!("{},{},{:.4}\n", run_id, p.at_ms, p.pct));
    }
    out
}
