//! Scenario configs and the sweep runner.
//!
//! A scenario is a flat `key = value` file with sections (TOML) declaring
//! the advertising mode, segment size, payload source, intervals, repeat or
//! timeout, loss model, countermeasure policies, agent count, and seeds.
//! Running it executes the full cross product of declared intervals and
//! seeds, in order, and emits the metrics CSV, the curves CSV, a run summary,
//! and optional traces and PDU hexdumps. Outputs are byte-identical across
//! reruns of the same file.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::agent::{Agent, AgentIdentity, AgentSchedule, Repeat};
use crate::controller::{Controller, CtrlParams, TargetSelection};
use crate::countermeasures::Policy;
use crate::medium::{LossModel, MediumConfig, RunLimit, Simulation};
use crate::metrics::{
    compute_metrics, curve_rows, MetricsRow, TransferMetrics, TransferParams, CURVE_CSV_HEADER,
    METRICS_CSV_HEADER,
};
use crate::pdu::{ExtendedConfig, PduKind, ServiceUuid, LEGACY_MAX_SERVICE_DATA};
use crate::protocol::{AgentId, MAX_SEGMENTS_PER_TRANSFER};
use crate::trace::Trace;

/// The controller's fixed service UUID, hardcoded on both sides.
pub const CONTROLLER_UUID: ServiceUuid = ServiceUuid(*b"advchan-ctrl-a01");

/// Header of the auxiliary per-run summary CSV.
pub const SUMMARY_CSV_HEADER: &str = "run_id,n_segments,completed,rounds_used,unique_received";

/// A config problem; the message names the offending key.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("config error at key `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: &str, message: impl Into<String>) -> Self {
        ConfigError { key: key.to_string(), message: message.into() }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("simulation failure: {0}")]
    Simulation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which agent the controller targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSpec {
    FirstSeen,
    AgentIndex(usize),
}

/// A validated scenario, payload already resolved.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub ble_mode: PduKind,
    pub z: usize,
    pub device_profile: String,
    /// Maximum advertising data length; extended mode only.
    pub madl: u16,
    pub payload: Vec<u8>,
    pub t_ms: Vec<u64>,
    pub repeat: Repeat,
    pub timeout_ms: Option<u64>,
    pub loss: LossModel,
    pub delay_max_ms: u64,
    pub event_budget: u64,
    pub seeds: Vec<u64>,
    pub agents: usize,
    pub target: TargetSpec,
    pub recovery_round_cap: u32,
    pub policies: Vec<Policy>,
}

impl Scenario {
    /// A minimal lossless single-agent scenario; fields are public for
    /// programmatic tweaking.
    pub fn basic(name: &str, ble_mode: PduKind, z: usize, payload: Vec<u8>) -> Scenario {
        Scenario {
            name: name.to_string(),
            ble_mode,
            z,
            device_profile: "default".to_string(),
            madl: 254,
            payload,
            t_ms: vec![1000],
            repeat: Repeat::Count(3),
            timeout_ms: None,
            loss: LossModel::lossless(),
            delay_max_ms: 10,
            event_budget: 2_000_000,
            seeds: vec![1],
            agents: 1,
            target: TargetSpec::FirstSeen,
            recovery_round_cap: 50,
            policies: Vec::new(),
        }
    }

    /// Segment count of the configured payload.
    pub fn segment_count(&self) -> usize {
        self.payload.len().div_ceil(self.z)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.is_empty() {
            return Err(ConfigError::new("name", "must not be empty"));
        }
        if self.z == 0 {
            return Err(ConfigError::new("z", "must be at least 1"));
        }
        match self.ble_mode {
            PduKind::LegacyNonConnectable => {
                if self.z > LEGACY_MAX_SERVICE_DATA - 1 {
                    return Err(ConfigError::new(
                        "z",
                        format!(
                            "legacy mode caps z at {} (13 service-data bytes minus the segment number)",
                            LEGACY_MAX_SERVICE_DATA - 1
                        ),
                    ));
                }
            }
            PduKind::ExtendedNonConnectable => {
                let cfg = ExtendedConfig::new(self.madl)
                    .map_err(|e| ConfigError::new("madl", e.to_string()))?;
                if self.z > cfg.max_segment_bytes() {
                    return Err(ConfigError::new(
                        "z",
                        format!("madl {} caps z at {}", self.madl, cfg.max_segment_bytes()),
                    ));
                }
            }
        }
        if self.payload.len() > MAX_SEGMENTS_PER_TRANSFER * self.z {
            return Err(ConfigError::new(
                "payload.length",
                format!(
                    "payload of {} bytes exceeds the single-transfer cap of {} at z={}",
                    self.payload.len(),
                    MAX_SEGMENTS_PER_TRANSFER * self.z,
                    self.z
                ),
            ));
        }
        if self.t_ms.is_empty() {
            return Err(ConfigError::new("schedule.t_ms", "must list at least one interval"));
        }
        for &t in &self.t_ms {
            if t == 0 || t > u16::MAX as u64 {
                return Err(ConfigError::new(
                    "schedule.t_ms",
                    format!("interval {t} outside 1..=65535 ms"),
                ));
            }
        }
        match self.repeat {
            Repeat::Count(0) => {
                return Err(ConfigError::new("schedule.r", "must be at least 1"));
            }
            Repeat::Infinite if self.timeout_ms.is_none() => {
                return Err(ConfigError::new(
                    "schedule.timeout_ms",
                    "required when r = \"inf\"",
                ));
            }
            _ => {}
        }
        if let Some(t) = self.timeout_ms {
            if t == 0 {
                return Err(ConfigError::new("schedule.timeout_ms", "must be positive"));
            }
        }
        if let Err(e) = self.loss.validate() {
            return Err(ConfigError::new("loss", e.to_string()));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::new("run.seeds", "must list at least one seed"));
        }
        if self.agents == 0 {
            return Err(ConfigError::new("run.agents", "must be at least 1"));
        }
        if let TargetSpec::AgentIndex(i) = self.target {
            if i >= self.agents {
                return Err(ConfigError::new(
                    "run.target",
                    format!("agent index {i} out of range (agents = {})", self.agents),
                ));
            }
        }
        for (i, policy) in self.policies.iter().enumerate() {
            policy
                .validate()
                .map_err(|e| ConfigError::new(&format!("policy[{i}]"), e.to_string()))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Raw config file shape
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    ble_mode: String,
    z: usize,
    device_profile: Option<String>,
    madl: Option<u16>,
    payload: RawPayload,
    schedule: RawSchedule,
    loss: Option<RawLoss>,
    medium: Option<RawMedium>,
    run: RawRun,
    #[serde(default)]
    policy: Vec<RawPolicy>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPayload {
    source: String,
    length: Option<usize>,
    seed: Option<u64>,
    path: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawRepeat {
    Count(u32),
    Word(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    t_ms: Vec<u64>,
    r: Option<RawRepeat>,
    timeout_ms: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLoss {
    model: String,
    p: Option<f64>,
    p37: Option<f64>,
    p38: Option<f64>,
    p39: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMedium {
    delay_max_ms: Option<u64>,
    event_budget: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    seeds: Vec<u64>,
    agents: Option<usize>,
    target: Option<String>,
    recovery_round_cap: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    kind: String,
    min_interval_ms: Option<u64>,
    max_changes: Option<usize>,
    window_ms: Option<u64>,
    window: Option<usize>,
    entropy_threshold_bits: Option<f64>,
    allowed: Option<Vec<String>>,
}

fn parse_hex_bytes(s: &str) -> Option<Vec<u8>> {
    let cleaned: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if !cleaned.len().is_multiple_of(2) {
        return None;
    }
    (0..cleaned.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&cleaned[i..i + 2], 16).ok())
        .collect()
}

fn build_policy(i: usize, raw: &RawPolicy) -> Result<Policy, ConfigError> {
    let key = |field: &str| format!("policy[{i}].{field}");
    match raw.kind.as_str() {
        "rate-limit" => Ok(Policy::RateLimit {
            min_interval_ms: raw
                .min_interval_ms
                .ok_or_else(|| ConfigError::new(&key("min_interval_ms"), "required"))?,
        }),
        "change-frequency" => Ok(Policy::ChangeFrequencyLimit {
            max_changes: raw
                .max_changes
                .ok_or_else(|| ConfigError::new(&key("max_changes"), "required"))?,
            window_ms: raw
                .window_ms
                .ok_or_else(|| ConfigError::new(&key("window_ms"), "required"))?,
        }),
        "semantic-check" => Ok(Policy::SemanticCheck {
            window: raw.window.unwrap_or(8),
            entropy_threshold_bits: raw.entropy_threshold_bits.unwrap_or(1.0),
        }),
        "restricted-vocabulary" => {
            let values = raw
                .allowed
                .as_ref()
                .ok_or_else(|| ConfigError::new(&key("allowed"), "required"))?;
            let mut allowed = Vec::with_capacity(values.len());
            for v in values {
                allowed.push(parse_hex_bytes(v).ok_or_else(|| {
                    ConfigError::new(&key("allowed"), format!("`{v}` is not a hex byte string"))
                })?);
            }
            Ok(Policy::RestrictedVocabulary { allowed })
        }
        other => Err(ConfigError::new(
            &key("kind"),
            format!("unknown policy kind `{other}`"),
        )),
    }
}

/// Generates a pseudorandom payload for `source = "random"`.
pub fn random_payload(length: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut payload = vec![0u8; length];
    rng.fill(payload.as_mut_slice());
    payload
}

/// Parses and validates a scenario file; the payload is resolved here
/// (random bytes generated, fixture file read relative to the scenario).
pub fn load_scenario(path: &Path) -> Result<Scenario, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError::new("scenario", format!("cannot read {}: {e}", path.display())))?;
    let raw: RawScenario = toml::from_str(&text)
        .map_err(|e| ConfigError::new("scenario", format!("parse failure: {e}")))?;

    let ble_mode = match raw.ble_mode.as_str() {
        "legacy" => PduKind::LegacyNonConnectable,
        "extended" => PduKind::ExtendedNonConnectable,
        other => {
            return Err(ConfigError::new(
                "ble_mode",
                format!("`{other}` is not `legacy` or `extended`"),
            ))
        }
    };
    if ble_mode == PduKind::LegacyNonConnectable && raw.madl.is_some() {
        return Err(ConfigError::new("madl", "only applies to extended mode"));
    }

    let payload = match raw.payload.source.as_str() {
        "random" => {
            let length = raw
                .payload
                .length
                .ok_or_else(|| ConfigError::new("payload.length", "required for source = \"random\""))?;
            random_payload(length, raw.payload.seed.unwrap_or(0))
        }
        "file" => {
            let rel = raw
                .payload
                .path
                .as_ref()
                .ok_or_else(|| ConfigError::new("payload.path", "required for source = \"file\""))?;
            let resolved = path.parent().unwrap_or(Path::new(".")).join(rel);
            fs::read(&resolved).map_err(|e| {
                ConfigError::new("payload.path", format!("cannot read {}: {e}", resolved.display()))
            })?
        }
        other => {
            return Err(ConfigError::new(
                "payload.source",
                format!("`{other}` is not `random` or `file`"),
            ))
        }
    };

    let repeat = match &raw.schedule.r {
        None => Repeat::Count(3),
        Some(RawRepeat::Count(r)) => Repeat::Count(*r),
        Some(RawRepeat::Word(w)) if w == "inf" => Repeat::Infinite,
        Some(RawRepeat::Word(w)) => {
            return Err(ConfigError::new(
                "schedule.r",
                format!("`{w}` is not a count or \"inf\""),
            ))
        }
    };

    let loss = match &raw.loss {
        None => LossModel::lossless(),
        Some(l) => match l.model.as_str() {
            "none" => LossModel::lossless(),
            "bernoulli" => LossModel::Bernoulli(
                l.p.ok_or_else(|| ConfigError::new("loss.p", "required for model = \"bernoulli\""))?,
            ),
            "per-channel" => {
                let get = |v: Option<f64>, k: &str| {
                    v.ok_or_else(|| ConfigError::new(k, "required for model = \"per-channel\""))
                };
                LossModel::PerChannel {
                    p37: get(l.p37, "loss.p37")?,
                    p38: get(l.p38, "loss.p38")?,
                    p39: get(l.p39, "loss.p39")?,
                }
            }
            other => {
                return Err(ConfigError::new(
                    "loss.model",
                    format!("`{other}` is not `none`, `bernoulli`, or `per-channel`"),
                ))
            }
        },
    };

    let target = match raw.run.target.as_deref() {
        None | Some("first-seen") => TargetSpec::FirstSeen,
        Some(t) => match t.strip_prefix("agent-").and_then(|i| i.parse::<usize>().ok()) {
            Some(i) => TargetSpec::AgentIndex(i),
            None => {
                return Err(ConfigError::new(
                    "run.target",
                    format!("`{t}` is not `first-seen` or `agent-<index>`"),
                ))
            }
        },
    };

    let mut policies = Vec::with_capacity(raw.policy.len());
    for (i, p) in raw.policy.iter().enumerate() {
        policies.push(build_policy(i, p)?);
    }

    let scenario = Scenario {
        name: raw.name,
        ble_mode,
        z: raw.z,
        device_profile: raw.device_profile.unwrap_or_else(|| "default".to_string()),
        madl: raw.madl.unwrap_or(254),
        payload,
        t_ms: raw.schedule.t_ms,
        repeat,
        timeout_ms: raw.schedule.timeout_ms,
        loss,
        delay_max_ms: raw.medium.as_ref().and_then(|m| m.delay_max_ms).unwrap_or(10),
        event_budget: raw.medium.as_ref().and_then(|m| m.event_budget).unwrap_or(2_000_000),
        seeds: raw.run.seeds,
        agents: raw.run.agents.unwrap_or(1),
        target,
        recovery_round_cap: raw.run.recovery_round_cap.unwrap_or(50),
        policies,
    };
    scenario.validate()?;
    Ok(scenario)
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

/// Stable permanent identifier of the scenario's `index`-th agent.
pub fn default_agent_id(index: usize) -> AgentId {
    let mut id = [0u8; 8];
    id[..4].copy_from_slice(&0xA6E5_71D0u32.to_be_bytes());
    id[4..].copy_from_slice(&(index as u32).to_be_bytes());
    AgentId(id)
}

/// One executed (t, seed) combination.
#[derive(Debug)]
pub struct RunResult {
    pub run_id: String,
    pub t_ms: u64,
    pub seed: u64,
    pub params: TransferParams,
    pub completed: bool,
    /// Simulation-level failure (livelock, encode error), if any.
    pub failure: Option<String>,
    pub rounds_used: u32,
    pub unique_received: usize,
    pub metrics: TransferMetrics,
    pub trace: Trace,
}

fn zero_metrics() -> TransferMetrics {
    TransferMetrics {
        data_rate_bps: 0.0,
        packet_loss_pct: 100.0,
        mean_interarrival_s: 0.0,
        total_time_s: 0.0,
        curve: vec![crate::metrics::CurvePoint { at_ms: 0, pct: 0.0 }],
    }
}

/// Builds the simulation for one (t, seed) pair. Exposed so tests can drive
/// or inspect a run before execution.
pub fn build_simulation(scn: &Scenario, t_ms: u64, seed: u64) -> Result<Simulation, ScenarioError> {
    let mut cfg = MediumConfig::new(seed);
    cfg.loss = scn.loss;
    cfg.delay_max_ms = scn.delay_max_ms;
    cfg.event_budget = scn.event_budget;
    let ext_cfg = match scn.ble_mode {
        PduKind::ExtendedNonConnectable => Some(
            ExtendedConfig::new(scn.madl)
                .map_err(|e| ScenarioError::Simulation(e.to_string()))?,
        ),
        PduKind::LegacyNonConnectable => None,
    };
    let mut sim = Simulation::new(cfg, scn.ble_mode, ext_cfg)
        .map_err(|e| ScenarioError::Simulation(e.to_string()))?;

    let budget = sim.message_budget();
    let ctrl_params = CtrlParams::from_interval(
        t_ms as u16,
        scn.delay_max_ms,
        scn.recovery_round_cap,
        budget,
    );
    let target = match scn.target {
        TargetSpec::FirstSeen => TargetSelection::FirstSeen,
        TargetSpec::AgentIndex(i) => TargetSelection::Explicit(default_agent_id(i)),
    };
    let controller = Controller::new(ctrl_params, target);
    sim.add_controller(controller, CONTROLLER_UUID, [0xC0, 0xFF, 0x5E, 0x00, 0x00, 0x01]);

    // session identities: the advertiser uuid is fresh per run, the agent id
    // is permanent across runs
    let mut id_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_1DE4_7151_u64);
    let mut used = vec![CONTROLLER_UUID];
    for index in 0..scn.agents {
        let uuid_v = loop {
            let mut bytes = [0u8; 16];
            id_rng.fill(&mut bytes);
            let candidate = ServiceUuid(bytes);
            if !used.contains(&candidate) {
                used.push(candidate);
                break candidate;
            }
        };
        let mut address = [0u8; 6];
        id_rng.fill(&mut address);
        let schedule = AgentSchedule {
            interval_ms: t_ms as u16,
            repeat: scn.repeat,
            timeout_ms: scn.timeout_ms,
            delay_margin_ms: scn.delay_max_ms,
        };
        let agent = Agent::new(
            AgentIdentity { uuid_v, agent_id: default_agent_id(index) },
            CONTROLLER_UUID,
            &scn.payload,
            scn.z,
            schedule,
        )
        .map_err(|e| ScenarioError::Simulation(e.to_string()))?;
        let agent_node = sim.add_agent(agent, address);
        for policy in &scn.policies {
            sim.medium_mut()
                .attach_policy(agent_node, policy.clone())
                .map_err(|e| ScenarioError::Simulation(e.to_string()))?;
        }
    }
    Ok(sim)
}

/// Executes one (t, seed) combination to quiescence.
pub fn execute_run(scn: &Scenario, t_ms: u64, seed: u64) -> Result<RunResult, ScenarioError> {
    let mut sim = build_simulation(scn, t_ms, seed)?;
    sim.kickoff();
    let failure = sim.run_until(RunLimit::Quiescence).err().map(|e| e.to_string());

    let controller = sim
        .controller()
        .ok_or_else(|| ScenarioError::Simulation("no controller in simulation".to_string()))?;
    let completed = failure.is_none()
        && controller.reconstructed().is_some_and(|p| p == scn.payload.as_slice());
    let params = TransferParams {
        payload_len: scn.payload.len(),
        n: scn.segment_count(),
        z: scn.z,
        repeat: scn.repeat,
        t_ms,
    };
    let metrics = compute_metrics(&sim.trace, &params).unwrap_or_else(|_| zero_metrics());
    Ok(RunResult {
        run_id: format!("{}-t{}-s{}", scn.name, t_ms, seed),
        t_ms,
        seed,
        params,
        completed,
        failure,
        rounds_used: controller.rounds_used(),
        unique_received: controller.unique_received(),
        metrics,
        trace: sim.trace,
    })
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub write_trace: bool,
    pub dump_pdus: bool,
    pub seed_override: Option<u64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            out_dir: PathBuf::from("out"),
            write_trace: false,
            dump_pdus: false,
            seed_override: None,
        }
    }
}

#[derive(Debug)]
pub struct ScenarioReport {
    pub results: Vec<RunResult>,
    pub metrics_csv: String,
    pub curves_csv: String,
    pub summary_csv: String,
}

impl ScenarioReport {
    pub fn all_complete(&self) -> bool {
        self.results.iter().all(|r| r.completed)
    }

    pub fn any_failure(&self) -> bool {
        self.results.iter().any(|r| r.failure.is_some())
    }
}

/// Runs the full sweep (every declared t crossed with every seed, in
/// declaration order) and writes all outputs under `opts.out_dir`.
pub fn run_scenario(scn: &Scenario, opts: &RunOptions) -> Result<ScenarioReport, ScenarioError> {
    scn.validate()?;
    let seeds: Vec<u64> = match opts.seed_override {
        Some(s) => vec![s],
        None => scn.seeds.clone(),
    };

    let mut results = Vec::with_capacity(scn.t_ms.len() * seeds.len());
    for &t in &scn.t_ms {
        for &seed in &seeds {
            results.push(execute_run(scn, t, seed)?);
        }
    }

    let mut metrics_csv = String::from(METRICS_CSV_HEADER);
    metrics_csv.push('\n');
    let mut curves_csv = String::from(CURVE_CSV_HEADER);
    curves_csv.push('\n');
    let mut summary_csv = String::from(SUMMARY_CSV_HEADER);
    summary_csv.push('\n');
    for r in &results {
        let row = MetricsRow {
            run_id: &r.run_id,
            device_profile: &scn.device_profile,
            ble_mode: scn.ble_mode.label(),
            loss_p: scn.loss.drop_probability(),
            seed: r.seed,
            params: &r.params,
            metrics: &r.metrics,
        };
        metrics_csv.push_str(&row.to_string());
        metrics_csv.push('\n');
        curves_csv.push_str(&curve_rows(&r.run_id, &r.metrics.curve));
        summary_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.run_id, r.params.n, r.completed, r.rounds_used, r.unique_received
        ));
    }

    fs::create_dir_all(&opts.out_dir)?;
    fs::write(opts.out_dir.join("metrics.csv"), &metrics_csv)?;
    fs::write(opts.out_dir.join("curves.csv"), &curves_csv)?;
    fs::write(opts.out_dir.join("summary.csv"), &summary_csv)?;
    if opts.write_trace {
        let dir = opts.out_dir.join("traces");
        fs::create_dir_all(&dir)?;
        for r in &results {
            fs::write(dir.join(format!("{}.log", r.run_id)), r.trace.render())?;
        }
    }
    if opts.dump_pdus {
        let dir = opts.out_dir.join("pdus");
        fs::create_dir_all(&dir)?;
        for r in &results {
            fs::write(dir.join(format!("{}.hex", r.run_id)), r.trace.render_pdus())?;
        }
    }

    Ok(ScenarioReport { results, metrics_csv, curves_csv, summary_csv })
}
