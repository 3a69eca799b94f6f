//! OS-side advertisement filters and their throughput consequences.
//!
//! Four defenses are modeled as per-sender filters the medium consults
//! before an advertisement airs: enforcing a minimum interval, limiting how
//! often advertisement content may change, flagging anomalous content
//! streams (detection without prevention), and restricting content to a
//! fixed vocabulary. For the last one, `vocab_encode`/`vocab_decode`
//! implement the re-encoding an attacker falls back to — one allowed value
//! per advertisement, so throughput collapses to `log2(|V|)` bits per
//! advertisement.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use num_bigint::BigUint;
use thiserror::Error;

use crate::pdu::ServiceUuid;
use crate::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CmError {
    #[error("restricted vocabulary needs at least two distinct values")]
    InsufficientAlphabet,
    #[error("symbol is not in the alphabet")]
    SymbolNotInAlphabet,
    #[error("decoded value needs {got} bytes but payload length is {want}")]
    DecodedLengthMismatch { got: usize, want: usize },
    #[error("invalid policy parameter: {0}")]
    InvalidPolicy(&'static str),
}

/// What a filter decided about one advertisement attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyAction {
    Allow,
    /// Emission postponed to the given time.
    Delay(SimTime),
    /// Emission suppressed entirely.
    Block,
    /// Emission allowed but flagged as suspicious.
    Flag,
}

/// The content a filter sees: the advertised service UUID and service-data
/// bytes.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContent<'a> {
    pub uuid: ServiceUuid,
    pub service_data: &'a [u8],
}

impl PolicyContent<'_> {
    /// Full content key; UUID changes count as content changes.
    fn key(&self) -> Vec<u8> {
        let mut k = self.uuid.0.to_vec();
        k.extend_from_slice(self.service_data);
        k
    }
}

/// Declarative policy description, as it appears in scenario configs.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// Enforce a minimum interval between advertisements of one sender.
    RateLimit { min_interval_ms: u64 },
    /// Allow at most `max_changes` content changes per sliding window.
    ChangeFrequencyLimit { max_changes: usize, window_ms: u64 },
    /// Flag (without blocking) when the content stream looks anomalous.
    /// The shipped rule measures the entropy of the content values seen in
    /// a sliding window of advertisements.
    SemanticCheck { window: usize, entropy_threshold_bits: f64 },
    /// Block any service data outside the allowed set.
    RestrictedVocabulary { allowed: Vec<Vec<u8>> },
}

impl Policy {
    pub fn validate(&self) -> Result<(), CmError> {
        match self {
            Policy::RateLimit { min_interval_ms } if *min_interval_ms == 0 => {
                Err(CmError::InvalidPolicy("min_interval_ms must be positive"))
            }
            Policy::ChangeFrequencyLimit { max_changes, window_ms } => {
                if *max_changes == 0 {
                    Err(CmError::InvalidPolicy("max_changes must be positive"))
                } else if *window_ms == 0 {
                    Err(CmError::InvalidPolicy("window_ms must be positive"))
                } else {
                    Ok(())
                }
            }
            Policy::SemanticCheck { window, entropy_threshold_bits } => {
                if *window == 0 {
                    Err(CmError::InvalidPolicy("window must be positive"))
                } else if *entropy_threshold_bits < 0.0 {
                    Err(CmError::InvalidPolicy("entropy threshold must be non-negative"))
                } else {
                    Ok(())
                }
            }
            Policy::RestrictedVocabulary { allowed } if allowed.is_empty() => {
                Err(CmError::InvalidPolicy("allowed_values must be non-empty"))
            }
            _ => Ok(()),
        }
    }

    pub fn into_state(self) -> PolicyState {
        match self {
            Policy::RateLimit { min_interval_ms } => PolicyState::RateLimit {
                min_interval_ms,
                last_at: None,
            },
            Policy::ChangeFrequencyLimit { max_changes, window_ms } => {
                PolicyState::ChangeFrequency {
                    max_changes,
                    window_ms,
                    last_content: None,
                    changes: VecDeque::new(),
                }
            }
            Policy::SemanticCheck { window, entropy_threshold_bits } => PolicyState::Semantic(
                Box::new(ContentEntropyRule::new(window, entropy_threshold_bits)),
            ),
            Policy::RestrictedVocabulary { allowed } => PolicyState::Vocabulary {
                allowed: allowed.into_iter().collect(),
            },
        }
    }
}

/// Pluggable detection rule for the semantic-check countermeasure.
pub trait SemanticRule: fmt::Debug + Send {
    fn name(&self) -> &'static str;
    /// Observes one advertisement; returns true to raise a flag.
    fn observe(&mut self, content: &PolicyContent<'_>, at: SimTime) -> bool;
}

/// Default rule: Shannon entropy of the content values seen over the last
/// `window` advertisements. A benign beacon repeats one value (entropy 0);
/// a data transfer changes content every advertisement (entropy near
/// `log2(window)`).
#[derive(Debug)]
pub struct ContentEntropyRule {
    window: usize,
    threshold_bits: f64,
    history: VecDeque<Vec<u8>>,
}

impl ContentEntropyRule {
    pub fn new(window: usize, threshold_bits: f64) -> Self {
        ContentEntropyRule {
            window,
            threshold_bits,
            history: VecDeque::new(),
        }
    }

    fn entropy_bits(&self) -> f64 {
        let total = self.history.len() as f64;
        let mut counts: BTreeMap<&[u8], usize> = BTreeMap::new();
        for v in &self.history {
            *counts.entry(v.as_slice()).or_insert(0) += 1;
        }
        -counts
            .values()
            .map(|&c| {
                let p = c as f64 / total;
                p * p.log2()
            })
            .sum::<f64>()
    }
}

impl SemanticRule for ContentEntropyRule {
    fn name(&self) -> &'static str {
        "content-entropy"
    }

    fn observe(&mut self, content: &PolicyContent<'_>, _at: SimTime) -> bool {
        self.history.push_back(content.service_data.to_vec());
        if self.history.len() > self.window {
            self.history.pop_front();
        }
        self.history.len() == self.window && self.entropy_bits() > self.threshold_bits
    }
}

/// Runtime state of one policy attached to one sender.
#[derive(Debug)]
pub enum PolicyState {
    RateLimit {
        min_interval_ms: u64,
        last_at: Option<SimTime>,
    },
    ChangeFrequency {
        max_changes: usize,
        window_ms: u64,
        last_content: Option<Vec<u8>>,
        changes: VecDeque<SimTime>,
    },
    Semantic(Box<dyn SemanticRule>),
    Vocabulary { allowed: BTreeSet<Vec<u8>> },
}

impl PolicyState {
    pub fn rule_name(&self) -> &'static str {
        match self {
            PolicyState::RateLimit { .. } => "rate-limit",
            PolicyState::ChangeFrequency { .. } => "change-frequency",
            PolicyState::Semantic(rule) => rule.name(),
            PolicyState::Vocabulary { .. } => "restricted-vocabulary",
        }
    }
}

/// Applies one policy to one advertisement attempt at `at`.
///
/// Rate limiting delays the emission to keep the minimum spacing. The
/// change-frequency limit blocks a content change beyond its quota (the
/// change is not recorded: nothing aired). Semantic checks only ever flag.
/// The vocabulary filter blocks content outside the allowed set.
pub fn apply_policy(
    state: &mut PolicyState,
    content: &PolicyContent<'_>,
    at: SimTime,
) -> PolicyAction {
    match state {
        PolicyState::RateLimit { min_interval_ms, last_at } => {
            let action = match *last_at {
                Some(last) if at.as_ms() < last.as_ms() + *min_interval_ms => {
                    PolicyAction::Delay(last + *min_interval_ms)
                }
                _ => PolicyAction::Allow,
            };
            *last_at = Some(match action {
                PolicyAction::Delay(until) => until,
                _ => at,
            });
            action
        }
        PolicyState::ChangeFrequency { max_changes, window_ms, last_content, changes } => {
            let key = content.key();
            if last_content.as_ref() == Some(&key) {
                return PolicyAction::Allow;
            }
            while changes
                .front()
                .is_some_and(|t| t.as_ms() + *window_ms <= at.as_ms())
            {
                changes.pop_front();
            }
            if changes.len() >= *max_changes {
                return PolicyAction::Block;
            }
            changes.push_back(at);
            *last_content = Some(key);
            PolicyAction::Allow
        }
        PolicyState::Semantic(rule) => {
            if rule.observe(content, at) {
                PolicyAction::Flag
            } else {
                PolicyAction::Allow
            }
        }
        PolicyState::Vocabulary { allowed } => {
            if allowed.contains(content.service_data) {
                PolicyAction::Allow
            } else {
                PolicyAction::Block
            }
        }
    }
}

/// Advertisements needed to move `payload_len` bytes through an alphabet of
/// `alphabet_size` values: `ceil(8·len / log2(|V|))`.
pub fn vocab_emission_count(payload_len: usize, alphabet_size: usize) -> usize {
    if payload_len == 0 {
        return 0;
    }
    let bits = 8.0 * payload_len as f64;
    (bits / (alphabet_size as f64).log2()).ceil() as usize
}

fn check_alphabet(alphabet: &[Vec<u8>]) -> Result<(), CmError> {
    let distinct: BTreeSet<&Vec<u8>> = alphabet.iter().collect();
    if distinct.len() < 2 || distinct.len() != alphabet.len() {
        return Err(CmError::InsufficientAlphabet);
    }
    Ok(())
}

/// Re-encodes a payload as a sequence of allowed advertisement values: the
/// payload is treated as a big integer and written out in base `|V|`,
/// most-significant digit first, padded to the full emission count.
pub fn vocab_encode(payload: &[u8], alphabet: &[Vec<u8>]) -> Result<Vec<Vec<u8>>, CmError> {
    check_alphabet(alphabet)?;
    let base = alphabet.len();
    let count = vocab_emission_count(payload.len(), base);
    let mut digits = Vec::with_capacity(count);
    let zero = BigUint::from(0u8);
    let mut value = BigUint::from_bytes_be(payload);
    let big_base = BigUint::from(base);
    while value > zero {
        let (q, r) = (&value / &big_base, &value % &big_base);
        let digit = r.to_u64_digits().first().copied().unwrap_or(0) as usize;
        digits.push(digit);
        value = q;
    }
    while digits.len() < count {
        digits.push(0);
    }
    Ok(digits
        .into_iter()
        .rev()
        .map(|d| alphabet[d].clone())
        .collect())
}

/// Inverse of `vocab_encode`; `payload_len` restores leading zero bytes.
pub fn vocab_decode(
    symbols: &[Vec<u8>],
    alphabet: &[Vec<u8>],
    payload_len: usize,
) -> Result<Vec<u8>, CmError> {
    check_alphabet(alphabet)?;
    let index: BTreeMap<&Vec<u8>, usize> =
        alphabet.iter().enumerate().map(|(i, v)| (v, i)).collect();
    let big_base = BigUint::from(alphabet.len());
    let mut value = BigUint::from(0u8);
    for sym in symbols {
        let digit = *index.get(sym).ok_or(CmError::SymbolNotInAlphabet)?;
        value = value * &big_base + BigUint::from(digit);
    }
    let bytes = value.to_bytes_be();
    // the canonical big-endian form of zero is [0]; treat it as empty
    let bytes = if bytes == [0] { Vec::new() } else { bytes };
    if bytes.len() > payload_len {
        return Err(CmError::DecodedLengthMismatch { got: bytes.len(), want: payload_len });
    }
    let mut out = vec![0u8; payload_len - bytes.len()];
    out.extend_from_slice(&bytes);
    Ok(out)
}

/// The canonical two-value alphabet (bit per advertisement).
pub fn bit_alphabet() -> Vec<Vec<u8>> {
    vec![vec![0x30], vec![0x31]]
}

/// Outcome of a vocabulary-mode transfer pushed through the medium.
#[derive(Debug)]
pub struct VocabRun {
    pub emitted: usize,
    pub blocked: usize,
    /// Air time of the first and last symbol advertisement.
    pub first_at: SimTime,
    pub last_at: SimTime,
    /// Symbols received in order by the scanning node.
    pub delivered_symbols: Vec<Vec<u8>>,
}

impl VocabRun {
    /// Payload bytes per second across the transmission.
    pub fn data_rate_bps(&self, payload_len: usize) -> f64 {
        let span = self.last_at.since(self.first_at).max(1);
        payload_len as f64 * 1000.0 / span as f64
    }
}

/// Simulates the attack under a restricted-vocabulary OS: the sender
/// re-encodes the payload as one allowed value per advertisement, paced by
/// `t_ms`, through a medium with the vocabulary filter attached. No ARQ: the
/// discovery and selection handshake is impossible under this policy, so the
/// harness drives the channel directly.
pub fn run_vocab_transfer(
    payload: &[u8],
    alphabet: &[Vec<u8>],
    t_ms: u64,
    cfg: crate::medium::MediumConfig,
) -> Result<VocabRun, crate::medium::MediumError> {
    use crate::medium::{AdvPayload, Medium};
    use crate::pdu::{build_pdu, PduKind, LEGACY_MAX_SERVICE_DATA};
    use crate::NodeId;

    for value in alphabet {
        if value.len() > LEGACY_MAX_SERVICE_DATA {
            return Err(CmError::InvalidPolicy("vocabulary value exceeds service-data budget").into());
        }
    }
    let symbols = vocab_encode(payload, alphabet)?;
    let mut medium = Medium::new(cfg)?;
    let scanner = NodeId(0);
    let sender = NodeId(1);
    medium.register_node(scanner);
    medium.register_node(sender);
    medium.attach_policy(sender, Policy::RestrictedVocabulary { allowed: alphabet.to_vec() })?;

    let uuid = ServiceUuid([0x5B; 16]);
    let address = [0xA6, 0, 0, 0, 0, 1];
    let mut base = SimTime::ZERO;
    let mut run = VocabRun {
        emitted: 0,
        blocked: 0,
        first_at: SimTime::ZERO,
        last_at: SimTime::ZERO,
        delivered_symbols: Vec::new(),
    };
    for (i, symbol) in symbols.iter().enumerate() {
        let pdu = build_pdu(PduKind::LegacyNonConnectable, address, uuid, symbol, None)?;
        let event =
            medium.schedule_advertisement(sender, pdu, AdvPayload::Raw(symbol.clone()), base);
        run.emitted += 1;
        if event.blocked {
            run.blocked += 1;
        } else if event.delivered_to.contains(&scanner) {
            run.delivered_symbols.push(symbol.clone());
        }
        if i == 0 {
            run.first_at = event.at;
        }
        run.last_at = event.at;
        base = event.at + t_ms;
    }
    Ok(run)
}
