//! The ring coordination state machine.
//!
//! Each clock cycle runs the same steps. The cycle coordinator (rotating
//! round-robin over the ring) initializes the counting structure — masked
//! with a fresh perturbation when noise is enabled — and sends it around the
//! ring. Every gateway prunes its window, records this cycle's measurements,
//! and adds its entire window multiset to the structure; the round ends when
//! the structure returns to the coordinator, which therefore contributes
//! last. The coordinator then unmasks, subtracts `z - 1` from every counter
//! (so the remaining per-value count is exactly the publication budget) and
//! drives one or two publication rounds: gateways publish eligible tuples
//! with probability `p_pub`, decrementing the structure per published tuple,
//! and a forced `p_pub = 1` round follows whenever the probabilistic round
//! left some gateway holding an eligible tuple (signalled by a 1-bit pending
//! flag piggybacked on the ring message).

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::anonymizer::{MeasurementTuple, WindowEntry, WindowLog};
use crate::securesum::{self, PerturbationPolicy, PerturbationVector, SecureSumError};
use crate::sketch::{BackendSpec, CountingBackend, CountingStructure, SketchError};

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("ring needs at least 3 gateways, got {0}")]
    RingTooSmall(usize),
    #[error("gateway {0} already contributed in cycle {1}")]
    DuplicateContribution(u64, u64),
    #[error("expected a {expected} message, got {got}")]
    WrongRoundKind { expected: &'static str, got: &'static str },
    #[error("gateway {0} has no measurements recorded for cycle {1}")]
    NotCollected(u64, u64),
    #[error("message for cycle {msg} processed in cycle {now}")]
    CycleMismatch { msg: u64, now: u64 },
    #[error("message truncated: need at least {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("unknown round kind byte {0:#x}")]
    UnknownRoundKind(u8),
    #[error("p_pub range must satisfy 0 < min <= max <= 1, got [{min}, {max}]")]
    InvalidPPubRange { min: f64, max: f64 },
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error(transparent)]
    SecureSum(#[from] SecureSumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GatewayId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SensorId(pub u64);

/// Pseudo-random ring over the gateway ids: every gateway has exactly one
/// successor and following successors visits all gateways once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingTopology {
    order: Vec<GatewayId>,
    position: BTreeMap<GatewayId, usize>,
}

impl RingTopology {
    /// Seeded uniform shuffle of the gateway ids. Needs at least 3 gateways;
    /// below that the secure sum is vacuous.
    pub fn build<R: Rng>(ids: &[GatewayId], rng: &mut R) -> Result<Self, ProtocolError> {
        if ids.len() < 3 {
            return Err(ProtocolError::RingTooSmall(ids.len()));
        }
        let mut order = ids.to_vec();
        order.sort();
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        Ok(Self::from_order(order))
    }

    /// Use the given order verbatim (tests and reproductions).
    pub fn from_order(order: Vec<GatewayId>) -> Self {
        let position = order.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        Self { order, position }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[GatewayId] {
        &self.order
    }

    pub fn successor(&self, id: GatewayId) -> GatewayId {
        let pos = self.position[&id];
        self.order[(pos + 1) % self.order.len()]
    }

    pub fn predecessor(&self, id: GatewayId) -> GatewayId {
        let pos = self.position[&id];
        self.order[(pos + self.order.len() - 1) % self.order.len()]
    }

    /// Deterministic round-robin coordinator rotation.
    pub fn ccc_for_cycle(&self, cycle: u64) -> GatewayId {
        self.order[(cycle % self.order.len() as u64) as usize]
    }

    /// The n gateways in processing order for a round started by `ccc`:
    /// successor first, coordinator last.
    pub fn round_order(&self, ccc: GatewayId) -> impl Iterator<Item = GatewayId> + '_ {
        let start = self.position[&ccc];
        let n = self.order.len();
        (1..=n).map(move |i| self.order[(start + i) % n])
    }
}

/// Message round discriminator; publication rounds carry the probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RoundKind {
    Collection,
    Publication { p_pub: f64 },
}

impl RoundKind {
    fn name(&self) -> &'static str {
        match self {
            RoundKind::Collection => "collection",
            RoundKind::Publication { .. } => "publication",
        }
    }
}

/// The envelope passed along the ring.
///
/// Wire format, little-endian: cycle_index (8 bytes), flags/kind (1 byte),
/// p_pub as fixed-point multiples of 1/65536 (2 bytes), sender id (8 bytes),
/// payload length (4 bytes), payload. The kind byte uses bit 0 for the round
/// kind, bit 6 for the pending flag and bit 7 to mark an exact `p_pub = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RingMessage {
    pub cycle_index: u64,
    pub round: RoundKind,
    pub pending: bool,
    pub sender: GatewayId,
    pub payload: Vec<u8>,
}

const KIND_PUBLICATION: u8 = 0b0000_0001;
const FLAG_PENDING: u8 = 0b0100_0000;
const FLAG_EXACT_ONE: u8 = 0b1000_0000;
const ENVELOPE_LEN: usize = 23;

/// Quantize a probability onto the wire grid of 1/65536 steps.
pub fn quantize_p_pub(p: f64) -> f64 {
    if p >= 1.0 {
        return 1.0;
    }
    let q = (p * 65536.0).round().clamp(0.0, 65535.0);
    q / 65536.0
}

pub fn encode_ring_message(msg: &RingMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(ENVELOPE_LEN + msg.payload.len());
    out.extend_from_slice(&msg.cycle_index.to_le_bytes());
    let (mut kind_byte, p_fixed) = match msg.round {
        RoundKind::Collection => (0u8, 0u16),
        RoundKind::Publication { p_pub } => {
            if p_pub >= 1.0 {
                (KIND_PUBLICATION | FLAG_EXACT_ONE, u16::MAX)
            } else {
                let q = (p_pub * 65536.0).round().clamp(0.0, 65535.0) as u16;
                (KIND_PUBLICATION, q)
            }
        }
    };
    if msg.pending {
        kind_byte |= FLAG_PENDING;
    }
    out.push(kind_byte);
    out.extend_from_slice(&p_fixed.to_le_bytes());
    out.extend_from_slice(&msg.sender.0.to_le_bytes());
    out.extend_from_slice(&(msg.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&msg.payload);
    out
}

pub fn decode_ring_message(bytes: &[u8]) -> Result<RingMessage, ProtocolError> {
    if bytes.len() < ENVELOPE_LEN {
        return Err(ProtocolError::Truncated {
            expected: ENVELOPE_LEN,
            actual: bytes.len(),
        });
    }
    let cycle_index = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
    let kind_byte = bytes[8];
    if kind_byte & !(KIND_PUBLICATION | FLAG_PENDING | FLAG_EXACT_ONE) != 0 {
        return Err(ProtocolError::UnknownRoundKind(kind_byte));
    }
    let p_fixed = u16::from_le_bytes(bytes[9..11].try_into().unwrap());
    let sender = GatewayId(u64::from_le_bytes(bytes[11..19].try_into().unwrap()));
    let payload_len = u32::from_le_bytes(bytes[19..23].try_into().unwrap()) as usize;
    let expected = ENVELOPE_LEN + payload_len;
    if bytes.len() < expected {
        return Err(ProtocolError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let pending = kind_byte & FLAG_PENDING != 0;
    let round = if kind_byte & KIND_PUBLICATION != 0 {
        let p_pub = if kind_byte & FLAG_EXACT_ONE != 0 {
            1.0
        } else {
            p_fixed as f64 / 65536.0
        };
        RoundKind::Publication { p_pub }
    } else {
        if kind_byte & FLAG_EXACT_ONE != 0 {
            return Err(ProtocolError::UnknownRoundKind(kind_byte));
        }
        RoundKind::Collection
    };
    Ok(RingMessage {
        cycle_index,
        round,
        pending,
        sender,
        payload: bytes[ENVELOPE_LEN..expected].to_vec(),
    })
}

/// Publication-probability policy for the first publication round.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PPubPolicy {
    /// Force `p_pub = 1` in the first round (accepting ring-order bias,
    /// saving a round).
    pub forced: bool,
    pub min: f64,
    pub max: f64,
}

impl Default for PPubPolicy {
    fn default() -> Self {
        Self {
            forced: false,
            min: 0.5,
            max: 0.9,
        }
    }
}

impl PPubPolicy {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.forced {
            return Ok(());
        }
        if !(self.min > 0.0 && self.min <= self.max && self.max <= 1.0) {
            return Err(ProtocolError::InvalidPPubRange {
                min: self.min,
                max: self.max,
            });
        }
        Ok(())
    }
}

/// Draw the first-round publication probability: 1 when forced, otherwise
/// uniform over `[min, max]`, quantized to the wire grid so the value
/// round-trips exactly through the codec.
pub fn choose_p_pub<R: Rng>(policy: &PPubPolicy, rng: &mut R) -> f64 {
    if policy.forced {
        return 1.0;
    }
    quantize_p_pub(rng.random_range(policy.min..=policy.max))
}

/// Static per-run protocol parameters.
#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub z: u64,
    pub delta_t: u64,
    /// Replace sensor ids with the gateway id in published tuples.
    pub id_masking: bool,
    pub backend: BackendSpec,
    pub noise: PerturbationPolicy,
    pub p_pub: PPubPolicy,
    /// Upper bound on any plausible true counter value (e.g. total sensors
    /// times the window length); unmasked counters above it flag the cycle.
    pub headroom_ceiling: Option<u64>,
}

/// Per-gateway protocol state.
#[derive(Debug, Clone)]
pub struct GatewayState {
    pub id: GatewayId,
    pub window: WindowLog,
    current: Vec<(SensorId, MeasurementTuple)>,
    unpublished: Vec<(SensorId, MeasurementTuple)>,
    contributed_at: Option<u64>,
}

impl GatewayState {
    pub fn new(id: GatewayId) -> Self {
        Self {
            id,
            window: WindowLog::new(),
            current: Vec::new(),
            unpublished: Vec::new(),
            contributed_at: None,
        }
    }

    /// Tuples measured this cycle (set during the collection round).
    pub fn current_measurements(&self) -> &[(SensorId, MeasurementTuple)] {
        &self.current
    }

    /// Tuples still unpublished in the current publication phase.
    pub fn unpublished(&self) -> &[(SensorId, MeasurementTuple)] {
        &self.unpublished
    }
}

/// A tuple delivered to the central entity, with simulator-side provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublishedTuple {
    /// What goes on the wire (reporter already masked if configured).
    pub tuple: MeasurementTuple,
    pub origin_sensor: SensorId,
    pub origin_gateway: GatewayId,
}

/// Start the collection round at the coordinator: create the empty counting
/// structure, mask it when noise is enabled, and emit the collection message
/// for the successor. The sampled perturbation stays with the coordinator.
pub fn init_collection<R: Rng>(
    ccc: GatewayId,
    cycle: u64,
    cfg: &ProtocolConfig,
    rng: &mut R,
) -> Result<(RingMessage, Option<PerturbationVector>), ProtocolError> {
    let mut backend = cfg.backend.empty();
    let perturbation = match (&mut backend, cfg.noise) {
        (_, PerturbationPolicy::Disabled) => None,
        (CountingBackend::Cbf(filter), policy) => {
            let p = filter.params();
            let r = securesum::sample_perturbation(p.m, p.b, policy, rng);
            securesum::mask(filter, &r)?;
            Some(r)
        }
        (CountingBackend::Exact(_), _) => None,
    };
    let msg = RingMessage {
        cycle_index: cycle,
        round: RoundKind::Collection,
        pending: false,
        sender: ccc,
        payload: backend.to_bytes(),
    };
    Ok((msg, perturbation))
}

/// Process a collection message at one gateway: prune the window, record the
/// new measurements (one per attached sensor, already bucketed), add the
/// entire pruned window multiset to the structure, and hand back the message
/// to forward. Adding the full window — not just the new tuples — is what
/// makes the aggregate equal the global per-window counts and hence the
/// centralized publication budget.
pub fn on_collection(
    gw: &mut GatewayState,
    msg: &RingMessage,
    now: u64,
    new_measurements: &[(SensorId, MeasurementTuple)],
    cfg: &ProtocolConfig,
) -> Result<RingMessage, ProtocolError> {
    if !matches!(msg.round, RoundKind::Collection) {
        return Err(ProtocolError::WrongRoundKind {
            expected: "collection",
            got: msg.round.name(),
        });
    }
    if msg.cycle_index != now {
        return Err(ProtocolError::CycleMismatch {
            msg: msg.cycle_index,
            now,
        });
    }
    if gw.contributed_at == Some(now) {
        return Err(ProtocolError::DuplicateContribution(gw.id.0, now));
    }

    gw.window.apply_delta_t(now, cfg.delta_t);

    let mut current: Vec<(SensorId, MeasurementTuple)> = new_measurements.to_vec();
    current.sort_by_key(|&(sensor, _)| sensor);
    for &(sensor, tuple) in &current {
        gw.window.push(WindowEntry {
            bucket: tuple.bucket,
            sensor: sensor.0,
            cycle: now,
        });
    }
    gw.current = current.clone();
    gw.unpublished = current;
    gw.contributed_at = Some(now);

    let mut backend = cfg.backend.decode(&msg.payload)?;
    // masked state is cycle-local bookkeeping, not wire state: while noise is
    // active, every decoded mid-collection filter is logically masked
    if let (CountingBackend::Cbf(filter), false) =
        (&mut backend, cfg.noise == PerturbationPolicy::Disabled)
    {
        filter.set_masked(true);
    }
    for (&bucket, &count) in &gw.window.window_counts() {
        backend.add_n(bucket, count);
    }

    Ok(RingMessage {
        cycle_index: now,
        round: RoundKind::Collection,
        pending: false,
        sender: gw.id,
        payload: backend.to_bytes(),
    })
}

/// Coordinator post-processing once the collection message returned: remove
/// the perturbation and subtract `z - 1` from every counter, leaving each
/// value's publication budget `max(0, count - (z - 1))`.
pub fn prepare_publication(
    backend: &mut CountingBackend,
    perturbation: Option<&PerturbationVector>,
    cfg: &ProtocolConfig,
) -> Result<(), ProtocolError> {
    if let Some(r) = perturbation {
        match backend {
            CountingBackend::Cbf(filter) => {
                securesum::unmask(filter, r, cfg.headroom_ceiling)?;
            }
            CountingBackend::Exact(_) => {}
        }
    }
    backend.subtract_clamp(cfg.z - 1);
    Ok(())
}

/// Process a publication message at one gateway. Every still-unpublished
/// tuple of the current cycle whose bucket has a positive budget in the
/// structure is published with probability `p_pub` (and the budget
/// decremented); the rest stay queued. The pending flag on the forwarded
/// message reports whether any queued tuple still had budget when this
/// gateway finished — the signal for the coordinator to run a forced round.
pub fn on_publication(
    gw: &mut GatewayState,
    msg: &RingMessage,
    cfg: &ProtocolConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(RingMessage, Vec<PublishedTuple>), ProtocolError> {
    let p_pub = match msg.round {
        RoundKind::Publication { p_pub } => p_pub,
        RoundKind::Collection => {
            return Err(ProtocolError::WrongRoundKind {
                expected: "publication",
                got: "collection",
            })
        }
    };
    if gw.contributed_at != Some(msg.cycle_index) {
        return Err(ProtocolError::NotCollected(gw.id.0, msg.cycle_index));
    }

    let mut backend = cfg.backend.decode(&msg.payload)?;
    let mut published = Vec::new();
    let mut retained = Vec::new();
    for (sensor, tuple) in std::mem::take(&mut gw.unpublished) {
        if backend.count(tuple.bucket) > 0 && rng.random::<f64>() < p_pub {
            backend.remove(tuple.bucket);
            let reporter = if cfg.id_masking { gw.id.0 } else { sensor.0 };
            published.push(PublishedTuple {
                tuple: MeasurementTuple {
                    bucket: tuple.bucket,
                    reporter,
                    cycle: tuple.cycle,
                },
                origin_sensor: sensor,
                origin_gateway: gw.id,
            });
        } else {
            retained.push((sensor, tuple));
        }
    }
    let still_eligible = retained
        .iter()
        .any(|&(_, tuple)| backend.count(tuple.bucket) > 0);
    gw.unpublished = retained;

    Ok((
        RingMessage {
            cycle_index: msg.cycle_index,
            round: RoundKind::Publication { p_pub },
            pending: msg.pending || still_eligible,
            sender: gw.id,
            payload: backend.to_bytes(),
        },
        published,
    ))
}

/// Coordinator decision after a publication round returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Done,
    SecondRound,
}

/// The cycle ends when the round ran with `p_pub = 1` (everything eligible
/// was published) or when no gateway reported a pending eligible tuple;
/// otherwise a forced round follows. The structure itself need not be empty:
/// window counts include prior cycles' occurrences that have no current
/// tuple to publish.
pub fn round_termination(p_pub: f64, pending: bool) -> Termination {
    if p_pub >= 1.0 || !pending {
        Termination::Done
    } else {
        Termination::SecondRound
    }
}

/// Per-cycle random streams, derived by the caller so runs stay
/// deterministic and order-independent.
pub struct CycleRngs {
    pub perturbation: ChaCha8Rng,
    pub p_pub: ChaCha8Rng,
    /// One coin-flip stream per gateway, keyed by id.
    pub flips: BTreeMap<GatewayId, ChaCha8Rng>,
}

/// Everything a full protocol cycle produced.
#[derive(Debug, Clone)]
pub struct CycleOutcome {
    pub published: Vec<PublishedTuple>,
    pub ring_messages: u64,
    pub ring_bytes: u64,
    pub publication_rounds: u64,
    pub p_pub_round1: f64,
}

/// Drive one complete clock cycle over in-memory gateways: collection round,
/// threshold enforcement, and one or two publication rounds. Messages are
/// encoded and decoded at every hop exactly as they would be on the wire,
/// and counted per hop.
pub fn run_cycle(
    gateways: &mut BTreeMap<GatewayId, GatewayState>,
    ring: &RingTopology,
    cycle: u64,
    cfg: &ProtocolConfig,
    measurements: &BTreeMap<GatewayId, Vec<(SensorId, MeasurementTuple)>>,
    rngs: &mut CycleRngs,
) -> Result<CycleOutcome, ProtocolError> {
    let ccc = ring.ccc_for_cycle(cycle);
    let mut ring_messages = 0u64;
    let mut ring_bytes = 0u64;

    let mut send = |msg: &RingMessage| -> Vec<u8> {
        let bytes = encode_ring_message(msg);
        ring_messages += 1;
        ring_bytes += bytes.len() as u64;
        bytes
    };

    // collection round: coordinator initializes and contributes last
    let (msg, perturbation) = init_collection(ccc, cycle, cfg, &mut rngs.perturbation)?;
    let mut wire = send(&msg);
    static EMPTY: Vec<(SensorId, MeasurementTuple)> = Vec::new();
    for gw_id in ring.round_order(ccc) {
        let incoming = decode_ring_message(&wire)?;
        let gw = gateways.get_mut(&gw_id).expect("gateway exists");
        let new_m = measurements.get(&gw_id).unwrap_or(&EMPTY);
        let outgoing = on_collection(gw, &incoming, cycle, new_m, cfg)?;
        if gw_id == ccc {
            wire = encode_ring_message(&outgoing);
        } else {
            wire = send(&outgoing);
        }
    }

    // threshold enforcement at the coordinator
    let final_msg = decode_ring_message(&wire)?;
    let mut backend = cfg.backend.decode(&final_msg.payload)?;
    if perturbation.is_some() {
        if let CountingBackend::Cbf(filter) = &mut backend {
            filter.set_masked(true);
        }
    }
    prepare_publication(&mut backend, perturbation.as_ref(), cfg)?;

    // publication round(s)
    let mut published = Vec::new();
    let mut publication_rounds = 0u64;
    let p_pub_round1 = choose_p_pub(&cfg.p_pub, &mut rngs.p_pub);
    let mut p_pub = p_pub_round1;
    loop {
        publication_rounds += 1;
        let msg = RingMessage {
            cycle_index: cycle,
            round: RoundKind::Publication { p_pub },
            pending: false,
            sender: ccc,
            payload: backend.to_bytes(),
        };
        let mut wire = send(&msg);
        let mut returned = None;
        for gw_id in ring.round_order(ccc) {
            let incoming = decode_ring_message(&wire)?;
            let gw = gateways.get_mut(&gw_id).expect("gateway exists");
            let flips = rngs.flips.get_mut(&gw_id).expect("flip stream exists");
            let (outgoing, tuples) = on_publication(gw, &incoming, cfg, flips)?;
            published.extend(tuples);
            if gw_id == ccc {
                returned = Some(outgoing);
            } else {
                wire = send(&outgoing);
            }
        }
        let returned = returned.expect("round visits the coordinator");
        backend = cfg.backend.decode(&returned.payload)?;
        match round_termination(p_pub, returned.pending) {
            Termination::Done => break,
            Termination::SecondRound => p_pub = 1.0,
        }
    }

    Ok(CycleOutcome {
        published,
        ring_messages,
        ring_bytes,
        publication_rounds,
        p_pub_round1,
    })
}
