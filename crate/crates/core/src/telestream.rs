//! Deterministic discrete-event simulation of a two-peer streaming session:
//! prioritized channels over a shared bottleneck, a parameterized network,
//! depth/skeleton rate adaptation and QoS reporting.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest fragment put on the wire at once.
pub const MTU: usize = 1200;
/// Transmissions of a reliable message before the sender gives up.
pub const MAX_ATTEMPTS: u32 = 10;
pub const DEPTH_LEVELS: [u32; 6] = [30, 15, 10, 5, 1, 0];
pub const MIN_SKELETON_FPS: u32 = 15;
pub const ADAPT_INTERVAL: f64 = 1.0;
pub const HANDSHAKE_MESSAGES: u32 = 6;
const RATE_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TelestreamError {
    #[error("invalid channel configuration: {0}")]
    InvalidChannels(String),
    #[error("invalid network model: {0}")]
    InvalidNetwork(String),
    #[error("handshake failed after {attempts} attempts")]
    HandshakeFailed { attempts: u32 },
    #[error("session is not connected")]
    NotConnected,
    #[error("{peer:?} has no {channel:?} channel")]
    UnknownChannel { peer: Role, channel: ChannelKind },
    #[error("time {t} is before the current simulation time {now}")]
    TimeWentBack { now: f64, t: f64 },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Control,
    Skeleton,
    Audio,
    Depth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reliability {
    ReliableOrdered,
    Unreliable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub name: ChannelKind,
    pub reliability: Reliability,
    /// Lower transmits first.
    pub priority: u8,
    /// Messages per second.
    pub nominal_rate: f64,
    /// Bytes.
    pub payload_size: usize,
}

impl ChannelConfig {
    pub fn default_for(kind: ChannelKind) -> Self {
        use ChannelKind::*;
        let (reliability, priority, nominal_rate, payload_size) = match kind {
            Control => (Reliability::ReliableOrdered, 0, 1.0, 200),
            Skeleton => (Reliability::ReliableOrdered, 1, 30.0, 1024),
            Audio => (Reliability::Unreliable, 2, 50.0, 160),
            Depth => (Reliability::Unreliable, 3, 30.0, 320 * 240 * 2),
        };
        ChannelConfig {
            name: kind,
            reliability,
            priority,
            nominal_rate,
            payload_size,
        }
    }
}

pub fn default_channels() -> Vec<ChannelConfig> {
    use ChannelKind::*;
    [Control, Skeleton, Audio, Depth]
        .into_iter()
        .map(ChannelConfig::default_for)
        .collect()
}

pub fn validate_channels(channels: &[ChannelConfig]) -> Result<(), TelestreamError> {
    let bad = |m: String| Err(TelestreamError::InvalidChannels(m));
    let mut kinds = BTreeMap::new();
    let mut priorities = BTreeMap::new();
    for c in channels {
        if kinds.insert(c.name, ()).is_some() {
            return bad(format!("duplicate {:?} channel", c.name));
        }
        if priorities.insert(c.priority, ()).is_some() {
            return bad(format!("priority {} used twice", c.priority));
        }
        let expected = match c.name {
            ChannelKind::Control | ChannelKind::Skeleton => Reliability::ReliableOrdered,
            ChannelKind::Audio | ChannelKind::Depth => Reliability::Unreliable,
        };
        if c.reliability != expected {
            return bad(format!("{:?} must be {:?}", c.name, expected));
        }
        if !(c.nominal_rate.is_finite() && c.nominal_rate >= 0.0) || c.payload_size == 0 {
            return bad(format!("{:?} needs a finite rate and a non-empty payload", c.name));
        }
    }
    if !kinds.contains_key(&ChannelKind::Control) {
        return bad("a control channel is required".into());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Therapist,
    Patient,
}

impl Role {
    pub fn other(self) -> Role {
        match self {
            Role::Therapist => Role::Patient,
            Role::Patient => Role::Therapist,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    /// Bits per second, each direction.
    pub bandwidth: f64,
    /// One-way propagation delay, seconds.
    pub delay: f64,
    /// Half-width of the uniform delay variation, seconds.
    pub jitter: f64,
    /// Drop probability for unreliable messages. At 1.0 the link is down and
    /// nothing gets through.
    pub loss: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkModel {
    pub fn validate(&self) -> Result<(), TelestreamError> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(TelestreamError::InvalidNetwork("bandwidth must be positive".into()));
        }
        if !ok(self.delay) || !ok(self.jitter) {
            return Err(TelestreamError::InvalidNetwork(
                "delay and jitter must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.loss) {
            return Err(TelestreamError::InvalidNetwork("loss must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn retransmit_timeout(&self) -> f64 {
        (2.0 * self.delay + 4.0 * self.jitter).max(1e-3)
    }
}

/// Piecewise-constant change of the network, `at` seconds after media start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSegment {
    pub at: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MessageId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateState {
    pub depth_fps: u32,
    pub skeleton_fps: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Offered faster than the adapted frame rate.
    Decimated,
    /// Still queued when the frame rate was lowered.
    RateChange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogKind {
    Offered {
        id: MessageId,
        from: Role,
        channel: ChannelKind,
        size: usize,
    },
    Queued {
        id: MessageId,
        seq: Option<u64>,
    },
    SourceDropped {
        id: MessageId,
        reason: DropReason,
    },
    Lost {
        id: MessageId,
        attempt: u32,
    },
    Retransmitted {
        id: MessageId,
        attempt: u32,
    },
    Delivered {
        id: MessageId,
        from: Role,
        channel: ChannelKind,
        seq: Option<u64>,
        latency: f64,
    },
    RateChanged {
        peer: Role,
        rates: RateState,
        backlog_s: f64,
        throughput_bps: f64,
        capacity_bps: Option<f64>,
    },
    NetworkChanged {
        bandwidth: f64,
        loss: f64,
    },
    Connected,
    Failed {
        id: MessageId,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub t: f64,
    #[serde(flatten)]
    pub kind: LogKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub id: MessageId,
    pub from: Role,
    pub channel: ChannelKind,
    pub seq: Option<u64>,
    pub t: f64,
    pub latency: f64,
}

#[derive(Debug, Clone)]
struct Message {
    from: Role,
    channel: ChannelKind,
    reliable: bool,
    size: usize,
    offered_at: f64,
    seq: Option<u64>,
    sent_bytes: usize,
    attempt: u32,
    acked: bool,
    delivered_at: Option<f64>,
    handshake: bool,
    processed: bool,
}

#[derive(Debug, Clone)]
enum Ev {
    Net(NetworkSegment),
    TxDone { from: Role, msg: usize, bytes: usize },
    Arrive { msg: usize },
    Ack { msg: usize },
    Timeout { msg: usize, attempt: u32 },
    Adapt,
    Offer { msg: usize },
    Kick { from: Role },
}

impl Ev {
    fn rank(&self) -> u8 {
        match self {
            Ev::Net(_) => 0,
            Ev::TxDone { .. } => 1,
            Ev::Arrive { .. } => 2,
            Ev::Ack { .. } => 3,
            Ev::Timeout { .. } => 4,
            Ev::Adapt => 5,
            Ev::Offer { .. } => 6,
            Ev::Kick { .. } => 7,
        }
    }
}

#[derive(Debug)]
struct Scheduled {
    t: f64,
    rank: u8,
    n: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Reversed: BinaryHeap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .t
            .total_cmp(&self.t)
            .then(other.rank.cmp(&self.rank))
            .then(other.n.cmp(&self.n))
    }
}

#[derive(Debug, Clone)]
struct Peer {
    role: Role,
    /// Sorted by priority; queue `i` belongs to `channels[i]`.
    channels: Vec<ChannelConfig>,
    queues: Vec<VecDeque<usize>>,
    in_flight: Option<usize>,
    rates: RateState,
    depth_top: usize,
    skeleton_top: u32,
    next_accept: BTreeMap<ChannelKind, f64>,
    next_seq: BTreeMap<ChannelKind, u64>,
    expected: BTreeMap<ChannelKind, u64>,
    reorder: BTreeMap<(ChannelKind, u64), usize>,
    good_windows: u32,
    capacity: Option<f64>,
    window_bits: f64,
    window_busy: f64,
    window_acked: f64,
}

impl Peer {
    fn new(role: Role, mut channels: Vec<ChannelConfig>) -> Self {
        channels.sort_by_key(|c| c.priority);
        let nominal = |k| channels.iter().find(|c| c.name == k).map(|c| c.nominal_rate);
        let depth_top = nominal(ChannelKind::Depth)
            .and_then(|r| DEPTH_LEVELS.iter().position(|&l| l as f64 <= r + RATE_EPS))
            .unwrap_or(0);
        let skeleton_top = nominal(ChannelKind::Skeleton).map_or(30, |r| r.round() as u32);
        Peer {
            role,
            queues: vec![VecDeque::new(); channels.len()],
            channels,
            in_flight: None,
            rates: RateState {
                depth_fps: DEPTH_LEVELS[depth_top],
                skeleton_fps: skeleton_top,
            },
            depth_top,
            skeleton_top,
            next_accept: BTreeMap::new(),
            next_seq: BTreeMap::new(),
            expected: BTreeMap::new(),
            reorder: BTreeMap::new(),
            good_windows: 0,
            capacity: None,
            window_bits: 0.0,
            window_busy: 0.0,
            window_acked: 0.0,
        }
    }

    fn slot(&self, kind: ChannelKind) -> Option<usize> {
        self.channels.iter().position(|c| c.name == kind)
    }

    fn channel_rate(&self, c: &ChannelConfig, rates: RateState) -> f64 {
        match c.name {
            ChannelKind::Depth => c.nominal_rate.min(rates.depth_fps as f64),
            ChannelKind::Skeleton => c.nominal_rate.min(rates.skeleton_fps as f64),
            _ => c.nominal_rate,
        }
    }

    /// Bytes per second the peer's sources produce at `rates`.
    fn demand(&self, rates: RateState) -> f64 {
        self.channels
            .iter()
            .map(|c| self.channel_rate(c, rates) * c.payload_size as f64)
            .sum()
    }

    fn depth_level(&self) -> usize {
        DEPTH_LEVELS
            .iter()
            .position(|&l| l == self.rates.depth_fps)
            .unwrap_or(0)
    }
}

/// The simulated two-peer session.
#[derive(Debug)]
pub struct Simulation {
    now: f64,
    net: NetworkModel,
    rng: ChaCha8Rng,
    heap: BinaryHeap<Scheduled>,
    counter: u64,
    peers: [Peer; 2],
    messages: Vec<Message>,
    log: Vec<SimEvent>,
    connected_at: Option<f64>,
    failed: Vec<MessageId>,
    handshake_delivered: u32,
    pending: Vec<Delivery>,
}

/// Create both peers and run the signaling handshake.
pub fn connect(
    therapist: Vec<ChannelConfig>,
    patient: Vec<ChannelConfig>,
    net: NetworkModel,
) -> Result<Simulation, TelestreamError> {
    let mut sim = Simulation::new(therapist, patient, net)?;
    sim.connect()?;
    Ok(sim)
}

impl Simulation {
    pub fn new(
        therapist: Vec<ChannelConfig>,
        patient: Vec<ChannelConfig>,
        net: NetworkModel,
    ) -> Result<Self, TelestreamError> {
        validate_channels(&therapist)?;
        validate_channels(&patient)?;
        net.validate()?;
        Ok(Simulation {
            now: 0.0,
            rng: ChaCha8Rng::seed_from_u64(net.seed),
            net,
            heap: BinaryHeap::new(),
            counter: 0,
            peers: [Peer::new(Role::Therapist, therapist), Peer::new(Role::Patient, patient)],
            messages: Vec::new(),
            log: Vec::new(),
            connected_at: None,
            failed: Vec::new(),
            handshake_delivered: 0,
            pending: Vec::new(),
        })
    }

    /// Exchange the handshake: three control messages each way, alternating.
    pub fn connect(&mut self) -> Result<f64, TelestreamError> {
        if let Some(t) = self.connected_at {
            return Ok(t);
        }
        self.new_handshake(Role::Therapist);
        while self.connected_at.is_none() && self.failed.is_empty() {
            if !self.pop_event() {
                break;
            }
        }
        self.pending.clear();
        self.connected_at
            .ok_or(TelestreamError::HandshakeFailed { attempts: MAX_ATTEMPTS })
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn connected_at(&self) -> Option<f64> {
        self.connected_at
    }

    pub fn handshake_messages(&self) -> u32 {
        self.handshake_delivered
    }

    pub fn log(&self) -> &[SimEvent] {
        &self.log
    }

    pub fn rates(&self, peer: Role) -> RateState {
        self.peers[peer.index()].rates
    }

    pub fn network(&self) -> &NetworkModel {
        &self.net
    }

    /// Reliable messages abandoned after exhausting their attempts.
    pub fn failed(&self) -> &[MessageId] {
        &self.failed
    }

    /// Sequence number assigned to a queued reliable message.
    pub fn seq(&self, id: MessageId) -> Option<u64> {
        self.messages.get(id.0 as usize).and_then(|m| m.seq)
    }

    fn schedule(&mut self, t: f64, ev: Ev) {
        self.counter += 1;
        self.heap.push(Scheduled {
            t,
            rank: ev.rank(),
            n: self.counter,
            ev,
        });
    }

    fn record(&mut self, kind: LogKind) {
        self.log.push(SimEvent { t: self.now, kind });
    }

    /// Apply a network change at absolute simulation time `t`.
    pub fn schedule_network_change(&mut self, t: f64, segment: NetworkSegment) -> Result<(), TelestreamError> {
        if t < self.now {
            return Err(TelestreamError::TimeWentBack { now: self.now, t });
        }
        let mut probe = self.net.clone();
        probe.bandwidth = segment.bandwidth.unwrap_or(probe.bandwidth);
        probe.loss = segment.loss.unwrap_or(probe.loss);
        probe.validate()?;
        self.schedule(t, Ev::Net(segment));
        Ok(())
    }

    fn new_message(&mut self, from: Role, channel: &ChannelConfig, size: usize, t: f64, handshake: bool) -> usize {
        self.messages.push(Message {
            from,
            channel: channel.name,
            reliable: channel.reliability == Reliability::ReliableOrdered,
            size,
            offered_at: t,
            seq: None,
            sent_bytes: 0,
            attempt: 1,
            acked: false,
            delivered_at: None,
            handshake,
            processed: false,
        });
        self.messages.len() - 1
    }

    fn new_handshake(&mut self, from: Role) {
        let peer = &self.peers[from.index()];
        let c = peer.channels[peer.slot(ChannelKind::Control).expect("validated")].clone();
        let m = self.new_message(from, &c, c.payload_size, self.now, true);
        self.schedule(self.now, Ev::Offer { msg: m });
    }

    /// Hand a message to `from`'s channel at time `t`. `size` defaults to the
    /// channel's payload size.
    pub fn offer(
        &mut self,
        from: Role,
        channel: ChannelKind,
        size: Option<usize>,
        t: f64,
    ) -> Result<MessageId, TelestreamError> {
        if self.connected_at.is_none() {
            return Err(TelestreamError::NotConnected);
        }
        if t < self.now {
            return Err(TelestreamError::TimeWentBack { now: self.now, t });
        }
        let peer = &self.peers[from.index()];
        let c = peer
            .slot(channel)
            .map(|i| peer.channels[i].clone())
            .ok_or(TelestreamError::UnknownChannel { peer: from, channel })?;
        let m = self.new_message(from, &c, size.unwrap_or(c.payload_size).max(1), t, false);
        self.schedule(t, Ev::Offer { msg: m });
        Ok(MessageId(m as u64))
    }

    /// Advance to `until`, returning the messages delivered on the way.
    pub fn step(&mut self, until: f64) -> Result<Vec<Delivery>, TelestreamError> {
        if until < self.now {
            return Err(TelestreamError::TimeWentBack {
                now: self.now,
                t: until,
            });
        }
        while self.heap.peek().is_some_and(|s| s.t <= until) {
            self.pop_event();
        }
        self.now = until;
        Ok(std::mem::take(&mut self.pending))
    }

    fn pop_event(&mut self) -> bool {
        let Some(s) = self.heap.pop() else { return false };
        self.now = s.t;
        match s.ev {
            Ev::Net(seg) => {
                if let Some(b) = seg.bandwidth {
                    self.net.bandwidth = b;
                }
                if let Some(l) = seg.loss {
                    self.net.loss = l;
                }
                self.record(LogKind::NetworkChanged {
                    bandwidth: self.net.bandwidth,
                    loss: self.net.loss,
                });
            }
            Ev::Offer { msg } => self.on_offer(msg),
            Ev::TxDone { from, msg, bytes } => self.on_tx_done(from, msg, bytes),
            Ev::Arrive { msg } => self.on_arrive(msg),
            Ev::Ack { msg } => {
                let m = &mut self.messages[msg];
                if !m.acked {
                    m.acked = true;
                    let (from, size) = (m.from, m.size);
                    self.peers[from.index()].window_acked += size as f64;
                }
            }
            Ev::Timeout { msg, attempt } => self.on_timeout(msg, attempt),
            Ev::Kick { from } => self.kick(from),
            Ev::Adapt => {
                for role in [Role::Therapist, Role::Patient] {
                    self.adapt(role);
                }
                self.schedule(self.now + ADAPT_INTERVAL, Ev::Adapt);
            }
        }
        true
    }

    fn on_offer(&mut self, msg: usize) {
        let now = self.now;
        let (from, channel, size, reliable) = {
            let m = &mut self.messages[msg];
            m.processed = true;
            (m.from, m.channel, m.size, m.reliable)
        };
        let id = MessageId(msg as u64);
        if !self.messages[msg].handshake {
            self.record(LogKind::Offered {
                id,
                from,
                channel,
                size,
            });
        }
        let peer = &mut self.peers[from.index()];
        let fps = match channel {
            ChannelKind::Depth => Some(peer.rates.depth_fps),
            ChannelKind::Skeleton => Some(peer.rates.skeleton_fps),
            _ => None,
        };
        if let Some(fps) = fps {
            let next = peer.next_accept.get(&channel).copied().unwrap_or(f64::NEG_INFINITY);
            if fps == 0 || now < next - RATE_EPS {
                self.record(LogKind::SourceDropped {
                    id,
                    reason: DropReason::Decimated,
                });
                return;
            }
            peer.next_accept.insert(channel, now + 1.0 / fps as f64);
        }
        let seq = reliable.then(|| {
            let s = peer.next_seq.entry(channel).or_insert(0);
            *s += 1;
            *s
        });
        let slot = peer.slot(channel).expect("offer checked the channel");
        peer.queues[slot].push_back(msg);
        self.messages[msg].seq = seq;
        self.record(LogKind::Queued { id, seq });
        // Let every offer made at this instant queue before the link picks.
        self.schedule(now, Ev::Kick { from });
    }

    fn kick(&mut self, from: Role) {
        let bandwidth = self.net.bandwidth;
        let peer = &mut self.peers[from.index()];
        if peer.in_flight.is_some() {
            return;
        }
        let Some(msg) = peer.queues.iter().find_map(|q| q.front().copied()) else {
            return;
        };
        let m = &self.messages[msg];
        let bytes = (m.size - m.sent_bytes).min(MTU);
        let dur = bytes as f64 * 8.0 / bandwidth;
        peer.in_flight = Some(msg);
        peer.window_bits += bytes as f64 * 8.0;
        peer.window_busy += dur;
        self.schedule(self.now + dur, Ev::TxDone { from, msg, bytes });
    }

    fn jitter(&mut self) -> f64 {
        if self.net.jitter > 0.0 {
            self.rng.random_range(-self.net.jitter..=self.net.jitter)
        } else {
            0.0
        }
    }

    fn on_tx_done(&mut self, from: Role, msg: usize, bytes: usize) {
        self.peers[from.index()].in_flight = None;
        let m = &mut self.messages[msg];
        m.sent_bytes += bytes;
        let (channel, reliable) = (m.channel, m.reliable);
        let queued = {
            let peer = &self.peers[from.index()];
            peer.slot(channel).is_some_and(|s| peer.queues[s].contains(&msg))
        };
        if !queued && !reliable {
            // Flushed while its fragment was on the wire.
            self.record(LogKind::SourceDropped {
                id: MessageId(msg as u64),
                reason: DropReason::RateChange,
            });
            self.kick(from);
            return;
        }
        let m = &self.messages[msg];
        if m.sent_bytes >= m.size {
            let (channel, reliable, attempt) = (m.channel, m.reliable, m.attempt);
            let peer = &mut self.peers[from.index()];
            let slot = peer.slot(channel).expect("queued on a known channel");
            peer.queues[slot].retain(|&q| q != msg);
            let lost = if self.net.loss >= 1.0 {
                true
            } else if reliable || self.net.loss == 0.0 {
                false
            } else {
                self.rng.random::<f64>() < self.net.loss
            };
            if lost {
                self.record(LogKind::Lost {
                    id: MessageId(msg as u64),
                    attempt,
                });
            } else {
                let at = self.now + self.net.delay + self.jitter();
                self.schedule(at, Ev::Arrive { msg });
            }
            if reliable {
                let at = self.now + self.net.retransmit_timeout();
                self.schedule(at, Ev::Timeout { msg, attempt });
            }
        }
        self.kick(from);
    }

    fn on_arrive(&mut self, msg: usize) {
        let (from, channel, reliable, seq) = {
            let m = &self.messages[msg];
            (m.from, m.channel, m.reliable, m.seq)
        };
        if !reliable {
            self.deliver(msg);
            return;
        }
        let ack_at = self.now + self.net.delay + self.jitter();
        self.schedule(ack_at, Ev::Ack { msg });
        let rx = &mut self.peers[from.other().index()];
        let s = seq.unwrap_or(0);
        let expected = *rx.expected.entry(channel).or_insert(1);
        if s < expected || rx.reorder.contains_key(&(channel, s)) {
            return;
        }
        rx.reorder.insert((channel, s), msg);
        let mut ready = Vec::new();
        let mut next = expected;
        while let Some(m) = rx.reorder.remove(&(channel, next)) {
            ready.push(m);
            next += 1;
        }
        rx.expected.insert(channel, next);
        for m in ready {
            self.deliver(m);
        }
    }

    fn deliver(&mut self, msg: usize) {
        let now = self.now;
        let m = &mut self.messages[msg];
        if m.delivered_at.is_some() {
            return;
        }
        m.delivered_at = Some(now);
        let (from, channel, seq, latency, handshake) = (m.from, m.channel, m.seq, now - m.offered_at, m.handshake);
        let id = MessageId(msg as u64);
        if handshake {
            self.handshake_delivered += 1;
            if self.handshake_delivered < HANDSHAKE_MESSAGES {
                self.new_handshake(from.other());
            } else {
                self.connected_at = Some(now);
                // Media numbering starts fresh after signaling.
                for p in &mut self.peers {
                    p.next_seq.remove(&ChannelKind::Control);
                    p.expected.remove(&ChannelKind::Control);
                }
                self.record(LogKind::Connected);
                self.schedule(now + ADAPT_INTERVAL, Ev::Adapt);
            }
            return;
        }
        self.record(LogKind::Delivered {
            id,
            from,
            channel,
            seq,
            latency,
        });
        self.pending.push(Delivery {
            id,
            from,
            channel,
            seq,
            t: now,
            latency,
        });
    }

    fn on_timeout(&mut self, msg: usize, attempt: u32) {
        let m = &mut self.messages[msg];
        if m.acked || m.attempt != attempt {
            return;
        }
        let id = MessageId(msg as u64);
        if attempt >= MAX_ATTEMPTS {
            self.failed.push(id);
            self.record(LogKind::Failed { id });
            return;
        }
        m.attempt += 1;
        m.sent_bytes = 0;
        let (from, channel, attempt) = (m.from, m.channel, m.attempt);
        self.record(LogKind::Retransmitted { id, attempt });
        let peer = &mut self.peers[from.index()];
        let slot = peer.slot(channel).expect("known channel");
        let q = &mut peer.queues[slot];
        let in_flight = peer.in_flight;
        let started = q
            .front()
            .is_some_and(|&h| self.messages[h].sent_bytes > 0 || in_flight == Some(h));
        q.insert(usize::from(started), msg);
        self.kick(from);
    }

    /// One adaptation window for `role`'s outbound streams.
    fn adapt(&mut self, role: Role) {
        let messages = &self.messages;
        let peer = &mut self.peers[role.index()];
        if peer.window_busy > 0.0 {
            peer.capacity = Some(peer.window_bits / peer.window_busy);
        }
        let throughput = peer.window_acked * 8.0 / ADAPT_INTERVAL;
        peer.window_bits = 0.0;
        peer.window_busy = 0.0;
        peer.window_acked = 0.0;
        let backlog: f64 = peer
            .queues
            .iter()
            .flatten()
            .map(|&m| (messages[m].size - messages[m].sent_bytes) as f64)
            .sum();
        let demand = peer.demand(peer.rates);
        let backlog_s = if demand > 0.0 {
            backlog / demand
        } else if backlog > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        let before = peer.rates;
        let mut flush = false;
        if backlog_s > 1.0 {
            peer.good_windows = 0;
            let level = peer.depth_level();
            if peer.rates.depth_fps > 0 {
                peer.rates.depth_fps = DEPTH_LEVELS[level + 1];
                flush = true;
            } else if peer.rates.skeleton_fps > MIN_SKELETON_FPS {
                peer.rates.skeleton_fps = MIN_SKELETON_FPS.min(peer.skeleton_top);
            }
        } else if backlog_s < 0.1 {
            peer.good_windows += 1;
            if peer.good_windows >= 3 {
                let mut next = peer.rates;
                let level = peer.depth_level();
                if next.skeleton_fps < peer.skeleton_top {
                    next.skeleton_fps = peer.skeleton_top;
                } else if level > peer.depth_top {
                    next.depth_fps = DEPTH_LEVELS[level - 1];
                }
                let fits = peer.capacity.is_none_or(|c| peer.demand(next) * 8.0 <= c);
                if next != peer.rates && fits {
                    peer.rates = next;
                    peer.good_windows = 0;
                }
            }
        } else {
            peer.good_windows = 0;
        }
        let rates = peer.rates;
        let capacity = peer.capacity;
        if flush {
            if let Some(slot) = peer.slot(ChannelKind::Depth) {
                let in_flight = peer.in_flight;
                let q = &mut peer.queues[slot];
                let (keep, drop): (VecDeque<usize>, VecDeque<usize>) = q
                    .drain(..)
                    .partition(|&m| messages[m].reliable && (messages[m].sent_bytes > 0 || in_flight == Some(m)));
                *q = keep;
                // A fragment already on the wire is accounted for when it lands.
                for m in drop.into_iter().filter(|&m| in_flight != Some(m)) {
                    self.record(LogKind::SourceDropped {
                        id: MessageId(m as u64),
                        reason: DropReason::RateChange,
                    });
                }
            }
        }
        if rates != before {
            self.record(LogKind::RateChanged {
                peer: role,
                rates,
                backlog_s,
                throughput_bps: throughput,
                capacity_bps: capacity,
            });
        }
    }

    /// QoS per sending peer and channel, over the messages offered so far.
    pub fn qos(&self) -> QosReport {
        let start = self.connected_at.unwrap_or(0.0);
        let duration = (self.now - start).max(0.0);
        let mut channels = Vec::new();
        for peer in &self.peers {
            for c in &peer.channels {
                let ms: Vec<&Message> = self
                    .messages
                    .iter()
                    .filter(|m| !m.handshake && m.processed && m.from == peer.role && m.channel == c.name)
                    .collect();
                let mut latencies: Vec<f64> = ms
                    .iter()
                    .filter_map(|m| m.delivered_at.map(|d| d - m.offered_at))
                    .collect();
                latencies.sort_by(f64::total_cmp);
                let sent = ms.len();
                let delivered = latencies.len();
                channels.push(ChannelQos {
                    peer: peer.role,
                    channel: c.name,
                    sent,
                    delivered,
                    delivery_ratio: if sent == 0 { 1.0 } else { delivered as f64 / sent as f64 },
                    mean_latency: (delivered > 0).then(|| latencies.iter().sum::<f64>() / delivered as f64),
                    p95_latency: percentile_nearest_rank(&latencies, 95.0),
                    achieved_rate: if duration > 0.0 {
                        delivered as f64 / duration
                    } else {
                        0.0
                    },
                });
            }
        }
        QosReport {
            duration,
            channels,
            rates: self
                .peers
                .iter()
                .map(|p| PeerRates {
                    peer: p.role,
                    rates: p.rates,
                })
                .collect(),
            failed: self.failed.clone(),
        }
    }
}

/// Nearest-rank percentile of ascending `sorted`: the value at rank
/// `ceil(p/100 * n)`.
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelQos {
    pub peer: Role,
    pub channel: ChannelKind,
    pub sent: usize,
    pub delivered: usize,
    pub delivery_ratio: f64,
    pub mean_latency: Option<f64>,
    pub p95_latency: Option<f64>,
    /// Delivered messages per second since the connection came up.
    pub achieved_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerRates {
    pub peer: Role,
    pub rates: RateState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QosReport {
    pub duration: f64,
    pub channels: Vec<ChannelQos>,
    pub rates: Vec<PeerRates>,
    pub failed: Vec<MessageId>,
}

impl QosReport {
    pub fn channel(&self, peer: Role, channel: ChannelKind) -> Option<&ChannelQos> {
        self.channels.iter().find(|c| c.peer == peer && c.channel == channel)
    }

    pub fn rates(&self, peer: Role) -> Option<RateState> {
        self.rates.iter().find(|r| r.peer == peer).map(|r| r.rates)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("peer,channel,sent,delivered,delivery_ratio,mean_latency,p95_latency,achieved_rate\n");
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for c in &self.channels {
            let peer = serde_json::to_value(c.peer).expect("serializable");
            let channel = serde_json::to_value(c.channel).expect("serializable");
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                peer.as_str().unwrap_or_default(),
                channel.as_str().unwrap_or_default(),
                c.sent,
                c.delivered,
                c.delivery_ratio,
                opt(c.mean_latency),
                opt(c.p95_latency),
                c.achieved_rate
            );
        }
        out
    }
}

/// Periodic source offering messages on one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfferStream {
    pub from: Role,
    pub channel: ChannelKind,
    #[serde(default)]
    pub start: f64,
    pub end: f64,
    /// Defaults to the channel's nominal rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_size: Option<usize>,
}

fn default_drain() -> f64 {
    10.0
}

/// Scenario document. Stream and trace times count from media start, the
/// moment the handshake completes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub network: NetworkModel,
    #[serde(default)]
    pub trace: Vec<NetworkSegment>,
    #[serde(default = "default_channels")]
    pub therapist: Vec<ChannelConfig>,
    #[serde(default = "default_channels")]
    pub patient: Vec<ChannelConfig>,
    pub streams: Vec<OfferStream>,
    /// Seconds simulated after the last offer so queues can empty.
    #[serde(default = "default_drain")]
    pub drain: f64,
}

impl Scenario {
    /// Patient streams skeleton, depth and audio; therapist streams audio
    /// and a control message per second, for `duration` seconds.
    pub fn standard(network: NetworkModel, duration: f64) -> Self {
        let s = |from, channel| OfferStream {
            from,
            channel,
            start: 0.0,
            end: duration,
            rate: None,
            payload_size: None,
        };
        Scenario {
            network,
            trace: Vec::new(),
            therapist: default_channels(),
            patient: default_channels(),
            streams: vec![
                s(Role::Patient, ChannelKind::Skeleton),
                s(Role::Patient, ChannelKind::Depth),
                s(Role::Patient, ChannelKind::Audio),
                s(Role::Therapist, ChannelKind::Audio),
                s(Role::Therapist, ChannelKind::Control),
            ],
            drain: default_drain(),
        }
    }

    pub fn validate(&self) -> Result<(), TelestreamError> {
        self.network.validate()?;
        validate_channels(&self.therapist)?;
        validate_channels(&self.patient)?;
        if !(self.drain.is_finite() && self.drain >= 0.0) {
            return Err(TelestreamError::InvalidScenario("drain must be non-negative".into()));
        }
        for (i, s) in self.streams.iter().enumerate() {
            if !(s.start >= 0.0 && s.end >= s.start && s.end.is_finite()) {
                return Err(TelestreamError::InvalidScenario(format!("streams[{i}]: bad time span")));
            }
            if s.rate.is_some_and(|r| !(r > 0.0 && r.is_finite())) {
                return Err(TelestreamError::InvalidScenario(format!(
                    "streams[{i}]: rate must be positive"
                )));
            }
        }
        for (i, seg) in self.trace.iter().enumerate() {
            if !(seg.at >= 0.0 && seg.at.is_finite()) {
                return Err(TelestreamError::InvalidScenario(format!("trace[{i}]: bad time")));
            }
        }
        Ok(())
    }

    pub fn run(&self) -> Result<ScenarioOutcome, TelestreamError> {
        self.validate()?;
        let mut sim = connect(self.therapist.clone(), self.patient.clone(), self.network.clone())?;
        let base = sim.now();
        for seg in &self.trace {
            sim.schedule_network_change(base + seg.at, seg.clone())?;
        }
        let mut offers = Vec::new();
        for s in &self.streams {
            let channels = match s.from {
                Role::Therapist => &self.therapist,
                Role::Patient => &self.patient,
            };
            let c = channels
                .iter()
                .find(|c| c.name == s.channel)
                .ok_or(TelestreamError::UnknownChannel {
                    peer: s.from,
                    channel: s.channel,
                })?;
            let rate = s.rate.unwrap_or(c.nominal_rate);
            if rate <= 0.0 {
                continue;
            }
            let mut k = 0u64;
            loop {
                let t = s.start + k as f64 / rate;
                if t >= s.end {
                    break;
                }
                offers.push((t, s.from, s.channel, s.payload_size));
                k += 1;
            }
        }
        offers.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (t, from, channel, size) in offers {
            sim.offer(from, channel, size, base + t)?;
        }
        let end = self.streams.iter().map(|s| s.end).fold(0.0, f64::max);
        sim.step(base + end + self.drain)?;
        Ok(ScenarioOutcome {
            connected_at: base,
            handshake_messages: sim.handshake_messages(),
            qos: sim.qos(),
            events: sim.log().to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub connected_at: f64,
    pub handshake_messages: u32,
    pub qos: QosReport,
    pub events: Vec<SimEvent>,
}

impl ScenarioOutcome {
    /// Rate states of `peer` in the order they were adopted.
    pub fn rate_history(&self, peer: Role) -> Vec<(f64, RateState)> {
        self.events
            .iter()
            .filter_map(|e| match &e.kind {
                LogKind::RateChanged { peer: p, rates, .. } if *p == peer => Some((e.t, *rates)),
                _ => None,
            })
            .collect()
    }

    pub fn deliveries(&self, peer: Role, channel: ChannelKind) -> Vec<(f64, Option<u64>)> {
        self.events
            .iter()
            .filter_map(|e| match &e.kind {
                LogKind::Delivered {
                    from, channel: c, seq, ..
                } if *from == peer && *c == channel => Some((e.t, *seq)),
                _ => None,
            })
            .collect()
    }
}
