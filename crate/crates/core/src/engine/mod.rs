//! Discrete-event simulation of one run.
//!
//! Time is an integer microsecond clock. Events pop in `(time, seq)` order,
//! where `seq` is the insertion counter, so a run is a pure function of its
//! inputs and seed. Every popped event is folded into a SHA-256 digest that
//! tests use to compare traces without storing them.
//!
//! Traffic flows up the routing tree. Relays queue forwarded packets behind
//! their own (FIFO, bounded), and only arrivals at the coordinator count as
//! deliveries.

pub mod channel;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;
use std::io::{self, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mac_csma::{cca, CcaResult, CsmaParams, CsmaTransaction, MacError, TxnAction, TxnEvent};
use crate::rng::{stream, Stream};
use crate::scg::{run_grouping, GroupingResult};
use crate::topology::{NodeId, Topology};
use crate::tsch::{
    build_hybrid_schedule, build_tsch_schedule, CellKind, HybridParams, Schedule, ScheduleError, TschParams,
};
use channel::{ChannelState, Reception, Transmission};

pub const DEFAULT_QUEUE_CAP: usize = 64;
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacMode {
    Csma,
    Tsch,
    ScgHybrid,
}

impl MacMode {
    pub const ALL: [MacMode; 3] = [MacMode::Csma, MacMode::Tsch, MacMode::ScgHybrid];

    pub fn as_str(self) -> &'static str {
        match self {
            MacMode::Csma => "csma",
            MacMode::Tsch => "tsch",
            MacMode::ScgHybrid => "scg_hybrid",
        }
    }
}

impl fmt::Display for MacMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("mode {0} needs a schedule")]
    MissingSchedule(MacMode),
    #[error("mode scg_hybrid needs a grouping")]
    MissingGrouping,
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("MAC state machine: {0}")]
    Mac(#[from] MacError),
}

/// Periodic per-node traffic: `rate` packets every `period_us`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Traffic {
    pub rate: f64,
    pub period_us: u64,
}

impl Traffic {
    pub fn per_second(rate: f64) -> Self {
        Traffic { rate, period_us: 1_000_000 }
    }

    pub fn packets_per_second(&self) -> f64 {
        self.rate * 1e6 / self.period_us as f64
    }

    /// Inter-arrival time in microseconds, `None` when silent.
    pub fn interval_us(&self) -> Option<f64> {
        (self.rate > 0.0).then(|| self.period_us as f64 / self.rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: MacMode,
    pub traffic: Traffic,
    pub duration_us: u64,
    pub warmup_fraction: f64,
    pub queue_cap: usize,
    pub seed: u64,
    pub csma: CsmaParams,
    pub tsch: TschParams,
    pub hybrid: HybridParams,
    /// Keep a line-per-event trace in the output.
    pub trace: bool,
}

impl RunConfig {
    pub fn new(mode: MacMode, traffic: Traffic, duration_us: u64, seed: u64) -> Self {
        RunConfig {
            mode,
            traffic,
            duration_us,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
            queue_cap: DEFAULT_QUEUE_CAP,
            seed,
            csma: CsmaParams::default(),
            tsch: TschParams::default(),
            hybrid: HybridParams::default(),
            trace: false,
        }
    }

    pub fn warmup_us(&self) -> u64 {
        (self.duration_us as f64 * self.warmup_fraction).round() as u64
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.traffic.rate >= 0.0 && self.traffic.rate.is_finite()) {
            return bad(format!("traffic rate {} must be finite and >= 0", self.traffic.rate));
        }
        if self.traffic.period_us == 0 || self.duration_us == 0 {
            return bad("traffic period and duration must be positive".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup fraction {} must be in [0, 1)", self.warmup_fraction));
        }
        if self.queue_cap == 0 {
            return bad("queue cap must be >= 1".into());
        }
        if self.csma.backoff.max_attempts == 0 || self.csma.txn_duration_us == 0 {
            return bad("csma max_attempts and txn_duration_us must be >= 1".into());
        }
        if self.tsch.cell_txn_us > self.tsch.slot_us || self.csma.txn_duration_us > self.tsch.slot_us {
            return bad("transaction durations must fit in one slot".into());
        }
        Ok(())
    }
}

/// Everything a run needs besides the topology and config.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Plan {
    pub grouping: Option<GroupingResult>,
    pub schedule: Option<Schedule>,
}

/// Per-node packets per slotframe for the configured traffic.
pub fn slotframe_demands(topology: &Topology, cfg: &RunConfig) -> Vec<f64> {
    let frame_s = f64::from(cfg.tsch.frame_len(topology.len())) * cfg.tsch.slot_us as f64 / 1e6;
    let per_frame = cfg.traffic.packets_per_second() * frame_s;
    topology.ids().map(|id| if id.is_coordinator() { 0.0 } else { per_frame }).collect()
}

/// Builds whatever the mode needs: nothing for CSMA, a schedule for TSCH,
/// grouping plus hybrid schedule for SCG.
pub fn prepare(topology: &Topology, cfg: &RunConfig) -> Result<Plan, ConfigError> {
    cfg.validate()?;
    let demands = slotframe_demands(topology, cfg);
    let tsch = TschParams { slotframe_len: Some(cfg.tsch.frame_len(topology.len())), ..cfg.tsch };
    Ok(match cfg.mode {
        MacMode::Csma => Plan::default(),
        MacMode::Tsch => Plan { grouping: None, schedule: Some(build_tsch_schedule(topology, &demands, &tsch)?) },
        MacMode::ScgHybrid => {
            let grouping = run_grouping(topology);
            let schedule =
                build_hybrid_schedule(topology, &grouping, &demands, &tsch, &cfg.hybrid, cfg.csma.txn_duration_us)?;
            Plan { grouping: Some(grouping), schedule: Some(schedule) }
        }
    })
}

/// Counters for one node. Packet counters are by origin; `collided` is by
/// sender. `*_measured` cover packets generated after warm-up (collisions:
/// transmissions ending after warm-up).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NodeCounters {
    pub generated: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub in_flight: u64,
    pub collided: u64,
    pub generated_measured: u64,
    pub delivered_measured: u64,
    pub dropped_measured: u64,
    pub collided_measured: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: MacMode,
    pub seed: u64,
    pub duration_us: u64,
    pub warmup_us: u64,
    pub nodes: Vec<NodeCounters>,
    /// Coordinator deliveries with arrival time in `[warmup, duration)`.
    pub delivered_in_window: u64,
    /// Coordinator deliveries per whole second of simulated time.
    pub delivered_per_second: Vec<u64>,
    pub transmissions: u64,
    pub queue_overflows: u64,
    pub retry_exhaustions: u64,
    pub events: u64,
    pub trace_digest: String,
}

impl RunMetrics {
    pub fn total(&self) -> NodeCounters {
        self.nodes.iter().fold(NodeCounters::default(), |mut a, n| {
            a.generated += n.generated;
            a.delivered += n.delivered;
            a.dropped += n.dropped;
            a.in_flight += n.in_flight;
            a.collided += n.collided;
            a.generated_measured += n.generated_measured;
            a.delivered_measured += n.delivered_measured;
            a.dropped_measured += n.dropped_measured;
            a.collided_measured += n.collided_measured;
            a
        })
    }

    pub fn window_us(&self) -> u64 {
        self.duration_us - self.warmup_us
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: u64,
    pub kind: &'static str,
    pub subject: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub trace: Option<Vec<TraceRecord>>,
}

/// Writes a trace as tab-separated `time kind subject` lines.
pub fn write_trace<W: Write>(mut w: W, trace: &[TraceRecord]) -> io::Result<()> {
    for r in trace {
        writeln!(w, "{}\t{}\t{}", r.time, r.kind, r.subject)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Arrival(NodeId),
    BackoffExpiry(NodeId),
    TxEnd(u64),
    SlotBoundary(u64),
}

impl EventKind {
    fn name(self) -> &'static str {
        match self {
            EventKind::Arrival(_) => "arrival",
            EventKind::BackoffExpiry(_) => "backoff_expiry",
            EventKind::TxEnd(_) => "tx_end",
            EventKind::SlotBoundary(_) => "slot_boundary",
        }
    }

    fn subject(self) -> String {
        match self {
            EventKind::Arrival(n) | EventKind::BackoffExpiry(n) => n.to_string(),
            EventKind::TxEnd(id) => format!("tx{id}"),
            EventKind::SlotBoundary(s) => format!("slot{s}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: u64,
    seq: u64,
    kind: EventKind,
}

#[derive(Debug, Clone, Copy)]
struct Packet {
    id: u64,
    origin: NodeId,
    generated_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Access {
    None,
    Csma,
    Dedicated,
    Window(usize),
}

/// One contention-window piece inside the slotframe.
#[derive(Debug, Clone, Copy)]
struct WindowPiece {
    slot: u32,
    span: u32,
    channel: u16,
}

struct NodeState {
    queue: VecDeque<Packet>,
    access: Access,
    txn: Option<CsmaTransaction>,
    /// Offset within one backoff unit at which a deferred contention
    /// resumes when the group's window opens.
    phase_us: u64,
    first_arrival: u64,
    transmitting: bool,
}

struct Sim<'a> {
    topology: &'a Topology,
    cfg: &'a RunConfig,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Event>>,
    nodes: Vec<NodeState>,
    channel: ChannelState,
    next_tx: u64,
    next_packet: u64,
    in_air: Vec<(u64, Packet, bool)>,
    backoff_rng: ChaCha8Rng,
    interval_us: Option<f64>,
    warmup: u64,
    frame_len: u64,
    slot_us: u64,
    dedicated: Vec<Vec<(NodeId, NodeId, u16)>>,
    dedicated_slots: Vec<u32>,
    windows: Vec<Vec<WindowPiece>>,
    metrics: RunMetrics,
    hasher: Sha256,
    trace: Option<Vec<TraceRecord>>,
}

/// Executes one run until the clock reaches `cfg.duration_us`.
pub fn run(topology: &Topology, plan: &Plan, cfg: &RunConfig) -> Result<RunOutput, ConfigError> {
    cfg.validate()?;
    let mut sim = Sim::new(topology, plan, cfg)?;
    sim.seed_events();
    sim.run()?;
    Ok(sim.finish())
}

impl<'a> Sim<'a> {
    fn new(topology: &'a Topology, plan: &Plan, cfg: &'a RunConfig) -> Result<Self, ConfigError> {
        let n = topology.len();
        let mut access = vec![Access::None; n];
        let mut dedicated = Vec::new();
        let mut windows = Vec::new();
        let (mut frame_len, mut slot_us) = (1, cfg.tsch.slot_us);
        match cfg.mode {
            MacMode::Csma => {
                for id in topology.ids().filter(|id| !id.is_coordinator()) {
                    access[id.index()] = Access::Csma;
                }
            }
            MacMode::Tsch | MacMode::ScgHybrid => {
                let schedule = plan.schedule.as_ref().ok_or(ConfigError::MissingSchedule(cfg.mode))?;
                let frame = &schedule.slotframe;
                frame_len = u64::from(frame.length);
                slot_us = frame.slot_duration_us;
                dedicated = vec![Vec::new(); frame.length as usize];
                for id in topology.ids().filter(|id| !id.is_coordinator()) {
                    access[id.index()] = Access::Dedicated;
                }
                if cfg.mode == MacMode::ScgHybrid {
                    let grouping = plan.grouping.as_ref().ok_or(ConfigError::MissingGrouping)?;
                    windows = vec![Vec::new(); grouping.groups.len()];
                    for (gi, g) in grouping.groups.iter().enumerate() {
                        for m in &g.members {
                            access[m.index()] = Access::Window(gi);
                        }
                    }
                    for cell in &frame.cells {
                        if let CellKind::GroupWindow { group_id, .. } = cell.kind {
                            let gi = grouping.groups.iter().position(|g| g.group_id == group_id).ok_or_else(|| {
                                ConfigError::Invalid(format!("schedule names unknown group {group_id}"))
                            })?;
                            windows[gi].push(WindowPiece {
                                slot: cell.slot,
                                span: cell.span,
                                channel: cell.channel_offset,
                            });
                        }
                    }
                    for w in &mut windows {
                        w.sort_by_key(|p| p.slot);
                    }
                }
                for cell in &frame.cells {
                    if let CellKind::Dedicated { sender, receiver } = cell.kind {
                        dedicated[cell.slot as usize].push((sender, receiver, cell.channel_offset));
                    }
                }
            }
        }
        let dedicated_slots = (0..dedicated.len() as u32).filter(|&s| !dedicated[s as usize].is_empty()).collect();

        let interval_us = cfg.traffic.interval_us();
        let mut phase_rng = stream(cfg.seed, Stream::TrafficPhase);
        let mut window_rng = stream(cfg.seed, Stream::WindowResume);
        let unit = cfg.csma.backoff.unit_backoff_us.max(1);
        let nodes = topology
            .ids()
            .map(|id| {
                let first_arrival = match interval_us {
                    Some(iv) if !id.is_coordinator() => (phase_rng.gen::<f64>() * iv).floor() as u64,
                    _ => u64::MAX,
                };
                NodeState {
                    queue: VecDeque::new(),
                    access: access[id.index()],
                    txn: None,
                    phase_us: window_rng.gen_range(0..unit),
                    first_arrival,
                    transmitting: false,
                }
            })
            .collect();

        let warmup = cfg.warmup_us();
        let seconds = cfg.duration_us.div_ceil(1_000_000) as usize;
        Ok(Sim {
            topology,
            cfg,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            nodes,
            channel: ChannelState::default(),
            next_tx: 0,
            next_packet: 0,
            in_air: Vec::new(),
            backoff_rng: stream(cfg.seed, Stream::Backoff),
            interval_us,
            warmup,
            frame_len,
            slot_us,
            dedicated,
            dedicated_slots,
            windows,
            metrics: RunMetrics {
                mode: cfg.mode,
                seed: cfg.seed,
                duration_us: cfg.duration_us,
                warmup_us: warmup,
                nodes: vec![NodeCounters::default(); n],
                delivered_in_window: 0,
                delivered_per_second: vec![0; seconds],
                transmissions: 0,
                queue_overflows: 0,
                retry_exhaustions: 0,
                events: 0,
                trace_digest: String::new(),
            },
            hasher: Sha256::new(),
            trace: cfg.trace.then(Vec::new),
        })
    }

    fn push(&mut self, time: u64, kind: EventKind) {
        if time >= self.cfg.duration_us {
            return;
        }
        self.seq += 1;
        self.queue.push(Reverse(Event { time, seq: self.seq, kind }));
    }

    fn record(&mut self, kind: &'static str, subject: String) {
        self.hasher.update(format!("{}\t{}\t{}\n", self.now, kind, subject).as_bytes());
        if let Some(t) = &mut self.trace {
            t.push(TraceRecord { time: self.now, kind, subject });
        }
    }

    fn seed_events(&mut self) {
        for id in self.topology.ids() {
            let t = self.nodes[id.index()].first_arrival;
            if t != u64::MAX {
                self.push(t, EventKind::Arrival(id));
            }
        }
        if let Some(&first) = self.dedicated_slots.first() {
            self.push(u64::from(first) * self.slot_us, EventKind::SlotBoundary(u64::from(first)));
        }
    }

    fn run(&mut self) -> Result<(), ConfigError> {
        let mut last = (0, 0);
        while let Some(Reverse(ev)) = self.queue.pop() {
            debug_assert!((ev.time, ev.seq) > last, "event queue out of order");
            last = (ev.time, ev.seq);
            self.now = ev.time;
            self.metrics.events += 1;
            self.record(ev.kind.name(), ev.kind.subject());
            match ev.kind {
                EventKind::Arrival(n) => self.on_arrival(n),
                EventKind::BackoffExpiry(n) => self.on_backoff_expiry(n)?,
                EventKind::TxEnd(id) => self.on_tx_end(id)?,
                EventKind::SlotBoundary(abs) => self.on_slot(abs),
            }
        }
        Ok(())
    }

    fn on_arrival(&mut self, node: NodeId) {
        let packet = Packet { id: self.next_packet, origin: node, generated_at: self.now };
        self.next_packet += 1;
        let c = &mut self.metrics.nodes[node.index()];
        c.generated += 1;
        if self.now >= self.warmup {
            c.generated_measured += 1;
        }
        self.enqueue(node, packet);
        if let Some(iv) = self.interval_us {
            // Arrivals stay on the exact phase + k * interval grid.
            let k = self.metrics.nodes[node.index()].generated as f64;
            let next = self.nodes[node.index()].first_arrival + (k * iv).round() as u64;
            self.push(next, EventKind::Arrival(node));
        }
    }

    fn enqueue(&mut self, node: NodeId, packet: Packet) {
        let cap = self.cfg.queue_cap;
        let st = &mut self.nodes[node.index()];
        if st.queue.len() >= cap {
            self.metrics.queue_overflows += 1;
            self.drop_packet(packet);
            self.record("queue_drop", format!("{node} pkt{}", packet.id));
            return;
        }
        st.queue.push_back(packet);
        if st.queue.len() == 1 {
            self.start_service(node);
        }
    }

    fn drop_packet(&mut self, packet: Packet) {
        let c = &mut self.metrics.nodes[packet.origin.index()];
        c.dropped += 1;
        if packet.generated_at >= self.warmup {
            c.dropped_measured += 1;
        }
    }

    fn deliver(&mut self, packet: Packet) {
        let c = &mut self.metrics.nodes[packet.origin.index()];
        c.delivered += 1;
        if packet.generated_at >= self.warmup {
            c.delivered_measured += 1;
        }
        if self.now >= self.warmup {
            self.metrics.delivered_in_window += 1;
        }
        let sec = (self.now / 1_000_000) as usize;
        if let Some(s) = self.metrics.delivered_per_second.get_mut(sec) {
            *s += 1;
        }
    }

    /// Begins work on the head of `node`'s queue, if contention-based.
    fn start_service(&mut self, node: NodeId) {
        let st = &self.nodes[node.index()];
        if !matches!(st.access, Access::Csma | Access::Window(_)) || st.txn.is_some() {
            return;
        }
        let Some(head) = st.queue.front().copied() else { return };
        let parent = self.topology.parent(node).expect("sensor nodes have a parent");
        let (txn, action) = CsmaTransaction::start(node, parent, head.id, &self.cfg.csma, &mut self.backoff_rng);
        self.nodes[node.index()].txn = Some(txn);
        self.apply(node, action);
    }

    fn apply(&mut self, node: NodeId, action: TxnAction) {
        match action {
            TxnAction::ScheduleCca { backoff_us } => self.push(self.now + backoff_us, EventKind::BackoffExpiry(node)),
            TxnAction::Transmit { .. } | TxnAction::Wait | TxnAction::Delivered => {}
            TxnAction::Dropped => {
                self.metrics.retry_exhaustions += 1;
                self.finish_head(node, false);
            }
        }
    }

    /// Pops the head after success (forward or deliver) or failure (drop),
    /// then starts on the next packet.
    fn finish_head(&mut self, node: NodeId, success: bool) {
        let st = &mut self.nodes[node.index()];
        st.txn = None;
        let packet = st.queue.pop_front().expect("a head packet was in service");
        if success {
            let parent = self.topology.parent(node).expect("sensor nodes have a parent");
            if parent.is_coordinator() {
                self.deliver(packet);
            } else {
                self.enqueue(parent, packet);
            }
        } else {
            self.drop_packet(packet);
            self.record("drop", format!("{node} pkt{}", packet.id));
        }
        self.start_service(node);
    }

    /// Window piece containing `now`, with its absolute end time.
    fn window_at(&self, group: usize, now: u64) -> Option<(WindowPiece, u64)> {
        let frame_us = self.frame_len * self.slot_us;
        let base = now - now % frame_us;
        let slot = (now % frame_us) / self.slot_us;
        self.windows[group].iter().find_map(|p| {
            let (s, e) = (u64::from(p.slot), u64::from(p.slot + p.span));
            (s <= slot && slot < e).then(|| (*p, base + e * self.slot_us))
        })
    }

    /// First window piece starting strictly after `now`, as absolute
    /// `(start, end)`.
    fn next_window(&self, group: usize, now: u64) -> Option<(u64, u64)> {
        let frame_us = self.frame_len * self.slot_us;
        let base = now - now % frame_us;
        [base, base + frame_us].into_iter().find_map(|b| {
            self.windows[group]
                .iter()
                .map(|p| (b + u64::from(p.slot) * self.slot_us, b + u64::from(p.slot + p.span) * self.slot_us))
                .find(|&(s, _)| s > now)
        })
    }

    fn on_backoff_expiry(&mut self, node: NodeId) -> Result<(), ConfigError> {
        let cfg = self.cfg;
        let mut txn = self.nodes[node.index()].txn.take().expect("backoff without a transaction");
        txn.advance(TxnEvent::BackoffExpired, &cfg.csma, &mut self.backoff_rng)?;
        let channel = match self.nodes[node.index()].access {
            Access::Window(g) => match self.window_at(g, self.now) {
                Some((piece, end)) if self.now + cfg.csma.txn_duration_us <= end => piece.channel,
                _ => {
                    // Outside the group's window: wait for the next one and
                    // resume at this node's phase without spending an attempt.
                    txn.advance(TxnEvent::Deferred, &cfg.csma, &mut self.backoff_rng)?;
                    self.nodes[node.index()].txn = Some(txn);
                    self.record("defer", node.to_string());
                    if let Some((start, _)) = self.next_window(g, self.now) {
                        self.push(start + self.nodes[node.index()].phase_us, EventKind::BackoffExpiry(node));
                    }
                    return Ok(());
                }
            },
            _ => 0,
        };
        let result = cca(&self.channel, self.topology, node, channel, self.now);
        self.record("cca_check", format!("{node} {result:?}"));
        let action = match result {
            CcaResult::Clear => txn.advance(TxnEvent::CcaClear, &cfg.csma, &mut self.backoff_rng)?,
            CcaResult::Busy => txn.advance(TxnEvent::CcaBusy, &cfg.csma, &mut self.backoff_rng)?,
        };
        let receiver = txn.receiver;
        self.nodes[node.index()].txn = Some(txn);
        if let TxnAction::Transmit { duration_us } = action {
            let head = *self.nodes[node.index()].queue.front().expect("transaction has a head packet");
            self.transmit(node, receiver, channel, duration_us, head, true);
        } else {
            self.apply(node, action);
        }
        Ok(())
    }

    fn transmit(&mut self, sender: NodeId, receiver: NodeId, channel: u16, duration: u64, packet: Packet, csma: bool) {
        let id = self.next_tx;
        self.next_tx += 1;
        let tx = Transmission { id, sender, receiver, channel, start: self.now, end: self.now + duration };
        self.channel.begin(tx);
        self.in_air.push((id, packet, csma));
        self.nodes[sender.index()].transmitting = true;
        self.record("tx_start", format!("tx{id} {sender}->{receiver} ch{channel} pkt{}", packet.id));
        if self.now + duration < self.cfg.duration_us {
            self.push(self.now + duration, EventKind::TxEnd(id));
        }
    }

    fn on_tx_end(&mut self, id: u64) -> Result<(), ConfigError> {
        let (tx, outcome) = self.channel.finish(id, self.topology).expect("tx_end for an active transmission");
        let pos = self.in_air.iter().position(|(i, ..)| *i == id).expect("packet in the air");
        let (_, _, csma) = self.in_air.swap_remove(pos);
        let sender = tx.sender;
        self.nodes[sender.index()].transmitting = false;
        if self.now >= self.warmup {
            self.metrics.transmissions += 1;
        }
        let ok = outcome == Reception::Delivered;
        if !ok {
            let c = &mut self.metrics.nodes[sender.index()];
            c.collided += 1;
            if self.now >= self.warmup {
                c.collided_measured += 1;
            }
        }
        self.record(if ok { "ack" } else { "collision" }, format!("tx{id}"));
        if csma {
            let cfg = self.cfg;
            let mut txn = self.nodes[sender.index()].txn.take().expect("csma transmission has a transaction");
            txn.advance(TxnEvent::TxComplete, &cfg.csma, &mut self.backoff_rng)?;
            let event = if ok { TxnEvent::Ack } else { TxnEvent::NoAck };
            let action = txn.advance(event, &cfg.csma, &mut self.backoff_rng)?;
            self.nodes[sender.index()].txn = Some(txn);
            match action {
                TxnAction::Delivered => self.finish_head(sender, true),
                other => self.apply(sender, other),
            }
        } else if ok {
            // Dedicated cell: the packet stays queued on failure and waits
            // for the link's next cell.
            self.finish_head(sender, true);
        }
        Ok(())
    }

    fn on_slot(&mut self, abs: u64) {
        let frame_slot = (abs % self.frame_len) as usize;
        let cells = std::mem::take(&mut self.dedicated[frame_slot]);
        for &(sender, receiver, channel) in &cells {
            let st = &self.nodes[sender.index()];
            if st.access != Access::Dedicated || st.transmitting {
                continue;
            }
            if let Some(&head) = st.queue.front() {
                self.transmit(sender, receiver, channel, self.cfg.tsch.cell_txn_us, head, false);
            }
        }
        self.dedicated[frame_slot] = cells;
        // Next slot that holds a dedicated cell, wrapping into the next frame.
        let idx = self.dedicated_slots.partition_point(|&s| u64::from(s) <= abs % self.frame_len);
        let next = match self.dedicated_slots.get(idx) {
            Some(&s) => abs - abs % self.frame_len + u64::from(s),
            None => abs - abs % self.frame_len + self.frame_len + u64::from(self.dedicated_slots[0]),
        };
        self.push(next * self.slot_us, EventKind::SlotBoundary(next));
    }

    fn finish(mut self) -> RunOutput {
        for c in &mut self.metrics.nodes {
            c.in_flight = c.generated - c.delivered - c.dropped;
        }
        self.metrics.trace_digest = hex::encode(self.hasher.finalize());
        RunOutput { metrics: self.metrics, trace: self.trace }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{calibrate_radius, CalibrationRequest, HnpFormula, LinkSet};

    const SEC: u64 = 1_000_000;

    fn go(t: &Topology, cfg: &RunConfig) -> RunMetrics {
        let plan = prepare(t, cfg).unwrap();
        run(t, &plan, cfg).unwrap().metrics
    }

    fn throughput(m: &RunMetrics) -> f64 {
        m.delivered_in_window as f64 * 1e6 / m.window_us() as f64
    }

    fn pdr(m: &RunMetrics) -> f64 {
        let t = m.total();
        t.delivered_measured as f64 / (t.delivered_measured + t.dropped_measured) as f64
    }

    fn single_hop(n: usize, hidden: f64, seed: u64) -> Topology {
        calibrate_radius(&CalibrationRequest {
            node_count: n,
            area_side: 100.0,
            seed,
            target_hidden: hidden,
            tolerance: 0.02,
            single_hop: true,
            links: LinkSet::Uplink,
            formula: HnpFormula::ReceiverCentric,
        })
        .unwrap()
        .topology
    }

    #[test]
    fn two_node_tsch_delivers_everything() {
        let t = Topology::from_edges(2, &[(0, 1)]).unwrap();
        let mut cfg = RunConfig::new(MacMode::Tsch, Traffic::per_second(1.0), 10 * SEC, 3);
        cfg.warmup_fraction = 0.0;
        let m = go(&t, &cfg);
        let c = m.nodes[1];
        assert_eq!(c.generated, 10);
        assert_eq!(c.dropped, 0);
        assert_eq!(c.delivered + c.in_flight, 10);
        assert!(c.delivered >= 9);
        assert_eq!(pdr(&m), 1.0);
        assert_eq!(c.collided, 0);
    }

    #[test]
    fn silent_traffic_produces_no_events() {
        let t = Topology::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        for mode in MacMode::ALL {
            let cfg = RunConfig::new(mode, Traffic::per_second(0.0), 5 * SEC, 1);
            let m = go(&t, &cfg);
            assert_eq!(m.total().generated, 0, "{mode}");
            assert_eq!(m.transmissions, 0, "{mode}");
        }
    }

    #[test]
    fn periodic_arrival_count() {
        // 300 sources plus the coordinator.
        let t = Topology::generate(301, 100.0, 200.0, false, 4).unwrap();
        let cfg = RunConfig::new(MacMode::Csma, Traffic::per_second(10.0), 10 * SEC, 4);
        let m = go(&t, &cfg);
        assert_eq!(m.total().generated, 30_000);
        assert!(m.nodes[1..].iter().all(|c| c.generated == 100));
        assert_eq!(m.nodes[0].generated, 0);
    }

    #[test]
    fn arrivals_respect_period_scaling() {
        let t = Topology::from_edges(2, &[(0, 1)]).unwrap();
        let cfg = RunConfig::new(MacMode::Csma, Traffic { rate: 3.0, period_us: 10 * SEC }, 20 * SEC, 2);
        assert_eq!(go(&t, &cfg).nodes[1].generated, 6);
    }

    #[test]
    fn runs_are_reproducible() {
        let t = Topology::generate(60, 100.0, 30.0, false, 9).unwrap();
        for mode in MacMode::ALL {
            let cfg = RunConfig::new(mode, Traffic::per_second(0.5), 5 * SEC, 11);
            let a = go(&t, &cfg);
            let b = go(&t, &cfg);
            assert_eq!(a, b, "{mode}");
            let other = go(&t, &RunConfig { seed: 12, ..cfg.clone() });
            assert_ne!(a.trace_digest, other.trace_digest, "{mode}");
        }
    }

    #[test]
    fn trace_matches_digest() {
        let t = Topology::generate(20, 50.0, 20.0, false, 2).unwrap();
        let mut cfg = RunConfig::new(MacMode::ScgHybrid, Traffic::per_second(1.0), 3 * SEC, 5);
        let plain = go(&t, &cfg);
        cfg.trace = true;
        let plan = prepare(&t, &cfg).unwrap();
        let out = run(&t, &plan, &cfg).unwrap();
        assert_eq!(out.metrics.trace_digest, plain.trace_digest);
        let trace = out.trace.unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &trace).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&buf)), plain.trace_digest);
        assert!(trace.windows(2).all(|w| w[0].time <= w[1].time));
        assert!(trace.iter().any(|r| r.kind == "tx_start"));
    }

    #[test]
    fn counters_balance_per_node() {
        let t = Topology::generate(80, 100.0, 25.0, false, 6).unwrap();
        for mode in MacMode::ALL {
            for rate in [0.2, 3.0] {
                let cfg = RunConfig::new(mode, Traffic::per_second(rate), 10 * SEC, 6);
                let m = go(&t, &cfg);
                for c in &m.nodes {
                    assert_eq!(c.generated, c.delivered + c.dropped + c.in_flight);
                    assert!(c.generated_measured >= c.delivered_measured + c.dropped_measured);
                }
                let in_flight: u64 = m.nodes.iter().map(|c| c.in_flight).sum();
                // Queued packets plus at most one in the air per node.
                assert!(in_flight <= (m.nodes.len() * (cfg.queue_cap + 1)) as u64);
            }
        }
    }

    #[test]
    fn complete_graph_csma_rarely_collides() {
        let t = Topology::generate(100, 100.0, 200.0, false, 3).unwrap();
        let cfg = RunConfig::new(MacMode::Csma, Traffic::per_second(1.0), 20 * SEC, 3);
        let m = go(&t, &cfg);
        let collided = m.total().collided_measured;
        assert!(m.transmissions > 1000);
        assert!((collided as f64) < 0.01 * m.transmissions as f64, "{collided} of {}", m.transmissions);
    }

    #[test]
    fn tsch_within_capacity_is_lossless() {
        let t = Topology::generate(120, 100.0, 22.0, false, 8).unwrap();
        let cfg = RunConfig::new(MacMode::Tsch, Traffic { rate: 1.0, period_us: 10 * SEC }, 30 * SEC, 8);
        let plan = prepare(&t, &cfg).unwrap();
        assert!(plan.schedule.as_ref().unwrap().within_capacity());
        let m = run(&t, &plan, &cfg).unwrap().metrics;
        let tot = m.total();
        assert_eq!(tot.collided, 0);
        assert_eq!(tot.dropped, 0);
        assert_eq!(pdr(&m), 1.0);
    }

    #[test]
    fn hybrid_needs_grouping_and_schedule() {
        let t = Topology::from_edges(3, &[(0, 1), (0, 2)]).unwrap();
        let cfg = RunConfig::new(MacMode::ScgHybrid, Traffic::per_second(1.0), SEC, 1);
        let mut plan = prepare(&t, &cfg).unwrap();
        plan.grouping = None;
        assert!(matches!(run(&t, &plan, &cfg), Err(ConfigError::MissingGrouping)));
        let tsch = RunConfig { mode: MacMode::Tsch, ..cfg.clone() };
        assert!(matches!(run(&t, &Plan::default(), &tsch), Err(ConfigError::MissingSchedule(MacMode::Tsch))));
    }

    #[test]
    fn rejects_bad_config() {
        let t = Topology::from_edges(2, &[(0, 1)]).unwrap();
        let base = RunConfig::new(MacMode::Csma, Traffic::per_second(1.0), SEC, 1);
        let bad = [
            RunConfig { traffic: Traffic::per_second(-1.0), ..base.clone() },
            RunConfig { duration_us: 0, ..base.clone() },
            RunConfig { warmup_fraction: 1.0, ..base.clone() },
            RunConfig { queue_cap: 0, ..base.clone() },
        ];
        for cfg in &bad {
            assert!(matches!(prepare(&t, cfg), Err(ConfigError::Invalid(_))));
            assert!(matches!(run(&t, &Plan::default(), cfg), Err(ConfigError::Invalid(_))));
        }
    }

    #[test]
    fn star_csma_tracks_offered_load() {
        let t = single_hop(101, 0.0, 1);
        let m = go(&t, &RunConfig::new(MacMode::Csma, Traffic::per_second(1.0), 20 * SEC, 1));
        assert!((throughput(&m) - 100.0).abs() < 3.0, "{}", throughput(&m));
        assert!(pdr(&m) > 0.99);
    }

    #[test]
    fn hidden_nodes_hurt_csma() {
        let clear = single_hop(100, 0.0, 2);
        let hidden = single_hop(100, 0.5, 2);
        let cfg = RunConfig::new(MacMode::Csma, Traffic::per_second(5.0), 10 * SEC, 2);
        let a = go(&clear, &cfg);
        let b = go(&hidden, &cfg);
        assert!(throughput(&b) < throughput(&a));
        assert!(pdr(&b) < pdr(&a));
    }
}
