//! Centralised TSCH schedules.
//!
//! [`build_tsch_schedule`] gives every tree link dedicated cells with a
//! greedy first-fit pass. [`build_hybrid_schedule`] does the same for
//! ungrouped nodes and hands each SCG group a contiguous contention window
//! addressed to the group's parent.
//!
//! Demands are packets per slotframe. A link carries its sender's whole
//! subtree, so a packet from layer `k` consumes one cell on each of `k` links.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scg::GroupingResult;
use crate::topology::{NodeId, Topology};

pub const SCHEDULE_FORMAT: &str = "scg-schedule";
pub const SCHEDULE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TschParams {
    pub slot_us: u64,
    /// `None` means `max(node_count, 100)`.
    pub slotframe_len: Option<u32>,
    pub channels: u16,
    /// Leading slots of every slotframe kept for beacons and sync.
    pub reserved_slots: u32,
    /// Airtime of a data frame plus its ACK inside a dedicated cell.
    pub cell_txn_us: u64,
}

impl Default for TschParams {
    fn default() -> Self {
        TschParams { slot_us: 10_000, slotframe_len: None, channels: 16, reserved_slots: 2, cell_txn_us: 5_000 }
    }
}

impl TschParams {
    pub fn frame_len(&self, node_count: usize) -> u32 {
        self.slotframe_len.unwrap_or_else(|| (node_count as u32).max(100))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridParams {
    /// Slack multiplier on a window's nominal airtime.
    pub margin: f64,
}

impl Default for HybridParams {
    fn default() -> Self {
        HybridParams { margin: 1.5 }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule parameters: {0}")]
    InvalidParameters(String),
    #[error("demand vector has {got} entries, topology has {expected} nodes")]
    DemandLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CellKind {
    Dedicated { sender: NodeId, receiver: NodeId },
    GroupWindow { group_id: u32, receiver: NodeId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub slot: u32,
    /// Contiguous slots covered, 1 for dedicated cells.
    pub span: u32,
    pub channel_offset: u16,
    pub kind: CellKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slotframe {
    pub length: u32,
    pub num_channels: u16,
    pub slot_duration_us: u64,
    pub reserved_slots: u32,
    pub cells: Vec<Cell>,
}

impl Slotframe {
    pub fn duration_us(&self) -> u64 {
        u64::from(self.length) * self.slot_duration_us
    }
}

/// Outcome for one schedulable item (a link or a group window).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub sender: Option<NodeId>,
    pub group_id: Option<u32>,
    pub receiver: NodeId,
    pub demand: f64,
    /// Slots requested and granted.
    pub requested: u32,
    pub granted: u32,
}

impl Allocation {
    pub fn capacity_exceeded(&self) -> bool {
        self.granted < self.requested
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub format: String,
    pub version: u32,
    pub slotframe: Slotframe,
    pub allocations: Vec<Allocation>,
}

impl Schedule {
    pub fn within_capacity(&self) -> bool {
        self.allocations.iter().all(|a| !a.capacity_exceeded())
    }

    pub fn unsatisfied(&self) -> impl Iterator<Item = &Allocation> {
        self.allocations.iter().filter(|a| a.capacity_exceeded())
    }
}

/// Load on every uplink: own demand plus all descendants'. Index = sender.
pub fn link_demands(topology: &Topology, per_node: &[f64]) -> Vec<f64> {
    let mut load = per_node.to_vec();
    let mut order: Vec<NodeId> = topology.ids().collect();
    order.sort_by_key(|&id| std::cmp::Reverse(topology.layer(id)));
    for id in order {
        if let Some(p) = topology.parent(id) {
            load[p.index()] += load[id.index()];
        }
    }
    load
}

/// Occupancy grid used during construction.
struct Grid {
    len: u32,
    channels: u16,
    reserved: u32,
    cell_used: Vec<bool>,
    node_used: Vec<bool>,
    nodes: usize,
}

impl Grid {
    fn new(len: u32, channels: u16, reserved: u32, nodes: usize) -> Self {
        Grid {
            len,
            channels,
            reserved,
            cell_used: vec![false; len as usize * channels as usize],
            node_used: vec![false; len as usize * nodes],
            nodes,
        }
    }

    fn cell_free(&self, slot: u32, ch: u16) -> bool {
        !self.cell_used[slot as usize * self.channels as usize + ch as usize]
    }

    fn node_free(&self, slot: u32, node: NodeId) -> bool {
        !self.node_used[slot as usize * self.nodes + node.index()]
    }

    fn fits(&self, slot: u32, ch: u16, parts: &[NodeId]) -> bool {
        self.cell_free(slot, ch) && parts.iter().all(|&p| self.node_free(slot, p))
    }

    fn take(&mut self, slot: u32, ch: u16, parts: &[NodeId]) {
        self.cell_used[slot as usize * self.channels as usize + ch as usize] = true;
        for p in parts {
            self.node_used[slot as usize * self.nodes + p.index()] = true;
        }
    }

    fn first_free(&self, parts: &[NodeId]) -> Option<(u32, u16)> {
        (self.reserved..self.len).find_map(|s| {
            if !parts.iter().all(|&p| self.node_free(s, p)) {
                return None;
            }
            (0..self.channels).find(|&c| self.cell_free(s, c)).map(|c| (s, c))
        })
    }

    /// Earliest `(slot, channel)` where `span` consecutive slots fit.
    fn first_run(&self, span: u32, parts: &[NodeId]) -> Option<(u32, u16)> {
        if span == 0 || span > self.len.saturating_sub(self.reserved) {
            return None;
        }
        (self.reserved..=self.len - span)
            .find_map(|s| (0..self.channels).find(|&c| (s..s + span).all(|x| self.fits(x, c, parts))).map(|c| (s, c)))
    }

    /// Longest run at the earliest possible start, up to `max`.
    fn longest_early_run(&self, max: u32, parts: &[NodeId]) -> Option<(u32, u16, u32)> {
        for s in self.reserved..self.len {
            let mut best: Option<(u16, u32)> = None;
            for c in 0..self.channels {
                let run = (s..self.len).take(max as usize).take_while(|&x| self.fits(x, c, parts)).count() as u32;
                if run > 0 && best.is_none_or(|(_, r)| run > r) {
                    best = Some((c, run));
                }
            }
            if let Some((c, run)) = best {
                return Some((s, c, run));
            }
        }
        None
    }
}

fn check_params(params: &TschParams, topology: &Topology, demands: &[f64]) -> Result<u32, ScheduleError> {
    if demands.len() != topology.len() {
        return Err(ScheduleError::DemandLength { expected: topology.len(), got: demands.len() });
    }
    if demands.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(ScheduleError::InvalidParameters("demands must be finite and >= 0".into()));
    }
    let len = params.frame_len(topology.len());
    if params.channels == 0 || params.slot_us == 0 || len <= params.reserved_slots {
        return Err(ScheduleError::InvalidParameters(format!(
            "need channels > 0, slot_us > 0 and slotframe_len ({len}) > reserved_slots ({})",
            params.reserved_slots
        )));
    }
    Ok(len)
}

enum Item {
    Link { sender: NodeId, receiver: NodeId, demand: f64 },
    Window { group_id: u32, receiver: NodeId, members: Vec<NodeId>, demand: f64, raw_slots: f64 },
}

impl Item {
    fn demand(&self) -> f64 {
        match self {
            Item::Link { demand, .. } | Item::Window { demand, .. } => *demand,
        }
    }

    /// Unrounded slot need at full demand.
    fn raw_slots(&self) -> f64 {
        match self {
            Item::Link { demand, .. } => *demand,
            Item::Window { raw_slots, .. } => *raw_slots,
        }
    }

    fn participants(&self) -> Vec<NodeId> {
        match self {
            Item::Link { sender, receiver, .. } => vec![*sender, *receiver],
            Item::Window { members, receiver, .. } => members.iter().copied().chain([*receiver]).collect(),
        }
    }

    fn tiebreak(&self) -> NodeId {
        match self {
            Item::Link { sender, .. } => *sender,
            Item::Window { members, .. } => *members.iter().min().expect("groups are non-empty"),
        }
    }
}

/// Ceiling that ignores float noise in the last few bits.
fn clean_ceil(x: f64) -> u32 {
    ((x * 1e9).round() / 1e9).ceil() as u32
}

/// Fraction of demand the busiest node can carry in one slotframe.
///
/// Without it, the first links served under overload grab more cells than
/// their own upstream links can be given, and the coordinator's slots go
/// unused while queues overflow further down.
fn carry_fraction(topology: &Topology, items: &[Item], usable: u32) -> f64 {
    let mut need = vec![0.0; topology.len()];
    for item in items {
        for p in item.participants() {
            need[p.index()] += item.raw_slots();
        }
    }
    need.iter().fold(1.0_f64, |f, &n| if n > 0.0 { f.min(f64::from(usable) / n) } else { f })
}

fn schedule_items(topology: &Topology, params: &TschParams, len: u32, mut items: Vec<Item>) -> Schedule {
    items.sort_by(|a, b| b.demand().total_cmp(&a.demand()).then(a.tiebreak().cmp(&b.tiebreak())));
    let scale = carry_fraction(topology, &items, len - params.reserved_slots);
    let mut grid = Grid::new(len, params.channels, params.reserved_slots, topology.len());
    let mut cells = Vec::new();
    let mut allocations = Vec::with_capacity(items.len());
    for item in items {
        let requested = clean_ceil(item.raw_slots());
        let target = clean_ceil(item.raw_slots() * scale);
        match item {
            Item::Link { sender, receiver, demand } => {
                let parts = [sender, receiver];
                let mut granted = 0;
                while granted < target {
                    let Some((slot, ch)) = grid.first_free(&parts) else { break };
                    grid.take(slot, ch, &parts);
                    cells.push(Cell {
                        slot,
                        span: 1,
                        channel_offset: ch,
                        kind: CellKind::Dedicated { sender, receiver },
                    });
                    granted += 1;
                }
                allocations.push(Allocation {
                    sender: Some(sender),
                    group_id: None,
                    receiver,
                    demand,
                    requested,
                    granted,
                });
            }
            Item::Window { group_id, receiver, members, demand, .. } => {
                let slots = target;
                let mut parts = members.clone();
                parts.push(receiver);
                let kind = CellKind::GroupWindow { group_id, receiver };
                let mut granted = 0;
                if let Some((slot, ch)) = grid.first_run(slots, &parts) {
                    for s in slot..slot + slots {
                        grid.take(s, ch, &parts);
                    }
                    cells.push(Cell { slot, span: slots, channel_offset: ch, kind });
                    granted = slots;
                } else {
                    // No contiguous fit: fall back to earliest pieces.
                    while granted < slots {
                        let Some((slot, ch, run)) = grid.longest_early_run(slots - granted, &parts) else { break };
                        for s in slot..slot + run {
                            grid.take(s, ch, &parts);
                        }
                        cells.push(Cell { slot, span: run, channel_offset: ch, kind });
                        granted += run;
                    }
                }
                allocations.push(Allocation {
                    sender: None,
                    group_id: Some(group_id),
                    receiver,
                    demand,
                    requested,
                    granted,
                });
            }
        }
    }
    cells.sort_by_key(|c| (c.slot, c.channel_offset));
    Schedule {
        format: SCHEDULE_FORMAT.to_string(),
        version: SCHEDULE_VERSION,
        slotframe: Slotframe {
            length: len,
            num_channels: params.channels,
            slot_duration_us: params.slot_us,
            reserved_slots: params.reserved_slots,
            cells,
        },
        allocations,
    }
}

/// Plain 6TiSCH-style schedule: dedicated cells for every tree uplink.
pub fn build_tsch_schedule(
    topology: &Topology,
    demands: &[f64],
    params: &TschParams,
) -> Result<Schedule, ScheduleError> {
    let len = check_params(params, topology, demands)?;
    let load = link_demands(topology, demands);
    let items = topology
        .nodes()
        .iter()
        .filter_map(|n| n.parent.map(|p| Item::Link { sender: n.id, receiver: p, demand: load[n.id.index()] }))
        .filter(|i| i.demand() > 0.0)
        .collect();
    Ok(schedule_items(topology, params, len, items))
}

/// Slots a group window needs: members' summed demand times the per-packet
/// airtime in slots, times the margin, rounded up.
pub fn window_slots(group_demand: f64, txn_us: u64, slot_us: u64, margin: f64) -> u32 {
    clean_ceil(raw_window_slots(group_demand, txn_us, slot_us, margin))
}

fn raw_window_slots(group_demand: f64, txn_us: u64, slot_us: u64, margin: f64) -> f64 {
    group_demand * (txn_us as f64 / slot_us as f64) * margin
}

/// Hybrid schedule: contention windows for groups, dedicated cells for the rest.
pub fn build_hybrid_schedule(
    topology: &Topology,
    grouping: &GroupingResult,
    demands: &[f64],
    params: &TschParams,
    hybrid: &HybridParams,
    csma_txn_us: u64,
) -> Result<Schedule, ScheduleError> {
    let len = check_params(params, topology, demands)?;
    if !(hybrid.margin > 0.0 && hybrid.margin.is_finite()) {
        return Err(ScheduleError::InvalidParameters(format!("hybrid margin {} must be positive", hybrid.margin)));
    }
    let load = link_demands(topology, demands);
    let mut items = Vec::new();
    for g in &grouping.groups {
        let demand: f64 = g.members.iter().map(|m| load[m.index()]).sum();
        let raw_slots = raw_window_slots(demand, csma_txn_us, params.slot_us, hybrid.margin);
        if raw_slots > 0.0 {
            items.push(Item::Window {
                group_id: g.group_id,
                receiver: g.parent,
                members: g.members.clone(),
                demand,
                raw_slots,
            });
        }
    }
    for &u in &grouping.ungrouped {
        let receiver = topology
            .parent(u)
            .ok_or_else(|| ScheduleError::InvalidParameters(format!("ungrouped node {u} has no parent")))?;
        if load[u.index()] > 0.0 {
            items.push(Item::Link { sender: u, receiver, demand: load[u.index()] });
        }
    }
    Ok(schedule_items(topology, params, len, items))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SlotframeViolation {
    SharedCell { slot: u32, channel: u16 },
    NodeTwice { slot: u32, node: NodeId },
    OutOfRange { slot: u32, channel: u16 },
    Reserved { slot: u32 },
}

/// Exhaustive invariant check. Group windows occupy their receiver and
/// every member for each covered slot.
pub fn validate_slotframe(frame: &Slotframe, grouping: Option<&GroupingResult>) -> Vec<SlotframeViolation> {
    use std::collections::{BTreeMap, BTreeSet};
    let mut out = Vec::new();
    let mut cells: BTreeSet<(u32, u16)> = BTreeSet::new();
    let mut nodes: BTreeMap<u32, BTreeSet<NodeId>> = BTreeMap::new();
    for cell in &frame.cells {
        let parts: Vec<NodeId> = match cell.kind {
            CellKind::Dedicated { sender, receiver } => vec![sender, receiver],
            CellKind::GroupWindow { group_id, receiver } => {
                let mut v = grouping
                    .and_then(|g| g.groups.iter().find(|gr| gr.group_id == group_id))
                    .map(|gr| gr.members.clone())
                    .unwrap_or_default();
                v.push(receiver);
                v
            }
        };
        for slot in cell.slot..cell.slot + cell.span {
            if slot >= frame.length || cell.channel_offset >= frame.num_channels {
                out.push(SlotframeViolation::OutOfRange { slot, channel: cell.channel_offset });
                continue;
            }
            if slot < frame.reserved_slots {
                out.push(SlotframeViolation::Reserved { slot });
            }
            if !cells.insert((slot, cell.channel_offset)) {
                out.push(SlotframeViolation::SharedCell { slot, channel: cell.channel_offset });
            }
            let used = nodes.entry(slot).or_default();
            for &p in &parts {
                if !used.insert(p) {
                    out.push(SlotframeViolation::NodeTwice { slot, node: p });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scg::{run_grouping, Group};

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    fn params(len: u32, channels: u16, reserved: u32) -> TschParams {
        TschParams { slotframe_len: Some(len), channels, reserved_slots: reserved, ..TschParams::default() }
    }

    #[test]
    fn single_link_gets_slot_zero() {
        let t = Topology::from_edges(2, &[(0, 1)]).unwrap();
        let s = build_tsch_schedule(&t, &[0.0, 1.0], &params(100, 1, 0)).unwrap();
        assert_eq!(
            s.slotframe.cells,
            vec![Cell {
                slot: 0,
                span: 1,
                channel_offset: 0,
                kind: CellKind::Dedicated { sender: n(1), receiver: n(0) }
            }]
        );
        assert!(s.within_capacity());
    }

    #[test]
    fn siblings_never_share_a_slot() {
        // Exhaustive over both orders of the two links and both channel counts.
        let t = Topology::from_edges(3, &[(0, 1), (0, 2)]).unwrap();
        for channels in [1, 4] {
            for d in [[0.0, 1.0, 1.0], [0.0, 2.0, 1.0], [0.0, 1.0, 2.0]] {
                let s = build_tsch_schedule(&t, &d, &params(10, channels, 0)).unwrap();
                let slots: Vec<u32> = s.slotframe.cells.iter().map(|c| c.slot).collect();
                let mut uniq = slots.clone();
                uniq.sort();
                uniq.dedup();
                assert_eq!(uniq.len(), slots.len(), "receiver conflict in {slots:?}");
                assert!(validate_slotframe(&s.slotframe, None).is_empty());
            }
        }
    }

    #[test]
    fn hundred_node_star_caps_at_98_cells() {
        let t = Topology::generate(101, 100.0, 1.0, true, 1).unwrap();
        let mut d = vec![1.0; 101];
        d[0] = 0.0;
        let s = build_tsch_schedule(&t, &d, &params(100, 16, 2)).unwrap();
        assert_eq!(s.slotframe.cells.len(), 98);
        assert_eq!(s.unsatisfied().count(), 2);
        assert!(validate_slotframe(&s.slotframe, None).is_empty());
    }

    #[test]
    fn multi_hop_consumes_one_cell_per_hop() {
        let t = Topology::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let s = build_tsch_schedule(&t, &[0.0, 0.0, 0.0, 1.0], &params(20, 2, 0)).unwrap();
        assert_eq!(s.slotframe.cells.len(), 3);
        assert_eq!(link_demands(&t, &[0.0, 1.0, 1.0, 1.0]), vec![3.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn window_sizing_rule() {
        // 4 members x demand 1, 4 ms / 10 ms, margin 1.5 -> ceil(2.4) = 3.
        assert_eq!(window_slots(4.0, 4_000, 10_000, 1.5), 3);
        assert_eq!(window_slots(0.0, 4_000, 10_000, 1.5), 0);
        assert_eq!(window_slots(2.5, 4_000, 10_000, 1.0), 1);
    }

    #[test]
    fn group_window_placement() {
        let t = Topology::from_edges(
            6,
            &[(0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)],
        )
        .unwrap();
        let grouping = GroupingResult {
            groups: vec![Group { group_id: 0, parent: n(0), members: vec![n(1), n(2), n(3), n(4)] }],
            ungrouped: vec![n(5)],
        };
        let d = [0.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let s = build_hybrid_schedule(&t, &grouping, &d, &params(100, 2, 0), &HybridParams::default(), 4_000).unwrap();
        let window = s.slotframe.cells.iter().find(|c| matches!(c.kind, CellKind::GroupWindow { .. })).unwrap();
        assert_eq!((window.slot, window.span), (0, 3));
        let ded = s.slotframe.cells.iter().find(|c| matches!(c.kind, CellKind::Dedicated { .. })).unwrap();
        // Coordinator is busy in the window's slots, even on another channel.
        assert_eq!(ded.slot, 3);
        assert!(validate_slotframe(&s.slotframe, Some(&grouping)).is_empty());
    }

    #[test]
    fn hybrid_without_groups_equals_tsch() {
        let t = Topology::generate_random(40, 60.0, 22.0, 9)
            .or_else(|_| Topology::generate_random(40, 60.0, 35.0, 9))
            .unwrap();
        let d: Vec<f64> = (0..40).map(|i| if i == 0 { 0.0 } else { 0.3 + (i % 3) as f64 * 0.5 }).collect();
        let grouping = GroupingResult { groups: vec![], ungrouped: t.ids().skip(1).collect() };
        let p = params(100, 4, 2);
        let a = build_tsch_schedule(&t, &d, &p).unwrap();
        let b = build_hybrid_schedule(&t, &grouping, &d, &p, &HybridParams::default(), 4_000).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_hybrid_schedule_is_valid() {
        let t = Topology::generate_random(120, 100.0, 25.0, 4).unwrap();
        let g = run_grouping(&t);
        let d = vec![0.7; 120];
        let s = build_hybrid_schedule(&t, &g, &d, &TschParams::default(), &HybridParams::default(), 4_000).unwrap();
        assert!(validate_slotframe(&s.slotframe, Some(&g)).is_empty());
    }

    #[test]
    fn rejects_bad_inputs() {
        let t = Topology::from_edges(2, &[(0, 1)]).unwrap();
        assert!(matches!(
            build_tsch_schedule(&t, &[0.0], &TschParams::default()),
            Err(ScheduleError::DemandLength { expected: 2, got: 1 })
        ));
        assert!(matches!(
            build_tsch_schedule(&t, &[0.0, -1.0], &TschParams::default()),
            Err(ScheduleError::InvalidParameters(_))
        ));
        assert!(matches!(
            build_tsch_schedule(&t, &[0.0, 1.0], &params(2, 1, 2)),
            Err(ScheduleError::InvalidParameters(_))
        ));
    }
}
