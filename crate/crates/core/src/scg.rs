//! Self-configurable grouping.
//!
//! The coordinator collects every node's neighbour list, then for each parent
//! partitions its children into groups of mutually audible siblings. Members
//! of a group can share a contention window without hidden-node collisions;
//! children left alone are served by dedicated TSCH cells.
//!
//! Stages, in order: [`collect_neighbor_reports`], then per parent a sweep
//! over its children in ascending neighbour count where each still-ungrouped
//! child seeds [`filter_group`] (repeated [`hnp_cal`] plus removal of the
//! most-hidden candidate) followed by [`apply_size_cap`].

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::topology::{NodeId, Topology};

pub const GROUPING_FORMAT: &str = "scg-grouping";
pub const GROUPING_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborReport {
    pub reporter: NodeId,
    /// Ascending, never contains `reporter`.
    pub neighbor_ids: Vec<NodeId>,
}

impl NeighborReport {
    pub fn hears(&self, other: NodeId) -> bool {
        self.neighbor_ids.binary_search(&other).is_ok()
    }
}

/// Discovery phase: one report per node, indexed by node id.
pub fn collect_neighbor_reports(topology: &Topology) -> Vec<NeighborReport> {
    topology.nodes().iter().map(|n| NeighborReport { reporter: n.id, neighbor_ids: n.neighbors.clone() }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateRow {
    pub node: NodeId,
    pub key: usize,
}

/// Rows sorted by key. Ties always resolve by ascending node id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateTable {
    pub rows: Vec<CandidateRow>,
}

impl CandidateTable {
    pub fn ascending(mut rows: Vec<CandidateRow>) -> Self {
        rows.sort_by_key(|r| (r.key, r.node));
        CandidateTable { rows }
    }

    pub fn descending(mut rows: Vec<CandidateRow>) -> Self {
        rows.sort_by(|a, b| b.key.cmp(&a.key).then(a.node.cmp(&b.node)));
        CandidateTable { rows }
    }

    pub fn head(&self) -> Option<&CandidateRow> {
        self.rows.first()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.rows.iter().map(|r| r.node)
    }
}

/// Hidden-peer count of every candidate: how many other candidates are
/// missing from its neighbour report. Sorted descending.
pub fn hnp_cal(candidates: &[NodeId], reports: &[NeighborReport]) -> CandidateTable {
    let rows = candidates
        .iter()
        .map(|&x| {
            let report = &reports[x.index()];
            let key = candidates.iter().filter(|&&y| y != x && !report.hears(y)).count();
            CandidateRow { node: x, key }
        })
        .collect();
    CandidateTable::descending(rows)
}

/// Grows a candidate set from `start` and prunes it to a mutually audible
/// subset.
///
/// Candidates are `start` plus every neighbour of `start` that has the same
/// parent and passes `eligible`. The most-hidden candidate is removed until
/// nobody is hidden. `start` hears every other candidate, so its key is
/// always zero and it is never removed. The result lists `start` first and
/// the remaining survivors in ascending id order.
pub fn filter_group(
    start: NodeId,
    topology: &Topology,
    reports: &[NeighborReport],
    eligible: impl Fn(NodeId) -> bool,
) -> Vec<NodeId> {
    let parent = topology.parent(start);
    let mut candidates: Vec<NodeId> = std::iter::once(start)
        .chain(
            reports[start.index()]
                .neighbor_ids
                .iter()
                .copied()
                .filter(|&m| topology.parent(m) == parent && eligible(m)),
        )
        .collect();
    // Bounded by the initial candidate count: one removal per pass.
    loop {
        let table = hnp_cal(&candidates, reports);
        match table.head() {
            Some(row) if row.key > 0 => {
                let victim = row.node;
                candidates.retain(|&c| c != victim);
            }
            _ => break,
        }
    }
    candidates
}

/// Largest group allowed for members at `layer`.
pub fn size_cap(layer: u32) -> usize {
    if layer == 2 || layer == 3 {
        2
    } else {
        4
    }
}

/// Trims a group to its layer's cap, keeping the members that share the most
/// neighbours with `start` (positions are unknown, so shared neighbourhood is
/// the stand-in for proximity). Ties keep the lower id. Output order is
/// `start` first, then ascending id.
pub fn apply_size_cap(members: &[NodeId], start: NodeId, topology: &Topology) -> Vec<NodeId> {
    let layer = topology.layer(start);
    let cap = size_cap(layer);
    let mut out: Vec<NodeId> = if members.len() <= cap {
        members.to_vec()
    } else {
        let start_set: BTreeSet<NodeId> = topology.neighbors(start).iter().copied().collect();
        let overlap = |m: NodeId| {
            if m == start {
                usize::MAX
            } else {
                topology.neighbors(m).iter().filter(|x| start_set.contains(x)).count()
            }
        };
        let mut ranked: Vec<(usize, NodeId)> = members.iter().map(|&m| (overlap(m), m)).collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        ranked.into_iter().take(cap).map(|(_, m)| m).collect()
    };
    out.sort_by_key(|&m| (m != start, m));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub group_id: u32,
    pub parent: NodeId,
    pub members: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroupingResult {
    pub groups: Vec<Group>,
    /// Nodes served by dedicated cells, ascending.
    pub ungrouped: Vec<NodeId>,
}

impl GroupingResult {
    /// Group index of every node, `None` for the coordinator and ungrouped.
    pub fn membership(&self, node_count: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; node_count];
        for (gi, g) in self.groups.iter().enumerate() {
            for m in &g.members {
                out[m.index()] = Some(gi);
            }
        }
        out
    }

    pub fn to_document(&self) -> GroupingDocument {
        GroupingDocument {
            format: GROUPING_FORMAT.to_string(),
            version: GROUPING_VERSION,
            groups: self.groups.clone(),
            ungrouped: self.ungrouped.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupingDocument {
    pub format: String,
    pub version: u32,
    pub groups: Vec<Group>,
    pub ungrouped: Vec<NodeId>,
}

/// Runs the full grouping pass over every parent, in ascending parent id.
pub fn run_grouping(topology: &Topology) -> GroupingResult {
    let reports = collect_neighbor_reports(topology);
    let mut assigned = vec![false; topology.len()];
    let mut result = GroupingResult::default();

    for parent in topology.ids() {
        let children = topology.children(parent);
        if children.is_empty() {
            continue;
        }
        let order = CandidateTable::ascending(
            children.iter().map(|&c| CandidateRow { node: c, key: reports[c.index()].neighbor_ids.len() }).collect(),
        );
        for start in order.nodes() {
            if assigned[start.index()] {
                continue;
            }
            let survivors = filter_group(start, topology, &reports, |m| !assigned[m.index()]);
            let members = apply_size_cap(&survivors, start, topology);
            for m in &members {
                assigned[m.index()] = true;
            }
            if members.len() >= 2 {
                result.groups.push(Group { group_id: result.groups.len() as u32, parent, members });
            } else {
                result.ungrouped.push(start);
            }
        }
    }
    result.ungrouped.sort_unstable();
    result
}

/// Problems found by [`validate_grouping`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroupingViolation {
    HiddenPair { group_id: u32, a: NodeId, b: NodeId },
    MixedParent { group_id: u32, node: NodeId },
    OverCap { group_id: u32, size: usize, cap: usize },
    Duplicate(NodeId),
    Missing(NodeId),
    Coordinator,
}

/// Exhaustive structural check of a grouping against its topology.
pub fn validate_grouping(topology: &Topology, grouping: &GroupingResult) -> Vec<GroupingViolation> {
    let mut seen = vec![0u32; topology.len()];
    let mut out = Vec::new();
    for g in &grouping.groups {
        for (i, &a) in g.members.iter().enumerate() {
            seen[a.index()] += 1;
            if topology.parent(a) != Some(g.parent) {
                out.push(GroupingViolation::MixedParent { group_id: g.group_id, node: a });
            }
            for &b in &g.members[i + 1..] {
                if !topology.adjacent(a, b) {
                    out.push(GroupingViolation::HiddenPair { group_id: g.group_id, a, b });
                }
            }
        }
        if let Some(&first) = g.members.first() {
            let cap = size_cap(topology.layer(first));
            if g.members.len() > cap {
                out.push(GroupingViolation::OverCap { group_id: g.group_id, size: g.members.len(), cap });
            }
        }
    }
    for &u in &grouping.ungrouped {
        seen[u.index()] += 1;
    }
    if seen[0] > 0 {
        out.push(GroupingViolation::Coordinator);
    }
    for id in topology.ids().skip(1) {
        match seen[id.index()] {
            0 => out.push(GroupingViolation::Missing(id)),
            1 => {}
            _ => out.push(GroupingViolation::Duplicate(id)),
        }
    }
    out
}
