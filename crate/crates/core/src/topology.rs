//! Node placement, unit-disk connectivity, the shortest-hop routing tree and
//! hidden-node metrics.
//!
//! A [`Topology`] is immutable once built. The coordinator is always
//! [`NodeId::COORDINATOR`] and sits at the centre of the square deployment
//! area. Adjacency follows the unit-disk rule: two distinct nodes are
//! neighbours iff their distance is at most `comm_radius`. A `single_hop`
//! topology additionally links every node to the coordinator (a sink that
//! hears the whole area), which is how the single-hop experiments are set up.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Stream};

pub const TOPOLOGY_FORMAT: &str = "scg-topology";
pub const TOPOLOGY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const COORDINATOR: NodeId = NodeId(0);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_coordinator(self) -> bool {
        self == Self::COORDINATOR
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeInfo {
    pub id: NodeId,
    pub position: Position,
    pub parent: Option<NodeId>,
    /// Sorted ascending.
    pub children: Vec<NodeId>,
    /// Hops from the coordinator.
    pub layer: u32,
    /// Sorted ascending, never contains `id`.
    pub neighbors: Vec<NodeId>,
    /// Packets per second. Carried for completeness; grouping ignores it.
    pub traffic_rate: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("invalid topology parameters: {0}")]
    InvalidParameters(String),
    #[error("{unreachable} node(s) cannot reach the coordinator")]
    DisconnectedTopology { unreachable: usize },
    #[error("{sender} -> {receiver} is not a link")]
    NotALink { sender: NodeId, receiver: NodeId },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("link set is empty")]
    EmptyLinkSet,
    #[error("hidden target {target} not reached: best radius {radius:.4} m gives {achieved:.4}")]
    TargetUnreachable { target: f64, radius: f64, achieved: f64 },
    #[error("malformed topology document: {0}")]
    Document(String),
}

/// Which reading of the per-link hidden-node ratio to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HnpFormula {
    /// Fraction of the receiver's other neighbours the sender cannot hear.
    #[default]
    ReceiverCentric,
    /// Literal form: fraction of the sender's other neighbours the receiver
    /// cannot hear.
    AsWritten,
}

/// Tree links included in the network hidden percentage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkSet {
    Uplink,
    #[default]
    Both,
}

/// Parent and layer for every node, as produced by [`build_tree`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub parent: Vec<Option<NodeId>>,
    pub layer: Vec<u32>,
}

/// Breadth-first shortest-hop tree rooted at the coordinator.
///
/// Among equal-hop candidates a node adopts the lowest-numbered parent.
pub fn build_tree(neighbors: &[Vec<NodeId>]) -> Result<Tree, TopologyError> {
    let n = neighbors.len();
    let mut parent = vec![None; n];
    let mut layer = vec![u32::MAX; n];
    if n == 0 {
        return Ok(Tree { parent, layer });
    }
    layer[0] = 0;
    let mut frontier = vec![NodeId::COORDINATOR];
    let mut queue = VecDeque::new();
    while !frontier.is_empty() {
        // Frontier is visited in ascending id order so the first parent to
        // claim a node is the lowest-numbered one in the previous layer.
        frontier.sort_unstable();
        for &u in &frontier {
            for &v in &neighbors[u.index()] {
                if layer[v.index()] == u32::MAX {
                    layer[v.index()] = layer[u.index()] + 1;
                    parent[v.index()] = Some(u);
                    queue.push_back(v);
                }
            }
        }
        frontier = queue.drain(..).collect();
    }
    let unreachable = layer.iter().filter(|&&l| l == u32::MAX).count();
    if unreachable > 0 {
        return Err(TopologyError::DisconnectedTopology { unreachable });
    }
    Ok(Tree { parent, layer })
}

/// Coordinator at the centre, remaining nodes uniform over the square.
///
/// Placement depends only on `(n, area_side, seed)`, so radius sweeps over
/// the same seed see the same node positions.
pub fn random_positions(n: usize, area_side: f64, seed: u64) -> Vec<Position> {
    let mut rng = rng::stream(seed, Stream::Placement);
    let mut out = Vec::with_capacity(n);
    out.push(Position { x: area_side / 2.0, y: area_side / 2.0 });
    for _ in 1..n {
        let x = rng.gen::<f64>() * area_side;
        let y = rng.gen::<f64>() * area_side;
        out.push(Position { x, y });
    }
    out
}

#[derive(Clone)]
pub struct Topology {
    nodes: Vec<NodeInfo>,
    area_side: f64,
    comm_radius: f64,
    single_hop: bool,
    seed: u64,
    adjacency: Vec<bool>,
}

impl fmt::Debug for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Topology")
            .field("nodes", &self.nodes)
            .field("area_side", &self.area_side)
            .field("comm_radius", &self.comm_radius)
            .field("single_hop", &self.single_hop)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

impl PartialEq for Topology {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.area_side.to_bits() == other.area_side.to_bits()
            && self.comm_radius.to_bits() == other.comm_radius.to_bits()
            && self.single_hop == other.single_hop
            && self.seed == other.seed
    }
}

impl Topology {
    /// Random placement with unit-disk adjacency.
    pub fn generate_random(n: usize, area_side: f64, comm_radius: f64, seed: u64) -> Result<Self, TopologyError> {
        Self::generate(n, area_side, comm_radius, false, seed)
    }

    pub fn generate(
        n: usize,
        area_side: f64,
        comm_radius: f64,
        single_hop: bool,
        seed: u64,
    ) -> Result<Self, TopologyError> {
        if n < 2 {
            return Err(TopologyError::InvalidParameters(format!("node count {n} < 2")));
        }
        if !(area_side > 0.0 && area_side.is_finite()) {
            return Err(TopologyError::InvalidParameters(format!("area_side {area_side} must be positive")));
        }
        let positions = random_positions(n, area_side, seed);
        Self::from_positions(positions, area_side, comm_radius, single_hop, seed)
    }

    pub fn from_positions(
        positions: Vec<Position>,
        area_side: f64,
        comm_radius: f64,
        single_hop: bool,
        seed: u64,
    ) -> Result<Self, TopologyError> {
        if !(comm_radius > 0.0 && comm_radius.is_finite()) {
            return Err(TopologyError::InvalidParameters(format!("comm_radius {comm_radius} must be positive")));
        }
        let n = positions.len();
        let mut neighbors = vec![Vec::new(); n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = positions[i].distance(&positions[j]);
                let linked = (d > 0.0 && d <= comm_radius) || (single_hop && i == 0);
                if linked {
                    neighbors[i].push(NodeId(j as u32));
                    neighbors[j].push(NodeId(i as u32));
                }
            }
        }
        Self::assemble(positions, neighbors, area_side, comm_radius, single_hop, seed)
    }

    /// Builds a topology from an explicit undirected edge list. Positions are
    /// all at the origin; useful for hand-constructed cases.
    pub fn from_edges(n: usize, edges: &[(u32, u32)]) -> Result<Self, TopologyError> {
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a == b || a as usize >= n || b as usize >= n {
                return Err(TopologyError::InvalidParameters(format!("bad edge ({a}, {b})")));
            }
            if !neighbors[a as usize].contains(&NodeId(b)) {
                neighbors[a as usize].push(NodeId(b));
                neighbors[b as usize].push(NodeId(a));
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        let positions = vec![Position { x: 0.0, y: 0.0 }; n];
        Self::assemble(positions, neighbors, 0.0, 0.0, false, 0)
    }

    fn assemble(
        positions: Vec<Position>,
        neighbors: Vec<Vec<NodeId>>,
        area_side: f64,
        comm_radius: f64,
        single_hop: bool,
        seed: u64,
    ) -> Result<Self, TopologyError> {
        let n = positions.len();
        if n < 2 {
            return Err(TopologyError::InvalidParameters(format!("node count {n} < 2")));
        }
        let tree = build_tree(&neighbors)?;
        let mut adjacency = vec![false; n * n];
        for (i, list) in neighbors.iter().enumerate() {
            for j in list {
                adjacency[i * n + j.index()] = true;
            }
        }
        let mut children = vec![Vec::new(); n];
        for (i, p) in tree.parent.iter().enumerate() {
            if let Some(p) = p {
                children[p.index()].push(NodeId(i as u32));
            }
        }
        let nodes = positions
            .into_iter()
            .zip(neighbors)
            .zip(children)
            .enumerate()
            .map(|(i, ((position, neighbors), children))| NodeInfo {
                id: NodeId(i as u32),
                position,
                parent: tree.parent[i],
                children,
                layer: tree.layer[i],
                neighbors,
                traffic_rate: 0.0,
            })
            .collect();
        Ok(Topology { nodes, area_side, comm_radius, single_hop, seed, adjacency })
    }

    /// Copy with every non-coordinator node's `traffic_rate` set.
    pub fn with_traffic_rate(mut self, rate: f64) -> Self {
        for node in self.nodes.iter_mut().skip(1) {
            node.traffic_rate = rate;
        }
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeInfo] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &NodeInfo {
        &self.nodes[id.index()]
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().map(|n| n.id)
    }

    pub fn area_side(&self) -> f64 {
        self.area_side
    }

    pub fn comm_radius(&self) -> f64 {
        self.comm_radius
    }

    pub fn single_hop(&self) -> bool {
        self.single_hop
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn adjacent(&self, a: NodeId, b: NodeId) -> bool {
        self.adjacency[a.index() * self.nodes.len() + b.index()]
    }

    pub fn neighbors(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.index()].neighbors
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id.index()].parent
    }

    pub fn layer(&self, id: NodeId) -> u32 {
        self.nodes[id.index()].layer
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.index()].children
    }

    /// Number of hops from `id` up to the coordinator.
    pub fn hops_to_root(&self, id: NodeId) -> u32 {
        self.layer(id)
    }

    /// `id` and all of its descendants.
    pub fn subtree_sizes(&self) -> Vec<usize> {
        let mut size = vec![1usize; self.len()];
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(self.nodes[i].layer));
        for i in order {
            if let Some(p) = self.nodes[i].parent {
                size[p.index()] += size[i];
            }
        }
        size
    }

    fn check_link(&self, sender: NodeId, receiver: NodeId) -> Result<(), TopologyError> {
        for id in [sender, receiver] {
            if id.index() >= self.len() {
                return Err(TopologyError::UnknownNode(id));
            }
        }
        if !self.adjacent(sender, receiver) {
            return Err(TopologyError::NotALink { sender, receiver });
        }
        Ok(())
    }

    /// Receiver-centric hidden ratio of the link `sender -> receiver`:
    /// the share of the receiver's other neighbours that the sender cannot
    /// hear. Zero when the receiver has no other neighbour.
    pub fn link_hidden_ratio(&self, sender: NodeId, receiver: NodeId) -> Result<f64, TopologyError> {
        self.link_hidden_ratio_with(sender, receiver, HnpFormula::ReceiverCentric)
    }

    pub fn link_hidden_ratio_with(
        &self,
        sender: NodeId,
        receiver: NodeId,
        formula: HnpFormula,
    ) -> Result<f64, TopologyError> {
        self.check_link(sender, receiver)?;
        // Endpoints are removed from both sets: (base \ {other}) \ (probe's set).
        let (base, probe) = match formula {
            HnpFormula::ReceiverCentric => (receiver, sender),
            HnpFormula::AsWritten => (sender, receiver),
        };
        let others = self.neighbors(base).len() - 1;
        if others == 0 {
            return Ok(0.0);
        }
        let hidden = self.neighbors(base).iter().filter(|&&x| x != probe && !self.adjacent(probe, x)).count();
        Ok(hidden as f64 / others as f64)
    }

    /// Mean link hidden ratio over `links`.
    pub fn network_hidden_percentage(&self, links: &[(NodeId, NodeId)]) -> Result<f64, TopologyError> {
        self.network_hidden_percentage_with(links, HnpFormula::ReceiverCentric)
    }

    pub fn network_hidden_percentage_with(
        &self,
        links: &[(NodeId, NodeId)],
        formula: HnpFormula,
    ) -> Result<f64, TopologyError> {
        if links.is_empty() {
            return Err(TopologyError::EmptyLinkSet);
        }
        let mut sum = 0.0;
        for &(s, r) in links {
            sum += self.link_hidden_ratio_with(s, r, formula)?;
        }
        Ok(sum / links.len() as f64)
    }

    /// Child-to-parent uplinks in ascending child order, followed by the
    /// matching downlinks when `set` is [`LinkSet::Both`].
    pub fn tree_links(&self, set: LinkSet) -> Vec<(NodeId, NodeId)> {
        let up: Vec<_> = self.nodes.iter().filter_map(|n| n.parent.map(|p| (n.id, p))).collect();
        match set {
            LinkSet::Uplink => up,
            LinkSet::Both => {
                let down: Vec<_> = up.iter().map(|&(c, p)| (p, c)).collect();
                up.into_iter().chain(down).collect()
            }
        }
    }

    /// Hidden percentage over the tree's links.
    pub fn tree_hidden_percentage(&self, set: LinkSet, formula: HnpFormula) -> f64 {
        self.network_hidden_percentage_with(&self.tree_links(set), formula)
            .expect("a valid topology has at least one tree link")
    }

    pub fn to_document(&self) -> TopologyDocument {
        TopologyDocument {
            format: TOPOLOGY_FORMAT.to_string(),
            version: TOPOLOGY_VERSION,
            area_side: self.area_side,
            comm_radius: self.comm_radius,
            single_hop: self.single_hop,
            seed: self.seed,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id,
                    x: n.position.x,
                    y: n.position.y,
                    parent: n.parent,
                    layer: n.layer,
                    neighbors: n.neighbors.clone(),
                    traffic_rate: n.traffic_rate,
                })
                .collect(),
        }
    }

    /// Rebuilds a topology from its document, checking that the stored tree
    /// and adjacency are consistent.
    pub fn from_document(doc: &TopologyDocument) -> Result<Self, TopologyError> {
        let bad = |m: String| TopologyError::Document(m);
        if doc.format != TOPOLOGY_FORMAT || doc.version != TOPOLOGY_VERSION {
            return Err(bad(format!("unsupported format {} v{}", doc.format, doc.version)));
        }
        let n = doc.nodes.len();
        let mut neighbors = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        for (i, rec) in doc.nodes.iter().enumerate() {
            if rec.id.index() != i {
                return Err(bad(format!("node ids must be dense; found {} at index {i}", rec.id)));
            }
            let mut list = rec.neighbors.clone();
            list.sort_unstable();
            list.dedup();
            if list.iter().any(|&j| j.index() >= n || j.index() == i) {
                return Err(bad(format!("node {} has an invalid neighbour", rec.id)));
            }
            neighbors.push(list);
            positions.push(Position { x: rec.x, y: rec.y });
        }
        for (i, list) in neighbors.iter().enumerate() {
            for j in list {
                if neighbors[j.index()].binary_search(&NodeId(i as u32)).is_err() {
                    return Err(bad(format!("adjacency not symmetric between n{i} and {j}")));
                }
            }
        }
        let mut topo = Self::assemble(positions, neighbors, doc.area_side, doc.comm_radius, doc.single_hop, doc.seed)?;
        for (node, rec) in topo.nodes.iter_mut().zip(&doc.nodes) {
            if node.parent != rec.parent || node.layer != rec.layer {
                return Err(bad(format!("stored tree disagrees with shortest-hop tree at {}", rec.id)));
            }
            node.traffic_rate = rec.traffic_rate;
        }
        Ok(topo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyDocument {
    pub format: String,
    pub version: u32,
    pub area_side: f64,
    pub comm_radius: f64,
    #[serde(default)]
    pub single_hop: bool,
    pub seed: u64,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub id: NodeId,
    pub x: f64,
    pub y: f64,
    pub parent: Option<NodeId>,
    pub layer: u32,
    pub neighbors: Vec<NodeId>,
    #[serde(default)]
    pub traffic_rate: f64,
}

/// Inputs for [`calibrate_radius`].
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRequest {
    pub node_count: usize,
    pub area_side: f64,
    pub seed: u64,
    pub target_hidden: f64,
    pub tolerance: f64,
    pub single_hop: bool,
    pub links: LinkSet,
    pub formula: HnpFormula,
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub radius: f64,
    pub achieved: f64,
    pub probes: usize,
    pub topology: Topology,
}

const MAX_PROBES: usize = 64;

/// Searches for a communication radius whose tree hidden percentage lands
/// within `tolerance` of the target.
///
/// Bisection over `[side/50, side*sqrt 2]`, assuming hidden percentage falls
/// as the radius grows. Disconnected probes count as "radius too small". The
/// function is not monotone in general, so the closest probe seen is what
/// gets returned.
pub fn calibrate_radius(req: &CalibrationRequest) -> Result<Calibration, TopologyError> {
    if !(0.0..1.0).contains(&req.target_hidden) {
        return Err(TopologyError::InvalidParameters(format!("target_hidden {} outside [0, 1)", req.target_hidden)));
    }
    if req.node_count < 2 || !(req.area_side > 0.0) || !(req.tolerance >= 0.0) {
        return Err(TopologyError::InvalidParameters("node_count >= 2, area_side > 0, tolerance >= 0".into()));
    }
    let positions = random_positions(req.node_count, req.area_side, req.seed);
    let probe = |radius: f64| -> Option<Topology> {
        Topology::from_positions(positions.clone(), req.area_side, radius, req.single_hop, req.seed).ok()
    };
    let score = |t: &Topology| t.tree_hidden_percentage(req.links, req.formula);

    let mut best: Option<Calibration> = None;
    let consider = |radius: f64, topology: Topology, probes: usize, best: &mut Option<Calibration>| -> bool {
        let achieved = score(&topology);
        let err = (achieved - req.target_hidden).abs();
        if best.as_ref().is_none_or(|b| err < (b.achieved - req.target_hidden).abs()) {
            *best = Some(Calibration { radius, achieved, probes, topology });
        }
        err <= req.tolerance
    };

    let mut lo = req.area_side / 50.0;
    let mut hi = req.area_side * std::f64::consts::SQRT_2;
    let mut probes = 1;
    if let Some(t) = probe(hi) {
        if consider(hi, t, probes, &mut best) {
            return Ok(best.expect("just stored"));
        }
    }
    while probes < MAX_PROBES {
        probes += 1;
        let mid = 0.5 * (lo + hi);
        match probe(mid) {
            None => lo = mid,
            Some(t) => {
                let achieved = score(&t);
                if consider(mid, t, probes, &mut best) {
                    let mut found = best.expect("just stored");
                    found.probes = probes;
                    return Ok(found);
                }
                if achieved > req.target_hidden {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
    }
    match best {
        Some(b) => {
            Err(TopologyError::TargetUnreachable { target: req.target_hidden, radius: b.radius, achieved: b.achieved })
        }
        None => Err(TopologyError::DisconnectedTopology { unreachable: req.node_count - 1 }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    #[test]
    fn two_nodes_within_radius() {
        let t = Topology::generate_random(2, 10.0, 20.0, 42).unwrap();
        assert_eq!(t.neighbors(n(0)), &[n(1)]);
        assert_eq!(t.parent(n(1)), Some(n(0)));
        assert_eq!(t.layer(n(1)), 1);
        assert_eq!(t.node(n(0)).position, Position { x: 5.0, y: 5.0 });
    }

    #[test]
    fn five_node_adjacency_matches_pairwise_distances() {
        // Falls back to a larger radius if seed 7 happens to be disconnected
        // at 15 m; the oracle is the same either way.
        let positions = random_positions(5, 50.0, 7);
        let (topo, radius) = [15.0, 25.0, 40.0, 80.0]
            .iter()
            .find_map(|&r| Topology::generate_random(5, 50.0, r, 7).ok().map(|t| (t, r)))
            .unwrap();
        for i in 0..5u32 {
            for j in 0..5u32 {
                let d = positions[i as usize].distance(&positions[j as usize]);
                let expect = i != j && d <= radius;
                assert_eq!(topo.adjacent(n(i), n(j)), expect, "pair ({i},{j}) d={d}");
            }
        }
    }

    #[test]
    fn chain_tree() {
        let t = Topology::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(t.parent(n(1)), Some(n(0)));
        assert_eq!(t.parent(n(2)), Some(n(1)));
        assert_eq!((t.layer(n(0)), t.layer(n(1)), t.layer(n(2))), (0, 1, 2));
    }

    #[test]
    fn star_tree_is_one_layer() {
        let t = Topology::from_edges(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]).unwrap();
        assert!((1..5).all(|i| t.layer(n(i)) == 1));
        assert_eq!(t.children(n(0)), &[n(1), n(2), n(3), n(4)]);
    }

    #[test]
    fn tiebreak_prefers_lowest_parent() {
        // 3 and 5 are both layer 1; 6 hears both.
        let t = Topology::from_edges(7, &[(0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (3, 6), (5, 6)]).unwrap();
        assert_eq!(t.parent(n(6)), Some(n(3)));
        assert_eq!(t.layer(n(6)), 2);
    }

    #[test]
    fn disconnected_is_an_error() {
        let err = Topology::from_edges(4, &[(0, 1), (2, 3)]).unwrap_err();
        assert_eq!(err, TopologyError::DisconnectedTopology { unreachable: 2 });
    }

    #[test]
    fn hidden_ratio_on_complete_graph_is_zero() {
        let t = Topology::from_edges(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]).unwrap();
        for (s, r) in t.tree_links(LinkSet::Both) {
            assert_eq!(t.link_hidden_ratio(s, r).unwrap(), 0.0);
        }
    }

    #[test]
    fn hidden_ratio_star_leaf_to_hub() {
        // hub c = 0, leaves a=1, b=2, d=3
        let t = Topology::from_edges(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        assert_eq!(t.link_hidden_ratio(n(1), n(0)).unwrap(), 1.0);
        assert_eq!(t.network_hidden_percentage(&t.tree_links(LinkSet::Uplink)).unwrap(), 1.0);
        // Downlink: the leaf has no other neighbour.
        assert_eq!(t.link_hidden_ratio(n(0), n(1)).unwrap(), 0.0);
    }

    #[test]
    fn hidden_ratio_hand_enumerated() {
        // a=0, b=1, c=2, d=3; edges a-b, b-c, b-d, a-c. Link a -> b.
        let t = Topology::from_edges(4, &[(0, 1), (1, 2), (1, 3), (0, 2)]).unwrap();
        assert_eq!(t.link_hidden_ratio(n(0), n(1)).unwrap(), 0.5);
        // Literal reading: S = {c}, R = {c, d}; S \ R is empty.
        assert_eq!(t.link_hidden_ratio_with(n(0), n(1), HnpFormula::AsWritten).unwrap(), 0.0);
    }

    #[test]
    fn not_a_link_and_empty_set() {
        let t = Topology::from_edges(3, &[(0, 1), (0, 2)]).unwrap();
        assert_eq!(t.link_hidden_ratio(n(1), n(2)), Err(TopologyError::NotALink { sender: n(1), receiver: n(2) }));
        assert_eq!(t.network_hidden_percentage(&[]), Err(TopologyError::EmptyLinkSet));
    }

    #[test]
    fn generation_is_reproducible() {
        let a = Topology::generate_random(60, 100.0, 30.0, 11).unwrap();
        let b = Topology::generate_random(60, 100.0, 30.0, 11).unwrap();
        assert_eq!(a, b);
        let c = Topology::generate_random(60, 100.0, 30.0, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_hop_links_everyone_to_coordinator() {
        let t = Topology::generate(30, 100.0, 5.0, true, 3).unwrap();
        assert_eq!(t.neighbors(NodeId::COORDINATOR).len(), 29);
        assert!(t.ids().skip(1).all(|id| t.layer(id) == 1));
    }

    #[test]
    fn calibrate_zero_target_uses_full_diagonal() {
        let req = CalibrationRequest {
            node_count: 40,
            area_side: 100.0,
            seed: 1,
            target_hidden: 0.0,
            tolerance: 0.0,
            single_hop: false,
            links: LinkSet::Both,
            formula: HnpFormula::ReceiverCentric,
        };
        let cal = calibrate_radius(&req).unwrap();
        assert!(cal.radius >= 100.0 * std::f64::consts::SQRT_2);
        assert_eq!(cal.achieved, 0.0);
    }

    #[test]
    fn calibrate_rejects_bad_target() {
        let req = CalibrationRequest {
            node_count: 10,
            area_side: 10.0,
            seed: 1,
            target_hidden: 1.0,
            tolerance: 0.01,
            single_hop: false,
            links: LinkSet::Both,
            formula: HnpFormula::ReceiverCentric,
        };
        assert!(matches!(calibrate_radius(&req), Err(TopologyError::InvalidParameters(_))));
    }

    #[test]
    fn document_round_trip() {
        let t = Topology::generate_random(25, 60.0, 25.0, 5).unwrap().with_traffic_rate(2.0);
        let json = serde_json::to_string(&t.to_document()).unwrap();
        let doc: TopologyDocument = serde_json::from_str(&json).unwrap();
        assert_eq!(Topology::from_document(&doc).unwrap(), t);
    }

    #[test]
    fn document_rejects_asymmetric_adjacency() {
        let t = Topology::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let mut doc = t.to_document();
        doc.nodes[0].neighbors.push(n(2));
        assert!(matches!(Topology::from_document(&doc), Err(TopologyError::Document(_))));
    }
}
