//! Incrementally built topological map: node features, edge distances, hop
//! queries and the global action space.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose, Vec3};

/// Environment viewpoint identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    /// The padded stop action. Never a real viewpoint.
    pub const STOP: NodeId = NodeId(u32::MAX);

    pub fn is_stop(self) -> bool {
        self == Self::STOP
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_stop() {
            write!(f, "stop")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Visited,
    Current,
    Unexplored,
    Stop,
}

/// Point cloud captured at a node, expressed in that node's egocentric
/// frame, together with the frame's world pose.
#[derive(Clone, Debug)]
pub struct NodeCache {
    pub pose: Pose,
    pub cloud: Arc<PointCloud>,
}

/// Which panorama view of which node observed a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewSource {
    pub node: NodeId,
    pub view: usize,
}

#[derive(Clone, Debug)]
pub struct TopoNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub position: Option<Vec3>,
    pub feature: Vec<f64>,
    pub last_visit_step: usize,
    pub obs_count: usize,
    pub pc_cache: Option<NodeCache>,
    /// Every view that contributed to an unexplored node's running mean.
    pub view_sources: Vec<ViewSource>,
}

/// Resolves viewpoint ids to world positions.
pub trait NodeLookup {
    fn node_position(&self, id: NodeId) -> Option<Vec3>;
}

impl NodeLookup for HashMap<NodeId, Vec3> {
    fn node_position(&self, id: NodeId) -> Option<Vec3> {
        self.get(&id).copied()
    }
}

/// A candidate seen from the current node and the view that sees it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub id: NodeId,
    pub view_index: usize,
}

/// Everything the agent perceives at one step.
#[derive(Clone, Debug)]
pub struct StepObservation<'a> {
    pub step: usize,
    pub current: NodeId,
    /// Egocentric frame of the current node in world coordinates.
    pub pose: Pose,
    /// `K` contextual view embeddings, each of the map's feature dimension.
    pub pano: &'a [Vec<f64>],
    pub cloud: Arc<PointCloud>,
    pub candidates: &'a [Candidate],
}

#[derive(Clone, Debug)]
pub struct TopoMap {
    dim: usize,
    nodes: Vec<TopoNode>,
    index: HashMap<NodeId, usize>,
    adjacency: Vec<Vec<(usize, f64)>>,
    current: Option<usize>,
    action_order: Vec<NodeId>,
}

impl TopoMap {
    /// Map holding only the stop node; `dim` is the node feature size.
    pub fn new(dim: usize) -> Self {
        let stop = TopoNode {
            id: NodeId::STOP,
            kind: NodeKind::Stop,
            position: None,
            feature: vec![0.0; dim],
            last_visit_step: 0,
            obs_count: 0,
            pc_cache: None,
            view_sources: Vec::new(),
        };
        Self {
            dim,
            nodes: vec![stop],
            index: HashMap::from([(NodeId::STOP, 0)]),
            adjacency: vec![Vec::new()],
            current: None,
            action_order: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn current(&self) -> Option<NodeId> {
        self.current.map(|i| self.nodes[i].id)
    }

    pub fn node(&self, id: NodeId) -> Option<&TopoNode> {
        self.index.get(&id).map(|&i| &self.nodes[i])
    }

    /// All nodes in insertion order; the stop node comes first.
    pub fn nodes(&self) -> &[TopoNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1
    }

    pub fn insertion_index(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn neighbors(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.index.get(&id).into_iter().flat_map(move |&i| self.adjacency[i].iter().map(|(j, _)| self.nodes[*j].id))
    }

    pub fn edge(&self, a: NodeId, b: NodeId) -> Option<f64> {
        let (ia, ib) = (*self.index.get(&a)?, *self.index.get(&b)?);
        self.adjacency[ia].iter().find(|(j, _)| *j == ib).map(|(_, d)| *d)
    }

    /// Undirected edges `(a, b, distance)` with `a` inserted before `b`.
    pub fn edges(&self) -> Vec<(NodeId, NodeId, f64)> {
        let mut out = Vec::new();
        for (i, adj) in self.adjacency.iter().enumerate() {
            for &(j, d) in adj {
                if i < j {
                    out.push((self.nodes[i].id, self.nodes[j].id, d));
                }
            }
        }
        out
    }

    fn insert_node(&mut self, id: NodeId, position: Vec3) -> usize {
        if let Some(&i) = self.index.get(&id) {
            return i;
        }
        let i = self.nodes.len();
        self.nodes.push(TopoNode {
            id,
            kind: NodeKind::Unexplored,
            position: Some(position),
            feature: vec![0.0; self.dim],
            last_visit_step: 0,
            obs_count: 0,
            pc_cache: None,
            view_sources: Vec::new(),
        });
        self.adjacency.push(Vec::new());
        self.index.insert(id, i);
        i
    }

    fn add_edge(&mut self, a: usize, b: usize, d: f64) {
        if a == b || self.adjacency[a].iter().any(|(j, _)| *j == b) {
            return;
        }
        self.adjacency[a].push((b, d));
        self.adjacency[b].push((a, d));
    }

    /// Integrates one step of perception.
    ///
    /// The current node takes the mean of the panorama embeddings (replacing
    /// any older value) and the point cloud cache. Each candidate that has
    /// not been visited folds the view embedding that sees it into a running
    /// mean.
    pub fn update(&mut self, world: &impl NodeLookup, obs: &StepObservation<'_>) -> Result<()> {
        if obs.current.is_stop() {
            return Err(Error::InvalidNode(obs.current));
        }
        let cur_pos = world.node_position(obs.current).ok_or(Error::InvalidNode(obs.current))?;
        let mut cand_pos = Vec::with_capacity(obs.candidates.len());
        for c in obs.candidates {
            if c.id.is_stop() || c.id == obs.current {
                return Err(Error::InvalidNode(c.id));
            }
            cand_pos.push(world.node_position(c.id).ok_or(Error::InvalidNode(c.id))?);
            if c.view_index >= obs.pano.len() {
                return Err(Error::Dimension(format!(
                    "candidate {} seen by view {} of a {}-view panorama",
                    c.id,
                    c.view_index,
                    obs.pano.len()
                )));
            }
        }
        if obs.pano.is_empty() || obs.pano.iter().any(|e| e.len() != self.dim) {
            return Err(Error::Dimension(format!(
                "panorama embeddings must be non-empty rows of dimension {}",
                self.dim
            )));
        }

        let k = obs.pano.len() as f64;
        let mut mean = vec![0.0; self.dim];
        for e in obs.pano {
            for (m, x) in mean.iter_mut().zip(e) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= k);

        if let Some(prev) = self.current {
            self.nodes[prev].kind = NodeKind::Visited;
        }
        let ci = self.insert_node(obs.current, cur_pos);
        {
            let node = &mut self.nodes[ci];
            node.kind = NodeKind::Current;
            node.feature = mean;
            node.last_visit_step = obs.step;
            node.pc_cache = Some(NodeCache { pose: obs.pose, cloud: obs.cloud.clone() });
        }
        self.current = Some(ci);

        for (c, pos) in obs.candidates.iter().zip(cand_pos) {
            let j = self.insert_node(c.id, pos);
            if !self.action_order.contains(&c.id) {
                self.action_order.push(c.id);
            }
            let node = &mut self.nodes[j];
            if node.kind == NodeKind::Unexplored {
                let n = node.obs_count as f64;
                for (f, e) in node.feature.iter_mut().zip(&obs.pano[c.view_index]) {
                    *f = (*f * n + e) / (n + 1.0);
                }
                node.obs_count += 1;
                node.view_sources.push(ViewSource { node: obs.current, view: c.view_index });
            }
            let d = (pos - cur_pos).norm();
            if d > 0.0 {
                self.add_edge(ci, j, d);
            }
        }
        Ok(())
    }

    /// Stop first, then every node ever offered as a candidate in
    /// first-observation order, minus the current node.
    pub fn global_action_space(&self) -> Vec<NodeId> {
        let cur = self.current();
        std::iter::once(NodeId::STOP).chain(self.action_order.iter().copied().filter(|id| Some(*id) != cur)).collect()
    }

    fn is_explored(&self, i: usize) -> bool {
        matches!(self.nodes[i].kind, NodeKind::Visited | NodeKind::Current)
    }

    fn explored_index(&self, id: NodeId) -> Result<usize> {
        match self.index.get(&id) {
            Some(&i) if self.is_explored(i) => Ok(i),
            _ => Err(Error::InvalidNode(id)),
        }
    }

    /// BFS hop counts from `from` over the visited subgraph, by insertion
    /// index. Unreached or unexplored nodes are `None`.
    pub fn hops_from(&self, from: NodeId) -> Result<Vec<Option<usize>>> {
        let s = self.explored_index(from)?;
        let mut hops = vec![None; self.nodes.len()];
        hops[s] = Some(0);
        let mut queue = VecDeque::from([s]);
        while let Some(i) = queue.pop_front() {
            let h = hops[i].unwrap_or(0);
            for &(j, _) in &self.adjacency[i] {
                if hops[j].is_none() && self.is_explored(j) {
                    hops[j] = Some(h + 1);
                    queue.push_back(j);
                }
            }
        }
        Ok(hops)
    }

    pub fn hop_distance(&self, i: NodeId, j: NodeId) -> Result<usize> {
        let target = self.explored_index(j)?;
        self.hops_from(i)?[target].ok_or(Error::Unreachable { from: i, to: j })
    }

    /// Pairwise Euclidean distances between the listed nodes; rows and
    /// columns of the stop node (or position-less nodes) are zero.
    pub fn spatial_affinity(&self, order: &[NodeId]) -> Vec<Vec<f64>> {
        let pos: Vec<Option<Vec3>> = order.iter().map(|id| self.node(*id).and_then(|n| n.position)).collect();
        pos.iter()
            .map(|a| {
                pos.iter()
                    .map(|b| match (a, b) {
                        (Some(a), Some(b)) => (a - b).norm(),
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect()
    }

    /// Metric shortest path through visited nodes (the endpoint itself may
    /// be unexplored). Equal-cost alternatives prefer predecessors inserted
    /// earlier.
    pub fn shortest_path(&self, from: NodeId, to: NodeId) -> Result<Vec<NodeId>> {
        let s = *self.index.get(&from).ok_or(Error::InvalidNode(from))?;
        let t = *self.index.get(&to).ok_or(Error::InvalidNode(to))?;
        if s == t {
            return Ok(vec![from]);
        }
        let n = self.nodes.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![usize::MAX; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        dist[s] = 0.0;
        heap.push(HeapEntry { cost: 0.0, index: s });
        while let Some(HeapEntry { cost, index: i }) = heap.pop() {
            if done[i] {
                continue;
            }
            done[i] = true;
            if i == t {
                break;
            }
            if i != s && !self.is_explored(i) {
                continue;
            }
            for &(j, d) in &self.adjacency[i] {
                if done[j] || (j != t && !self.is_explored(j)) {
                    continue;
                }
                let nd = cost + d;
                if nd < dist[j] || (nd == dist[j] && i < prev[j]) {
                    dist[j] = nd;
                    prev[j] = i;
                    heap.push(HeapEntry { cost: nd, index: j });
                }
            }
        }
        if !dist[t].is_finite() {
            return Err(Error::Unreachable { from, to });
        }
        let mut path = vec![t];
        let mut cur = t;
        while cur != s {
            cur = prev[cur];
            path.push(cur);
        }
        path.reverse();
        Ok(path.into_iter().map(|i| self.nodes[i].id).collect())
    }

    /// Path length along existing edges.
    pub fn path_length(&self, path: &[NodeId]) -> Option<f64> {
        path.windows(2).map(|w| self.edge(w[0], w[1])).sum()
    }

    pub fn to_doc(&self) -> TopoMapDoc {
        TopoMapDoc {
            format: TopoMapDoc::FORMAT.to_string(),
            version: TopoMapDoc::VERSION,
            current: self.current(),
            nodes: self
                .nodes
                .iter()
                .map(|n| TopoNodeDoc {
                    id: n.id,
                    kind: n.kind,
                    position: n.position.map(|p| [p.x, p.y, p.z]),
                    last_visit_step: n.last_visit_step,
                    obs_count: n.obs_count,
                })
                .collect(),
            edges: self.edges().into_iter().map(|(a, b, distance)| EdgeDoc { a, b, distance }).collect(),
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapEntry {
    cost: f64,
    index: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Text document form of a topological map: node ids, kinds and positions
/// plus the edge list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopoMapDoc {
    pub format: String,
    pub version: u32,
    pub current: Option<NodeId>,
    pub nodes: Vec<TopoNodeDoc>,
    pub edges: Vec<EdgeDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopoNodeDoc {
    pub id: NodeId,
    pub kind: NodeKind,
    pub position: Option<[f64; 3]>,
    pub last_visit_step: usize,
    pub obs_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeDoc {
    pub a: NodeId,
    pub b: NodeId,
    pub distance: f64,
}

impl TopoMapDoc {
    pub const FORMAT: &'static str = "bevnav-topomap";
    pub const VERSION: u32 = 1;

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topo map document serializes")
    }

    /// Parses and validates a document.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TopoMapDoc = serde_json::from_str(text)?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Decode(m));
        if self.format != Self::FORMAT || self.version != Self::VERSION {
            return bad(format!("unsupported document {} v{}", self.format, self.version));
        }
        let mut kinds = HashMap::new();
        for n in &self.nodes {
            if kinds.insert(n.id, n.kind).is_some() {
                return bad(format!("duplicate node {}", n.id));
            }
            if (n.kind == NodeKind::Stop) != n.id.is_stop() {
                return bad(format!("node {} has kind {:?}", n.id, n.kind));
            }
            match (n.kind, n.position) {
                (NodeKind::Stop, Some(_)) => return bad("stop node has a position".into()),
                (NodeKind::Stop, None) => {}
                (_, None) => return bad(format!("node {} lacks a position", n.id)),
                (_, Some(p)) if !p.iter().all(|v| v.is_finite()) => {
                    return bad(format!("node {} has a non-finite position", n.id))
                }
                _ => {}
            }
        }
        let currents: Vec<_> = self.nodes.iter().filter(|n| n.kind == NodeKind::Current).map(|n| n.id).collect();
        if currents.len() > 1 || currents.first().copied() != self.current {
            return bad("current node mismatch".into());
        }
        if kinds.get(&NodeId::STOP) != Some(&NodeKind::Stop) {
            return bad("missing stop node".into());
        }
        for e in &self.edges {
            if !(e.distance > 0.0 && e.distance.is_finite()) {
                return bad(format!("edge {}-{} has distance {}", e.a, e.b, e.distance));
            }
            for id in [e.a, e.b] {
                match kinds.get(&id) {
                    None => return bad(format!("edge endpoint {id} missing")),
                    Some(NodeKind::Stop) => return bad("edge touches the stop node".into()),
                    _ => {}
                }
            }
            if e.a == e.b {
                return bad(format!("self loop on {}", e.a));
            }
        }
        Ok(())
    }
}
