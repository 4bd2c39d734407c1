//! Procedurally generated indoor worlds standing in for scanned houses.
//!
//! A world is a grid of axis-aligned rectangular rooms joined by doorways.
//! Viewpoints are scattered inside rooms (plus one node on each side of every
//! doorway) and connected into a navigation graph. Observations are computed
//! by casting rays against the room layout: depth is the range to the first
//! wall, floor or ceiling, the semantic label is the class of the room the ray
//! ends in, and features are a class signature plus seeded noise.

use std::collections::BinaryHeap;
use std::f64::consts::{PI, TAU};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    lift_with_semantics, CameraIntrinsics, DepthGrid, FeatureGrid, PointCloud, Pose, SemanticSet, Vec3,
};
use crate::rng::substream;
use crate::topo_map::{Candidate, NodeId, NodeLookup};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;

const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];
const WORDS: [&str; 24] = [
    "go", "to", "the", "and", "stop", "walk", "through", "into", "then", "turn", "left", "right", "straight", "around",
    "wait", "there", "exit", "enter", "head", "past", "in", "room", "keep", "continue",
];
const CLASS_NAMES: [&str; 8] = ["kitchen", "bedroom", "bathroom", "hallway", "office", "dining", "lounge", "laundry"];

pub const SUCCESS_RADIUS: f64 = 3.0;
const MIN_EDGE: f64 = 0.5;
const MAX_EDGE: f64 = 5.0;
const MAX_DEGREE: usize = 6;
const DOOR_WIDTH: f64 = 1.0;
const DOOR_INSET: f64 = 0.75;

/// Generation knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub n_rooms: usize,
    pub nodes_per_room: usize,
    /// Feature dimension of the synthetic visual features.
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Panorama views per node, at uniform heading spacing.
    pub views: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub vfov: f64,
    pub max_range: f64,
    pub camera_height: f64,
    pub ceiling_height: f64,
    pub room_size_min: f64,
    pub room_size_max: f64,
    pub feature_noise: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            n_rooms: 4,
            nodes_per_room: 4,
            feature_dim: 32,
            num_classes: 8,
            views: 12,
            grid_h: 7,
            grid_w: 7,
            vfov: 60f64.to_radians(),
            max_range: 10.0,
            camera_height: 1.5,
            ceiling_height: 3.0,
            room_size_min: 4.0,
            room_size_max: 5.5,
            feature_noise: 0.1,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Generation(m.to_string()));
        if self.n_rooms < 2 {
            return fail("at least two rooms are required");
        }
        if self.nodes_per_room == 0 {
            return fail("nodes_per_room must be positive");
        }
        if self.num_classes == 0 || self.num_classes > SemanticSet::MAX_CLASSES {
            return fail("num_classes must lie in 1..=64");
        }
        if self.feature_dim == 0 || self.views == 0 {
            return fail("feature_dim and views must be positive");
        }
        if !(self.room_size_min >= 3.0 && self.room_size_min <= self.room_size_max) {
            return fail("room sizes must satisfy 3 <= min <= max");
        }
        if !(self.camera_height > 0.0 && self.camera_height < self.ceiling_height) {
            return fail("camera must sit between floor and ceiling");
        }
        if !(self.feature_noise >= 0.0) {
            return fail("feature_noise must be non-negative");
        }
        self.intrinsics().map_err(|e| Error::Generation(e.to_string()))?;
        Ok(())
    }

    /// One view covers `2π / K` horizontally so the panorama tiles.
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let hfov = (TAU / self.views.max(1) as f64).min(PI - 1e-6);
        CameraIntrinsics::new(self.grid_h, self.grid_w, hfov, self.vfov, self.max_range)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub id: usize,
    pub class: usize,
    pub row: usize,
    pub col: usize,
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Room {
    pub fn center(&self) -> [f64; 2] {
        [(self.min[0] + self.max[0]) / 2.0, (self.min[1] + self.max[1]) / 2.0]
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }
}

/// Opening in the wall shared by two rooms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Doorway {
    pub rooms: [usize; 2],
    pub center: [f64; 2],
    /// True when the wall runs along y (constant x).
    pub wall_along_y: bool,
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldNode {
    pub id: NodeId,
    pub position: [f64; 3],
    pub room: usize,
}

impl WorldNode {
    pub fn pos(&self) -> Vec3 {
        Vec3::new(self.position[0], self.position[1], self.position[2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldEdge {
    pub a: NodeId,
    pub b: NodeId,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub params: WorldParams,
    pub cols: usize,
    pub room_size: [f64; 2],
    pub rooms: Vec<Room>,
    pub doorways: Vec<Doorway>,
    pub nodes: Vec<WorldNode>,
    pub edges: Vec<WorldEdge>,
    pub vocab: Vec<String>,
    #[serde(skip)]
    adjacency: Vec<Vec<(usize, f64)>>,
}

/// One panorama view.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub heading: f64,
    /// Camera-to-world pose.
    pub pose: Pose,
    /// Whole-view feature (mean of the grid features).
    pub feature: Vec<f64>,
    pub grid: FeatureGrid,
    pub depth: DepthGrid,
    /// Room class per grid cell, row-major.
    pub semantics: Vec<usize>,
}

impl View {
    pub fn semantic_sets(&self) -> Vec<SemanticSet> {
        self.semantics.iter().map(|c| SemanticSet::single(*c)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub node: NodeId,
    pub views: Vec<View>,
}

impl Observation {
    /// Per-view headings and elevations (all views sit at elevation 0).
    pub fn view_angles(&self) -> Vec<[f64; 2]> {
        self.views.iter().map(|v| [v.heading, 0.0]).collect()
    }
}

/// Names for the fixed token table of a world with `num_classes` classes.
pub fn build_vocab(num_classes: usize) -> Vec<String> {
    SPECIAL_TOKENS.iter().chain(WORDS.iter()).map(|s| s.to_string()).chain((0..num_classes).map(class_name)).collect()
}

pub fn class_name(class: usize) -> String {
    CLASS_NAMES.get(class).map_or_else(|| format!("class{class}"), |s| s.to_string())
}

/// Class signature shared by every world, so class appearance transfers
/// across worlds.
fn class_signature(class: usize, dim: usize) -> Vec<f64> {
    let mut rng = substream(0x5eed_c1a5, "class-signature", &[class as u64, dim as u64]);
    let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut c = x;
        while self.0[c] != r {
            let next = self.0[c];
            self.0[c] = r;
            c = next;
        }
        r
    }
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra] = rb;
        true
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Frontier(f64, usize);

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

pub fn generate_world(seed: u64, params: &WorldParams) -> Result<World> {
    params.validate()?;
    const ATTEMPTS: u64 = 32;
    let mut last = None;
    for attempt in 0..ATTEMPTS {
        match try_generate(seed, attempt, params) {
            Ok(w) => return Ok(w),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Generation("no attempt made".into())))
}

fn try_generate(seed: u64, attempt: u64, params: &WorldParams) -> Result<World> {
    let mut rng = substream(seed, "world", &[attempt]);
    let n = params.n_rooms;
    let cols = (n as f64).sqrt().ceil() as usize;
    let w = rng.random_range(params.room_size_min..=params.room_size_max);
    let h = rng.random_range(params.room_size_min..=params.room_size_max);

    let mut classes: Vec<usize> = (0..params.num_classes).collect();
    classes.shuffle(&mut rng);
    let rooms: Vec<Room> = (0..n)
        .map(|i| {
            let (row, col) = (i / cols, i % cols);
            let class = if n <= params.num_classes { classes[i] } else { rng.random_range(0..params.num_classes) };
            Room {
                id: i,
                class,
                row,
                col,
                min: [col as f64 * w, row as f64 * h],
                max: [(col + 1) as f64 * w, (row + 1) as f64 * h],
            }
        })
        .collect();

    // doorways: random spanning tree over wall-sharing rooms plus extras
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let (ra, rb) = (&rooms[a], &rooms[b]);
            let horiz = ra.row == rb.row && ra.col.abs_diff(rb.col) == 1;
            let vert = ra.col == rb.col && ra.row.abs_diff(rb.row) == 1;
            if horiz || vert {
                pairs.push((a, b));
            }
        }
    }
    pairs.shuffle(&mut rng);
    let mut uf = UnionFind::new(n);
    let mut chosen = Vec::new();
    let mut extra = Vec::new();
    for &(a, b) in &pairs {
        if uf.union(a, b) {
            chosen.push((a, b));
        } else {
            extra.push((a, b));
        }
    }
    for p in extra {
        if rng.random_bool(0.3) {
            chosen.push(p);
        }
    }
    chosen.sort_unstable();
    let doorways: Vec<Doorway> = chosen
        .iter()
        .map(|&(a, b)| {
            let (ra, rb) = (&rooms[a], &rooms[b]);
            if ra.row == rb.row {
                let x = ra.max[0].min(rb.max[0]);
                let half = h / 2.0 - DOOR_WIDTH;
                let y = ra.center()[1] + rng.random_range(-half..=half);
                Doorway { rooms: [a, b], center: [x, y], wall_along_y: true, width: DOOR_WIDTH }
            } else {
                let y = ra.max[1].min(rb.max[1]);
                let half = w / 2.0 - DOOR_WIDTH;
                let x = ra.center()[0] + rng.random_range(-half..=half);
                Doorway { rooms: [a, b], center: [x, y], wall_along_y: false, width: DOOR_WIDTH }
            }
        })
        .collect();

    // per-room node placement: door nodes first, then free nodes
    let margin = 0.6;
    let min_sep = 1.0;
    let mut room_points: Vec<Vec<[f64; 2]>> = vec![Vec::new(); n];
    let mut door_pairs = Vec::new();
    for d in &doorways {
        let mut ends = [(0usize, 0usize); 2];
        for (k, &r) in d.rooms.iter().enumerate() {
            let c = rooms[r].center();
            let p = if d.wall_along_y {
                let dir = (c[0] - d.center[0]).signum();
                [d.center[0] + dir * DOOR_INSET, d.center[1]]
            } else {
                let dir = (c[1] - d.center[1]).signum();
                [d.center[0], d.center[1] + dir * DOOR_INSET]
            };
            if room_points[r].iter().any(|q| dist2(q, &p) < min_sep) {
                return Err(Error::Generation("doorways too close".into()));
            }
            room_points[r].push(p);
            ends[k] = (r, room_points[r].len() - 1);
        }
        door_pairs.push(ends);
    }
    for (r, room) in rooms.iter().enumerate() {
        let mut placed = 0;
        let mut tries = 0;
        while placed < params.nodes_per_room {
            tries += 1;
            if tries > 2000 {
                return Err(Error::Generation(format!(
                    "cannot place {} nodes in a {w:.1}x{h:.1} m room",
                    params.nodes_per_room
                )));
            }
            let p = [
                rng.random_range(room.min[0] + margin..room.max[0] - margin),
                rng.random_range(room.min[1] + margin..room.max[1] - margin),
            ];
            if room_points[r].iter().all(|q| dist2(q, &p) >= min_sep) {
                room_points[r].push(p);
                placed += 1;
            }
        }
    }

    let mut nodes = Vec::new();
    let mut room_offsets = Vec::with_capacity(n);
    for (r, pts) in room_points.iter().enumerate() {
        room_offsets.push(nodes.len());
        for p in pts {
            nodes.push(WorldNode { id: NodeId(nodes.len() as u32), position: [p[0], p[1], 0.0], room: r });
        }
    }

    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut degree = vec![0usize; nodes.len()];
    let add = |a: usize, b: usize, edges: &mut Vec<(usize, usize)>, degree: &mut Vec<usize>| {
        let key = (a.min(b), a.max(b));
        if a != b && !edges.contains(&key) {
            edges.push(key);
            degree[a] += 1;
            degree[b] += 1;
        }
    };
    for (r, pts) in room_points.iter().enumerate() {
        let base = room_offsets[r];
        let m = pts.len();
        // Prim's minimum spanning tree inside the room
        let mut in_tree = vec![false; m];
        let mut best = vec![(f64::INFINITY, usize::MAX); m];
        best[0] = (0.0, usize::MAX);
        for _ in 0..m {
            let (i, _) = (0..m)
                .filter(|i| !in_tree[*i])
                .map(|i| (i, best[i].0))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("room has untreed nodes");
            in_tree[i] = true;
            if best[i].1 != usize::MAX {
                if best[i].0 > MAX_EDGE {
                    return Err(Error::Generation("room spanning edge too long".into()));
                }
                add(base + i, base + best[i].1, &mut edges, &mut degree);
            }
            for j in 0..m {
                let d = dist2(&pts[i], &pts[j]);
                if !in_tree[j] && d < best[j].0 {
                    best[j] = (d, i);
                }
            }
        }
        // densify with nearest neighbours under the degree cap
        for i in 0..m {
            let mut order: Vec<usize> = (0..m).filter(|j| *j != i).collect();
            order.sort_by(|a, b| dist2(&pts[i], &pts[*a]).total_cmp(&dist2(&pts[i], &pts[*b])));
            for &j in order.iter().take(2) {
                let d = dist2(&pts[i], &pts[j]);
                if d <= MAX_EDGE && degree[base + i] < MAX_DEGREE - 1 && degree[base + j] < MAX_DEGREE - 1 {
                    add(base + i, base + j, &mut edges, &mut degree);
                }
            }
        }
    }
    for ends in &door_pairs {
        let a = room_offsets[ends[0].0] + ends[0].1;
        let b = room_offsets[ends[1].0] + ends[1].1;
        add(a, b, &mut edges, &mut degree);
    }
    edges.sort_unstable();
    if degree.iter().any(|d| *d > MAX_DEGREE) {
        return Err(Error::Generation("degree cap exceeded".into()));
    }
    let edges: Vec<WorldEdge> = edges
        .into_iter()
        .map(|(a, b)| WorldEdge { a: nodes[a].id, b: nodes[b].id, distance: (nodes[a].pos() - nodes[b].pos()).norm() })
        .collect();
    if edges.iter().any(|e| e.distance < MIN_EDGE || e.distance > MAX_EDGE) {
        return Err(Error::Generation("edge length out of range".into()));
    }

    let mut world = World {
        format: World::FORMAT.to_string(),
        version: World::VERSION,
        seed,
        params: params.clone(),
        cols,
        room_size: [w, h],
        rooms,
        doorways,
        nodes,
        edges,
        vocab: build_vocab(params.num_classes),
        adjacency: Vec::new(),
    };
    world.rebuild_adjacency();
    if !world.is_connected() {
        return Err(Error::Generation("navigation graph is disconnected".into()));
    }
    Ok(world)
}

fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Where a cast ray ended.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub range: f64,
    pub room: usize,
}

impl World {
    pub const FORMAT: &'static str = "bevnav-world";
    pub const VERSION: u32 = 1;

    fn rebuild_adjacency(&mut self) {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            adj[e.a.0 as usize].push((e.b.0 as usize, e.distance));
            adj[e.b.0 as usize].push((e.a.0 as usize, e.distance));
        }
        self.adjacency = adj;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    /// Parses and validates a world document.
    pub fn from_json(text: &str) -> Result<World> {
        let mut w: World = serde_json::from_str(text)?;
        w.validate()?;
        w.rebuild_adjacency();
        if !w.is_connected() {
            return Err(Error::Decode("world graph is disconnected".into()));
        }
        Ok(w)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Decode(m));
        if self.format != Self::FORMAT || self.version != Self::VERSION {
            return bad(format!("unsupported document {} v{}", self.format, self.version));
        }
        self.params.validate().map_err(|e| Error::Decode(e.to_string()))?;
        if self.rooms.is_empty() || self.nodes.is_empty() {
            return bad("world needs rooms and nodes".into());
        }
        if self.cols == 0 || self.room_size.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("bad room grid".into());
        }
        for (i, r) in self.rooms.iter().enumerate() {
            if r.id != i || r.class >= self.params.num_classes {
                return bad(format!("room {i} is inconsistent"));
            }
            if r.row.checked_mul(self.cols).and_then(|x| x.checked_add(r.col)) != Some(i) || r.col >= self.cols {
                return bad(format!("room {i} is off the grid"));
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id.0 as usize != i || n.room >= self.rooms.len() {
                return bad(format!("node {i} is inconsistent"));
            }
            if !n.position.iter().all(|v| v.is_finite()) || !self.rooms[n.room].contains(n.position[0], n.position[1]) {
                return bad(format!("node {i} lies outside its room"));
            }
        }
        for d in &self.doorways {
            if d.rooms.iter().any(|r| *r >= self.rooms.len()) || !(d.width > 0.0) {
                return bad("bad doorway".into());
            }
        }
        let n = self.nodes.len();
        let mut degree = vec![0usize; n];
        for e in &self.edges {
            if e.a.0 as usize >= n || e.b.0 as usize >= n || e.a == e.b {
                return bad(format!("edge {}-{} is invalid", e.a, e.b));
            }
            if !(e.distance >= MIN_EDGE && e.distance <= MAX_EDGE) {
                return bad(format!("edge {}-{} has length {}", e.a, e.b, e.distance));
            }
            degree[e.a.0 as usize] += 1;
            degree[e.b.0 as usize] += 1;
        }
        if degree.iter().any(|d| *d > MAX_DEGREE) {
            return bad("degree cap exceeded".into());
        }
        if self.vocab != build_vocab(self.params.num_classes) {
            return bad("vocabulary does not match the class count".into());
        }
        Ok(())
    }

    pub fn is_connected(&self) -> bool {
        let n = self.nodes.len();
        let mut uf = UnionFind::new(n);
        for e in &self.edges {
            uf.union(e.a.0 as usize, e.b.0 as usize);
        }
        let root = uf.find(0);
        (0..n).all(|i| uf.find(i) == root)
    }

    pub fn node(&self, id: NodeId) -> Result<&WorldNode> {
        self.nodes.get(id.0 as usize).ok_or(Error::InvalidNode(id))
    }

    pub fn position(&self, id: NodeId) -> Result<Vec3> {
        Ok(self.node(id)?.pos())
    }

    pub fn neighbors(&self, id: NodeId) -> impl Iterator<Item = (NodeId, f64)> + '_ {
        self.adjacency.get(id.0 as usize).into_iter().flatten().map(|(j, d)| (NodeId(*j as u32), *d))
    }

    pub fn edge(&self, a: NodeId, b: NodeId) -> Option<f64> {
        self.neighbors(a).find(|(j, _)| *j == b).map(|(_, d)| d)
    }

    pub fn num_classes(&self) -> usize {
        self.params.num_classes
    }

    pub fn token(&self, word: &str) -> u32 {
        self.vocab.iter().position(|w| w == word).map_or(UNK, |i| i as u32)
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens.iter().map(|t| self.vocab.get(*t as usize).map_or("[UNK]", |s| s.as_str())).collect::<Vec<_>>().join(" ")
    }

    pub fn room_at(&self, x: f64, y: f64) -> Option<usize> {
        let [w, h] = self.room_size;
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let (col, row) = ((x / w) as usize, (y / h) as usize);
        if col >= self.cols {
            return None;
        }
        let id = row * self.cols + col;
        (id < self.rooms.len()).then_some(id)
    }

    fn room_by_cell(&self, row: i64, col: i64) -> Option<usize> {
        if row < 0 || col < 0 || col as usize >= self.cols {
            return None;
        }
        let id = row as usize * self.cols + col as usize;
        (id < self.rooms.len()).then_some(id)
    }

    fn doorway_between(&self, a: usize, b: usize, along: f64) -> bool {
        self.doorways.iter().any(|d| {
            let same = (d.rooms[0] == a && d.rooms[1] == b) || (d.rooms[0] == b && d.rooms[1] == a);
            let c = if d.wall_along_y { d.center[1] } else { d.center[0] };
            same && (along - c).abs() <= d.width / 2.0
        })
    }

    /// Casts a unit-direction ray from `origin` through the room layout.
    pub fn cast_ray(&self, origin: &Vec3, dir: &Vec3) -> RayHit {
        let p = &self.params;
        let t_vert = if dir.z < -1e-12 {
            origin.z / -dir.z
        } else if dir.z > 1e-12 {
            (p.ceiling_height - origin.z) / dir.z
        } else {
            f64::INFINITY
        };
        let mut room = self.room_at(origin.x, origin.y).unwrap_or(0);
        loop {
            let r = &self.rooms[room];
            let tx = if dir.x > 1e-15 {
                (r.max[0] - origin.x) / dir.x
            } else if dir.x < -1e-15 {
                (r.min[0] - origin.x) / dir.x
            } else {
                f64::INFINITY
            };
            let ty = if dir.y > 1e-15 {
                (r.max[1] - origin.y) / dir.y
            } else if dir.y < -1e-15 {
                (r.min[1] - origin.y) / dir.y
            } else {
                f64::INFINITY
            };
            let t_exit = tx.min(ty);
            let t_end = t_vert.min(p.max_range);
            if t_end <= t_exit {
                return RayHit { range: t_end, room };
            }
            let hit = origin + dir * t_exit;
            let (dr, dc, along) = if tx <= ty {
                (0, if dir.x > 0.0 { 1 } else { -1 }, hit.y)
            } else {
                (if dir.y > 0.0 { 1 } else { -1 }, 0, hit.x)
            };
            match self.room_by_cell(r.row as i64 + dr, r.col as i64 + dc) {
                Some(next) if self.doorway_between(room, next, along) => room = next,
                _ => return RayHit { range: t_exit, room },
            }
        }
    }

    /// World-frame heading of panorama view `k`.
    pub fn view_heading(&self, k: usize) -> f64 {
        TAU * k as f64 / self.params.views as f64
    }

    /// Index of the view whose heading is closest to `bearing`.
    pub fn view_for_bearing(&self, bearing: f64) -> usize {
        let k = self.params.views as f64;
        ((bearing.rem_euclid(TAU) / TAU * k).round() as usize) % self.params.views
    }

    fn room_signature(&self, room: usize) -> Vec<f64> {
        let dim = self.params.feature_dim;
        let mut sig = class_signature(self.rooms[room].class, dim);
        let mut rng = substream(self.seed, "room-signature", &[room as u64]);
        for s in sig.iter_mut() {
            *s += 0.15 / (dim as f64).sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        sig
    }

    /// Deterministic panorama at a node.
    pub fn observe(&self, id: NodeId) -> Result<Observation> {
        let node = self.node(id)?;
        let p = &self.params;
        let intr = p.intrinsics()?;
        let eye = Vec3::new(node.position[0], node.position[1], node.position[2] + p.camera_height);
        let signatures: Vec<Vec<f64>> = (0..self.rooms.len()).map(|r| self.room_signature(r)).collect();
        let dim = p.feature_dim;
        let noise_scale = p.feature_noise;
        let mut views = Vec::with_capacity(p.views);
        for k in 0..p.views {
            let heading = self.view_heading(k);
            let pose = Pose::from_yaw(heading, eye);
            let mut rng = substream(self.seed, "observe", &[id.0 as u64, k as u64]);
            let cells = p.grid_h * p.grid_w;
            let mut depth = Vec::with_capacity(cells);
            let mut semantics = Vec::with_capacity(cells);
            let mut grid = Vec::with_capacity(cells * dim);
            let mut mean = vec![0.0; dim];
            for row in 0..p.grid_h {
                for col in 0..p.grid_w {
                    let dir = pose.apply_vector(&intr.ray(row, col));
                    let hit = self.cast_ray(&eye, &dir);
                    depth.push(hit.range);
                    semantics.push(self.rooms[hit.room].class);
                    for (m, s) in mean.iter_mut().zip(&signatures[hit.room]) {
                        let f = s + noise_scale * rng.sample::<f64, _>(StandardNormal);
                        grid.push(f);
                        *m += f;
                    }
                }
            }
            mean.iter_mut().for_each(|m| *m /= cells as f64);
            views.push(View {
                heading,
                pose,
                feature: mean,
                grid: FeatureGrid::new(p.grid_h, p.grid_w, dim, grid)?,
                depth: DepthGrid::new(p.grid_h, p.grid_w, depth, p.max_range)?,
                semantics,
            });
        }
        Ok(Observation { node: id, views })
    }

    /// Lifts every view of `obs` into one cloud expressed in `frame`
    /// (a world pose, typically the agent's egocentric frame at the node).
    pub fn lift_observation(&self, obs: &Observation, frame: &Pose) -> Result<PointCloud> {
        let intr = self.params.intrinsics()?;
        let to_frame = frame.inverse();
        let mut cloud = PointCloud::with_capacity(self.params.feature_dim, obs.views.len() * intr.grid_h * intr.grid_w);
        for view in &obs.views {
            let sem = view.semantic_sets();
            let pose = to_frame.compose(&view.pose);
            cloud.extend(&lift_with_semantics(&view.grid, &view.depth, Some(&sem), &intr, &pose)?)?;
        }
        Ok(cloud)
    }

    /// Graph neighbours of a node with the panorama view that sees each.
    pub fn candidates(&self, id: NodeId) -> Result<Vec<Candidate>> {
        let here = self.position(id)?;
        Ok(self
            .neighbors(id)
            .map(|(j, _)| {
                let there = self.nodes[j.0 as usize].pos();
                let bearing = (there.y - here.y).atan2(there.x - here.x);
                Candidate { id: j, view_index: self.view_for_bearing(bearing) }
            })
            .collect())
    }

    /// Single-source Dijkstra distances over the navigation graph.
    pub fn distances_from(&self, source: NodeId) -> Result<Vec<f64>> {
        self.node(source)?;
        Ok(self.dijkstra(source).0)
    }

    fn dijkstra(&self, source: NodeId) -> (Vec<f64>, Vec<usize>) {
        let n = self.nodes.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![usize::MAX; n];
        let s = source.0 as usize;
        dist[s] = 0.0;
        let mut heap = BinaryHeap::from([Frontier(0.0, s)]);
        while let Some(Frontier(d, i)) = heap.pop() {
            if d > dist[i] {
                continue;
            }
            for &(j, w) in &self.adjacency[i] {
                let nd = d + w;
                if nd < dist[j] || (nd == dist[j] && i < prev[j]) {
                    dist[j] = nd;
                    prev[j] = i;
                    heap.push(Frontier(nd, j));
                }
            }
        }
        (dist, prev)
    }

    pub fn shortest_path(&self, from: NodeId, to: NodeId) -> Result<Vec<NodeId>> {
        self.node(from)?;
        self.node(to)?;
        let (dist, prev) = self.dijkstra(from);
        let t = to.0 as usize;
        if !dist[t].is_finite() {
            return Err(Error::Unreachable { from, to });
        }
        let mut path = vec![to];
        let mut cur = t;
        while cur != from.0 as usize {
            cur = prev[cur];
            path.push(NodeId(cur as u32));
        }
        path.reverse();
        Ok(path)
    }

    pub fn shortest_distance(&self, from: NodeId, to: NodeId) -> Result<f64> {
        let d = self.distances_from(from)?;
        self.node(to)?;
        Ok(d[to.0 as usize])
    }

    /// Length of a node sequence along graph edges; `None` if two consecutive
    /// nodes are not adjacent.
    pub fn path_length(&self, path: &[NodeId]) -> Option<f64> {
        path.windows(2).map(|w| self.edge(w[0], w[1])).sum()
    }
}

impl NodeLookup for World {
    fn node_position(&self, id: NodeId) -> Option<Vec3> {
        self.nodes.get(id.0 as usize).map(|n| n.pos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeKind {
    /// Expert follows the shortest path.
    Goal,
    /// Expert detours through one or two extra waypoints.
    Fidelity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u64,
    pub kind: EpisodeKind,
    pub start: NodeId,
    pub start_heading: f64,
    pub target: NodeId,
    pub expert_path: Vec<NodeId>,
    pub instruction: Vec<u32>,
    pub success_radius: f64,
}

pub fn generate_episode(world: &World, seed: u64, kind: EpisodeKind) -> Result<Episode> {
    if world.rooms.len() < 2 {
        return Err(Error::Generation("episodes need at least two rooms".into()));
    }
    let mut rng = substream(world.seed, "episode", &[seed]);
    let target_room = rng.random_range(0..world.rooms.len());
    let c = world.rooms[target_room].center();
    let target = world
        .nodes
        .iter()
        .filter(|n| n.room == target_room)
        .min_by(|a, b| {
            dist2(&[a.position[0], a.position[1]], &c).total_cmp(&dist2(&[b.position[0], b.position[1]], &c))
        })
        .map(|n| n.id)
        .ok_or_else(|| Error::Generation("empty room".into()))?;
    let starts: Vec<NodeId> = world.nodes.iter().filter(|n| n.room != target_room).map(|n| n.id).collect();
    let start = *starts.choose(&mut rng).ok_or_else(|| Error::Generation("no start candidates".into()))?;
    let start_heading = world.view_heading(rng.random_range(0..world.params.views));

    let expert_path = match kind {
        EpisodeKind::Goal => world.shortest_path(start, target)?,
        EpisodeKind::Fidelity => {
            let n_way = rng.random_range(1..=2);
            let mut stops = vec![start];
            for _ in 0..n_way {
                let mut w;
                loop {
                    w = NodeId(rng.random_range(0..world.nodes.len()) as u32);
                    if w != start && w != target && Some(&w) != stops.last() {
                        break;
                    }
                }
                stops.push(w);
            }
            stops.push(target);
            let mut path = vec![start];
            for leg in stops.windows(2) {
                path.extend(world.shortest_path(leg[0], leg[1])?.into_iter().skip(1));
            }
            path
        }
    };
    let instruction = describe_path(world, &expert_path, start_heading, &mut rng);
    Ok(Episode {
        id: seed,
        kind,
        start,
        start_heading,
        target,
        expert_path,
        instruction,
        success_radius: SUCCESS_RADIUS,
    })
}

/// Templated instruction naming the rooms the path passes through.
fn describe_path(world: &World, path: &[NodeId], heading: f64, rng: &mut impl Rng) -> Vec<u32> {
    let mut rooms: Vec<usize> = Vec::new();
    for id in path {
        let r = world.nodes[id.0 as usize].room;
        if rooms.last() != Some(&r) {
            rooms.push(r);
        }
    }
    let class = |r: usize| class_name(world.rooms[r].class);
    let mut words: Vec<String> = Vec::new();
    let mut push = |s: &str| words.extend(s.split_whitespace().map(str::to_string));

    if path.len() >= 2 {
        let a = world.nodes[path[0].0 as usize].pos();
        let b = world.nodes[path[1].0 as usize].pos();
        let rel = wrap_angle((b.y - a.y).atan2(b.x - a.x) - heading);
        let turn = if rel.abs() < PI / 4.0 {
            "go straight and"
        } else if rel.abs() > 3.0 * PI / 4.0 {
            "turn around and"
        } else if rel > 0.0 {
            "turn left and"
        } else {
            "turn right and"
        };
        push(turn);
    }
    if rooms.len() > 1 && rng.random_bool(0.5) {
        push(&format!("exit the {} room", class(rooms[0])));
        push("then");
    }
    let target_room = *rooms.last().expect("path is non-empty");
    let middle = if rooms.len() > 2 { &rooms[1..rooms.len() - 1] } else { &[][..] };
    if middle.is_empty() {
        push(&format!("go to the {}", class(target_room)));
    } else {
        push(&format!("walk through the {}", class(middle[0])));
        for r in &middle[1..] {
            push(&format!("then the {}", class(*r)));
        }
        push(&format!("into the {}", class(target_room)));
    }
    push(["and stop", "then stop", "and wait there"][rng.random_range(0..3)]);

    std::iter::once(CLS).chain(words.iter().map(|w| world.token(w))).chain(std::iter::once(SEP)).collect()
}

/// Versioned on-disk collection of episodes for one world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSet {
    pub format: String,
    pub version: u32,
    pub world_seed: u64,
    pub episodes: Vec<Episode>,
}

impl EpisodeSet {
    pub const FORMAT: &'static str = "bevnav-episodes";
    pub const VERSION: u32 = 1;

    pub fn new(world_seed: u64, episodes: Vec<Episode>) -> Self {
        Self { format: Self::FORMAT.into(), version: Self::VERSION, world_seed, episodes }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("episode set serializes")
    }

    /// Parses an episode file, validating it against `world` when given.
    pub fn from_json(text: &str, world: Option<&World>) -> Result<Self> {
        let set: EpisodeSet = serde_json::from_str(text)?;
        if set.format != Self::FORMAT || set.version != Self::VERSION {
            return Err(Error::Decode(format!("unsupported document {} v{}", set.format, set.version)));
        }
        for ep in &set.episodes {
            if ep.expert_path.is_empty()
                || ep.expert_path[0] != ep.start
                || ep.expert_path.last() != Some(&ep.target)
                || !ep.start_heading.is_finite()
                || !(ep.success_radius > 0.0)
            {
                return Err(Error::Decode(format!("episode {} is inconsistent", ep.id)));
            }
        }
        if let Some(world) = world {
            if world.seed != set.world_seed {
                return Err(Error::Decode("episodes belong to a different world".into()));
            }
            for ep in &set.episodes {
                if world.path_length(&ep.expert_path).is_none() {
                    return Err(Error::Decode(format!("episode {} path is not connected", ep.id)));
                }
                if ep.instruction.iter().any(|t| *t as usize >= world.vocab.len()) {
                    return Err(Error::Decode(format!("episode {} has out-of-vocab tokens", ep.id)));
                }
            }
        }
        Ok(set)
    }
}
