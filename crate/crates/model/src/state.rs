//! Per-episode agent state: where the agent stands, what it has perceived,
//! and the encoder inputs derived from its topological and metric maps.

use std::collections::HashMap;
use std::sync::Arc;

use bevnav_core::env::World;
use bevnav_core::topo_map::{NodeCache, ViewSource};
use bevnav_core::{
    local_action_space, polar_embedding, transform_pointcloud, MapSpec, MetricMap, NodeId, NodeKind, PointCloud, Pose,
    StepObservation, TopoMap,
};

use crate::encoders::{CellInputs, NodeInputs};
use crate::error::{ModelError, Result};
use crate::tensor::Mat;

/// Raw panorama of one node: view features and `(heading, elevation)`.
#[derive(Clone, Debug)]
pub struct Pano {
    pub views: Mat,
    pub angles: Vec<[f64; 2]>,
    rows: Vec<Vec<f64>>,
}

/// Walks a world node by node, keeping the topological map up to date.
#[derive(Clone, Debug)]
pub struct Explorer<'w> {
    world: &'w World,
    topo: TopoMap,
    step: usize,
    heading: f64,
    path: Vec<NodeId>,
    panos: HashMap<NodeId, Arc<Pano>>,
    /// Lifted panorama of each observed node in world coordinates.
    clouds: HashMap<NodeId, Arc<PointCloud>>,
}

impl<'w> Explorer<'w> {
    /// Places the agent at `start` facing `heading` and takes the first
    /// observation.
    pub fn new(world: &'w World, start: NodeId, heading: f64) -> Result<Self> {
        world.node(start)?;
        let mut ex = Self {
            world,
            topo: TopoMap::new(world.params.feature_dim),
            step: 0,
            heading,
            path: vec![start],
            panos: HashMap::new(),
            clouds: HashMap::new(),
        };
        ex.observe()?;
        Ok(ex)
    }

    pub fn world(&self) -> &'w World {
        self.world
    }

    pub fn topo(&self) -> &TopoMap {
        &self.topo
    }

    pub fn current(&self) -> NodeId {
        *self.path.last().expect("path starts non-empty")
    }

    /// Every node the agent has stood on, including multi-hop transits.
    pub fn path(&self) -> &[NodeId] {
        &self.path
    }

    /// Number of observations taken so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn heading(&self) -> f64 {
        self.heading
    }

    /// Egocentric frame: at the current node, facing the last direction of
    /// travel.
    pub fn pose(&self) -> Pose {
        let pos = self.world.nodes[self.current().0 as usize].pos();
        Pose::from_yaw(self.heading, pos)
    }

    pub fn pano(&self, id: NodeId) -> Option<&Arc<Pano>> {
        self.panos.get(&id)
    }

    fn observe(&mut self) -> Result<()> {
        let cur = self.current();
        self.step += 1;
        if !self.panos.contains_key(&cur) {
            let obs = self.world.observe(cur)?;
            let rows: Vec<Vec<f64>> = obs.views.iter().map(|v| v.feature.clone()).collect();
            let pano = Pano { views: Mat::from_rows(&rows), angles: obs.view_angles(), rows };
            let cloud = self.world.lift_observation(&obs, &Pose::identity())?;
            self.panos.insert(cur, Arc::new(pano));
            self.clouds.insert(cur, Arc::new(cloud));
        }
        let pose = self.pose();
        let cloud = Arc::new(transform_pointcloud(&self.clouds[&cur], &pose.inverse()));
        let candidates = self.world.candidates(cur)?;
        self.topo.update(
            self.world,
            &StepObservation {
                step: self.step,
                current: cur,
                pose,
                pano: &self.panos[&cur].rows,
                cloud,
                candidates: &candidates,
            },
        )?;
        Ok(())
    }

    /// Travels to `target`: directly when adjacent, otherwise along the
    /// shortest route through visited nodes. Observes on arrival and returns
    /// the route including both ends.
    pub fn go_to(&mut self, target: NodeId) -> Result<Vec<NodeId>> {
        let cur = self.current();
        if target.is_stop() || target == cur {
            return Err(ModelError::Label(target.to_string()));
        }
        let route = route(&self.topo, cur, target)?;
        let a = self.world.position(route[route.len() - 2])?;
        let b = self.world.position(target)?;
        self.heading = (b.y - a.y).atan2(b.x - a.x);
        self.path.extend_from_slice(&route[1..]);
        self.observe()?;
        Ok(route)
    }

    /// Gathers encoder inputs for the current decision.
    pub fn inputs(&self, spec: &MapSpec, kappa: usize) -> Result<Inputs> {
        Inputs::build(self, spec, kappa)
    }
}

/// Route the agent takes from `from` to `to`: the direct edge when one
/// exists, otherwise the shortest path through visited nodes.
pub fn route(topo: &TopoMap, from: NodeId, to: NodeId) -> Result<Vec<NodeId>> {
    if from != to && topo.edge(from, to).is_some() {
        Ok(vec![from, to])
    } else {
        Ok(topo.shortest_path(from, to)?)
    }
}

/// Where an encoder node takes its visual feature from.
#[derive(Clone, Debug, PartialEq)]
pub enum NodeSource {
    Stop,
    /// Mean of the node's own encoded panorama.
    Pano(NodeId),
    /// Mean of the encoded views that have seen the node.
    Views(Vec<ViewSource>),
}

/// Everything the encoders need for one decision.
#[derive(Clone, Debug)]
pub struct Inputs {
    /// Topological nodes in insertion order, stop first.
    pub order: Vec<NodeId>,
    pub sources: Vec<NodeSource>,
    pub nodes: NodeInputs,
    /// Global action space, stop first.
    pub actions: Vec<NodeId>,
    /// Row of each action in `order`.
    pub action_rows: Vec<usize>,
    pub map: MetricMap,
    pub cells: CellInputs,
    /// Cell holding each action when it belongs to the local action space.
    /// Stop maps to the center cell, where the current node sits.
    pub local_cells: Vec<Option<usize>>,
}

pub fn kind_index(kind: NodeKind) -> usize {
    match kind {
        NodeKind::Visited => 0,
        NodeKind::Current => 1,
        NodeKind::Unexplored => 2,
        NodeKind::Stop => 3,
    }
}

impl Inputs {
    fn build(ex: &Explorer<'_>, spec: &MapSpec, kappa: usize) -> Result<Self> {
        let topo = &ex.topo;
        let pose = ex.pose();
        let to_ego = pose.inverse();
        let n = topo.len();
        let mut order = Vec::with_capacity(n);
        let mut sources = Vec::with_capacity(n);
        let mut location = Mat::zeros(n, 3);
        let mut steps = Vec::with_capacity(n);
        let mut kinds = Vec::with_capacity(n);
        for (i, node) in topo.nodes().iter().enumerate() {
            order.push(node.id);
            kinds.push(kind_index(node.kind));
            steps.push(node.last_visit_step);
            sources.push(match node.kind {
                NodeKind::Stop => NodeSource::Stop,
                NodeKind::Visited | NodeKind::Current => NodeSource::Pano(node.id),
                NodeKind::Unexplored => NodeSource::Views(node.view_sources.clone()),
            });
            if let Some(p) = node.position {
                let ego = to_ego.apply(&p);
                let dist = ego.x.hypot(ego.y);
                let bearing = if dist > 0.0 { ego.y.atan2(ego.x) } else { 0.0 };
                location.row_mut(i).copy_from_slice(&[bearing.sin(), bearing.cos(), dist / 10.0]);
            }
        }
        let dist = topo.spatial_affinity(&order);
        let mut mask = Mat::zeros(n, n);
        for i in 1..n {
            for j in 1..n {
                mask.data[i * n + j] = 1.0;
            }
        }
        let affinity = (Mat::from_rows(&dist), mask);

        let actions = topo.global_action_space();
        let action_rows = actions.iter().map(|a| topo.insertion_index(*a).expect("actions are map nodes")).collect();

        let mut map = bevnav_core::tmu::build_metric_map(topo, ex.current(), kappa, spec)?;
        let local = local_action_space(topo, &pose, spec);
        map.register_local_actions(&local);
        let (cu, cv) = spec.center();
        let local_cells = actions
            .iter()
            .map(|a| {
                if a.is_stop() {
                    Some(map.index(cu, cv))
                } else {
                    local.iter().skip(1).find(|l| l.node == *a).map(|l| map.index(l.u, l.v))
                }
            })
            .collect();
        let cells = cell_inputs(&map);
        Ok(Self {
            order,
            sources,
            nodes: NodeInputs { location, steps, kinds, affinity },
            actions,
            action_rows,
            map,
            cells,
            local_cells,
        })
    }

    pub fn action_index(&self, id: NodeId) -> Option<usize> {
        self.actions.iter().position(|a| *a == id)
    }

    /// Replaces the metric map (for instance by a masked copy).
    pub fn set_map(&mut self, map: MetricMap) {
        self.cells = cell_inputs(&map);
        self.map = map;
    }
}

/// Cell features, polar and navigability inputs of a metric map.
pub fn cell_inputs(map: &MetricMap) -> CellInputs {
    let spec = *map.spec();
    let n = spec.num_cells();
    let mut polar = Mat::zeros(n, 3);
    for u in 0..spec.u {
        for v in 0..spec.v {
            polar.row_mut(map.index(u, v)).copy_from_slice(&polar_embedding(u, v, &spec));
        }
    }
    let (cu, cv) = spec.center();
    CellInputs {
        features: Mat::from_vec(n, map.dim(), map.features().to_vec()),
        polar,
        navigable: Mat::from_vec(n, 1, map.navigable().iter().map(|b| f64::from(u8::from(*b))).collect()),
        masked: map.masked().to_vec(),
        center: map.index(cu, cv),
    }
}

/// The cache pose and cloud of a visited node, for inspection.
pub fn node_cache<'a>(ex: &'a Explorer<'_>, id: NodeId) -> Option<&'a NodeCache> {
    ex.topo.node(id)?.pc_cache.as_ref()
}
