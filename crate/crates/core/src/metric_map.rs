//! Egocentric bird's-eye-view grid, cell position embeddings and the
//! node/cell correspondence that defines the local action space.

use std::collections::BTreeMap;

use crate::geometry::{MapSpec, Pose, SemanticSet, Vec3};
use crate::topo_map::{NodeId, TopoMap};

/// `U × V × D` egocentric feature grid with per-cell bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricMap {
    spec: MapSpec,
    dim: usize,
    features: Vec<f64>,
    counts: Vec<u32>,
    observed: Vec<bool>,
    semantics: Vec<SemanticSet>,
    navigable: Vec<bool>,
    masked: Vec<bool>,
    cell_to_nodes: BTreeMap<usize, Vec<NodeId>>,
}

/// A node of the local action space with the cell it projects to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalAction {
    pub node: NodeId,
    pub u: usize,
    pub v: usize,
    pub clamped: bool,
}

impl MetricMap {
    pub fn empty(spec: MapSpec, dim: usize) -> Self {
        let n = spec.num_cells();
        Self {
            spec,
            dim,
            features: vec![0.0; n * dim],
            counts: vec![0; n],
            observed: vec![false; n],
            semantics: vec![SemanticSet::default(); n],
            navigable: vec![false; n],
            masked: vec![false; n],
            cell_to_nodes: BTreeMap::new(),
        }
    }

    /// Assembles a map from raw parts, checking every size and the
    /// count/observed/feature consistency.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        spec: MapSpec,
        dim: usize,
        features: Vec<f64>,
        counts: Vec<u32>,
        observed: Vec<bool>,
        semantics: Vec<SemanticSet>,
        navigable: Vec<bool>,
        cell_to_nodes: BTreeMap<usize, Vec<NodeId>>,
    ) -> crate::Result<Self> {
        use crate::Error;
        spec.validate()?;
        let n = spec.num_cells();
        if features.len() != n * dim
            || counts.len() != n
            || observed.len() != n
            || semantics.len() != n
            || navigable.len() != n
        {
            return Err(Error::Dimension("metric map part sizes disagree with spec".into()));
        }
        if !features.iter().all(|f| f.is_finite()) {
            return Err(Error::InvalidInput("non-finite map feature".into()));
        }
        for c in 0..n {
            if (counts[c] > 0) != observed[c] {
                return Err(Error::InvalidInput(format!("cell {c}: count and observed flag disagree")));
            }
            if !observed[c] && features[c * dim..(c + 1) * dim].iter().any(|f| *f != 0.0) {
                return Err(Error::InvalidInput(format!("cell {c}: unobserved cell has features")));
            }
        }
        if let Some((&c, _)) = cell_to_nodes.iter().find(|(c, _)| **c >= n) {
            return Err(Error::InvalidInput(format!("node association for cell {c} out of range")));
        }
        Ok(Self { spec, dim, features, counts, observed, semantics, navigable, masked: vec![false; n], cell_to_nodes })
    }

    pub(crate) fn set_cell(&mut self, cell: usize, feature: &[f64], count: u32, sem: SemanticSet) {
        let d = self.dim;
        self.features[cell * d..(cell + 1) * d].copy_from_slice(feature);
        self.counts[cell] = count;
        self.observed[cell] = count > 0;
        self.semantics[cell] = sem;
    }

    pub(crate) fn set_masked_flags(&mut self, masked: Vec<bool>) {
        debug_assert_eq!(masked.len(), self.masked.len());
        self.masked = masked;
    }

    pub fn spec(&self) -> &MapSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn index(&self, u: usize, v: usize) -> usize {
        u * self.spec.v + v
    }

    pub fn feature(&self, u: usize, v: usize) -> &[f64] {
        let c = self.index(u, v);
        &self.features[c * self.dim..(c + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn count(&self, u: usize, v: usize) -> u32 {
        self.counts[self.index(u, v)]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn is_observed(&self, u: usize, v: usize) -> bool {
        self.observed[self.index(u, v)]
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|o| **o).count()
    }

    pub fn semantics(&self, u: usize, v: usize) -> SemanticSet {
        self.semantics[self.index(u, v)]
    }

    pub fn semantics_all(&self) -> &[SemanticSet] {
        &self.semantics
    }

    pub fn is_navigable(&self, u: usize, v: usize) -> bool {
        self.navigable[self.index(u, v)]
    }

    pub fn navigable(&self) -> &[bool] {
        &self.navigable
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn cell_associations(&self) -> &BTreeMap<usize, Vec<NodeId>> {
        &self.cell_to_nodes
    }

    /// Hides an observed cell: features and labels are cleared, the cell
    /// counts as unobserved and is flagged as masked. Returns the original
    /// label set, or `None` when the cell was not observed.
    pub fn mask_cell(&mut self, u: usize, v: usize) -> Option<SemanticSet> {
        let c = self.index(u, v);
        if !self.observed[c] {
            return None;
        }
        let sem = self.semantics[c];
        let d = self.dim;
        self.features[c * d..(c + 1) * d].iter_mut().for_each(|f| *f = 0.0);
        self.counts[c] = 0;
        self.observed[c] = false;
        self.semantics[c] = SemanticSet::default();
        self.masked[c] = true;
        Some(sem)
    }

    /// Marks the cells of a local action space navigable and records which
    /// nodes landed in each cell, in the given order.
    pub fn register_local_actions(&mut self, actions: &[LocalAction]) {
        for a in actions {
            let c = self.index(a.u, a.v);
            self.navigable[c] = true;
            let nodes = self.cell_to_nodes.entry(c).or_default();
            if !nodes.contains(&a.node) {
                nodes.push(a.node);
            }
        }
    }

    /// Coordinates of every observed cell, row-major.
    pub fn observed_cells(&self) -> Vec<(usize, usize)> {
        (0..self.spec.u)
            .flat_map(|u| (0..self.spec.v).map(move |v| (u, v)))
            .filter(|(u, v)| self.is_observed(*u, *v))
            .collect()
    }
}

/// `[cos θ, sin θ, dis]` for a cell, with θ measured from the forward axis
/// and `dis` the cell-center distance over the map half-diagonal.
pub fn polar_embedding(u: usize, v: usize, spec: &MapSpec) -> [f64; 3] {
    let (x, y) = spec.cell_center(u, v);
    let theta = if x == 0.0 && y == 0.0 { 0.0 } else { y.atan2(x) };
    let dis = x.hypot(y) / spec.half_diagonal();
    [theta.cos(), theta.sin(), dis]
}

/// Expresses a world position in the agent frame and bins it, clamping
/// out-of-extent positions onto the boundary.
pub fn node_to_cell(agent_pose: &Pose, node_position: &Vec3, spec: &MapSpec) -> (usize, usize, bool) {
    let ego = agent_pose.inverse().apply(node_position);
    spec.clamped_cell_of(ego.x, ego.y)
}

/// The current node and its one-hop neighbors, each projected onto the map.
/// The current node always comes first.
pub fn local_action_space(map: &TopoMap, agent_pose: &Pose, spec: &MapSpec) -> Vec<LocalAction> {
    let Some(current) = map.current() else {
        return Vec::new();
    };
    std::iter::once(current)
        .chain(map.neighbors(current))
        .filter_map(|id| {
            let pos = map.node(id)?.position?;
            let (u, v, clamped) = node_to_cell(agent_pose, &pos, spec);
            Some(LocalAction { node: id, u, v, clamped })
        })
        .collect()
}

pub fn cell_to_node(map: &MetricMap, u: usize, v: usize) -> &[NodeId] {
    map.cell_to_nodes.get(&map.index(u, v)).map_or(&[], |n| n.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_embedding() {
        let spec = MapSpec::default();
        assert_eq!(polar_embedding(10, 10, &spec), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn five_cells_ahead() {
        // independent arithmetic: offset 5 cells * 0.5 m = 2.5 m, corner of a
        // 10.5 m square is sqrt(2) * 5.25 m away
        let spec = MapSpec::default();
        let e = polar_embedding(15, 10, &spec);
        let expected = 2.5 / (2f64.sqrt() * 5.25);
        assert!((e[0] - 1.0).abs() < 1e-15 && e[1].abs() < 1e-15);
        assert!((e[2] - expected).abs() < 1e-12);
        assert!((e[2] - 0.3367).abs() < 5e-5);
    }

    #[test]
    fn left_cell_embedding() {
        let spec = MapSpec::default();
        let e = polar_embedding(10, 11, &spec);
        assert!(e[0].abs() < 1e-12 && (e[1] - 1.0).abs() < 1e-12 && e[2] > 0.0);
    }

    #[test]
    fn node_to_cell_cases() {
        let spec = MapSpec::default();
        let pose = Pose::from_yaw(0.3, Vec3::new(2.0, -1.0, 0.0));
        assert_eq!(node_to_cell(&pose, &Vec3::new(2.0, -1.0, 0.0), &spec), (10, 10, false));
        let ahead = pose.apply(&Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(node_to_cell(&pose, &ahead, &spec), (12, 10, false));
        let far = pose.apply(&Vec3::new(50.0, 0.0, 0.0));
        assert_eq!(node_to_cell(&pose, &far, &spec), (20, 10, true));
    }

    #[test]
    fn unregistered_cell_is_empty() {
        let map = MetricMap::empty(MapSpec::default(), 2);
        assert!(cell_to_node(&map, 3, 4).is_empty());
    }

    #[test]
    fn coincident_nodes_share_cell() {
        let mut map = MetricMap::empty(MapSpec::default(), 2);
        map.register_local_actions(&[
            LocalAction { node: NodeId(4), u: 12, v: 10, clamped: false },
            LocalAction { node: NodeId(2), u: 12, v: 10, clamped: false },
        ]);
        assert_eq!(cell_to_node(&map, 12, 10), &[NodeId(4), NodeId(2)]);
        assert!(map.is_navigable(12, 10));
    }

    #[test]
    fn masking_only_touches_observed() {
        let mut map = MetricMap::empty(MapSpec::default(), 1);
        map.set_cell(0, &[2.0], 1, SemanticSet::single(1));
        assert_eq!(map.mask_cell(0, 1), None);
        assert_eq!(map.mask_cell(0, 0), Some(SemanticSet::single(1)));
        assert!(!map.is_observed(0, 0));
        assert_eq!(map.feature(0, 0), &[0.0]);
        assert!(map.masked()[0]);
    }
}
