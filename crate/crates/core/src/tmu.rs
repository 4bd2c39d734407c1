//! Topology-guided map update: the point clouds cached at every visited node
//! within `kappa` hops are re-expressed in the current node's frame, pooled
//! into one cloud and splatted once.

use crate::error::{Error, Result};
use crate::geometry::{splat, transform_pointcloud, MapSpec, PointCloud};
use crate::metric_map::MetricMap;
use crate::topo_map::{NodeId, NodeKind, TopoMap};

/// The pooled egocentric cloud for `current` (before splatting).
pub fn gather_pointcloud(map: &TopoMap, current: NodeId, kappa: usize) -> Result<PointCloud> {
    let cur_node = map.node(current).ok_or(Error::InvalidNode(current))?;
    if cur_node.kind != NodeKind::Current {
        return Err(Error::InvalidNode(current));
    }
    let cur_cache = cur_node.pc_cache.as_ref().ok_or(Error::CacheMiss(current))?;
    let to_current = cur_cache.pose.inverse();
    let hops = map.hops_from(current)?;

    let mut union = PointCloud::new(cur_cache.cloud.dim());
    for (node, hop) in map.nodes().iter().zip(hops) {
        match hop {
            Some(h) if h <= kappa => {}
            _ => continue,
        }
        let cache = node.pc_cache.as_ref().ok_or(Error::CacheMiss(node.id))?;
        if node.id == current {
            union.extend(&cache.cloud)?;
        } else {
            let align = to_current.compose(&cache.pose);
            union.extend(&transform_pointcloud(&cache.cloud, &align))?;
        }
    }
    Ok(union)
}

/// Egocentric metric map for the current node built from its `kappa`-hop
/// visited neighborhood.
pub fn build_metric_map(map: &TopoMap, current: NodeId, kappa: usize, spec: &MapSpec) -> Result<MetricMap> {
    Ok(splat(&gather_pointcloud(map, current, kappa)?, spec))
}
