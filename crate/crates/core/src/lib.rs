//! Geometry, mapping and evaluation primitives for a topo-metric
//! vision-and-language navigation agent, plus a procedural indoor
//! environment to run it in.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codec;
pub mod env;
pub mod error;
pub mod geometry;
pub mod metric_map;
pub mod metrics;
pub mod rng;
pub mod tmu;
pub mod topo_map;

pub use error::{Error, Result};
pub use geometry::{
    lift, lift_with_semantics, splat, transform_pointcloud, CameraIntrinsics, DepthGrid, FeatureGrid, MapSpec,
    PointCloud, Pose, SemanticSet, Vec3,
};
pub use metric_map::{cell_to_node, local_action_space, node_to_cell, polar_embedding, LocalAction, MetricMap};
pub use topo_map::{Candidate, NodeId, NodeKind, NodeLookup, StepObservation, TopoMap};
