//! Rigid transforms, inverse pinhole projection ("lift") and orthographic
//! grid pooling ("splat").
//!
//! Axis convention used everywhere in the crate: +x forward, +y left, +z up,
//! heading 0 points along +x and grows counter-clockwise.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};
use crate::metric_map::MetricMap;

pub type Vec3 = Vector3<f64>;

/// Rigid body transform mapping local coordinates into a parent frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    /// Builds a pose from a rotation matrix, rejecting anything that is not
    /// a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if !(err < 1e-9) || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("rotation is not orthonormal with det +1 (residual {err:e})")));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidInput("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        Self { rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(), translation }
    }

    /// Camera orientation with the given heading (about +z) and elevation
    /// (positive looks up).
    pub fn from_yaw_pitch(yaw: f64, elevation: f64, translation: Vec3) -> Self {
        let yaw_r = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
        // rotating +x up towards +z is a negative rotation about +y
        let pitch_r = Rotation3::from_axis_angle(&Vector3::y_axis(), -elevation);
        Self { rotation: *(yaw_r * pitch_r).matrix(), translation }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Heading of the local +x axis projected onto the ground plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Largest absolute entry difference against `other`, over rotation and
    /// translation.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.rotation - other.rotation).amax().max((self.translation - other.translation).amax())
    }
}

/// Pinhole camera over a downsized feature grid, with focal implied by the
/// field of view and rays spaced uniformly in angle through cell centers.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub grid_h: usize,
    pub grid_w: usize,
    pub hfov: f64,
    pub vfov: f64,
    pub max_range: f64,
}

impl CameraIntrinsics {
    pub fn new(grid_h: usize, grid_w: usize, hfov: f64, vfov: f64, max_range: f64) -> Result<Self> {
        let intr = Self { grid_h, grid_w, hfov, vfov, max_range };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        use std::f64::consts::PI;
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::InvalidInput("camera grid must be at least 1x1".into()));
        }
        if !(self.hfov > 0.0 && self.hfov < PI) || !(self.vfov > 0.0 && self.vfov < PI) {
            return Err(Error::InvalidInput("field of view must lie in (0, pi)".into()));
        }
        if !(self.max_range > 0.0) || !self.max_range.is_finite() {
            return Err(Error::InvalidInput("max_range must be positive".into()));
        }
        Ok(())
    }

    /// (azimuth, elevation) of the ray through cell `(row, col)`. Column 0 is
    /// the leftmost column, row 0 the top row.
    pub fn ray_angles(&self, row: usize, col: usize) -> (f64, f64) {
        let az = self.hfov * (0.5 - (col as f64 + 0.5) / self.grid_w as f64);
        let el = self.vfov * (0.5 - (row as f64 + 0.5) / self.grid_h as f64);
        (az, el)
    }

    /// Unit ray through a cell center in the camera frame.
    pub fn ray(&self, row: usize, col: usize) -> Vec3 {
        let (az, el) = self.ray_angles(row, col);
        Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }
}

/// Per-cell feature vectors, row-major `grid_h × grid_w × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid_h * grid_w * dim {
            return Err(Error::Dimension(format!(
                "feature grid {grid_h}x{grid_w}x{dim} needs {} values, got {}",
                grid_h * grid_w * dim,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("feature grid contains non-finite values".into()));
        }
        Ok(Self { grid_h, grid_w, dim, values })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.grid_h, self.grid_w, self.dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.grid_w + col) * self.dim;
        &self.values[o..o + self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Per-cell range along the cell's ray, in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthGrid {
    grid_h: usize,
    grid_w: usize,
    values: Vec<f64>,
}

impl DepthGrid {
    pub fn new(grid_h: usize, grid_w: usize, values: Vec<f64>, max_range: f64) -> Result<Self> {
        if values.len() != grid_h * grid_w {
            return Err(Error::Dimension(format!(
                "depth grid {grid_h}x{grid_w} needs {} values, got {}",
                grid_h * grid_w,
                values.len()
            )));
        }
        if values.iter().any(|d| !(*d >= 0.0 && *d <= max_range)) {
            return Err(Error::InvalidInput(format!("depths must lie in [0, {max_range}]")));
        }
        Ok(Self { grid_h, grid_w, values })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid_w + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Bitset of up to 64 semantic classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct SemanticSet(pub u64);

impl SemanticSet {
    pub const MAX_CLASSES: usize = 64;

    pub fn single(class: usize) -> Self {
        debug_assert!(class < Self::MAX_CLASSES);
        SemanticSet(1u64 << class)
    }

    pub fn union(self, other: SemanticSet) -> Self {
        SemanticSet(self.0 | other.0)
    }

    pub fn contains(self, class: usize) -> bool {
        class < Self::MAX_CLASSES && self.0 & (1u64 << class) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..Self::MAX_CLASSES).filter(move |c| self.contains(*c))
    }
}

/// Feature-tagged 3D points stored column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    dim: usize,
    positions: Vec<Vec3>,
    features: Vec<f64>,
    semantics: Vec<SemanticSet>,
}

impl PointCloud {
    pub fn new(dim: usize) -> Self {
        Self { dim, positions: Vec::new(), features: Vec::new(), semantics: Vec::new() }
    }

    pub fn with_capacity(dim: usize, n: usize) -> Self {
        Self {
            dim,
            positions: Vec::with_capacity(n),
            features: Vec::with_capacity(n * dim),
            semantics: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, position: Vec3, feature: &[f64], semantics: SemanticSet) -> Result<()> {
        if feature.len() != self.dim {
            return Err(Error::Dimension(format!(
                "point feature has {} entries, cloud expects {}",
                feature.len(),
                self.dim
            )));
        }
        if !position.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite point position".into()));
        }
        self.positions.push(position);
        self.features.extend_from_slice(feature);
        self.semantics.push(semantics);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn position(&self, i: usize) -> &Vec3 {
        &self.positions[i]
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn semantics(&self, i: usize) -> SemanticSet {
        self.semantics[i]
    }

    /// Appends every point of `other`.
    pub fn extend(&mut self, other: &PointCloud) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::Dimension(format!("cannot merge clouds of dimension {} and {}", self.dim, other.dim)));
        }
        self.positions.extend_from_slice(&other.positions);
        self.features.extend_from_slice(&other.features);
        self.semantics.extend_from_slice(&other.semantics);
        Ok(())
    }
}

/// Egocentric metric grid layout. The agent sits in the exact central cell.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MapSpec {
    pub u: usize,
    pub v: usize,
    pub cell_size: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for MapSpec {
    fn default() -> Self {
        Self { u: 21, v: 21, cell_size: 0.5, z_min: -0.5, z_max: 2.5 }
    }
}

impl MapSpec {
    pub fn new(u: usize, v: usize, cell_size: f64, z_min: f64, z_max: f64) -> Result<Self> {
        let spec = Self { u, v, cell_size, z_min, z_max };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.u.is_multiple_of(2) || self.v.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!("map dimensions must be odd, got {}x{}", self.u, self.v)));
        }
        if !(self.cell_size > 0.0) || !self.cell_size.is_finite() {
            return Err(Error::InvalidInput("cell_size must be positive".into()));
        }
        if !(self.z_min < self.z_max) {
            return Err(Error::InvalidInput("z_min must be below z_max".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> (usize, usize) {
        (self.u / 2, self.v / 2)
    }

    pub fn num_cells(&self) -> usize {
        self.u * self.v
    }

    /// Signed cell offset of a ground-plane coordinate from the center cell.
    fn offset(&self, coord: f64) -> i64 {
        (coord / self.cell_size + 0.5).floor() as i64
    }

    /// Cell containing `(x, y)`, or `None` outside the map extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !x.is_finite() || !y.is_finite() {
            return None;
        }
        let (cu, cv) = self.center();
        let i = self.offset(x) + cu as i64;
        let j = self.offset(y) + cv as i64;
        if i < 0 || j < 0 || i >= self.u as i64 || j >= self.v as i64 {
            return None;
        }
        Some((i as usize, j as usize))
    }

    /// Cell containing `(x, y)` clamped onto the map; the flag reports
    /// whether clamping happened.
    pub fn clamped_cell_of(&self, x: f64, y: f64) -> (usize, usize, bool) {
        let (cu, cv) = self.center();
        let i = self.offset(x).saturating_add(cu as i64);
        let j = self.offset(y).saturating_add(cv as i64);
        let ci = i.clamp(0, self.u as i64 - 1);
        let cj = j.clamp(0, self.v as i64 - 1);
        (ci as usize, cj as usize, ci != i || cj != j)
    }

    /// Egocentric ground-plane coordinates of a cell center.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let (cu, cv) = self.center();
        ((i as f64 - cu as f64) * self.cell_size, (j as f64 - cv as f64) * self.cell_size)
    }

    /// Distance from the agent to a corner of the map extent.
    pub fn half_diagonal(&self) -> f64 {
        let hx = self.u as f64 * self.cell_size / 2.0;
        let hy = self.v as f64 * self.cell_size / 2.0;
        hx.hypot(hy)
    }
}

/// Shoots one ray per grid cell and places the cell feature at the ray's
/// depth. Cells with non-positive depth produce no point.
pub fn lift(features: &FeatureGrid, depths: &DepthGrid, intr: &CameraIntrinsics, pose: &Pose) -> Result<PointCloud> {
    lift_with_semantics(features, depths, None, intr, pose)
}

/// [`lift`] carrying a per-cell semantic label set along with each point.
pub fn lift_with_semantics(
    features: &FeatureGrid,
    depths: &DepthGrid,
    semantics: Option<&[SemanticSet]>,
    intr: &CameraIntrinsics,
    pose: &Pose,
) -> Result<PointCloud> {
    let (fh, fw, dim) = features.shape();
    if (fh, fw) != depths.shape() {
        return Err(Error::Dimension(format!("features are {fh}x{fw} but depths are {:?}", depths.shape())));
    }
    if (fh, fw) != (intr.grid_h, intr.grid_w) {
        return Err(Error::Dimension(format!(
            "features are {fh}x{fw} but the camera grid is {}x{}",
            intr.grid_h, intr.grid_w
        )));
    }
    if let Some(sem) = semantics {
        if sem.len() != fh * fw {
            return Err(Error::Dimension("semantic grid size mismatch".into()));
        }
    }
    let mut pc = PointCloud::with_capacity(dim, fh * fw);
    for row in 0..fh {
        for col in 0..fw {
            let d = depths.get(row, col);
            if !(d > 0.0) || d > intr.max_range {
                continue;
            }
            let p = pose.apply(&(intr.ray(row, col) * d));
            let s = semantics.map_or(SemanticSet::default(), |s| s[row * fw + col]);
            pc.push(p, features.cell(row, col), s)?;
        }
    }
    Ok(pc)
}

pub fn transform_pointcloud(pc: &PointCloud, t: &Pose) -> PointCloud {
    PointCloud {
        dim: pc.dim,
        positions: pc.positions.iter().map(|p| t.apply(p)).collect(),
        features: pc.features.clone(),
        semantics: pc.semantics.clone(),
    }
}

/// Bins an egocentric cloud into the map grid with per-cell average pooling.
///
/// Within a cell, contributions are summed in lexicographic feature order so
/// the result does not depend on the order of the input points.
pub fn splat(pc: &PointCloud, spec: &MapSpec) -> MetricMap {
    let dim = pc.dim();
    let mut map = MetricMap::empty(*spec, dim);
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); spec.num_cells()];
    for (idx, p) in pc.positions.iter().enumerate() {
        if p.z < spec.z_min || p.z > spec.z_max {
            continue;
        }
        if let Some((i, j)) = spec.cell_of(p.x, p.y) {
            bins[i * spec.v + j].push(idx);
        }
    }
    for (cell, members) in bins.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        members.sort_by(|a, b| {
            pc.feature(*a)
                .iter()
                .zip(pc.feature(*b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut sum = vec![0.0; dim];
        let mut sem = SemanticSet::default();
        for &m in members.iter() {
            for (s, f) in sum.iter_mut().zip(pc.feature(m)) {
                *s += f;
            }
            sem = sem.union(pc.semantics(m));
        }
        let n = members.len() as f64;
        sum.iter_mut().for_each(|s| *s /= n);
        map.set_cell(cell, &sum, members.len() as u32, sem);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn cam1() -> CameraIntrinsics {
        CameraIntrinsics::new(1, 1, 0.5, 0.5, 10.0).unwrap()
    }

    #[test]
    fn principal_ray_identity_pose() {
        let f = FeatureGrid::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let d = DepthGrid::new(1, 1, vec![2.0], 10.0).unwrap();
        let pc = lift(&f, &d, &cam1(), &Pose::identity()).unwrap();
        assert_eq!(pc.len(), 1);
        assert!((pc.position(0) - Vec3::new(2.0, 0.0, 0.0)).amax() < 1e-12);
        assert_eq!(pc.feature(0), &[1.0, 2.0]);
    }

    #[test]
    fn principal_ray_yawed_pose() {
        let f = FeatureGrid::new(1, 1, 1, vec![1.0]).unwrap();
        let d = DepthGrid::new(1, 1, vec![2.0], 10.0).unwrap();
        let pose = Pose::from_yaw(FRAC_PI_2, Vec3::zeros());
        let pc = lift(&f, &d, &cam1(), &pose).unwrap();
        assert!((pc.position(0) - Vec3::new(0.0, 2.0, 0.0)).amax() < 1e-12);
    }

    #[test]
    fn zero_depth_emits_nothing() {
        let f = FeatureGrid::new(1, 2, 1, vec![1.0, 2.0]).unwrap();
        let d = DepthGrid::new(1, 2, vec![0.0, 1.0], 10.0).unwrap();
        let pc = lift(&f, &d, &CameraIntrinsics::new(1, 2, 0.5, 0.5, 10.0).unwrap(), &Pose::identity()).unwrap();
        assert_eq!(pc.len(), 1);
        assert_eq!(pc.feature(0), &[2.0]);
    }

    #[test]
    fn lift_shape_mismatch() {
        let f = FeatureGrid::new(2, 2, 1, vec![0.0; 4]).unwrap();
        let d = DepthGrid::new(1, 2, vec![1.0, 1.0], 10.0).unwrap();
        let intr = CameraIntrinsics::new(2, 2, 1.0, 1.0, 10.0).unwrap();
        assert!(matches!(lift(&f, &d, &intr, &Pose::identity()), Err(Error::Dimension(_))));
    }

    #[test]
    fn invalid_rotation_rejected() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Pose::new(m, Vec3::zeros()).is_err());
        assert!(Pose::new(m * 2.0, Vec3::zeros()).is_err());
    }

    #[test]
    fn elevation_points_up() {
        let p = Pose::from_yaw_pitch(0.0, 0.3, Vec3::zeros());
        let v = p.apply_vector(&Vec3::x());
        assert!((v.z - 0.3f64.sin()).abs() < 1e-12);
        assert!((v.x - 0.3f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn translation_moves_point() {
        let mut pc = PointCloud::new(1);
        pc.push(Vec3::zeros(), &[1.0], SemanticSet::default()).unwrap();
        let moved = transform_pointcloud(&pc, &Pose::from_yaw(0.0, Vec3::new(1.0, 0.0, 0.0)));
        assert_eq!(*moved.position(0), Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(transform_pointcloud(&pc, &Pose::identity()), pc);
    }

    #[test]
    fn splat_single_point_center() {
        let spec = MapSpec::default();
        let mut pc = PointCloud::new(2);
        pc.push(Vec3::zeros(), &[0.5, -1.0], SemanticSet::single(3)).unwrap();
        let map = splat(&pc, &spec);
        let (cu, cv) = spec.center();
        assert_eq!(map.feature(cu, cv), &[0.5, -1.0]);
        assert_eq!(map.count(cu, cv), 1);
        assert_eq!(map.observed_count(), 1);
        assert!(map.semantics(cu, cv).contains(3));
    }

    #[test]
    fn splat_average_pooling() {
        let spec = MapSpec::default();
        let mut pc = PointCloud::new(2);
        pc.push(Vec3::new(0.01, 0.0, 0.0), &[1.0, 3.0], SemanticSet::single(0)).unwrap();
        pc.push(Vec3::new(-0.01, 0.02, 0.1), &[3.0, 5.0], SemanticSet::single(1)).unwrap();
        let map = splat(&pc, &spec);
        assert_eq!(map.feature(10, 10), &[2.0, 4.0]);
        assert_eq!(map.count(10, 10), 2);
        assert_eq!(map.semantics(10, 10), SemanticSet(0b11));
    }

    #[test]
    fn splat_drops_out_of_extent_and_height() {
        let spec = MapSpec::default();
        let mut pc = PointCloud::new(1);
        pc.push(Vec3::new(5.3, 0.0, 0.0), &[1.0], SemanticSet::default()).unwrap();
        pc.push(Vec3::new(1.0, 0.0, 2.9), &[1.0], SemanticSet::default()).unwrap();
        pc.push(Vec3::new(1.0, 0.0, -0.6), &[1.0], SemanticSet::default()).unwrap();
        let map = splat(&pc, &spec);
        assert_eq!(map.observed_count(), 0);
        assert!(map.features().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_cloud_splats_to_empty_map() {
        let map = splat(&PointCloud::new(4), &MapSpec::default());
        assert_eq!(map.observed_count(), 0);
    }

    #[test]
    fn map_spec_rejects_even() {
        assert!(MapSpec::new(20, 21, 0.5, -0.5, 2.5).is_err());
        assert!(MapSpec::new(21, 21, 0.0, -0.5, 2.5).is_err());
        assert!(MapSpec::new(21, 21, 0.5, 1.0, 1.0).is_err());
    }
}
