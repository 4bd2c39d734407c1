use std::collections::HashMap;

use bevnav_core::{
    lift, splat, transform_pointcloud, CameraIntrinsics, DepthGrid, FeatureGrid, MapSpec, PointCloud, Pose,
    SemanticSet, Vec3,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pose(rng: &mut impl Rng) -> Pose {
    Pose::from_yaw_pitch(
        rng.random_range(-3.2..3.2),
        rng.random_range(-0.6..0.6),
        Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..2.0)),
    )
}

/// Per-pixel projection written with plain trigonometry and a hand-rolled
/// matrix product.
fn project_oracle(intr: &CameraIntrinsics, pose: &Pose, row: usize, col: usize, depth: f64) -> [f64; 3] {
    let az = intr.hfov * (0.5 - (col as f64 + 0.5) / intr.grid_w as f64);
    let el = intr.vfov * (0.5 - (row as f64 + 0.5) / intr.grid_h as f64);
    let cam = [depth * el.cos() * az.cos(), depth * el.cos() * az.sin(), depth * el.sin()];
    let r = pose.rotation();
    let t = pose.translation();
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = t[i] + (0..3).map(|k| r[(i, k)] * cam[k]).sum::<f64>();
    }
    out
}

/// Searches every cell for the one whose half-open square contains the point.
fn splat_oracle(pc: &PointCloud, spec: &MapSpec) -> HashMap<(usize, usize), (Vec<f64>, usize)> {
    let mut out: HashMap<(usize, usize), (Vec<f64>, usize)> = HashMap::new();
    let h = spec.cell_size / 2.0;
    for i in 0..pc.len() {
        let p = pc.position(i);
        if p.z < spec.z_min || p.z > spec.z_max {
            continue;
        }
        let mut found = None;
        for u in 0..spec.u {
            for v in 0..spec.v {
                let cx = (u as f64 - (spec.u / 2) as f64) * spec.cell_size;
                let cy = (v as f64 - (spec.v / 2) as f64) * spec.cell_size;
                if p.x >= cx - h && p.x < cx + h && p.y >= cy - h && p.y < cy + h {
                    found = Some((u, v));
                }
            }
        }
        if let Some(cell) = found {
            let e = out.entry(cell).or_insert_with(|| (vec![0.0; pc.dim()], 0));
            e.0.iter_mut().zip(pc.feature(i)).for_each(|(s, f)| *s += f);
            e.1 += 1;
        }
    }
    for (sum, n) in out.values_mut() {
        sum.iter_mut().for_each(|s| *s /= *n as f64);
    }
    out
}

#[test]
fn lift_matches_pixel_oracle_on_random_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (h, w, dim) = (4, 4, 3);
        let intr = CameraIntrinsics::new(h, w, rng.random_range(0.3..2.5), rng.random_range(0.3..2.0), 10.0).unwrap();
        let depths: Vec<f64> =
            (0..h * w).map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.1..10.0) }).collect();
        let feats: Vec<f64> = (0..h * w * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pose = random_pose(&mut rng);
        let pc = lift(
            &FeatureGrid::new(h, w, dim, feats.clone()).unwrap(),
            &DepthGrid::new(h, w, depths.clone(), 10.0).unwrap(),
            &intr,
            &pose,
        )
        .unwrap();
        let mut k = 0;
        for row in 0..h {
            for col in 0..w {
                let d = depths[row * w + col];
                if d <= 0.0 {
                    continue;
                }
                let want = project_oracle(&intr, &pose, row, col, d);
                let got = pc.position(k);
                for a in 0..3 {
                    assert!((got[a] - want[a]).abs() < 1e-9);
                }
                let c = (row * w + col) * dim;
                assert_eq!(pc.feature(k), &feats[c..c + dim]);
                k += 1;
            }
        }
        assert_eq!(k, pc.len());
    }
}

#[test]
fn splat_matches_binning_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = MapSpec::default();
    let mut pc = PointCloud::new(4);
    for _ in 0..1000 {
        let p = Vec3::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), rng.random_range(-1.0..3.0));
        let f: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        pc.push(p, &f, SemanticSet::single(rng.random_range(0..8))).unwrap();
    }
    let map = splat(&pc, &spec);
    let oracle = splat_oracle(&pc, &spec);
    for u in 0..spec.u {
        for v in 0..spec.v {
            match oracle.get(&(u, v)) {
                Some((mean, n)) => {
                    assert_eq!(map.count(u, v) as usize, *n);
                    for (a, b) in map.feature(u, v).iter().zip(mean) {
                        assert!((a - b).abs() < 1e-6);
                    }
                }
                None => {
                    assert!(!map.is_observed(u, v));
                    assert!(map.feature(u, v).iter().all(|f| *f == 0.0));
                }
            }
        }
    }
}

#[test]
fn constant_depth_plane_occupies_only_forward_cells() {
    let intr = CameraIntrinsics::new(5, 9, 1.5, 0.6, 10.0).unwrap();
    let f = FeatureGrid::new(5, 9, 1, vec![1.0; 45]).unwrap();
    let d = DepthGrid::new(5, 9, vec![3.0; 45], 10.0).unwrap();
    let map = splat(&lift(&f, &d, &intr, &Pose::identity()).unwrap(), &MapSpec::default());
    let (cu, _) = MapSpec::default().center();
    assert!(map.observed_count() > 0);
    for (u, _) in map.observed_cells() {
        assert!(u > cu);
    }
}

fn arb_pose() -> impl Strategy<Value = Pose> {
    (-3.2f64..3.2, -1.2f64..1.2, -10.0f64..10.0, -10.0f64..10.0, -3.0f64..3.0)
        .prop_map(|(yaw, el, x, y, z)| Pose::from_yaw_pitch(yaw, el, Vec3::new(x, y, z)))
}

fn arb_cloud() -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(
        ((-6.0f64..6.0, -6.0f64..6.0, -1.0f64..3.0), prop::collection::vec(-3.0f64..3.0, 2), 0usize..8),
        0..60,
    )
    .prop_map(|pts| {
        let mut pc = PointCloud::new(2);
        for ((x, y, z), f, s) in pts {
            pc.push(Vec3::new(x, y, z), &f, SemanticSet::single(s)).unwrap();
        }
        pc
    })
}

fn shuffled(pc: &PointCloud, seed: u64) -> PointCloud {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..pc.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = PointCloud::new(pc.dim());
    for i in idx {
        out.push(*pc.position(i), pc.feature(i), pc.semantics(i)).unwrap();
    }
    out
}

proptest! {
    #[test]
    fn pose_rotation_is_orthonormal(p in arb_pose()) {
        let r = p.rotation();
        let err = (r.transpose() * r - nalgebra::Matrix3::identity()).amax();
        prop_assert!(err < 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pose_inverse_round_trip(p in arb_pose()) {
        prop_assert!(p.inverse().compose(&p).max_abs_diff(&Pose::identity()) < 1e-9);
        prop_assert!(p.compose(&p.inverse()).max_abs_diff(&Pose::identity()) < 1e-9);
    }

    #[test]
    fn transform_composition(pc in arb_cloud(), a in arb_pose(), b in arb_pose()) {
        let two = transform_pointcloud(&transform_pointcloud(&pc, &a), &b);
        let one = transform_pointcloud(&pc, &b.compose(&a));
        for i in 0..pc.len() {
            prop_assert!((two.position(i) - one.position(i)).amax() < 1e-9);
        }
        let back = transform_pointcloud(&transform_pointcloud(&pc, &a), &a.inverse());
        for i in 0..pc.len() {
            prop_assert!((back.position(i) - pc.position(i)).amax() < 1e-9);
        }
    }

    #[test]
    fn splat_is_permutation_invariant(pc in arb_cloud(), seed in any::<u64>()) {
        let spec = MapSpec::default();
        prop_assert_eq!(splat(&pc, &spec), splat(&shuffled(&pc, seed), &spec));
    }

    #[test]
    fn splat_identity_transform_is_exact(pc in arb_cloud()) {
        let spec = MapSpec::default();
        prop_assert_eq!(splat(&transform_pointcloud(&pc, &Pose::identity()), &spec), splat(&pc, &spec));
    }

    #[test]
    fn splat_cells_are_convex_means(pc in arb_cloud()) {
        let spec = MapSpec::default();
        let map = splat(&pc, &spec);
        let max_norm = (0..pc.len())
            .map(|i| pc.feature(i).iter().map(|f| f * f).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        for u in 0..spec.u {
            for v in 0..spec.v {
                let observed = map.is_observed(u, v);
                prop_assert_eq!(observed, map.count(u, v) >= 1);
                let norm = map.feature(u, v).iter().map(|f| f * f).sum::<f64>().sqrt();
                prop_assert!(norm <= max_norm + 1e-12);
                if !observed {
                    prop_assert_eq!(norm, 0.0);
                }
            }
        }
    }
}
