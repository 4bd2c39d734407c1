#![allow(dead_code)]

pub mod generalization;

use bevnav_core::env::{generate_episode, generate_world, EpisodeKind, World, WorldEdge, WorldNode, WorldParams};
use bevnav_core::{NodeId, Vec3};
use bevnav_model::params::{Grads, ParamId};
use bevnav_model::{EncoderConfig, MapConfig, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_params() -> WorldParams {
    WorldParams {
        n_rooms: 2,
        nodes_per_room: 3,
        feature_dim: 5,
        num_classes: 3,
        views: 4,
        grid_h: 3,
        grid_w: 3,
        ..WorldParams::default()
    }
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig { dim: 8, heads: 2, vocab_size: 32, view_dim: 5, num_classes: 3, ..EncoderConfig::default() }
}

pub fn tiny_map() -> MapConfig {
    MapConfig { size: 5, cell_size: 1.0, ..MapConfig::default() }
}

pub fn tiny_world(seed: u64) -> World {
    generate_world(seed, &tiny_params()).unwrap()
}

pub fn tiny_model(seed: u64) -> Model {
    Model::new(tiny_encoder(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Goal episode whose expert path has at least `min_len` nodes.
pub fn episode_with_len(world: &World, min_len: usize) -> bevnav_core::env::Episode {
    (0..200)
        .map(|s| generate_episode(world, s, EpisodeKind::Goal).unwrap())
        .find(|e| e.expert_path.len() >= min_len)
        .expect("some episode is long enough")
}

/// Overwrites every parameter with small random values so no gradient is
/// trivially zero (for instance the distance-bias scalars start at zero).
pub fn randomize(model: &mut Model, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let is_gain = model.params.get(id).name.ends_with(".g");
        for v in model.params.value_mut(id).data.iter_mut() {
            let noise = scale * rng.random_range(-1.0..1.0);
            *v = if is_gain { 1.0 + noise } else { noise };
        }
    }
}

pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
    pub worst: String,
}

/// Central finite differences on up to `per_tensor` entries of every
/// parameter tensor. Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check(model: &mut Model, per_tensor: usize, seed: u64, f: &dyn Fn(&Model) -> (f64, Grads)) -> GradReport {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let (_, grads) = f(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
    let mut report = GradReport { max_rel: 0.0, checked: 0, worst: String::new() };
    for id in ids {
        let len = model.params.value(id).len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        for k in picks {
            let analytic = grads.get(id).map_or(0.0, |g| g.data[k]);
            let orig = model.params.value(id).data[k];
            model.params.value_mut(id).data[k] = orig + H;
            let lp = f(model).0;
            model.params.value_mut(id).data[k] = orig - H;
            let lm = f(model).0;
            model.params.value_mut(id).data[k] = orig;
            let numeric = (lp - lm) / (2.0 * H);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            report.checked += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{}[{k}] analytic {analytic:e} numeric {numeric:e}", model.params.get(id).name);
            }
        }
    }
    report
}

/// Four nodes on a straight line inside room 0, chained `0-1-2-3`, 1 m
/// apart.
pub fn chain_world() -> World {
    let mut w = tiny_world(3);
    let r = &w.rooms[0];
    let y = (r.min[1] + r.max[1]) / 2.0;
    let x0 = r.min[0] + 0.6;
    w.nodes = (0..4).map(|i| WorldNode { id: NodeId(i), position: [x0 + 1.0 * i as f64, y, 0.0], room: 0 }).collect();
    w.edges = (0..3).map(|i| WorldEdge { a: NodeId(i), b: NodeId(i + 1), distance: 1.0 }).collect();
    World::from_json(&w.to_json()).unwrap()
}

pub fn position(world: &World, id: NodeId) -> Vec3 {
    world.position(id).unwrap()
}
