//! Held-out evaluation set and random-walk baseline shared by the
//! acceptance suite and the `random_walk_baseline` example.

use bevnav_core::env::{generate_episode, generate_world, Episode, EpisodeKind, World, WorldParams};
use bevnav_core::metrics::Summary;
use bevnav_model::agent::{evaluate_policy, RandomWalk, RolloutConfig};
use bevnav_model::pretrain::Sample;
use bevnav_model::{FinetuneConfig, MapConfig};

pub const HELD_OUT_WORLDS: u64 = 10;
pub const HELD_OUT_PER_WORLD: u64 = 5;
/// World seeds start here; training worlds use lower seeds.
pub const HELD_OUT_WORLD_SEED: u64 = 5000;
/// Episode seeds start here; training episodes use lower seeds.
pub const HELD_OUT_EPISODE_SEED: u64 = 100;
pub const BASELINE_SEED: u64 = 0;

/// Map used for every generalization run.
pub fn run_map() -> MapConfig {
    MapConfig { size: 11, cell_size: 1.0, ..MapConfig::default() }
}

pub fn rollout_config() -> RolloutConfig {
    RolloutConfig::new(FinetuneConfig::default().max_steps, &run_map()).expect("valid rollout config")
}

pub fn held_out() -> Vec<(World, Vec<Episode>)> {
    (0..HELD_OUT_WORLDS)
        .map(|s| {
            let w = generate_world(HELD_OUT_WORLD_SEED + s, &WorldParams::default()).expect("world generates");
            let eps = (0..HELD_OUT_PER_WORLD)
                .map(|i| generate_episode(&w, HELD_OUT_EPISODE_SEED + i, EpisodeKind::Goal).expect("episode generates"))
                .collect();
            (w, eps)
        })
        .collect()
}

pub fn flatten(set: &[(World, Vec<Episode>)]) -> Vec<Sample<'_>> {
    set.iter().flat_map(|(w, es)| es.iter().map(move |e| Sample { world: w, episode: e })).collect()
}

/// Uniform random walk over the candidate nodes, Stop included.
pub fn random_walk_baseline(test: &[Sample<'_>]) -> Summary {
    let (_, _, summary) =
        evaluate_policy(test, &mut RandomWalk::new(BASELINE_SEED), &rollout_config()).expect("baseline runs");
    summary
}
