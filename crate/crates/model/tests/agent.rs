mod common;

use std::collections::BTreeMap;

use bevnav_core::env::{generate_episode, Episode, EpisodeKind, World};
use bevnav_core::{NodeId, NodeKind, TopoMap, Vec3};
use bevnav_model::agent::*;
use bevnav_model::forward::Session;
use bevnav_model::pretrain::{hsap_loss, replay_prefix, teacher_action, Sample, Trainer};
use bevnav_model::state::{Explorer, Inputs};
use bevnav_model::{FinetuneConfig, PseudoLabel, Schedule};
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plays a fixed rule instead of a model.
struct Scripted<F>(F);

impl<F: FnMut(&Explorer<'_>, &Inputs) -> NodeId> Policy for Scripted<F> {
    fn decide(&mut self, ex: &Explorer<'_>, inputs: &Inputs) -> bevnav_model::Result<Decision> {
        Ok(Decision { action: (self.0)(ex, inputs), scores: None })
    }
}

fn rollout_cfg(max_steps: usize) -> RolloutConfig {
    RolloutConfig::new(max_steps, &tiny_map()).unwrap()
}

#[test]
fn stopping_first_keeps_the_agent_at_the_start() {
    let world = tiny_world(41);
    let ep = episode_with_len(&world, 3);
    let r = rollout(&world, &ep, &mut Scripted(|_: &Explorer<'_>, _: &Inputs| NodeId::STOP), &rollout_cfg(10)).unwrap();
    assert_eq!(r.trajectory, vec![ep.start]);
    assert_eq!(r.log.len(), 1);
    assert!(r.log[0].stop && !r.forced_stop);
    assert_eq!(r.log[0].route, vec![ep.start]);
}

#[test]
fn budget_forces_a_stop() {
    let world = tiny_world(42);
    let ep = episode_with_len(&world, 3);
    let never_stop = |_: &Explorer<'_>, i: &Inputs| *i.actions.last().unwrap();
    for budget in [1, 4, 7] {
        let r = rollout(&world, &ep, &mut Scripted(never_stop), &rollout_cfg(budget)).unwrap();
        assert_eq!(r.log.len(), budget);
        assert!(r.forced_stop);
        assert!(r.log.iter().all(|l| !l.stop));
    }
}

#[test]
fn actions_outside_the_action_space_are_rejected() {
    let world = tiny_world(43);
    let ep = episode_with_len(&world, 3);
    let r = rollout(&world, &ep, &mut Scripted(|_: &Explorer<'_>, _: &Inputs| NodeId(999)), &rollout_cfg(5));
    assert!(r.is_err());
    assert!(RolloutConfig::new(0, &tiny_map()).is_err());
}

fn chain_episode() -> Episode {
    Episode {
        id: 0,
        kind: EpisodeKind::Goal,
        start: NodeId(0),
        start_heading: 0.0,
        target: NodeId(3),
        expert_path: (0..4).map(NodeId).collect(),
        instruction: vec![1, 9, 10, 2],
        success_radius: bevnav_core::env::SUCCESS_RADIUS,
    }
}

#[test]
fn far_actions_walk_through_visited_nodes() {
    let world = chain_world();
    let ep = chain_episode();
    let plan = [NodeId(1), NodeId(0), NodeId(2), NodeId::STOP];
    let mut k = 0;
    let script = |_: &Explorer<'_>, i: &Inputs| {
        let a = plan[k];
        assert!(i.action_index(a).is_some(), "{a} not actionable at step {k}");
        k += 1;
        a
    };
    let r = rollout(&world, &ep, &mut Scripted(script), &rollout_cfg(10)).unwrap();
    assert_eq!(r.trajectory, [0, 1, 0, 1, 2].map(NodeId).to_vec());
    assert_eq!(r.log[2].route, [0, 1, 2].map(NodeId).to_vec());
    assert_eq!(r.log[1].route, [1, 0].map(NodeId).to_vec());
}

#[test]
fn random_walk_moves_to_neighbours_only() {
    let world = tiny_world(44);
    let eps: Vec<Episode> = (0..10).map(|i| generate_episode(&world, i, EpisodeKind::Goal).unwrap()).collect();
    let samples: Vec<Sample> = eps.iter().map(|e| Sample { world: &world, episode: e }).collect();
    let (a, _, sa) = evaluate_policy(&samples, &mut RandomWalk::new(3), &rollout_cfg(15)).unwrap();
    let (b, _, sb) = evaluate_policy(&samples, &mut RandomWalk::new(3), &rollout_cfg(15)).unwrap();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    for r in &a {
        assert!(r.log.iter().all(|l| l.route.len() <= 2));
    }
}

/// Shortest world-graph distance from `source` to every node.
fn dijkstra(world: &World, source: NodeId) -> BTreeMap<NodeId, f64> {
    let mut dist: BTreeMap<NodeId, f64> = world.nodes.iter().map(|n| (n.id, f64::INFINITY)).collect();
    let mut open: Vec<NodeId> = world.nodes.iter().map(|n| n.id).collect();
    dist.insert(source, 0.0);
    while !open.is_empty() {
        let (i, _) = open.iter().enumerate().min_by(|a, b| dist[a.1].total_cmp(&dist[b.1])).unwrap();
        let u = open.swap_remove(i);
        for e in &world.edges {
            let v = if e.a == u {
                e.b
            } else if e.b == u {
                e.a
            } else {
                continue;
            };
            let d = dist[&u] + e.distance;
            if d < dist[&v] {
                dist.insert(v, d);
            }
        }
    }
    dist
}

fn dist3(a: &Vec3, b: &Vec3) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt()
}

/// A random walk over the world graph of length `moves` from the episode
/// start.
fn wander<'w>(world: &'w World, ep: &Episode, moves: usize, rng: &mut impl Rng) -> Explorer<'w> {
    let mut ex = Explorer::new(world, ep.start, ep.start_heading).unwrap();
    for _ in 0..moves {
        let options: Vec<NodeId> = ex.topo().global_action_space().into_iter().skip(1).collect();
        ex.go_to(options[rng.random_range(0..options.len())]).unwrap();
    }
    ex
}

#[test]
fn goal_label_matches_distance_oracle() {
    let world = tiny_world(45);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut stops = 0;
    for i in 0..40 {
        let ep = generate_episode(&world, i, EpisodeKind::Goal).unwrap();
        let ex = wander(&world, &ep, i as usize % 5, &mut rng);
        let label = goal_pseudo_label(ex.topo(), &world, ep.target).unwrap();
        let target = position(&world, ep.target);
        if dist3(&position(&world, ex.current()), &target) < 3.0 {
            assert_eq!(label, NodeId::STOP);
            stops += 1;
            continue;
        }
        let dist = dijkstra(&world, ep.target);
        let actions: Vec<NodeId> = ex.topo().global_action_space().into_iter().skip(1).collect();
        let best = actions.iter().map(|a| dist[a]).fold(f64::INFINITY, f64::min);
        assert_eq!(dist[&label], best);
        let first = actions.iter().find(|a| dist[a] == best).unwrap();
        assert_eq!(label, *first);
    }
    assert!(stops > 0 && stops < 40);
}

#[test]
fn goal_label_in_chain_world() {
    let world = chain_world();
    let ep = chain_episode();
    let ex = Explorer::new(&world, NodeId(0), 0.0).unwrap();
    // Node 3 is 3 m away, exactly on the radius, so the agent must move on.
    assert_eq!(goal_pseudo_label(ex.topo(), &world, NodeId(3)).unwrap(), NodeId(1));
    assert_eq!(goal_pseudo_label(ex.topo(), &world, NodeId(2)).unwrap(), NodeId::STOP);
    let ex = replay_prefix(&world, &ep, 4).unwrap();
    assert_eq!(goal_pseudo_label(ex.topo(), &world, NodeId(3)).unwrap(), NodeId::STOP);
}

fn dtw_oracle(a: &[Vec3], b: &[Vec3]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut d = vec![vec![f64::INFINITY; m + 1]; n + 1];
    d[0][0] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            d[i][j] = dist3(&a[i - 1], &b[j - 1]) + d[i - 1][j].min(d[i][j - 1]).min(d[i - 1][j - 1]);
        }
    }
    d[n][m]
}

fn ndtw_oracle(world: &World, walk: &[NodeId], expert: &[NodeId]) -> f64 {
    let p = |path: &[NodeId]| path.iter().map(|id| position(world, *id)).collect::<Vec<_>>();
    (-dtw_oracle(&p(walk), &p(expert)) / (expert.len() as f64 * 3.0)).exp()
}

/// Shortest route over the topological map whose interior nodes are all
/// visited, found by exhaustive search over simple paths.
fn route_oracle(map: &TopoMap, from: NodeId, to: NodeId) -> Vec<NodeId> {
    if map.edge(from, to).is_some() {
        return vec![from, to];
    }
    let visited = |id: NodeId| matches!(map.node(id).unwrap().kind, NodeKind::Visited | NodeKind::Current);
    let mut best: Option<(f64, Vec<NodeId>)> = None;
    let mut stack = vec![(vec![from], 0.0)];
    while let Some((path, len)) = stack.pop() {
        let last = *path.last().unwrap();
        if last == to {
            if best.as_ref().is_none_or(|(l, _)| len < *l) {
                best = Some((len, path));
            }
            continue;
        }
        if last != from && !visited(last) {
            continue;
        }
        for (a, b, d) in map.edges() {
            let next = if a == last {
                b
            } else if b == last {
                a
            } else {
                continue;
            };
            if !path.contains(&next) {
                let mut p = path.clone();
                p.push(next);
                stack.push((p, len + d));
            }
        }
    }
    best.expect("reachable").1
}

#[test]
fn fidelity_label_matches_exhaustive_oracle() {
    let world = tiny_world(46);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..30 {
        let ep = generate_episode(&world, i, EpisodeKind::Fidelity).unwrap();
        let ex = wander(&world, &ep, i as usize % 4, &mut rng);
        let label = fidelity_pseudo_label(ex.topo(), &world, ex.path(), &ep.expert_path).unwrap();
        let mut scores = Vec::new();
        for a in ex.topo().global_action_space() {
            let mut walk = ex.path().to_vec();
            if !a.is_stop() {
                walk.extend_from_slice(&route_oracle(ex.topo(), ex.current(), a)[1..]);
            }
            scores.push((a, ndtw_oracle(&world, &walk, &ep.expert_path)));
        }
        let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let got = scores.iter().find(|s| s.0 == label).unwrap().1;
        assert!((got - best).abs() < 1e-9, "episode {i}: label {label} scores {got} but best is {best}");
    }
}

#[test]
fn fidelity_label_trivial_cases() {
    let world = chain_world();
    let ep = chain_episode();
    let ex = replay_prefix(&world, &ep, 4).unwrap();
    assert_eq!(fidelity_pseudo_label(ex.topo(), &world, ex.path(), &ep.expert_path).unwrap(), NodeId::STOP);
    let ex = Explorer::new(&world, NodeId(0), 0.0).unwrap();
    let expert = [NodeId(0), NodeId(1)];
    assert_eq!(fidelity_pseudo_label(ex.topo(), &world, ex.path(), &expert).unwrap(), NodeId(1));
    assert!(fidelity_pseudo_label(ex.topo(), &world, &[NodeId(1)], &expert).is_err());
}

#[test]
fn pure_teacher_forcing_sums_step_losses() {
    let world = tiny_world(47);
    let ep = episode_with_len(&world, 4);
    let cfg = FinetuneConfig { lambda: 1.0, student_forcing: false, ..FinetuneConfig::default() };
    let rc = RolloutConfig::new(cfg.max_steps, &tiny_map()).unwrap();
    let mut model = tiny_model(12);
    randomize(&mut model, 13, 0.3);
    let sample = Sample { world: &world, episode: &ep };
    let (_, teacher, student) = episode_loss(&model, sample, &cfg, &rc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(student, 0.0);
    let mut want = 0.0;
    for len in 1..=ep.expert_path.len() {
        let ex = replay_prefix(&world, &ep, len).unwrap();
        let inputs = ex.inputs(&rc.spec, rc.kappa).unwrap();
        let mut s = Session::new(&model, &ep.instruction).unwrap();
        let o = s.step(&ex, &inputs).unwrap();
        let l = hsap_loss(&mut s.graph, o.scores, &inputs.actions, teacher_action(&ep, len)).unwrap();
        want += s.graph.value(l).item();
    }
    assert!((teacher - want).abs() < 1e-9, "{teacher} vs {want}");

    let mut trainer = Trainer::new(model, Schedule { peak_lr: 1e-3, warmup: 1, total: 10 }, 0.0, None);
    let r = finetune_step(&mut trainer, &[sample], &cfg, &rc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!((r.loss - want).abs() < 1e-9 && r.student == 0.0);
}

#[test]
fn zero_lambda_is_pure_student_forcing() {
    let world = tiny_world(48);
    let ep = episode_with_len(&world, 3);
    let model = tiny_model(14);
    let rc = RolloutConfig::new(6, &tiny_map()).unwrap();
    let sample = Sample { world: &world, episode: &ep };
    let cfg = FinetuneConfig { lambda: 0.0, max_steps: 6, ..FinetuneConfig::default() };
    let mut trainer = Trainer::new(model.clone(), Schedule { peak_lr: 1e-3, warmup: 1, total: 10 }, 0.0, None);
    let r = finetune_step(&mut trainer, &[sample], &cfg, &rc, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert!(r.teacher > 0.0 && r.student > 0.0);
    assert_eq!(r.loss, r.student);

    let off = FinetuneConfig { student_forcing: false, ..cfg };
    let (grads, _, _) = episode_loss(&model, sample, &off, &rc, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(grads.global_norm(), 0.0);
}

#[test]
fn student_loss_follows_pseudo_labels() {
    let world = chain_world();
    let ep = chain_episode();
    let model = tiny_model(15);
    let rc = RolloutConfig::new(8, &tiny_map()).unwrap();
    let sample = Sample { world: &world, episode: &ep };
    for label in [PseudoLabel::Goal, PseudoLabel::Fidelity] {
        let cfg = FinetuneConfig { lambda: 0.0, label, max_steps: 8, ..FinetuneConfig::default() };
        let (_, _, student) = episode_loss(&model, sample, &cfg, &rc, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(student.is_finite() && student > 0.0);
    }
}

#[test]
fn greedy_rollouts_are_reproducible_and_logged() {
    let world = tiny_world(49);
    let eps: Vec<Episode> = (0..5).map(|i| generate_episode(&world, i, EpisodeKind::Goal).unwrap()).collect();
    let samples: Vec<Sample> = eps.iter().map(|e| Sample { world: &world, episode: e }).collect();
    let mut model = tiny_model(16);
    randomize(&mut model, 17, 0.5);
    let rc = rollout_cfg(10);
    let (a, ma, _) = evaluate_policy(&samples, &mut ModelPolicy::new(&model, Mode::Greedy, 0), &rc).unwrap();
    let (b, mb, _) = evaluate_policy(&samples, &mut ModelPolicy::new(&model, Mode::Greedy, 99), &rc).unwrap();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    for r in &a {
        let lines: Vec<StepLog> = r.jsonl().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, r.log);
        for l in &r.log {
            assert!(l.delta.is_some_and(|d| (0.0..=1.0).contains(&d)));
            assert!(!l.top.is_empty() && l.top.windows(2).all(|w| w[0].1 >= w[1].1));
            assert_eq!(l.top[0].0, l.chosen);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampled_rollouts_respect_the_contract(seed in 0u64..500, budget in 1usize..12) {
        let world = tiny_world(50 + seed % 3);
        let ep = generate_episode(&world, seed, EpisodeKind::Goal).unwrap();
        let model = tiny_model(seed);
        let rc = rollout_cfg(budget);
        let r = rollout(&world, &ep, &mut ModelPolicy::new(&model, Mode::Sample, seed), &rc).unwrap();
        prop_assert!(r.log.len() <= budget);
        prop_assert_eq!(r.forced_stop, !r.log.last().unwrap().stop);
        prop_assert!(r.log.iter().rev().skip(1).all(|l| !l.stop));
        prop_assert_eq!(r.trajectory[0], ep.start);
        let expanded: usize = r.log.iter().map(|l| l.route.len() - 1).sum();
        prop_assert_eq!(r.trajectory.len(), 1 + expanded);
        for w in r.trajectory.windows(2) {
            prop_assert!(world.edge(w[0], w[1]).is_some());
        }
        for l in &r.log {
            prop_assert_eq!(*l.route.first().unwrap(), l.at);
            if !l.stop {
                prop_assert_eq!(*l.route.last().unwrap(), l.chosen);
            }
        }
    }
}
