mod common;

use bevnav_core::env::MASK;
use bevnav_core::NodeId;
use bevnav_model::forward::Session;
use bevnav_model::pretrain::*;
use bevnav_model::{Model, PretrainConfig, Schedule};
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Asserts `count` lies within three binomial standard deviations of `n·p`.
fn within_3_sigma(what: &str, count: usize, n: usize, p: f64) {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((count as f64 - mean).abs() <= 3.0 * sd, "{what}: {count} of {n}, expected {mean:.0} ± {:.0}", 3.0 * sd);
}

#[test]
fn token_mask_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens: Vec<u32> = (0..100).map(|i| MASK + 2 + i % 20).collect();
    let mut masked = 0;
    for _ in 0..1000 {
        let (out, plan) = mask_tokens(&tokens, 0.15, &mut rng).unwrap();
        let MaskedOriginals::Tokens(orig) = &plan.originals else { panic!("token plan") };
        for (i, o) in plan.indices.iter().zip(orig) {
            assert_eq!(out[*i], MASK);
            assert_eq!(tokens[*i], *o);
        }
        assert_eq!(out.iter().filter(|t| **t == MASK).count(), plan.len());
        masked += plan.len();
    }
    within_3_sigma("tokens", masked, 100_000, 0.15);
}

#[test]
fn cell_mask_rate_and_support() {
    let world = tiny_world(31);
    let ep = episode_with_len(&world, 3);
    let ex = replay_prefix(&world, &ep, 3).unwrap();
    let map = ex.inputs(&tiny_map().spec().unwrap(), 1).unwrap().map;
    let observed = map.observed_cells();
    assert!(!observed.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut trials, mut masked) = (0, 0);
    while trials < 100_000 {
        let (out, plan) = mask_cells(&map, 0.15, &mut rng).unwrap();
        let MaskedOriginals::Cells(orig) = &plan.originals else { panic!("cell plan") };
        for (u, v, labels) in orig {
            assert!(map.is_observed(*u, *v));
            assert!(!out.is_observed(*u, *v) && out.masked()[map.index(*u, *v)]);
            assert_eq!(map.semantics(*u, *v), *labels);
            assert!(out.feature(*u, *v).iter().all(|f| *f == 0.0));
        }
        trials += observed.len();
        masked += plan.len();
    }
    within_3_sigma("cells", masked, trials, 0.15);
}

#[test]
fn mask_probability_is_validated() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(mask_tokens(&[1, 2], -0.1, &mut rng).is_err());
    let map = bevnav_core::MetricMap::empty(tiny_map().spec().unwrap(), 5);
    assert!(mask_cells(&map, 1.01, &mut rng).is_err());
    assert!(mask_cells(&map, 0.5, &mut rng).unwrap().1.is_empty());
}

#[test]
fn task_mix_follows_ratio() {
    let sampler = TaskSampler::new([5, 5, 1]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut counts = [0usize; 3];
    for _ in 0..10_000 {
        let task = sampler.sample(&mut rng);
        counts[Task::ALL.iter().position(|t| *t == task).unwrap()] += 1;
    }
    for (c, w) in counts.iter().zip([5.0, 5.0, 1.0]) {
        within_3_sigma("task", *c, 10_000, w / 11.0);
    }
    assert!(TaskSampler::new([0, 0, 0]).is_err());
}

#[test]
fn chunk_lengths_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut counts = [0usize; 6];
    for _ in 0..12_000 {
        let l = chunk_length(6, &mut rng);
        assert!((1..=6).contains(&l));
        counts[l - 1] += 1;
    }
    counts.iter().for_each(|c| within_3_sigma("chunk", *c, 12_000, 1.0 / 6.0));
    assert_eq!(chunk_length(1, &mut rng), 1);
}

#[test]
fn teacher_is_next_expert_node_then_stop() {
    let world = tiny_world(32);
    let ep = episode_with_len(&world, 3);
    let n = ep.expert_path.len();
    for len in 1..n {
        assert_eq!(teacher_action(&ep, len), ep.expert_path[len]);
        let ex = replay_prefix(&world, &ep, len).unwrap();
        assert_eq!(ex.current(), ep.expert_path[len - 1]);
    }
    assert_eq!(teacher_action(&ep, n), NodeId::STOP);
}

#[test]
fn fusion_contract_cases() {
    let global = 0.7;
    let local = -1.3;
    for delta in [0.0, 0.25, 0.5, 0.75, 1.0] {
        assert_eq!(fuse(global, None, delta), global);
        let want = delta * global + (1.0 - delta) * local;
        assert!((fuse(global, Some(local), delta) - want).abs() < 1e-15);
    }
    assert_eq!(fuse(global, Some(local), 0.0), local);
    assert_eq!(fuse(global, Some(local), 1.0), global);
}

#[test]
fn fused_row_matches_reported_scores() {
    let world = tiny_world(33);
    let ep = episode_with_len(&world, 4);
    let ex = replay_prefix(&world, &ep, 3).unwrap();
    let inputs = ex.inputs(&tiny_map().spec().unwrap(), 1).unwrap();
    let mut model = tiny_model(5);
    randomize(&mut model, 6, 0.5);
    let mut s = Session::new(&model, &ep.instruction).unwrap();
    let o = s.step(&ex, &inputs).unwrap();
    let row = s.graph.value(o.scores).clone();
    assert_eq!(row.rows, 1);
    assert_eq!(o.fused.actions.len(), inputs.actions.len());
    assert!(o.fused.delta > 0.0 && o.fused.delta < 1.0);
    for (i, a) in o.fused.actions.iter().enumerate() {
        assert_eq!(a.node, inputs.actions[i]);
        assert_eq!(a.local.is_some(), inputs.local_cells[i].is_some());
        assert!((row.data[i] - fuse(a.global, a.local, o.fused.delta)).abs() < 1e-12);
    }
    // Stop is always scored on the center cell.
    assert_eq!(inputs.actions[0], NodeId::STOP);
    assert!(o.fused.actions[0].local.is_some());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn full_gate_ignores_metric_scores(
        global in prop::collection::vec(-5.0f64..5.0, 1..8),
        seed in 0u64..10_000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes: Vec<NodeId> = (0..global.len()).map(|i| NodeId(i as u32)).collect();
        let local: Vec<Option<f64>> = global.iter().map(|_| rng.random_bool(0.5).then(|| rng.random_range(-50.0..50.0))).collect();
        let plain = FusedScores::new(&nodes, &global, vec![None; global.len()], 1.0);
        let fused = FusedScores::new(&nodes, &global, local, 1.0);
        prop_assert_eq!(plain.argmax(), fused.argmax());
    }

    #[test]
    fn fusion_lies_between_branches(g in -5.0f64..5.0, l in -5.0f64..5.0, delta in 0.0f64..=1.0) {
        let f = fuse(g, Some(l), delta);
        prop_assert!(f >= g.min(l) - 1e-12 && f <= g.max(l) + 1e-12);
    }
}

fn zero_output(model: &mut Model, prefix: &str) {
    for suffix in ["w", "b"] {
        let id = model.params.id(&format!("{prefix}.{suffix}")).unwrap();
        model.params.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn uninformed_heads_give_uniform_losses() {
    let world = tiny_world(34);
    let ep = episode_with_len(&world, 3);
    let ex = replay_prefix(&world, &ep, 2).unwrap();
    let mut inputs = ex.inputs(&tiny_map().spec().unwrap(), 1).unwrap();
    let mut model = tiny_model(7);
    randomize(&mut model, 8, 0.5);
    for head in ["head.node.down", "head.cell.down", "head.msi.down", "head.word.out"] {
        zero_output(&mut model, head);
    }

    let mut s = Session::new(&model, &ep.instruction).unwrap();
    let o = s.step(&ex, &inputs).unwrap();
    let l = hsap_loss(&mut s.graph, o.scores, &inputs.actions, teacher_action(&ep, 2)).unwrap();
    assert!((s.graph.value(l).item() - (inputs.actions.len() as f64).ln()).abs() < 1e-12);

    let (masked, plan) = mask_tokens(&ep.instruction, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut s = Session::new(&model, &masked).unwrap();
    let o = s.step(&ex, &inputs).unwrap();
    let l = hmlm_loss(&model, &mut s.graph, o.text_long, o.text_short, &plan).unwrap().unwrap();
    assert!((s.graph.value(l).item() - (model.cfg.vocab_size as f64).ln()).abs() < 1e-12);

    let (masked, plan) = mask_cells(&inputs.map, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    inputs.set_map(masked);
    let mut s = Session::new(&model, &ep.instruction).unwrap();
    let o = s.step(&ex, &inputs).unwrap();
    let l = msi_loss(&model, &mut s.graph, o.cells, &plan).unwrap().unwrap();
    assert!((s.graph.value(l).item() - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn losses_reject_mismatched_plans() {
    let world = tiny_world(35);
    let ep = episode_with_len(&world, 2);
    let ex = replay_prefix(&world, &ep, 1).unwrap();
    let inputs = ex.inputs(&tiny_map().spec().unwrap(), 1).unwrap();
    let model = tiny_model(9);
    let mut s = Session::new(&model, &ep.instruction).unwrap();
    let o = s.step(&ex, &inputs).unwrap();
    let cells = MaskPlan { indices: vec![], originals: MaskedOriginals::Cells(vec![]) };
    let tokens = MaskPlan { indices: vec![], originals: MaskedOriginals::Tokens(vec![]) };
    assert!(hmlm_loss(&model, &mut s.graph, o.text_long, o.text_short, &cells).is_err());
    assert!(msi_loss(&model, &mut s.graph, o.cells, &tokens).is_err());
    assert!(hmlm_loss(&model, &mut s.graph, o.text_long, o.text_short, &tokens).unwrap().is_none());
    assert!(hsap_loss(&mut s.graph, o.scores, &inputs.actions, NodeId(999)).is_err());
}

/// Summed action-prediction loss over every prefix of every episode.
fn action_loss(model: &Model, samples: &[Sample<'_>]) -> f64 {
    let spec = tiny_map().spec().unwrap();
    let mut total = 0.0;
    for s in samples {
        for len in 1..=s.episode.expert_path.len() {
            let ex = replay_prefix(s.world, s.episode, len).unwrap();
            let inputs = ex.inputs(&spec, 1).unwrap();
            let mut sess = Session::new(model, &s.episode.instruction).unwrap();
            let o = sess.step(&ex, &inputs).unwrap();
            let l = hsap_loss(&mut sess.graph, o.scores, &inputs.actions, teacher_action(s.episode, len)).unwrap();
            total += sess.graph.value(l).item();
        }
    }
    total
}

#[test]
fn pretraining_reduces_action_loss() {
    let world = tiny_world(36);
    let episodes: Vec<_> = (0..4)
        .map(|i| bevnav_core::env::generate_episode(&world, 40 + i, bevnav_core::env::EpisodeKind::Goal).unwrap())
        .collect();
    let samples: Vec<Sample> = episodes.iter().map(|e| Sample { world: &world, episode: e }).collect();
    let cfg = PretrainConfig { steps: 150, batch: 4, lr: 3e-3, warmup: 10, ..PretrainConfig::default() };
    let map = tiny_map();
    let sampler = TaskSampler::new(cfg.task_ratio).unwrap();
    let schedule = Schedule { peak_lr: cfg.lr, warmup: cfg.warmup, total: cfg.steps };
    let mut trainer = Trainer::new(tiny_model(10), schedule, cfg.weight_decay, Some(5.0));
    let before = action_loss(&trainer.model, &samples);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut seen = std::collections::HashSet::new();
    for step in 0..cfg.steps {
        let r = pretrain_step(&mut trainer, &samples, &sampler, &cfg, &map, &mut rng).unwrap();
        assert_eq!(r.step, step);
        assert!(r.loss.is_finite());
        seen.insert(r.task);
    }
    let after = action_loss(&trainer.model, &samples);
    assert_eq!(seen.len(), 3);
    assert!(after < 0.8 * before, "action loss {before:.3} -> {after:.3}");
}
