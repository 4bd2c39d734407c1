mod common;

use bevnav_core::NodeId;
use bevnav_model::agent::{episode_loss, RolloutConfig};
use bevnav_model::forward::Session;
use bevnav_model::params::Grads;
use bevnav_model::pretrain::{
    hmlm_loss, hsap_loss, mask_cells, msi_loss, replay_prefix, teacher_action, MaskPlan, MaskedOriginals, Sample,
};
use bevnav_model::{FinetuneConfig, Model};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn assert_report(what: &str, r: GradReport) {
    assert!(r.checked > 100, "{what}: only {} entries checked", r.checked);
    assert!(r.max_rel < TOL, "{what}: max relative error {:e} at {}", r.max_rel, r.worst);
}

#[test]
fn action_prediction_loss_gradients() {
    let world = tiny_world(11);
    let ep = episode_with_len(&world, 3);
    let spec = tiny_map().spec().unwrap();
    let ex = replay_prefix(&world, &ep, 2).unwrap();
    let inputs = ex.inputs(&spec, 1).unwrap();
    let teacher = teacher_action(&ep, 2);
    let mut model = tiny_model(1);
    randomize(&mut model, 2, 0.3);
    let f = |m: &Model| -> (f64, Grads) {
        let mut s = Session::new(m, &ep.instruction).unwrap();
        let o = s.step(&ex, &inputs).unwrap();
        let l = hsap_loss(&mut s.graph, o.scores, &inputs.actions, teacher).unwrap();
        (s.graph.value(l).item(), s.graph.backward(l))
    };
    assert_report("hsap", grad_check(&mut model, 3, 3, &f));
}

#[test]
fn masked_word_loss_gradients() {
    let world = tiny_world(12);
    let ep = episode_with_len(&world, 2);
    let spec = tiny_map().spec().unwrap();
    let ex = replay_prefix(&world, &ep, 2).unwrap();
    let inputs = ex.inputs(&spec, 1).unwrap();
    let mut masked = ep.instruction.clone();
    let picks = [1usize, 3];
    let originals = picks.iter().map(|i| masked[*i]).collect();
    picks.iter().for_each(|i| masked[*i] = bevnav_core::env::MASK);
    let plan = MaskPlan { indices: picks.to_vec(), originals: MaskedOriginals::Tokens(originals) };
    let mut model = tiny_model(4);
    randomize(&mut model, 5, 0.3);
    let f = |m: &Model| -> (f64, Grads) {
        let mut s = Session::new(m, &masked).unwrap();
        let o = s.step(&ex, &inputs).unwrap();
        let l = hmlm_loss(m, &mut s.graph, o.text_long, o.text_short, &plan).unwrap().unwrap();
        (s.graph.value(l).item(), s.graph.backward(l))
    };
    assert_report("hmlm", grad_check(&mut model, 3, 6, &f));
}

#[test]
fn masked_cell_loss_gradients() {
    let world = tiny_world(13);
    let ep = episode_with_len(&world, 2);
    let spec = tiny_map().spec().unwrap();
    let ex = replay_prefix(&world, &ep, 1).unwrap();
    let mut inputs = ex.inputs(&spec, 1).unwrap();
    let (masked, plan) = mask_cells(&inputs.map, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(!plan.is_empty());
    inputs.set_map(masked);
    let mut model = tiny_model(7);
    randomize(&mut model, 8, 0.3);
    let f = |m: &Model| -> (f64, Grads) {
        let mut s = Session::new(m, &ep.instruction).unwrap();
        let o = s.step(&ex, &inputs).unwrap();
        let l = msi_loss(m, &mut s.graph, o.cells, &plan).unwrap().unwrap();
        (s.graph.value(l).item(), s.graph.backward(l))
    };
    assert_report("msi", grad_check(&mut model, 3, 9, &f));
}

#[test]
fn full_episode_teacher_forcing_gradients() {
    let world = tiny_world(14);
    let ep = episode_with_len(&world, 3);
    let map = tiny_map();
    let cfg = FinetuneConfig { lambda: 1.0, student_forcing: false, ..FinetuneConfig::default() };
    let rc = RolloutConfig::new(cfg.max_steps, &map).unwrap();
    let mut model = tiny_model(10);
    randomize(&mut model, 11, 0.3);
    let f = |m: &Model| -> (f64, Grads) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (g, teacher, _) = episode_loss(m, Sample { world: &world, episode: &ep }, &cfg, &rc, &mut rng).unwrap();
        (teacher, g)
    };
    assert_report("episode", grad_check(&mut model, 2, 12, &f));
}

#[test]
fn distance_bias_scalars_match_finite_differences() {
    let world = tiny_world(15);
    let ep = episode_with_len(&world, 4);
    let spec = tiny_map().spec().unwrap();
    let ex = replay_prefix(&world, &ep, 3).unwrap();
    let inputs = ex.inputs(&spec, 1).unwrap();
    let mut model = tiny_model(1);
    randomize(&mut model, 2, 0.3);
    let f = |m: &Model| -> f64 {
        let mut s = Session::new(m, &ep.instruction).unwrap();
        let o = s.step(&ex, &inputs).unwrap();
        let l = hsap_loss(&mut s.graph, o.scores, &inputs.actions, NodeId::STOP).unwrap();
        s.graph.value(l).item()
    };
    let grads = {
        let mut s = Session::new(&model, &ep.instruction).unwrap();
        let o = s.step(&ex, &inputs).unwrap();
        let l = hsap_loss(&mut s.graph, o.scores, &inputs.actions, NodeId::STOP).unwrap();
        s.graph.backward(l)
    };
    for name in ["long.0.gasa.w", "long.0.gasa.b", "long.1.gasa.w", "long.1.gasa.b"] {
        let id = model.params.id(name).unwrap();
        let orig = model.params.value(id).item();
        let h = 1e-5;
        model.params.value_mut(id).data[0] = orig + h;
        let lp = f(&model);
        model.params.value_mut(id).data[0] = orig - h;
        let lm = f(&model);
        model.params.value_mut(id).data[0] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grads.get(id).unwrap().item();
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        assert!(rel < 1e-5, "{name}: analytic {analytic:e} numeric {numeric:e}");
    }
}
