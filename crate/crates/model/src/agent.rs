//! Rollouts, pseudo labels and teacher/student fine-tuning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use bevnav_core::env::{Episode, World, SUCCESS_RADIUS};
use bevnav_core::metrics::{self, EpisodeMetrics, Summary};
use bevnav_core::{MapSpec, NodeId, TopoMap, Vec3};

use crate::config::{FinetuneConfig, MapConfig, PseudoLabel};
use crate::encoders::Model;
use crate::error::{ModelError, Result};
use crate::forward::Session;
use crate::graph::softmax_rows;
use crate::params::Grads;
use crate::pretrain::{hsap_loss, teacher_action, FusedScores, Sample, Trainer};
use crate::state::{route, Explorer, Inputs};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Greedy,
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutConfig {
    /// Decision budget; the agent is stopped once it is spent.
    pub max_steps: usize,
    pub spec: MapSpec,
    pub kappa: usize,
}

impl RolloutConfig {
    pub fn new(max_steps: usize, map: &MapConfig) -> Result<Self> {
        if max_steps == 0 {
            return Err(ModelError::Config("max_steps must be at least 1".into()));
        }
        Ok(Self { max_steps, spec: map.spec()?, kappa: map.kappa })
    }
}

/// A chosen action, with the scores behind it when a model made the call.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub action: NodeId,
    pub scores: Option<FusedScores>,
}

pub trait Policy {
    /// Called once before the first decision of an episode.
    fn begin(&mut self, _episode: &Episode) -> Result<()> {
        Ok(())
    }

    /// Picks one of `inputs.actions`.
    fn decide(&mut self, explorer: &Explorer<'_>, inputs: &Inputs) -> Result<Decision>;
}

/// Uniform choice among stopping and the current node's neighbours.
#[derive(Clone, Debug)]
pub struct RandomWalk {
    rng: ChaCha8Rng,
}

impl RandomWalk {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Policy for RandomWalk {
    fn decide(&mut self, ex: &Explorer<'_>, _inputs: &Inputs) -> Result<Decision> {
        let mut options = vec![NodeId::STOP];
        options.extend(ex.topo().neighbors(ex.current()));
        let action = options[self.rng.random_range(0..options.len())];
        Ok(Decision { action, scores: None })
    }
}

/// Replays the expert path, then stops.
#[derive(Clone, Debug, Default)]
pub struct ExpertReplay {
    path: Vec<NodeId>,
    next: usize,
}

impl Policy for ExpertReplay {
    fn begin(&mut self, episode: &Episode) -> Result<()> {
        self.path = episode.expert_path.clone();
        self.next = 1;
        Ok(())
    }

    fn decide(&mut self, _ex: &Explorer<'_>, _inputs: &Inputs) -> Result<Decision> {
        let action = self.path.get(self.next).copied().unwrap_or(NodeId::STOP);
        self.next += 1;
        Ok(Decision { action, scores: None })
    }
}

/// Acts on the fused scores of a model.
pub struct ModelPolicy<'m> {
    model: &'m Model,
    mode: Mode,
    graph_aware: bool,
    rng: ChaCha8Rng,
    session: Option<Session<'m>>,
}

impl<'m> ModelPolicy<'m> {
    pub fn new(model: &'m Model, mode: Mode, seed: u64) -> Self {
        Self { model, mode, graph_aware: true, rng: ChaCha8Rng::seed_from_u64(seed), session: None }
    }

    /// Replaces graph-aware attention over nodes by plain self-attention.
    pub fn without_distance_bias(mut self) -> Self {
        self.graph_aware = false;
        self
    }
}

impl Policy for ModelPolicy<'_> {
    fn begin(&mut self, episode: &Episode) -> Result<()> {
        let mut s = Session::new(self.model, &episode.instruction)?;
        s.graph_aware = self.graph_aware;
        self.session = Some(s);
        Ok(())
    }

    fn decide(&mut self, ex: &Explorer<'_>, inputs: &Inputs) -> Result<Decision> {
        let s = self.session.as_mut().ok_or_else(|| ModelError::Config("decide before begin".into()))?;
        let out = s.step(ex, inputs)?;
        let i = match self.mode {
            Mode::Greedy => out.fused.argmax(),
            Mode::Sample => sample_index(&out.fused.fused(), &mut self.rng),
        };
        Ok(Decision { action: inputs.actions[i], scores: Some(out.fused) })
    }
}

/// Draws an index from the softmax of `scores`.
pub fn sample_index(scores: &[f64], rng: &mut impl Rng) -> usize {
    let mut p = Mat::row_vector(scores.to_vec());
    softmax_rows(&mut p);
    let mut u: f64 = rng.random();
    for (i, q) in p.data.iter().enumerate() {
        if u < *q {
            return i;
        }
        u -= q;
    }
    p.data.len() - 1
}

/// One decision as written to a rollout log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub at: NodeId,
    pub chosen: NodeId,
    pub stop: bool,
    /// Nodes walked to carry the action out, both ends included.
    pub route: Vec<NodeId>,
    pub delta: Option<f64>,
    /// Best fused scores, highest first.
    pub top: Vec<(NodeId, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub trajectory: Vec<NodeId>,
    pub log: Vec<StepLog>,
    /// The decision budget ran out before the agent stopped.
    pub forced_stop: bool,
}

impl Rollout {
    pub fn jsonl(&self) -> String {
        self.log.iter().map(|l| serde_json::to_string(l).expect("log serializes") + "\n").collect()
    }
}

const LOG_TOP_K: usize = 3;

pub fn rollout(world: &World, episode: &Episode, policy: &mut dyn Policy, cfg: &RolloutConfig) -> Result<Rollout> {
    let mut ex = Explorer::new(world, episode.start, episode.start_heading)?;
    policy.begin(episode)?;
    let mut log = Vec::new();
    for step in 0..cfg.max_steps {
        let inputs = ex.inputs(&cfg.spec, cfg.kappa)?;
        let d = policy.decide(&ex, &inputs)?;
        if inputs.action_index(d.action).is_none() {
            return Err(ModelError::Label(d.action.to_string()));
        }
        let at = ex.current();
        let stop = d.action.is_stop();
        let route = if stop { vec![at] } else { ex.go_to(d.action)? };
        let (delta, top) = match &d.scores {
            Some(s) => {
                let mut top: Vec<(NodeId, f64)> = s.actions.iter().map(|a| (a.node, a.fused)).collect();
                top.sort_by(|a, b| b.1.total_cmp(&a.1));
                top.truncate(LOG_TOP_K);
                (Some(s.delta), top)
            }
            None => (None, Vec::new()),
        };
        log.push(StepLog { step, at, chosen: d.action, stop, route, delta, top });
        if stop {
            return Ok(Rollout { trajectory: ex.path().to_vec(), log, forced_stop: false });
        }
    }
    Ok(Rollout { trajectory: ex.path().to_vec(), log, forced_stop: true })
}

/// Rolls out every sample and scores the trajectories.
pub fn evaluate_policy(
    samples: &[Sample<'_>],
    policy: &mut dyn Policy,
    cfg: &RolloutConfig,
) -> Result<(Vec<Rollout>, Vec<EpisodeMetrics>, Summary)> {
    let mut rollouts = Vec::with_capacity(samples.len());
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let r = rollout(s.world, s.episode, policy, cfg)?;
        records.push(metrics::evaluate(&r.trajectory, s.episode, s.world)?);
        rollouts.push(r);
    }
    let summary = metrics::aggregate(&records)?;
    Ok((rollouts, records, summary))
}

fn current(map: &TopoMap) -> Result<NodeId> {
    map.current().ok_or_else(|| ModelError::Label("map has no current node".into()))
}

/// Stop once within the success radius of the target, otherwise the
/// actionable node closest to the target along the world graph.
pub fn goal_pseudo_label(map: &TopoMap, world: &World, target: NodeId) -> Result<NodeId> {
    let cur = current(map)?;
    if (world.position(cur)? - world.position(target)?).norm() < SUCCESS_RADIUS {
        return Ok(NodeId::STOP);
    }
    let dist = world.distances_from(target)?;
    let mut best = (NodeId::STOP, f64::INFINITY);
    for a in map.global_action_space().into_iter().skip(1) {
        let d = dist[a.0 as usize];
        if d < best.1 {
            best = (a, d);
        }
    }
    Ok(best.0)
}

fn positions(world: &World, path: &[NodeId]) -> Result<Vec<Vec3>> {
    Ok(path.iter().map(|id| world.position(*id)).collect::<bevnav_core::Result<_>>()?)
}

/// The action whose resulting path (the walk so far plus the route to the
/// action) is most faithful to the expert path.
pub fn fidelity_pseudo_label(map: &TopoMap, world: &World, partial: &[NodeId], expert: &[NodeId]) -> Result<NodeId> {
    let cur = current(map)?;
    if partial.last() != Some(&cur) {
        return Err(ModelError::Label("walk does not end at the current node".into()));
    }
    let reference = positions(world, expert)?;
    let mut best = (NodeId::STOP, f64::NEG_INFINITY);
    for a in map.global_action_space() {
        let mut walk = partial.to_vec();
        if !a.is_stop() {
            walk.extend_from_slice(&route(map, cur, a)?[1..]);
        }
        let score = metrics::ndtw(&positions(world, &walk)?, &reference, metrics::THRESHOLD)?;
        if score > best.1 {
            best = (a, score);
        }
    }
    Ok(best.0)
}

pub fn pseudo_label(kind: PseudoLabel, ex: &Explorer<'_>, episode: &Episode) -> Result<NodeId> {
    match kind {
        PseudoLabel::Goal => goal_pseudo_label(ex.topo(), ex.world(), episode.target),
        PseudoLabel::Fidelity => fidelity_pseudo_label(ex.topo(), ex.world(), ex.path(), &episode.expert_path),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub step: usize,
    pub loss: f64,
    pub teacher: f64,
    pub student: f64,
}

impl FinetuneReport {
    pub const CSV_HEADER: &'static str = "step,loss,teacher,student";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss, self.teacher, self.student)
    }
}

/// Teacher-forcing and student-forcing losses of one episode on one graph,
/// combined as `lambda * teacher + student`. Returns the gradients and the
/// two loss values.
pub fn episode_loss(
    model: &Model,
    sample: Sample<'_>,
    cfg: &FinetuneConfig,
    rollout_cfg: &RolloutConfig,
    rng: &mut impl Rng,
) -> Result<(Grads, f64, f64)> {
    let ep = sample.episode;
    let mut s = Session::new(model, &ep.instruction)?;

    let mut ex = Explorer::new(sample.world, ep.start, ep.start_heading)?;
    let mut teacher_terms = Vec::with_capacity(ep.expert_path.len());
    for len in 1..=ep.expert_path.len() {
        if len > 1 {
            ex.go_to(ep.expert_path[len - 1])?;
        }
        let inputs = ex.inputs(&rollout_cfg.spec, rollout_cfg.kappa)?;
        let out = s.step(&ex, &inputs)?;
        teacher_terms.push(hsap_loss(&mut s.graph, out.scores, &inputs.actions, teacher_action(ep, len))?);
    }
    let teacher = s.graph.add_scalars(&teacher_terms);

    let mut student_terms = Vec::new();
    if cfg.student_forcing {
        let mut ex = Explorer::new(sample.world, ep.start, ep.start_heading)?;
        for _ in 0..rollout_cfg.max_steps {
            let inputs = ex.inputs(&rollout_cfg.spec, rollout_cfg.kappa)?;
            let out = s.step(&ex, &inputs)?;
            let label = pseudo_label(cfg.label, &ex, ep)?;
            student_terms.push(hsap_loss(&mut s.graph, out.scores, &inputs.actions, label)?);
            let action = inputs.actions[sample_index(&out.fused.fused(), rng)];
            if action.is_stop() {
                break;
            }
            ex.go_to(action)?;
        }
    }
    let g = &mut s.graph;
    let weighted = g.scale(teacher, cfg.lambda);
    let (loss, student) = if student_terms.is_empty() {
        (weighted, 0.0)
    } else {
        let st = g.add_scalars(&student_terms);
        (g.add_scalars(&[weighted, st]), g.value(st).item())
    };
    let tv = g.value(teacher).item();
    Ok((g.backward(loss), tv, student))
}

/// One optimizer step over a minibatch of episodes.
pub fn finetune_step(
    trainer: &mut Trainer,
    batch: &[Sample<'_>],
    cfg: &FinetuneConfig,
    rollout_cfg: &RolloutConfig,
    rng: &mut impl Rng,
) -> Result<FinetuneReport> {
    let mut grads = Grads::new(trainer.model.params.len());
    let (mut tf, mut sf) = (0.0, 0.0);
    for sample in batch {
        let (g, t, s) = episode_loss(&trainer.model, *sample, cfg, rollout_cfg, rng)?;
        grads.merge(g);
        tf += t;
        sf += s;
    }
    let n = batch.len().max(1) as f64;
    let step = trainer.steps();
    trainer.apply(grads, batch.len());
    let (tf, sf) = (tf / n, sf / n);
    Ok(FinetuneReport { step, loss: cfg.lambda * tf + sf, teacher: tf, student: sf })
}
