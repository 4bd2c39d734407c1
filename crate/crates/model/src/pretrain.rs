//! Proxy tasks on the hybrid map: masked word recovery, fused single-action
//! prediction and masked cell semantics, plus the task-mixing trainer.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use bevnav_core::env::{Episode, World, MASK};
use bevnav_core::{MetricMap, NodeId, SemanticSet};

use crate::config::{MapConfig, PretrainConfig};
use crate::encoders::Model;
use crate::error::{ModelError, Result};
use crate::forward::Session;
use crate::graph::{Graph, Var};
use crate::params::{AdamW, Grads, Schedule};
use crate::state::{Explorer, Inputs};
use crate::tensor::Mat;

/// Ground truth hidden by a mask.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskedOriginals {
    Tokens(Vec<u32>),
    /// `(u, v, labels)` of every masked cell.
    Cells(Vec<(usize, usize, SemanticSet)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Token positions or flat cell indices, ascending.
    pub indices: Vec<usize>,
    pub originals: MaskedOriginals,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }
}

fn check_prob(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(ModelError::Config(format!("mask probability {p} outside [0, 1]")))
    }
}

/// Replaces each token by [`MASK`] independently with probability `p`.
pub fn mask_tokens(tokens: &[u32], p: f64, rng: &mut impl Rng) -> Result<(Vec<u32>, MaskPlan)> {
    check_prob(p)?;
    let mut out = tokens.to_vec();
    let mut indices = Vec::new();
    let mut originals = Vec::new();
    for (i, t) in out.iter_mut().enumerate() {
        if rng.random_bool(p) {
            indices.push(i);
            originals.push(*t);
            *t = MASK;
        }
    }
    Ok((out, MaskPlan { indices, originals: MaskedOriginals::Tokens(originals) }))
}

/// Masks each observed cell independently with probability `p`.
pub fn mask_cells(map: &MetricMap, p: f64, rng: &mut impl Rng) -> Result<(MetricMap, MaskPlan)> {
    check_prob(p)?;
    let mut out = map.clone();
    let mut indices = Vec::new();
    let mut originals = Vec::new();
    for (u, v) in map.observed_cells() {
        if rng.random_bool(p) {
            let labels = out.mask_cell(u, v).expect("observed cells are maskable");
            indices.push(map.index(u, v));
            originals.push((u, v, labels));
        }
    }
    Ok((out, MaskPlan { indices, originals: MaskedOriginals::Cells(originals) }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionScore {
    pub node: NodeId,
    pub global: f64,
    /// Present when the action lies in the local action space.
    pub local: Option<f64>,
    pub fused: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedScores {
    pub actions: Vec<ActionScore>,
    pub delta: f64,
}

/// Gated fusion of one action's global and local scores.
pub fn fuse(global: f64, local: Option<f64>, delta: f64) -> f64 {
    match local {
        Some(l) => delta * global + (1.0 - delta) * l,
        None => global,
    }
}

impl FusedScores {
    pub fn new(nodes: &[NodeId], global: &[f64], local: Vec<Option<f64>>, delta: f64) -> Self {
        assert!(nodes.len() == global.len() && nodes.len() == local.len(), "one score per action");
        let actions = nodes
            .iter()
            .zip(global)
            .zip(local)
            .map(|((n, g), l)| ActionScore { node: *n, global: *g, local: l, fused: fuse(*g, l, delta) })
            .collect();
        Self { actions, delta }
    }

    /// Index of the best fused score; ties go to the earlier action.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, a) in self.actions.iter().enumerate() {
            if a.fused > self.actions[best].fused {
                best = i;
            }
        }
        best
    }

    pub fn fused(&self) -> Vec<f64> {
        self.actions.iter().map(|a| a.fused).collect()
    }
}

/// Scores every global action from the node and cell representations and
/// fuses them through the gate computed from the stop node and the center
/// cell. Returns the fused scores as a `1 × actions` row.
pub fn hsap_scores(model: &Model, g: &mut Graph<'_>, nodes: Var, cells: Var, inputs: &Inputs) -> (Var, FusedScores) {
    let picked = g.gather_rows(nodes, &inputs.action_rows);
    let global = model.node_head.apply(g, picked);
    let center = inputs.cells.center;
    let cell_rows: Vec<usize> = inputs.local_cells.iter().map(|c| c.unwrap_or(center)).collect();
    let local = g.gather_rows(cells, &cell_rows);
    let local = model.cell_head.apply(g, local);
    let stop_rep = g.gather_rows(nodes, &[0]);
    let center_rep = g.gather_rows(cells, &[center]);
    let gate_in = g.concat_cols(&[stop_rep, center_rep]);
    let gate = model.gate_head.apply(g, gate_in);
    let delta = g.sigmoid(gate);

    let member: Vec<f64> = inputs.local_cells.iter().map(|c| f64::from(u8::from(c.is_some()))).collect();
    let member = g.constant(Mat::from_vec(member.len(), 1, member));
    let diff = g.sub(local, global);
    let keep = g.affine(delta, -1.0, 1.0);
    let shift = g.mul_scalar(diff, keep);
    let shift = g.mul(shift, member);
    let fused = g.add(global, shift);
    let row = g.transpose(fused);

    let local_values = inputs.local_cells.iter().zip(&g.value(local).data).map(|(c, s)| c.map(|_| *s)).collect();
    let scores = FusedScores::new(&inputs.actions, &g.value(global).data, local_values, g.value(delta).item());
    (row, scores)
}

/// Cross-entropy of the fused scores against the teacher action.
pub fn hsap_loss(g: &mut Graph<'_>, scores: Var, actions: &[NodeId], teacher: NodeId) -> Result<Var> {
    let t = actions.iter().position(|a| *a == teacher).ok_or_else(|| ModelError::Label(teacher.to_string()))?;
    Ok(g.cross_entropy(scores, &[t]))
}

/// Mean negative log-likelihood of the masked words, predicted from the sum
/// of both branches' text representations. `None` for an empty plan.
pub fn hmlm_loss(
    model: &Model,
    g: &mut Graph<'_>,
    text_long: Var,
    text_short: Var,
    plan: &MaskPlan,
) -> Result<Option<Var>> {
    let MaskedOriginals::Tokens(orig) = &plan.originals else {
        return Err(ModelError::Shape("word loss needs a token mask".into()));
    };
    if plan.is_empty() {
        return Ok(None);
    }
    let text = g.add(text_long, text_short);
    let rows = g.gather_rows(text, &plan.indices);
    let logits = model.word_logits(g, rows);
    let targets: Vec<usize> = orig.iter().map(|t| *t as usize).collect();
    Ok(Some(g.cross_entropy(logits, &targets)))
}

/// Mean binary cross-entropy of every class at every masked cell. `None`
/// for an empty plan.
pub fn msi_loss(model: &Model, g: &mut Graph<'_>, cells: Var, plan: &MaskPlan) -> Result<Option<Var>> {
    let MaskedOriginals::Cells(orig) = &plan.originals else {
        return Err(ModelError::Shape("cell loss needs a cell mask".into()));
    };
    if plan.is_empty() {
        return Ok(None);
    }
    let c = model.cfg.num_classes;
    let mut targets = Mat::zeros(orig.len(), c);
    for (r, (_, _, labels)) in orig.iter().enumerate() {
        for k in labels.iter() {
            if k >= c {
                return Err(ModelError::Shape(format!("class {k} outside {c} classes")));
            }
            targets.data[r * c + k] = 1.0;
        }
    }
    let rows = g.gather_rows(cells, &plan.indices);
    let logits = model.msi_head.apply(g, rows);
    Ok(Some(g.bce_logits(logits, targets)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Hmlm,
    Hsap,
    Msi,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Hmlm, Task::Hsap, Task::Msi];

    pub fn name(self) -> &'static str {
        match self {
            Task::Hmlm => "hmlm",
            Task::Hsap => "hsap",
            Task::Msi => "msi",
        }
    }
}

/// Draws one task per minibatch with fixed relative weights.
#[derive(Clone, Debug)]
pub struct TaskSampler {
    dist: WeightedIndex<u32>,
}

impl TaskSampler {
    pub fn new(ratio: [u32; 3]) -> Result<Self> {
        let dist = WeightedIndex::new(ratio).map_err(|e| ModelError::Config(format!("task ratio: {e}")))?;
        Ok(Self { dist })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Task {
        Task::ALL[self.dist.sample(rng)]
    }
}

/// Uniform prefix length in `1..=len`.
pub fn chunk_length(len: usize, rng: &mut impl Rng) -> usize {
    rng.random_range(1..=len.max(1))
}

/// An episode together with the world it lives in.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub world: &'a World,
    pub episode: &'a Episode,
}

/// The model with its optimizer state and learning-rate schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub schedule: Schedule,
    pub clip_norm: Option<f64>,
}

impl Trainer {
    pub fn new(model: Model, schedule: Schedule, weight_decay: f64, clip_norm: Option<f64>) -> Self {
        let opt = AdamW::new(&model.params, weight_decay);
        Self { model, opt, schedule, clip_norm }
    }

    pub fn steps(&self) -> usize {
        self.opt.steps()
    }

    /// Averages `grads` over `items` contributions and takes one step.
    pub fn apply(&mut self, mut grads: Grads, items: usize) {
        if items == 0 {
            return;
        }
        grads.scale(1.0 / items as f64);
        if let Some(c) = self.clip_norm {
            grads.clip(c);
        }
        let lr = self.schedule.lr(self.opt.steps());
        self.opt.update(&mut self.model.params, &grads, lr);
    }
}

/// Replays the first `len` nodes of the expert path; the agent ends on the
/// last of them.
pub fn replay_prefix<'w>(world: &'w World, episode: &Episode, len: usize) -> Result<Explorer<'w>> {
    let mut ex = Explorer::new(world, episode.start, episode.start_heading)?;
    for next in &episode.expert_path[1..len] {
        ex.go_to(*next)?;
    }
    Ok(ex)
}

/// Next expert node after a prefix of `len` nodes, or stop at the end.
pub fn teacher_action(episode: &Episode, len: usize) -> NodeId {
    episode.expert_path.get(len).copied().unwrap_or(NodeId::STOP)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub step: usize,
    pub task: Task,
    pub loss: f64,
    /// Samples that contributed a loss (empty masks contribute none).
    pub items: usize,
}

impl PretrainReport {
    pub const CSV_HEADER: &'static str = "step,task,loss";

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.step, self.task.name(), self.loss)
    }
}

/// Loss of one task on one sample, or `None` when its mask came out empty.
pub fn task_loss<'m>(
    model: &'m Model,
    sample: Sample<'_>,
    task: Task,
    mask_prob: f64,
    map: &MapConfig,
    rng: &mut impl Rng,
) -> Result<Option<(Session<'m>, Var)>> {
    let path_len = sample.episode.expert_path.len();
    let len = chunk_length(path_len, rng);
    let ex = replay_prefix(sample.world, sample.episode, len)?;
    let mut inputs = ex.inputs(&map.spec()?, map.kappa)?;
    let tokens = &sample.episode.instruction;
    let out = match task {
        Task::Hmlm => {
            let (masked, plan) = mask_tokens(tokens, mask_prob, rng)?;
            if plan.is_empty() {
                return Ok(None);
            }
            let mut s = Session::new(model, &masked)?;
            let o = s.step(&ex, &inputs)?;
            hmlm_loss(model, &mut s.graph, o.text_long, o.text_short, &plan)?.map(|l| (s, l))
        }
        Task::Hsap => {
            let mut s = Session::new(model, tokens)?;
            let o = s.step(&ex, &inputs)?;
            let l = hsap_loss(&mut s.graph, o.scores, &inputs.actions, teacher_action(sample.episode, len))?;
            Some((s, l))
        }
        Task::Msi => {
            let (masked, plan) = mask_cells(&inputs.map, mask_prob, rng)?;
            if plan.is_empty() {
                return Ok(None);
            }
            inputs.set_map(masked);
            let mut s = Session::new(model, tokens)?;
            let o = s.step(&ex, &inputs)?;
            msi_loss(model, &mut s.graph, o.cells, &plan)?.map(|l| (s, l))
        }
    };
    Ok(out)
}

/// One optimizer step on a minibatch with a single sampled task.
pub fn pretrain_step(
    trainer: &mut Trainer,
    batch: &[Sample<'_>],
    sampler: &TaskSampler,
    cfg: &PretrainConfig,
    map: &MapConfig,
    rng: &mut impl Rng,
) -> Result<PretrainReport> {
    let task = sampler.sample(rng);
    let mut grads = Grads::new(trainer.model.params.len());
    let mut total = 0.0;
    let mut items = 0;
    for sample in batch {
        if let Some((s, loss)) = task_loss(&trainer.model, *sample, task, cfg.mask_prob, map, rng)? {
            total += s.graph.value(loss).item();
            grads.merge(s.graph.backward(loss));
            items += 1;
        }
    }
    let step = trainer.steps();
    trainer.apply(grads, items);
    Ok(PretrainReport { step, task, loss: if items > 0 { total / items as f64 } else { 0.0 }, items })
}
