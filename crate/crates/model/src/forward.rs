//! One episode's worth of forward computation on a single graph: the
//! instruction is encoded once and each node's panorama is encoded the first
//! time it is needed, then reused by later decisions.

use std::collections::HashMap;

use bevnav_core::NodeId;

use crate::encoders::Model;
use crate::error::{ModelError, Result};
use crate::graph::{Graph, Var};
use crate::pretrain::{hsap_scores, FusedScores};
use crate::state::{Explorer, Inputs, NodeSource};
use crate::tensor::Mat;

/// Encoder outputs and action scores of one decision.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub nodes: Var,
    pub cells: Var,
    pub text_long: Var,
    pub text_short: Var,
    /// Fused action scores as a `1 × actions` row.
    pub scores: Var,
    pub fused: FusedScores,
}

pub struct Session<'m> {
    pub model: &'m Model,
    pub graph: Graph<'m>,
    pub text: Var,
    pub graph_aware: bool,
    panos: HashMap<NodeId, Var>,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, tokens: &[u32]) -> Result<Self> {
        let mut graph = model.graph();
        let text = model.encode_text(&mut graph, tokens)?;
        Ok(Self { model, graph, text, graph_aware: true, panos: HashMap::new() })
    }

    fn pano(&mut self, ex: &Explorer<'_>, id: NodeId) -> Result<Var> {
        if let Some(v) = self.panos.get(&id) {
            return Ok(*v);
        }
        let p = ex.pano(id).ok_or_else(|| ModelError::Shape(format!("node {id} has no panorama")))?;
        let v = self.model.encode_pano(&mut self.graph, &p.views, &p.angles)?;
        self.panos.insert(id, v);
        Ok(v)
    }

    /// `N × D` visual features of the topological nodes.
    pub fn node_features(&mut self, ex: &Explorer<'_>, inputs: &Inputs) -> Result<Var> {
        let d = self.model.cfg.dim;
        let mut rows = Vec::with_capacity(inputs.sources.len());
        for src in &inputs.sources {
            let row = match src {
                NodeSource::Stop => self.graph.constant(Mat::zeros(1, d)),
                NodeSource::Pano(id) => {
                    let p = self.pano(ex, *id)?;
                    self.graph.mean_rows(p)
                }
                NodeSource::Views(views) => {
                    let mut picked = Vec::with_capacity(views.len());
                    for s in views {
                        let p = self.pano(ex, s.node)?;
                        picked.push(self.graph.gather_rows(p, &[s.view]));
                    }
                    let all = self.graph.concat_rows(&picked);
                    self.graph.mean_rows(all)
                }
            };
            rows.push(row);
        }
        Ok(self.graph.concat_rows(&rows))
    }

    /// Runs both encoders and the action heads for the current decision.
    pub fn step(&mut self, ex: &Explorer<'_>, inputs: &Inputs) -> Result<StepOutput> {
        let m = self.model;
        let feats = self.node_features(ex, inputs)?;
        let g = &mut self.graph;
        let nodes = m.embed_nodes(g, feats, &inputs.nodes);
        let (nodes, text_long) = m.encode_long(g, nodes, self.text, &inputs.nodes.affinity, self.graph_aware);
        let cells = m.embed_cells(g, &inputs.cells);
        let (cells, text_short) = m.encode_short(g, cells, self.text);

        let (scores, fused) = hsap_scores(m, g, nodes, cells, inputs);
        Ok(StepOutput { nodes, cells, text_long, text_short, scores, fused })
    }
}
