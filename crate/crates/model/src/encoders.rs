//! The encoder stack: instruction, panorama, long-term (node graph) and
//! short-term (metric grid) cross-modal transformers, plus the prediction
//! heads. All forward passes record onto a [`Graph`].

use rand::Rng;

use crate::config::EncoderConfig;
use crate::error::{ModelError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug)]
pub struct LinearP {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearP {
    fn new(ps: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut impl Rng) -> Self {
        Self { w: ps.normal(format!("{name}.w"), i, o, rng), b: ps.zeros(format!("{name}.b"), 1, o) }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        g.linear(x, self.w, Some(self.b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormP {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormP {
    fn new(ps: &mut ParamStore, name: &str, d: usize) -> Self {
        Self { gamma: ps.ones(format!("{name}.g"), 1, d), beta: ps.zeros(format!("{name}.b"), 1, d) }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        g.layer_norm(x, self.gamma, self.beta)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Copy, Debug)]
pub struct MlpP {
    pub up: LinearP,
    pub down: LinearP,
}

impl MlpP {
    fn new(ps: &mut ParamStore, name: &str, i: usize, h: usize, o: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: LinearP::new(ps, &format!("{name}.up"), i, h, rng),
            down: LinearP::new(ps, &format!("{name}.down"), h, o, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.up.apply(g, x);
        let h = g.gelu(h);
        self.down.apply(g, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnP {
    pub q: LinearP,
    pub k: LinearP,
    pub v: LinearP,
    pub o: LinearP,
}

impl AttnP {
    fn new(ps: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: LinearP::new(ps, &format!("{name}.q"), d, d, rng),
            k: LinearP::new(ps, &format!("{name}.k"), d, d, rng),
            v: LinearP::new(ps, &format!("{name}.v"), d, d, rng),
            o: LinearP::new(ps, &format!("{name}.o"), d, d, rng),
        }
    }

    /// Queries from `x`, keys and values from `ctx`.
    pub fn apply(&self, g: &mut Graph<'_>, x: Var, ctx: Var, bias: Option<Var>, heads: usize) -> Var {
        let q = self.q.apply(g, x);
        let k = self.k.apply(g, ctx);
        let v = self.v.apply(g, ctx);
        let a = g.attention_over(q, k, v, bias, heads, x == ctx);
        self.o.apply(g, a)
    }
}

/// Scalar affine map from pairwise distance to an attention bias.
#[derive(Clone, Copy, Debug)]
pub struct DistanceBiasP {
    pub w: ParamId,
    pub b: ParamId,
}

/// Post-norm self-attention block with feed-forward sublayer.
#[derive(Clone, Copy, Debug)]
pub struct SelfBlock {
    pub attn: AttnP,
    pub ln1: NormP,
    pub ffn: MlpP,
    pub ln2: NormP,
}

impl SelfBlock {
    fn new(ps: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        Self {
            attn: AttnP::new(ps, &format!("{name}.attn"), d, rng),
            ln1: NormP::new(ps, &format!("{name}.ln1"), d),
            ffn: MlpP::new(ps, &format!("{name}.ffn"), d, d * cfg.ffn_mult, d, rng),
            ln2: NormP::new(ps, &format!("{name}.ln2"), d),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var, bias: Option<Var>, heads: usize) -> Var {
        let a = self.attn.apply(g, x, x, bias, heads);
        let x = g.add(x, a);
        let x = self.ln1.apply(g, x);
        let f = self.ffn.apply(g, x);
        let x = g.add(x, f);
        self.ln2.apply(g, x)
    }
}

/// One two-stream layer: each stream cross-attends to the other, then runs
/// its own self-attention block.
#[derive(Clone, Copy, Debug)]
pub struct CrossLayer {
    pub ca_x: AttnP,
    pub ln_x: NormP,
    pub ca_t: AttnP,
    pub ln_t: NormP,
    pub sa_x: SelfBlock,
    pub sa_t: SelfBlock,
    pub distance_bias: Option<DistanceBiasP>,
}

impl CrossLayer {
    fn new(ps: &mut ParamStore, name: &str, cfg: &EncoderConfig, graph_aware: bool, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        Self {
            ca_x: AttnP::new(ps, &format!("{name}.ca_x"), d, rng),
            ln_x: NormP::new(ps, &format!("{name}.ln_x"), d),
            ca_t: AttnP::new(ps, &format!("{name}.ca_t"), d, rng),
            ln_t: NormP::new(ps, &format!("{name}.ln_t"), d),
            sa_x: SelfBlock::new(ps, &format!("{name}.sa_x"), cfg, rng),
            sa_t: SelfBlock::new(ps, &format!("{name}.sa_t"), cfg, rng),
            distance_bias: graph_aware.then(|| DistanceBiasP {
                w: ps.zeros(format!("{name}.gasa.w"), 1, 1),
                b: ps.zeros(format!("{name}.gasa.b"), 1, 1),
            }),
        }
    }

    /// Returns the updated `(x, text)` streams. `affinity` holds the pairwise
    /// distances and the mask of pairs that receive a bias; it is ignored by
    /// layers without a distance bias.
    pub fn apply(&self, g: &mut Graph<'_>, x: Var, t: Var, affinity: Option<&(Mat, Mat)>, heads: usize) -> (Var, Var) {
        let cx = self.ca_x.apply(g, x, t, None, heads);
        let ct = self.ca_t.apply(g, t, x, None, heads);
        let x1 = g.add(x, cx);
        let x1 = self.ln_x.apply(g, x1);
        let t1 = g.add(t, ct);
        let t1 = self.ln_t.apply(g, t1);
        let bias = match (self.distance_bias, affinity) {
            (Some(p), Some((dist, mask))) => Some(g.distance_bias(dist.clone(), mask.clone(), p.w, p.b)),
            _ => None,
        };
        let x2 = self.sa_x.apply(g, x1, bias, heads);
        let t2 = self.sa_t.apply(g, t1, None, heads);
        (x2, t2)
    }
}

/// Per-node inputs of the long-term encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeInputs {
    /// `[sin Δheading, cos Δheading, distance / 10 m]` per node.
    pub location: Mat,
    pub steps: Vec<usize>,
    pub kinds: Vec<usize>,
    /// Pairwise distances and the bias mask (zero on stop rows/columns).
    pub affinity: (Mat, Mat),
}

/// Per-cell inputs of the short-term encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct CellInputs {
    /// Raw cell features, zero for unobserved or masked cells.
    pub features: Mat,
    pub polar: Mat,
    pub navigable: Mat,
    pub masked: Vec<bool>,
    pub center: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: EncoderConfig,
    pub params: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    type_emb: ParamId,
    text_ln: NormP,
    text_blocks: Vec<SelfBlock>,
    view_proj: LinearP,
    angle_proj: LinearP,
    pano_ln: NormP,
    pano_blocks: Vec<SelfBlock>,
    loc_proj: LinearP,
    step_emb: ParamId,
    kind_emb: ParamId,
    node_ln: NormP,
    long_layers: Vec<CrossLayer>,
    cell_proj: LinearP,
    polar_proj: LinearP,
    nav_proj: LinearP,
    mask_emb: ParamId,
    cell_ln: NormP,
    short_layers: Vec<CrossLayer>,
    pub node_head: MlpP,
    pub cell_head: MlpP,
    pub gate_head: MlpP,
    word_transform: LinearP,
    word_ln: NormP,
    word_out: LinearP,
    pub msi_head: MlpP,
}

pub const NODE_KINDS: usize = 4;

impl Model {
    pub fn new(cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let d = cfg.dim;
        let tok_emb = ps.normal("text.tok", cfg.vocab_size, d, rng);
        let pos_emb = ps.normal("text.pos", cfg.max_len, d, rng);
        let type_emb = ps.normal("text.type", 1, d, rng);
        let text_ln = NormP::new(&mut ps, "text.ln", d);
        let text_blocks =
            (0..cfg.text_layers).map(|i| SelfBlock::new(&mut ps, &format!("text.{i}"), &cfg, rng)).collect();
        let view_proj = LinearP::new(&mut ps, "pano.view", cfg.view_dim, d, rng);
        let angle_proj = LinearP::new(&mut ps, "pano.angle", 4, d, rng);
        let pano_ln = NormP::new(&mut ps, "pano.ln", d);
        let pano_blocks =
            (0..cfg.pano_layers).map(|i| SelfBlock::new(&mut ps, &format!("pano.{i}"), &cfg, rng)).collect();
        let loc_proj = LinearP::new(&mut ps, "node.loc", 3, d, rng);
        let step_emb = ps.normal("node.step", cfg.max_step + 1, d, rng);
        let kind_emb = ps.normal("node.kind", NODE_KINDS, d, rng);
        let node_ln = NormP::new(&mut ps, "node.ln", d);
        let long_layers =
            (0..cfg.long_layers).map(|i| CrossLayer::new(&mut ps, &format!("long.{i}"), &cfg, true, rng)).collect();
        let cell_proj = LinearP::new(&mut ps, "cell.feat", cfg.view_dim, d, rng);
        let polar_proj = LinearP::new(&mut ps, "cell.polar", 3, d, rng);
        let nav_proj = LinearP::new(&mut ps, "cell.nav", 1, d, rng);
        let mask_emb = ps.normal("cell.mask", 1, d, rng);
        let cell_ln = NormP::new(&mut ps, "cell.ln", d);
        let short_layers =
            (0..cfg.short_layers).map(|i| CrossLayer::new(&mut ps, &format!("short.{i}"), &cfg, false, rng)).collect();
        let node_head = MlpP::new(&mut ps, "head.node", d, d, 1, rng);
        let cell_head = MlpP::new(&mut ps, "head.cell", d, d, 1, rng);
        let gate_head = MlpP::new(&mut ps, "head.gate", 2 * d, d, 1, rng);
        let word_transform = LinearP::new(&mut ps, "head.word.transform", d, d, rng);
        let word_ln = NormP::new(&mut ps, "head.word.ln", d);
        let word_out = LinearP::new(&mut ps, "head.word.out", d, cfg.vocab_size, rng);
        let msi_head = MlpP::new(&mut ps, "head.msi", d, d, cfg.num_classes, rng);
        Ok(Self {
            cfg,
            params: ps,
            tok_emb,
            pos_emb,
            type_emb,
            text_ln,
            text_blocks,
            view_proj,
            angle_proj,
            pano_ln,
            pano_blocks,
            loc_proj,
            step_emb,
            kind_emb,
            node_ln,
            long_layers,
            cell_proj,
            polar_proj,
            nav_proj,
            mask_emb,
            cell_ln,
            short_layers,
            node_head,
            cell_head,
            gate_head,
            word_transform,
            word_ln,
            word_out,
            msi_head,
        })
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::new(&self.params)
    }

    pub fn long_layers(&self) -> &[CrossLayer] {
        &self.long_layers
    }

    /// Instruction tokens to `L × D` contextual embeddings.
    pub fn encode_text(&self, g: &mut Graph<'_>, tokens: &[u32]) -> Result<Var> {
        let (v, l) = (self.cfg.vocab_size, tokens.len());
        if let Some(&id) = tokens.iter().find(|t| **t as usize >= v) {
            return Err(ModelError::Vocab { id, size: v });
        }
        if l > self.cfg.max_len {
            return Err(ModelError::Shape(format!("instruction of {l} tokens exceeds max_len {}", self.cfg.max_len)));
        }
        if l == 0 {
            return Ok(g.constant(Mat::zeros(0, self.cfg.dim)));
        }
        let ids: Vec<usize> = tokens.iter().map(|t| *t as usize).collect();
        let tok = g.param(self.tok_emb);
        let tok = g.gather_rows(tok, &ids);
        let pos = g.param(self.pos_emb);
        let pos = g.gather_rows(pos, &(0..l).collect::<Vec<_>>());
        let ty = g.param(self.type_emb);
        let x = g.add(tok, pos);
        let x = g.add(x, ty);
        let mut x = self.text_ln.apply(g, x);
        for b in &self.text_blocks {
            x = b.apply(g, x, None, self.cfg.heads);
        }
        Ok(x)
    }

    /// `K` view features (`K × view_dim`) with their `(heading, elevation)`
    /// to `K × D` contextual view embeddings.
    pub fn encode_pano(&self, g: &mut Graph<'_>, views: &Mat, angles: &[[f64; 2]]) -> Result<Var> {
        if views.rows == 0 || views.rows != angles.len() || views.cols != self.cfg.view_dim {
            return Err(ModelError::Shape(format!(
                "panorama of {:?} with {} angles, view width {}",
                views.shape(),
                angles.len(),
                self.cfg.view_dim
            )));
        }
        let ang =
            Mat::from_rows(&angles.iter().map(|[h, e]| vec![h.sin(), h.cos(), e.sin(), e.cos()]).collect::<Vec<_>>());
        let v = g.constant(views.clone());
        let a = g.constant(ang);
        let v = self.view_proj.apply(g, v);
        let a = self.angle_proj.apply(g, a);
        let x = g.add(v, a);
        let mut x = self.pano_ln.apply(g, x);
        for b in &self.pano_blocks {
            x = b.apply(g, x, None, self.cfg.heads);
        }
        Ok(x)
    }

    /// Combines node features (`N × D`, stop row first) with location, step
    /// and kind embeddings.
    pub fn embed_nodes(&self, g: &mut Graph<'_>, features: Var, inputs: &NodeInputs) -> Var {
        let n = g.shape(features).0;
        assert_eq!(inputs.location.rows, n, "one location row per node");
        let loc = g.constant(inputs.location.clone());
        let loc = self.loc_proj.apply(g, loc);
        let steps: Vec<usize> = inputs.steps.iter().map(|s| (*s).min(self.cfg.max_step)).collect();
        let st = g.param(self.step_emb);
        let st = g.gather_rows(st, &steps);
        let kd = g.param(self.kind_emb);
        let kd = g.gather_rows(kd, &inputs.kinds);
        let x = g.add(features, loc);
        let x = g.add(x, st);
        let x = g.add(x, kd);
        self.node_ln.apply(g, x)
    }

    /// Long-term cross-modal encoder: returns `(node reps, text reps)`.
    /// With `graph_aware == false` the distance bias is skipped entirely.
    pub fn encode_long(
        &self,
        g: &mut Graph<'_>,
        nodes: Var,
        text: Var,
        affinity: &(Mat, Mat),
        graph_aware: bool,
    ) -> (Var, Var) {
        let (mut x, mut t) = (nodes, text);
        for layer in &self.long_layers {
            (x, t) = layer.apply(g, x, t, graph_aware.then_some(affinity), self.cfg.heads);
        }
        (x, t)
    }

    /// Cell embeddings for the short-term encoder.
    pub fn embed_cells(&self, g: &mut Graph<'_>, cells: &CellInputs) -> Var {
        let f = g.constant(cells.features.clone());
        let f = self.cell_proj.apply(g, f);
        let p = g.constant(cells.polar.clone());
        let p = self.polar_proj.apply(g, p);
        let nv = g.constant(cells.navigable.clone());
        let nv = self.nav_proj.apply(g, nv);
        let x = g.add(f, p);
        let mut x = g.add(x, nv);
        if cells.masked.iter().any(|m| *m) {
            let sel =
                Mat::from_vec(cells.masked.len(), 1, cells.masked.iter().map(|m| f64::from(u8::from(*m))).collect());
            let sel = g.constant(sel);
            let me = g.param(self.mask_emb);
            let me = g.linear_vars(sel, me, None);
            x = g.add(x, me);
        }
        self.cell_ln.apply(g, x)
    }

    /// Short-term cross-modal encoder: returns `(cell reps, text reps)`.
    pub fn encode_short(&self, g: &mut Graph<'_>, cells: Var, text: Var) -> (Var, Var) {
        let (mut x, mut t) = (cells, text);
        for layer in &self.short_layers {
            (x, t) = layer.apply(g, x, t, None, self.cfg.heads);
        }
        (x, t)
    }

    /// Vocabulary logits for the given rows of a text representation.
    pub fn word_logits(&self, g: &mut Graph<'_>, text: Var) -> Var {
        let h = self.word_transform.apply(g, text);
        let h = g.gelu(h);
        let h = self.word_ln.apply(g, h);
        self.word_out.apply(g, h)
    }
}

impl Model {
    /// Multiplies spent by the short-term branch (cell embedding and
    /// encoder) on an all-unobserved map of `spec` with a `text_len`-token
    /// instruction.
    pub fn short_term_cost(&self, spec: &bevnav_core::MapSpec, text_len: usize) -> crate::graph::MulCount {
        let n = spec.num_cells();
        let map = bevnav_core::MetricMap::empty(*spec, self.cfg.view_dim);
        let cells = crate::state::cell_inputs(&map);
        debug_assert_eq!(cells.features.rows, n);
        let mut g = self.graph();
        let text = g.constant(Mat::zeros(text_len, self.cfg.dim));
        g.reset_mul_count();
        let x = self.embed_cells(&mut g, &cells);
        self.encode_short(&mut g, x, text);
        g.mul_count()
    }
}

/// Dense single-head reference used to cross-check the fused attention op.
pub fn attention_reference(q: &Mat, k: &Mat, v: &Mat, bias: Option<&Mat>, heads: usize) -> Mat {
    let (n, d) = q.shape();
    let m = k.rows;
    let dh = d / heads;
    let mut out = Mat::zeros(n, d);
    for h in 0..heads {
        for i in 0..n {
            let mut s: Vec<f64> = (0..m)
                .map(|j| {
                    let dot: f64 = (0..dh).map(|c| q.get(i, h * dh + c) * k.get(j, h * dh + c)).sum();
                    dot / (dh as f64).sqrt() + bias.map_or(0.0, |b| b.get(i, j))
                })
                .collect();
            let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
            s.iter_mut().for_each(|x| *x = (*x - mx).exp() / z);
            for c in 0..dh {
                out.data[i * d + h * dh + c] = (0..m).map(|j| s[j] * v.get(j, h * dh + c)).sum();
            }
        }
    }
    out
}
