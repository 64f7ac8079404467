//! The hypergraph-transformer model.
//!
//! One message-passing pass updates every edge from its incident nodes in
//! incidence order, then every node from the mean of its incident edges.
//! A per-element causal temporal predictor (transformer, or a gated
//! recurrent cell as ablation) extends each element's hidden-state history
//! into the future, and an affine-plus-logistic projector maps states to
//! per-label probabilities.
//!
//! Internally all elements of one time step live in a single stacked
//! matrix, node rows first, so the whole forward runs as a handful of
//! matrix products per step.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{features_matrix, FrameEncoder, FrameFeature};
use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_encoding, GruCell, LayerNorm, MlpBlock, ParamSnapshot, ParamStore, TapeBind,
    TransformerLayer,
};
use crate::schema::{validate_schema, ElementRef, GraphSchema};

/// Temporal predictor variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Transformer,
    RecurrentCell,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Variant::Transformer),
            "recurrent_cell" => Ok(Variant::RecurrentCell),
            other => Err(Error::Config(format!(
                "unknown variant \"{other}\" (expected transformer or recurrent_cell)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Transformer => "transformer",
            Variant::RecurrentCell => "recurrent_cell",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone_dim: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub dropout: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_dim: 16,
            hidden_dim: 128,
            n_heads: 2,
            n_layers: 2,
            dropout: 0.1,
            variant: Variant::Transformer,
        }
    }
}

/// Per-element hidden-state histories plus the clock of the latest step.
#[derive(Clone, Debug)]
pub struct ElementState {
    /// One `(n_nodes, hidden_dim)` matrix per processed step.
    pub node_history: Vec<Array2<f64>>,
    /// One `(n_edges, hidden_dim)` matrix per processed step.
    pub edge_history: Vec<Array2<f64>>,
    /// Time index (seconds) of the latest entry.
    pub clock: i64,
}

impl ElementState {
    pub fn steps(&self) -> usize {
        self.node_history.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.node_history.len() != self.edge_history.len() {
            return Err(Error::State(format!(
                "node history has {} steps but edge history has {}",
                self.node_history.len(),
                self.edge_history.len()
            )));
        }
        for (i, m) in self.node_history.iter().chain(self.edge_history.iter()).enumerate() {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite state at entry {i}")));
            }
        }
        Ok(())
    }

    /// Stacked `(n_nodes + n_edges, d)` matrix for one step.
    pub fn stacked(&self, step: usize) -> Array2<f64> {
        ndarray::concatenate(
            Axis(0),
            &[self.node_history[step].view(), self.edge_history[step].view()],
        )
        .expect("histories share hidden dim")
    }
}

/// Probabilities per future offset and label column.
#[derive(Clone, Debug)]
pub struct PredictionBatch {
    /// `(horizon + 1, label_dim)`; row `k` is the offset-`k` forecast and
    /// row 0 is detection at the current frame.
    pub probs: Array2<f64>,
    pub horizon: usize,
    pub columns: Vec<String>,
}

impl PredictionBatch {
    pub fn validate(&self) -> Result<()> {
        if self.probs.nrows() != self.horizon + 1 {
            return Err(Error::Shape(format!(
                "{} rows for horizon {}",
                self.probs.nrows(),
                self.horizon
            )));
        }
        if self.probs.ncols() != self.columns.len() {
            return Err(Error::Shape(format!(
                "{} columns for {} labels",
                self.probs.ncols(),
                self.columns.len()
            )));
        }
        if self.probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Numeric("probability outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Mean-aggregation incidence matrix: row `j` averages the embeddings of
/// node `j`'s incident edges; nodes without edges aggregate to zero.
pub fn mean_incidence_matrix(schema: &GraphSchema) -> Array2<f64> {
    let inc = schema.incidence_index();
    let mut a = Array2::zeros((schema.nodes.len(), schema.edges.len()));
    for (j, edges) in inc.node_edges.iter().enumerate() {
        if edges.is_empty() {
            continue;
        }
        let w = 1.0 / edges.len() as f64;
        for &e in edges {
            a[(j, e)] = w;
        }
    }
    a
}

struct ArityGroup {
    arity: usize,
    /// Edge indices in schema order.
    edges: Vec<usize>,
    /// Row gather indices into the stacked state: per edge, its incident
    /// node rows in incidence order followed by the edge's own row.
    gather: Vec<usize>,
    block: MlpBlock,
}

pub struct HgtModel {
    pub schema: GraphSchema,
    pub cfg: ModelConfig,
    pub store: ParamStore,
    encoder: FrameEncoder,
    groups: Vec<ArityGroup>,
    /// Maps schema edge order to the grouped output row order.
    edge_ungroup: Vec<usize>,
    node_enc: MlpBlock,
    node_agg: Array2<f64>,
    tf_layers: Vec<TransformerLayer>,
    tf_final: LayerNorm,
    gru: Option<GruCell>,
    proj_node: Option<ProjHead>,
    proj_edge: Option<ProjHead>,
    /// Bound (element row, label col) pairs, nodes then edges.
    node_cols: Vec<(usize, usize)>,
    edge_cols: Vec<(usize, usize)>,
    /// For label column `c`, its row in the concatenated projector output.
    col_perm: Vec<usize>,
}

struct ProjHead {
    w: usize,
    b: usize,
}

impl HgtModel {
    pub fn new(schema: GraphSchema, cfg: ModelConfig, seed: u64) -> Result<Self> {
        let violations = validate_schema(&schema);
        if !violations.is_empty() {
            let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(Error::Config(format!(
                "schema invalid: {}",
                list.join("; ")
            )));
        }
        if cfg.hidden_dim == 0 || cfg.hidden_dim % cfg.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                cfg.hidden_dim, cfg.n_heads
            )));
        }
        let d = cfg.hidden_dim;
        let n_nodes = schema.nodes.len();
        let mut store = ParamStore::new();
        let encoder = FrameEncoder::init(&mut store, &schema, cfg.backbone_dim, d, seed);

        let inc = schema.incidence_index();
        let mut by_arity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (e, nodes) in inc.edge_nodes.iter().enumerate() {
            by_arity.entry(nodes.len()).or_default().push(e);
        }
        let mut groups = Vec::new();
        let mut grouped_order = Vec::new();
        for (&arity, edges) in &by_arity {
            let mut gather = Vec::with_capacity(edges.len() * (arity + 1));
            for &e in edges {
                gather.extend(inc.edge_nodes[e].iter().copied());
                gather.push(n_nodes + e);
            }
            grouped_order.extend(edges.iter().copied());
            let block = MlpBlock::init(
                &mut store,
                &format!("enc.edge.a{arity}"),
                (arity + 1) * d,
                d,
                d,
                seed,
            );
            groups.push(ArityGroup {
                arity,
                edges: edges.clone(),
                gather,
                block,
            });
        }
        let mut edge_ungroup = vec![0; schema.edges.len()];
        for (pos, &e) in grouped_order.iter().enumerate() {
            edge_ungroup[e] = pos;
        }

        let node_enc = MlpBlock::init(&mut store, "enc.node", 2 * d, d, d, seed);
        let node_agg = mean_incidence_matrix(&schema);

        let (tf_layers, gru) = match cfg.variant {
            Variant::Transformer => {
                let layers = (0..cfg.n_layers)
                    .map(|l| TransformerLayer::init(&mut store, &format!("pred.t{l}"), d, cfg.n_heads, seed))
                    .collect();
                (layers, None)
            }
            Variant::RecurrentCell => (Vec::new(), Some(GruCell::init(&mut store, "pred.gru", d, seed))),
        };
        let tf_final = LayerNorm::init(&mut store, "pred.final", d);

        // Label bindings, nodes then edges, each in schema order.
        let mut node_cols = Vec::new();
        let mut edge_cols = Vec::new();
        for (c, el) in schema.column_elements().iter().enumerate() {
            match el.expect("validated schema binds every column") {
                ElementRef::Node(i) => node_cols.push((i, c)),
                ElementRef::Edge(i) => edge_cols.push((n_nodes + i, c)),
            }
        }
        let mut col_perm = vec![0; schema.label_dim()];
        for (pos, &(_, c)) in node_cols.iter().chain(edge_cols.iter()).enumerate() {
            col_perm[c] = pos;
        }
        let proj_node = if node_cols.is_empty() {
            None
        } else {
            Some(ProjHead {
                w: store.add_init(
                    "proj.node.w",
                    node_cols.len(),
                    d,
                    crate::nn::Init::Xavier { fan_in: d, fan_out: 1 },
                    seed,
                    true,
                ),
                b: store.add_init("proj.node.b", node_cols.len(), 1, crate::nn::Init::Zeros, 0, true),
            })
        };
        let proj_edge = if edge_cols.is_empty() {
            None
        } else {
            Some(ProjHead {
                w: store.add_init(
                    "proj.edge.w",
                    edge_cols.len(),
                    d,
                    crate::nn::Init::Xavier { fan_in: d, fan_out: 1 },
                    seed,
                    true,
                ),
                b: store.add_init("proj.edge.b", edge_cols.len(), 1, crate::nn::Init::Zeros, 0, true),
            })
        };

        Ok(HgtModel {
            schema,
            cfg,
            store,
            encoder,
            groups,
            edge_ungroup,
            node_enc,
            node_agg,
            tf_layers,
            tf_final,
            gru,
            proj_node,
            proj_edge,
            node_cols,
            edge_cols,
            col_perm,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.schema.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.schema.edges.len()
    }

    pub fn n_elements(&self) -> usize {
        self.n_nodes() + self.n_edges()
    }

    /// Parameter indices of the edge-facing projector.
    pub fn edge_projector_indices(&self) -> Vec<usize> {
        self.store.indices_with_prefix("proj.edge")
    }

    /// Parameter indices of everything on the edge side of the graph:
    /// image map, identity embeddings, update network, projector.
    pub fn edge_side_indices(&self) -> Vec<usize> {
        let mut v = Vec::new();
        for p in ["img.edge", "id.edge", "enc.edge", "proj.edge"] {
            v.extend(self.store.indices_with_prefix(p));
        }
        v
    }

    /// Label-column mask selecting node-bound (phase 1) columns.
    pub fn node_column_mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.schema.label_dim()];
        for &(_, c) in &self.node_cols {
            m[c] = 1.0;
        }
        m
    }

    // -- tape-level builders -------------------------------------------------

    /// One message-passing pass over a stacked `(El, d)` state.
    fn message_pass_tape(&self, tb: &mut TapeBind, s: Var) -> Var {
        let mut outs = Vec::with_capacity(self.groups.len());
        for gr in &self.groups {
            let gathered = tb.g.gather_rows(s, gr.gather.clone());
            let stacked = tb
                .g
                .reshape(gathered, gr.edges.len(), (gr.arity + 1) * self.cfg.hidden_dim);
            outs.push(gr.block.apply(tb, stacked));
        }
        let new_edges = if outs.len() == 1 {
            outs[0]
        } else {
            tb.g.concat_rows(&outs)
        };
        let new_edges = tb.g.gather_rows(new_edges, self.edge_ungroup.clone());
        let agg = tb.g.matmul_const_left(self.node_agg.clone(), new_edges);
        let node_rows = tb.g.slice_rows(s, 0, self.n_nodes());
        let node_in = tb.g.concat_cols(&[agg, node_rows]);
        let new_nodes = self.node_enc.apply(tb, node_in);
        tb.g.concat_rows(&[new_nodes, new_edges])
    }

    /// Positional code for `t_len` steps tiled over elements, matching the
    /// step-major stacked layout.
    fn tiled_positions(&self, t_len: usize) -> Array2<f64> {
        let d = self.cfg.hidden_dim;
        let el = self.n_elements();
        let pe = sinusoidal_encoding(t_len, d);
        let mut out = Array2::zeros((t_len * el, d));
        for t in 0..t_len {
            for e in 0..el {
                out.row_mut(t * el + e).assign(&pe.row(t));
            }
        }
        out
    }

    /// Causal mask over the step-major stacked layout: position `(t, el)`
    /// attends to `(t', el)` with `t' <= t` and nothing else.
    fn step_major_causal_mask(&self, t_len: usize) -> Array2<f64> {
        let el = self.n_elements();
        let n = t_len * el;
        let mut mask = Array2::from_elem((n, n), -1e30);
        for e in 0..el {
            for t in 0..t_len {
                for t2 in 0..=t {
                    mask[(t * el + e, t2 * el + e)] = 0.0;
                }
            }
        }
        mask
    }

    /// Predicts the next stacked state from the history built so far.
    fn predict_next_tape(&self, tb: &mut TapeBind, history: &[Var]) -> Var {
        let el = self.n_elements();
        match self.cfg.variant {
            Variant::Transformer => {
                let t_len = history.len();
                let h = if t_len == 1 {
                    history[0]
                } else {
                    tb.g.concat_rows(history)
                };
                let pos = self.tiled_positions(t_len);
                let mut h = tb.g.add_const(h, &pos);
                let mask = self.step_major_causal_mask(t_len);
                for layer in &self.tf_layers {
                    h = layer.apply(tb, h, &mask, self.cfg.dropout);
                }
                let h = self.tf_final.apply(tb, h);
                tb.g.slice_rows(h, (t_len - 1) * el, el)
            }
            Variant::RecurrentCell => {
                let gru = self.gru.as_ref().expect("recurrent variant has a cell");
                let mut state = tb.g.constant(Array2::zeros((el, self.cfg.hidden_dim)));
                for &x in history {
                    state = gru.apply(tb, x, state);
                }
                let h = self.tf_final.apply(tb, state);
                h
            }
        }
    }

    /// Projects one stacked state to logits, `(1, label_dim)`.
    fn project_tape(&self, tb: &mut TapeBind, s: Var) -> Var {
        let d = self.cfg.hidden_dim;
        let mut parts = Vec::new();
        if let Some(head) = &self.proj_node {
            let rows: Vec<usize> = self.node_cols.iter().map(|&(r, _)| r).collect();
            let sel = tb.g.gather_rows(s, rows);
            let w = tb.bind(head.w);
            let b = tb.bind(head.b);
            let prod = tb.g.mul(sel, w);
            let ones = tb.g.constant(Array2::ones((d, 1)));
            let dot = tb.g.matmul(prod, ones);
            parts.push(tb.g.add(dot, b));
        }
        if let Some(head) = &self.proj_edge {
            let rows: Vec<usize> = self.edge_cols.iter().map(|&(r, _)| r).collect();
            let sel = tb.g.gather_rows(s, rows);
            let w = tb.bind(head.w);
            let b = tb.bind(head.b);
            let prod = tb.g.mul(sel, w);
            let ones = tb.g.constant(Array2::ones((d, 1)));
            let dot = tb.g.matmul(prod, ones);
            parts.push(tb.g.add(dot, b));
        }
        let cat = if parts.len() == 1 {
            parts[0]
        } else {
            tb.g.concat_rows(&parts)
        };
        let ordered = tb.g.gather_rows(cat, self.col_perm.clone());
        tb.g.reshape(ordered, 1, self.schema.label_dim())
    }

    /// Full forward on the tape: encode `p + 1` frames with interleaved
    /// message passing, roll out `f` future steps (predict, then message
    /// passing), and project at every offset. Returns `(f + 1, label_dim)`
    /// logits.
    pub fn build_forward(
        &self,
        tb: &mut TapeBind,
        feats: &Array2<f64>,
        p: usize,
        f: usize,
    ) -> Result<Var> {
        if feats.nrows() != p + 1 {
            return Err(Error::Config(format!(
                "forward needs {} frames for past window {p}, got {}",
                p + 1,
                feats.nrows()
            )));
        }
        if feats.ncols() != self.cfg.backbone_dim {
            return Err(Error::Shape(format!(
                "feature dim {} but model expects {}",
                feats.ncols(),
                self.cfg.backbone_dim
            )));
        }
        let feats_var = tb.g.constant(feats.clone());
        let initial = self.encoder.encode_stacked(tb, feats_var, p + 1);
        let mut history: Vec<Var> = Vec::with_capacity(p + 1 + f);
        for s0 in initial {
            history.push(self.message_pass_tape(tb, s0));
        }
        let mut rows = Vec::with_capacity(f + 1);
        rows.push(self.project_tape(tb, *history.last().unwrap()));
        for _ in 0..f {
            let predicted = self.predict_next_tape(tb, &history);
            let updated = self.message_pass_tape(tb, predicted);
            history.push(updated);
            let last = *history.last().unwrap();
            rows.push(self.project_tape(tb, last));
        }
        Ok(if rows.len() == 1 {
            rows[0]
        } else {
            tb.g.concat_rows(&rows)
        })
    }

    // -- value-level operations ---------------------------------------------

    /// Runs the encoding loop over frames, producing a fresh state.
    pub fn encode(&self, features: &[FrameFeature]) -> Result<ElementState> {
        if features.is_empty() {
            return Err(Error::Config("encode needs at least one frame".into()));
        }
        let feats = features_matrix(features)?;
        if feats.ncols() != self.cfg.backbone_dim {
            return Err(Error::Shape(format!(
                "feature dim {} but model expects {}",
                feats.ncols(),
                self.cfg.backbone_dim
            )));
        }
        let mut g = Graph::new();
        let mut tb = TapeBind::eval(&mut g, &self.store);
        let feats_var = tb.g.constant(feats);
        let initial = self.encoder.encode_stacked(&mut tb, feats_var, features.len());
        let steps: Vec<Var> = initial
            .into_iter()
            .map(|s| self.message_pass_tape(&mut tb, s))
            .collect();
        let mut state = ElementState {
            node_history: Vec::new(),
            edge_history: Vec::new(),
            clock: features.last().unwrap().time_index,
        };
        for s in steps {
            let m = g.value_of(s);
            self.push_stacked(&mut state, m.clone());
        }
        state.validate()?;
        Ok(state)
    }

    fn push_stacked(&self, state: &mut ElementState, m: Array2<f64>) {
        let n = self.n_nodes();
        state
            .node_history
            .push(m.slice(ndarray::s![0..n, ..]).to_owned());
        state
            .edge_history
            .push(m.slice(ndarray::s![n.., ..]).to_owned());
    }

    /// Edge half of one message-passing pass on the latest step.
    pub fn edge_update(&self, state: &ElementState) -> Result<Array2<f64>> {
        let last = self.last_step(state)?;
        let mut g = Graph::new();
        let mut tb = TapeBind::eval(&mut g, &self.store);
        let s = tb.g.constant(last);
        let mut outs = Vec::new();
        for gr in &self.groups {
            let gathered = tb.g.gather_rows(s, gr.gather.clone());
            let stacked = tb
                .g
                .reshape(gathered, gr.edges.len(), (gr.arity + 1) * self.cfg.hidden_dim);
            outs.push(gr.block.apply(&mut tb, stacked));
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tb.g.concat_rows(&outs)
        };
        let ordered = tb.g.gather_rows(cat, self.edge_ungroup.clone());
        Ok(g.value_of(ordered).clone())
    }

    /// Node half of one message-passing pass; consumes the latest step's
    /// (already updated) edge embeddings.
    pub fn node_update(&self, state: &ElementState) -> Result<Array2<f64>> {
        let last = self.last_step(state)?;
        let mut g = Graph::new();
        let mut tb = TapeBind::eval(&mut g, &self.store);
        let s = tb.g.constant(last);
        let edges = tb.g.slice_rows(s, self.n_nodes(), self.n_edges());
        let agg = tb.g.matmul_const_left(self.node_agg.clone(), edges);
        let nodes = tb.g.slice_rows(s, 0, self.n_nodes());
        let node_in = tb.g.concat_cols(&[agg, nodes]);
        let out = self.node_enc.apply(&mut tb, node_in);
        Ok(g.value_of(out).clone())
    }

    fn last_step(&self, state: &ElementState) -> Result<Array2<f64>> {
        state.validate()?;
        if state.steps() == 0 {
            return Err(Error::State("state has no processed steps".into()));
        }
        Ok(state.stacked(state.steps() - 1))
    }

    /// Replaces the latest step with one full message-passing pass.
    pub fn message_pass(&self, state: &mut ElementState) -> Result<()> {
        let edges = self.edge_update(state)?;
        let top = state.steps() - 1;
        state.edge_history[top] = edges;
        let nodes = self.node_update(state)?;
        state.node_history[top] = nodes;
        Ok(())
    }

    /// Appends the temporal predictor's next-step embedding for every
    /// element; advances the clock one second.
    pub fn predict_step(&self, state: &mut ElementState) -> Result<()> {
        state.validate()?;
        if state.steps() == 0 {
            return Err(Error::State("predict_step needs a non-empty history".into()));
        }
        let mut g = Graph::new();
        let mut tb = TapeBind::eval(&mut g, &self.store);
        let history: Vec<Var> = (0..state.steps())
            .map(|i| tb.g.constant(state.stacked(i)))
            .collect();
        let next = self.predict_next_tape(&mut tb, &history);
        let m = g.value_of(next).clone();
        self.push_stacked(state, m);
        state.clock += 1;
        Ok(())
    }

    /// Extends the state `f` future steps: predict, then message passing,
    /// per step. `f = 0` leaves the state untouched.
    pub fn rollout(&self, state: &mut ElementState, f: usize) -> Result<()> {
        for _ in 0..f {
            self.predict_step(state)?;
            self.message_pass(state)?;
        }
        Ok(())
    }

    /// Per-label probabilities from the latest step.
    pub fn project(&self, state: &ElementState) -> Result<Vec<f64>> {
        let last = self.last_step(state)?;
        let mut g = Graph::new();
        let mut tb = TapeBind::eval(&mut g, &self.store);
        let s = tb.g.constant(last);
        let logits = self.project_tape(&mut tb, s);
        let probs = tb.g.sigmoid(logits);
        Ok(g.value_of(probs).iter().copied().collect())
    }

    /// End-to-end forward: `p + 1` frames in, probabilities for offsets
    /// `0..=f` out.
    pub fn forward(&self, features: &[FrameFeature], p: usize, f: usize) -> Result<PredictionBatch> {
        if features.len() != p + 1 {
            return Err(Error::Config(format!(
                "forward needs {} frames for past window {p}, got {}",
                p + 1,
                features.len()
            )));
        }
        let feats = features_matrix(features)?;
        let mut g = Graph::new();
        let mut tb = TapeBind::eval(&mut g, &self.store);
        let logits = self.build_forward(&mut tb, &feats, p, f)?;
        let probs = tb.g.sigmoid(logits);
        let batch = PredictionBatch {
            probs: g.value_of(probs).clone(),
            horizon: f,
            columns: self.schema.task.labels.clone(),
        };
        batch.validate()?;
        Ok(batch)
    }

    /// Temporal predictor outputs at every history position; position `k`
    /// depends only on entries `0..=k`. Used by causality checks.
    pub fn predict_positions(&self, state: &ElementState) -> Result<Vec<Array2<f64>>> {
        state.validate()?;
        if state.steps() == 0 {
            return Err(Error::State("empty history".into()));
        }
        let el = self.n_elements();
        let mut g = Graph::new();
        let mut tb = TapeBind::eval(&mut g, &self.store);
        let history: Vec<Var> = (0..state.steps())
            .map(|i| tb.g.constant(state.stacked(i)))
            .collect();
        match self.cfg.variant {
            Variant::Transformer => {
                let t_len = history.len();
                let h0 = if t_len == 1 {
                    history[0]
                } else {
                    tb.g.concat_rows(&history)
                };
                let pos = self.tiled_positions(t_len);
                let mut h = tb.g.add_const(h0, &pos);
                let mask = self.step_major_causal_mask(t_len);
                for layer in &self.tf_layers {
                    h = layer.apply(&mut tb, h, &mask, self.cfg.dropout);
                }
                let h = self.tf_final.apply(&mut tb, h);
                let slices: Vec<Var> = (0..t_len).map(|t| tb.g.slice_rows(h, t * el, el)).collect();
                Ok(slices.into_iter().map(|s| g.value_of(s).clone()).collect())
            }
            Variant::RecurrentCell => {
                let gru = self.gru.as_ref().expect("recurrent variant has a cell");
                let mut cell = tb.g.constant(Array2::zeros((el, self.cfg.hidden_dim)));
                let mut outs = Vec::with_capacity(history.len());
                for &x in &history {
                    cell = gru.apply(&mut tb, x, cell);
                    outs.push(self.tf_final.apply(&mut tb, cell));
                }
                Ok(outs.into_iter().map(|s| g.value_of(s).clone()).collect())
            }
        }
    }

    // -- checkpoints ---------------------------------------------------------

    pub fn to_checkpoint(&self, phase: u8, step: u64) -> Checkpoint {
        Checkpoint {
            version: 1,
            schema_hash: self.schema.content_hash(),
            config: self.cfg.clone(),
            phase,
            step,
            params: self.store.snapshot(),
        }
    }

    /// Rebuilds a model from a checkpoint, refusing on schema mismatch.
    pub fn from_checkpoint(ckpt: &Checkpoint, schema: GraphSchema) -> Result<HgtModel> {
        let hash = schema.content_hash();
        if ckpt.schema_hash != hash {
            return Err(Error::State(format!(
                "checkpoint was trained against schema {} but the provided schema hashes to {hash}",
                ckpt.schema_hash
            )));
        }
        let mut model = HgtModel::new(schema, ckpt.config.clone(), 0)?;
        let restored = ParamStore::restore(&ckpt.params)?;
        if restored.len() != model.store.len() {
            return Err(Error::State(format!(
                "checkpoint has {} tensors but the model defines {}",
                restored.len(),
                model.store.len()
            )));
        }
        for i in 0..model.store.len() {
            let name = model.store.name(i).to_string();
            let j = restored.index_of(&name).ok_or_else(|| {
                Error::State(format!("checkpoint is missing parameter {name}"))
            })?;
            if restored.value(j).dim() != model.store.value(i).dim() {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?} in checkpoint but {:?} in model",
                    restored.value(j).dim(),
                    model.store.value(i).dim()
                )));
            }
            model.store.value_mut(i).assign(restored.value(j));
        }
        Ok(model)
    }
}

/// Versioned checkpoint container.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub schema_hash: String,
    pub config: ModelConfig,
    pub phase: u8,
    pub step: u64,
    pub params: Vec<ParamSnapshot>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::Data(format!("checkpoint serialize: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("checkpoint parse: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{
        build_task_schema, ConceptNode, HyperEdge, NodeKind, TaskId, TaskSpec,
    };
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};

    fn toy_schema() -> GraphSchema {
        GraphSchema {
            version: 1,
            task: TaskSpec {
                id: TaskId::Custom("toy".into()),
                past_window: 1,
                horizon: 1,
                labels: vec!["a".into(), "b".into(), "c".into(), "abc".into()],
            },
            nodes: vec![
                ConceptNode { id: "a".into(), kind: NodeKind::Tool, label: Some(0) },
                ConceptNode { id: "b".into(), kind: NodeKind::Action, label: Some(1) },
                ConceptNode { id: "c".into(), kind: NodeKind::Target, label: Some(2) },
            ],
            edges: vec![HyperEdge {
                id: "abc".into(),
                nodes: vec!["a".into(), "b".into(), "c".into()],
                label: Some(3),
            }],
        }
    }

    fn toy_model(variant: Variant) -> HgtModel {
        let cfg = ModelConfig {
            backbone_dim: 4,
            hidden_dim: 8,
            n_heads: 2,
            n_layers: 2,
            dropout: 0.0,
            variant,
        };
        HgtModel::new(toy_schema(), cfg, 42).unwrap()
    }

    fn frames(n: usize, dim: usize, seed: f64) -> Vec<FrameFeature> {
        (0..n)
            .map(|t| FrameFeature {
                vector: Array1::from_shape_fn(dim, |i| ((t * dim + i) as f64 * 0.37 + seed).sin()),
                time_index: t as i64,
            })
            .collect()
    }

    #[test]
    fn forward_shapes_and_bounds() {
        let m = toy_model(Variant::Transformer);
        let batch = m.forward(&frames(5, 4, 0.0), 4, 4).unwrap();
        assert_eq!(batch.probs.dim(), (5, 4));
        batch.validate().unwrap();
    }

    #[test]
    fn detection_only_forward() {
        let m = toy_model(Variant::Transformer);
        let batch = m.forward(&frames(1, 4, 0.0), 0, 0).unwrap();
        assert_eq!(batch.probs.dim(), (1, 4));
    }

    #[test]
    fn wrong_frame_count_is_argument_error() {
        let m = toy_model(Variant::Transformer);
        let err = m.forward(&frames(3, 4, 0.0), 4, 2).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn forward_is_deterministic() {
        for variant in [Variant::Transformer, Variant::RecurrentCell] {
            let m = toy_model(variant);
            let f = frames(5, 4, 1.0);
            let a = m.forward(&f, 4, 4).unwrap();
            let b = m.forward(&f, 4, 4).unwrap();
            assert_eq!(a.probs, b.probs);
        }
    }

    #[test]
    fn rollout_zero_is_identity_and_f4_extends_by_four() {
        let m = toy_model(Variant::Transformer);
        let mut state = m.encode(&frames(3, 4, 0.5)).unwrap();
        let before_steps = state.steps();
        let before_clock = state.clock;
        m.rollout(&mut state, 0).unwrap();
        assert_eq!(state.steps(), before_steps);
        assert_eq!(state.clock, before_clock);
        m.rollout(&mut state, 4).unwrap();
        assert_eq!(state.steps(), before_steps + 4);
        assert_eq!(state.clock, before_clock + 4);
    }

    #[test]
    fn rollout_2_then_2_equals_rollout_4() {
        for variant in [Variant::Transformer, Variant::RecurrentCell] {
            let m = toy_model(variant);
            let mut s1 = m.encode(&frames(3, 4, 0.2)).unwrap();
            let mut s2 = s1.clone();
            m.rollout(&mut s1, 4).unwrap();
            m.rollout(&mut s2, 2).unwrap();
            m.rollout(&mut s2, 2).unwrap();
            assert_eq!(s1.steps(), s2.steps());
            for k in 0..s1.steps() {
                let d = (&s1.stacked(k) - &s2.stacked(k))
                    .iter()
                    .map(|v| v.abs())
                    .fold(0.0, f64::max);
                assert!(d <= 1e-12, "step {k} differs by {d} ({variant})");
            }
        }
    }

    #[test]
    fn predict_step_causal_in_history() {
        for variant in [Variant::Transformer, Variant::RecurrentCell] {
            let m = toy_model(variant);
            let state = m.encode(&frames(4, 4, 0.9)).unwrap();
            let full = m.predict_positions(&state).unwrap();
            for k in 0..state.steps() {
                let mut prefix = state.clone();
                prefix.node_history.truncate(k + 1);
                prefix.edge_history.truncate(k + 1);
                let partial = m.predict_positions(&prefix).unwrap();
                let d = (&full[k] - &partial[k])
                    .iter()
                    .map(|v| v.abs())
                    .fold(0.0, f64::max);
                assert!(d <= 1e-9, "position {k} leaked future info ({variant}): {d}");
            }
        }
    }

    #[test]
    fn empty_history_predict_is_state_error() {
        let m = toy_model(Variant::Transformer);
        let mut empty = ElementState {
            node_history: vec![],
            edge_history: vec![],
            clock: 0,
        };
        assert!(m.predict_step(&mut empty).is_err());
    }

    #[test]
    fn edge_update_ignores_non_incident_nodes() {
        // two disjoint edges: perturbing nodes of one leaves the other's
        // update untouched
        let schema = GraphSchema {
            version: 1,
            task: TaskSpec {
                id: TaskId::Custom("pair".into()),
                past_window: 1,
                horizon: 1,
                labels: vec!["a".into(), "b".into(), "c".into(), "d".into(), "ab".into(), "cd".into()],
            },
            nodes: vec![
                ConceptNode { id: "a".into(), kind: NodeKind::Tool, label: Some(0) },
                ConceptNode { id: "b".into(), kind: NodeKind::Target, label: Some(1) },
                ConceptNode { id: "c".into(), kind: NodeKind::Tool, label: Some(2) },
                ConceptNode { id: "d".into(), kind: NodeKind::Target, label: Some(3) },
            ],
            edges: vec![
                HyperEdge { id: "ab".into(), nodes: vec!["a".into(), "b".into()], label: Some(4) },
                HyperEdge { id: "cd".into(), nodes: vec!["c".into(), "d".into()], label: Some(5) },
            ],
        };
        let cfg = ModelConfig {
            backbone_dim: 4,
            hidden_dim: 8,
            n_heads: 2,
            n_layers: 1,
            dropout: 0.0,
            variant: Variant::Transformer,
        };
        let m = HgtModel::new(schema, cfg, 7).unwrap();
        let mut state = m.encode(&frames(1, 4, 0.1)).unwrap();
        let before = m.edge_update(&state).unwrap();
        // perturb node c (index 2), not incident to edge ab (index 0)
        state.node_history[0][(2, 3)] += 1.5;
        let after = m.edge_update(&state).unwrap();
        for j in 0..before.ncols() {
            assert_eq!(before[(0, j)], after[(0, j)], "edge ab changed");
        }
        assert_ne!(before.row(1), after.row(1), "edge cd should change");
    }

    #[test]
    fn zero_params_zero_state_gives_zero_updates() {
        let mut m = toy_model(Variant::Transformer);
        for i in 0..m.store.len() {
            let name = m.store.name(i).to_string();
            if m.store.trainable(i) && !name.ends_with(".g") {
                m.store.value_mut(i).fill(0.0);
            }
        }
        let state = ElementState {
            node_history: vec![Array2::zeros((3, 8))],
            edge_history: vec![Array2::zeros((1, 8))],
            clock: 0,
        };
        let e = m.edge_update(&state).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
        let n = m.node_update(&state).unwrap();
        assert!(n.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edge_update_matches_scalar_oracle() {
        // single arity-2 edge, hidden_dim 2, hand-set weights; oracle is a
        // plain scalar-loop reimplementation of the two-layer block
        let schema = GraphSchema {
            version: 1,
            task: TaskSpec {
                id: TaskId::Custom("one".into()),
                past_window: 1,
                horizon: 1,
                labels: vec!["a".into(), "b".into(), "ab".into()],
            },
            nodes: vec![
                ConceptNode { id: "a".into(), kind: NodeKind::Tool, label: Some(0) },
                ConceptNode { id: "b".into(), kind: NodeKind::Target, label: Some(1) },
            ],
            edges: vec![HyperEdge {
                id: "ab".into(),
                nodes: vec!["a".into(), "b".into()],
                label: Some(2),
            }],
        };
        let cfg = ModelConfig {
            backbone_dim: 2,
            hidden_dim: 2,
            n_heads: 1,
            n_layers: 1,
            dropout: 0.0,
            variant: Variant::Transformer,
        };
        let mut m = HgtModel::new(schema, cfg, 3).unwrap();
        let w1 = array![
            [0.1, -0.2],
            [0.3, 0.4],
            [-0.5, 0.6],
            [0.7, -0.8],
            [0.9, 0.1],
            [-0.3, 0.2]
        ]; // (3 elements * d=2) x 2
        let b1 = array![[0.05, -0.05]];
        let w2 = array![[1.0, -1.0], [0.5, 0.25]];
        let b2 = array![[0.0, 0.1]];
        let set = |m: &mut HgtModel, name: &str, v: Array2<f64>| {
            let i = m.store.index_of(name).unwrap();
            *m.store.value_mut(i) = v;
        };
        set(&mut m, "enc.edge.a2.l1.w", w1.clone());
        set(&mut m, "enc.edge.a2.l1.b", b1.clone());
        set(&mut m, "enc.edge.a2.l2.w", w2.clone());
        set(&mut m, "enc.edge.a2.l2.b", b2.clone());
        let na = [0.2, -0.4];
        let nb = [0.6, 0.8];
        let ee = [-0.1, 0.3];
        let state = ElementState {
            node_history: vec![array![[na[0], na[1]], [nb[0], nb[1]]]],
            edge_history: vec![array![[ee[0], ee[1]]]],
            clock: 0,
        };
        let got = m.edge_update(&state).unwrap();
        // oracle: plain loops, row normalization written out by hand
        let x = [na[0], na[1], nb[0], nb[1], ee[0], ee[1]];
        let ln = |row: [f64; 2]| -> [f64; 2] {
            let mean = (row[0] + row[1]) / 2.0;
            let var = ((row[0] - mean).powi(2) + (row[1] - mean).powi(2)) / 2.0;
            let inv = 1.0 / (var + 1e-5).sqrt();
            [(row[0] - mean) * inv, (row[1] - mean) * inv]
        };
        let mut pre1 = [0.0f64; 2];
        for j in 0..2 {
            let mut s = b1[(0, j)];
            for (i, &xi) in x.iter().enumerate() {
                s += xi * w1[(i, j)];
            }
            pre1[j] = s;
        }
        let h = ln(pre1).map(|v| v.max(0.0));
        let mut pre2 = [0.0f64; 2];
        for j in 0..2 {
            let mut s = b2[(0, j)];
            for i in 0..2 {
                s += h[i] * w2[(i, j)];
            }
            pre2[j] = s;
        }
        let y = ln(pre2).map(|v| v.max(0.0));
        assert_abs_diff_eq!(got[(0, 0)], y[0], epsilon = 1e-12);
        assert_abs_diff_eq!(got[(0, 1)], y[1], epsilon = 1e-12);
    }

    #[test]
    fn node_update_matches_mean_oracle() {
        // node "n" sits on two edges; check the aggregation matrix row and
        // a scalar-loop oracle of the node block
        let schema = GraphSchema {
            version: 1,
            task: TaskSpec {
                id: TaskId::Custom("two".into()),
                past_window: 1,
                horizon: 1,
                labels: vec!["n".into(), "p".into(), "q".into(), "np".into(), "nq".into()],
            },
            nodes: vec![
                ConceptNode { id: "n".into(), kind: NodeKind::Tool, label: Some(0) },
                ConceptNode { id: "p".into(), kind: NodeKind::Target, label: Some(1) },
                ConceptNode { id: "q".into(), kind: NodeKind::Target, label: Some(2) },
            ],
            edges: vec![
                HyperEdge { id: "np".into(), nodes: vec!["n".into(), "p".into()], label: Some(3) },
                HyperEdge { id: "nq".into(), nodes: vec!["n".into(), "q".into()], label: Some(4) },
            ],
        };
        let a = mean_incidence_matrix(&schema);
        assert_abs_diff_eq!(a[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(a[(0, 1)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(a[(1, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a[(1, 1)], 0.0, epsilon = 1e-15);

        let cfg = ModelConfig {
            backbone_dim: 2,
            hidden_dim: 2,
            n_heads: 1,
            n_layers: 1,
            dropout: 0.0,
            variant: Variant::Transformer,
        };
        let mut m = HgtModel::new(schema, cfg, 5).unwrap();
        let w1 = array![[0.2, -0.1], [0.4, 0.3], [-0.6, 0.5], [0.1, 0.7]];
        let b1 = array![[0.0, 0.2]];
        let w2 = array![[0.9, -0.2], [0.3, 0.8]];
        let b2 = array![[-0.1, 0.0]];
        let set = |m: &mut HgtModel, name: &str, v: Array2<f64>| {
            let i = m.store.index_of(name).unwrap();
            *m.store.value_mut(i) = v;
        };
        set(&mut m, "enc.node.l1.w", w1.clone());
        set(&mut m, "enc.node.l1.b", b1.clone());
        set(&mut m, "enc.node.l2.w", w2.clone());
        set(&mut m, "enc.node.l2.b", b2.clone());
        let e_np = [0.5, -0.2];
        let e_nq = [0.1, 0.9];
        let n0 = [0.3, 0.4];
        let state = ElementState {
            node_history: vec![array![[n0[0], n0[1]], [0.0, 0.0], [0.0, 0.0]]],
            edge_history: vec![array![[e_np[0], e_np[1]], [e_nq[0], e_nq[1]]]],
            clock: 0,
        };
        let got = m.node_update(&state).unwrap();
        let agg = [(e_np[0] + e_nq[0]) / 2.0, (e_np[1] + e_nq[1]) / 2.0];
        let x = [agg[0], agg[1], n0[0], n0[1]];
        let ln = |row: [f64; 2]| -> [f64; 2] {
            let mean = (row[0] + row[1]) / 2.0;
            let var = ((row[0] - mean).powi(2) + (row[1] - mean).powi(2)) / 2.0;
            let inv = 1.0 / (var + 1e-5).sqrt();
            [(row[0] - mean) * inv, (row[1] - mean) * inv]
        };
        let mut pre1 = [0.0f64; 2];
        for j in 0..2 {
            let mut s = b1[(0, j)];
            for (i, &xi) in x.iter().enumerate() {
                s += xi * w1[(i, j)];
            }
            pre1[j] = s;
        }
        let h = ln(pre1).map(|v| v.max(0.0));
        let mut pre2 = [0.0f64; 2];
        for j in 0..2 {
            let mut s = b2[(0, j)];
            for i in 0..2 {
                s += h[i] * w2[(i, j)];
            }
            pre2[j] = s;
        }
        let y = ln(pre2).map(|v| v.max(0.0));
        for j in 0..2 {
            assert_abs_diff_eq!(got[(0, j)], y[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_projector_gives_exactly_half() {
        let mut m = toy_model(Variant::Transformer);
        for name in ["proj.node.w", "proj.node.b", "proj.edge.w", "proj.edge.b"] {
            let i = m.store.index_of(name).unwrap();
            m.store.value_mut(i).fill(0.0);
        }
        let state = m.encode(&frames(2, 4, 0.3)).unwrap();
        let probs = m.project(&state).unwrap();
        assert!(probs.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn projector_output_covers_all_columns() {
        let schema = build_task_schema(&TaskId::Triplet).unwrap();
        let cfg = ModelConfig {
            backbone_dim: 4,
            hidden_dim: 8,
            n_heads: 2,
            n_layers: 1,
            dropout: 0.0,
            variant: Variant::Transformer,
        };
        let m = HgtModel::new(schema, cfg, 11).unwrap();
        let state = m.encode(&frames(1, 4, 0.6)).unwrap();
        let probs = m.project(&state).unwrap();
        assert_eq!(probs.len(), 131);
    }

    #[test]
    fn projector_monotone_in_logit() {
        let mut m = toy_model(Variant::Transformer);
        let state = m.encode(&frames(2, 4, 0.8)).unwrap();
        let before = m.project(&state).unwrap();
        // raise the bias of the first node-bound column only
        let b = m.store.index_of("proj.node.b").unwrap();
        m.store.value_mut(b)[(0, 0)] += 1.0;
        let after = m.project(&state).unwrap();
        assert!(after[0] > before[0]);
        for c in 1..before.len() {
            assert_abs_diff_eq!(after[c], before[c], epsilon = 1e-15);
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_behavior() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let m = toy_model(Variant::Transformer);
        let f = frames(5, 4, 0.4);
        let before = m.forward(&f, 4, 4).unwrap();
        m.to_checkpoint(2, 123).save(&path).unwrap();
        let ckpt = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt.phase, 2);
        assert_eq!(ckpt.step, 123);
        let m2 = HgtModel::from_checkpoint(&ckpt, toy_schema()).unwrap();
        let after = m2.forward(&f, 4, 4).unwrap();
        assert_eq!(before.probs, after.probs);
    }

    #[test]
    fn checkpoint_refuses_schema_mismatch() {
        let m = toy_model(Variant::Transformer);
        let ckpt = m.to_checkpoint(1, 5);
        let other = build_task_schema(&TaskId::Cvs).unwrap();
        let err = match HgtModel::from_checkpoint(&ckpt, other) {
            Err(e) => e,
            Ok(_) => panic!("schema mismatch accepted"),
        };
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn variants_share_interface_shapes() {
        let ft = frames(5, 4, 0.0);
        let a = toy_model(Variant::Transformer).forward(&ft, 4, 4).unwrap();
        let b = toy_model(Variant::RecurrentCell).forward(&ft, 4, 4).unwrap();
        assert_eq!(a.probs.dim(), b.probs.dim());
        assert_eq!(a.columns, b.columns);
    }

    #[test]
    fn full_gradient_matches_central_differences() {
        // toy schema, hidden 8; loss = masked BCE over all offsets
        let m = toy_model(Variant::Transformer);
        let feats = features_matrix(&frames(3, 4, 0.7)).unwrap();
        let targets = array![
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 1.0],
            [1.0, 1.0, 0.0, 0.0]
        ];
        let mask = Array2::ones((3, 4));
        let run = |store_override: Option<(usize, usize, usize, f64)>| -> f64 {
            // rebuild with optionally perturbed parameter (idx, r, c, delta)
            let mut m2 = toy_model(Variant::Transformer);
            if let Some((i, r, c, d)) = store_override {
                m2.store.value_mut(i)[(r, c)] += d;
            }
            let mut g = Graph::new();
            let mut tb = TapeBind::training(&mut g, &m2.store, 0);
            let logits = m2.build_forward(&mut tb, &feats, 2, 2).unwrap();
            let loss = tb.g.bce_with_logits(logits, targets.clone(), mask.clone(), 0.0);
            g.value_of(loss)[(0, 0)]
        };
        // analytic gradients
        let mut g = Graph::new();
        let mut tb = TapeBind::training(&mut g, &m.store, 0);
        let logits = m.build_forward(&mut tb, &feats, 2, 2).unwrap();
        let loss = tb.g.bce_with_logits(logits, targets.clone(), mask.clone(), 0.0);
        let bindings = tb.into_bindings();
        let grads = g.backward(loss).unwrap();
        let h = 1e-5;
        let mut checked = 0usize;
        for (idx, var) in &bindings {
            let ga = grads.get(*var).cloned().unwrap_or_else(|| {
                Array2::zeros(m.store.value(*idx).dim())
            });
            let (rows, cols) = m.store.value(*idx).dim();
            // subsample entries on large tensors to keep runtime bounded
            let stride = (rows * cols / 12).max(1);
            let mut k = 0;
            while k < rows * cols {
                let (r, c) = (k / cols, k % cols);
                let up = run(Some((*idx, r, c, h)));
                let dn = run(Some((*idx, r, c, -h)));
                let num = (up - dn) / (2.0 * h);
                let ana = ga[(r, c)];
                let err = (ana - num).abs();
                let tol = 1e-4 * ana.abs().max(num.abs()).max(1e-3);
                assert!(
                    err <= tol,
                    "param {} entry ({r},{c}): analytic {ana} vs numeric {num}",
                    m.store.name(*idx)
                );
                checked += 1;
                k += stride;
            }
        }
        assert!(checked >= 50, "only {checked} entries checked");
    }
}
