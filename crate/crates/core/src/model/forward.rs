use super::{ModelParams, PersonaMode, Readout};
use crate::autodiff::{Scalar, Tape, Var};
use crate::embed::splitmix64;
use crate::error::{Error, Result};
use crate::graph::SessionGraph;
use crate::peu::NUM_CATEGORIES;

/// Train mode enables dropout; every dropout site draws a fresh mask seed
/// derived from `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    pub train: bool,
    pub seed: u64,
}

impl Mode {
    pub const EVAL: Mode = Mode { train: false, seed: 0 };

    pub fn train(seed: u64) -> Self {
        Mode { train: true, seed }
    }
}

struct DropoutSites {
    mode: Mode,
    calls: u64,
}

impl DropoutSites {
    fn apply<F: Scalar>(&mut self, tape: &mut Tape<F>, x: Var, p: f64, enabled: bool) -> Result<Var> {
        if !enabled || !self.mode.train {
            return Ok(x);
        }
        self.calls += 1;
        let seed = splitmix64(self.mode.seed ^ splitmix64(self.calls));
        tape.dropout(x, p, seed, true)
    }
}

/// Handles to the interesting intermediate values of a batched forward pass.
#[derive(Clone, Debug)]
pub struct BatchVars {
    /// B×1
    pub logits: Var,
    /// N×hidden, output of the last GAT layer over all batch nodes.
    pub node_reps: Var,
    /// B×readout_dim
    pub session_rep: Var,
    /// B×(readout_dim + persona_dim)
    pub conditioned: Var,
    /// Per layer, per head: attention over chain edges followed by self
    /// edges, before dropout.
    pub attention: Vec<Vec<Var>>,
    /// Destination node of each attention entry.
    pub attention_dst: Vec<usize>,
    /// Start of each graph's nodes in the batch, plus the total.
    pub node_offsets: Vec<usize>,
}

/// Output of a single-graph evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<F> {
    pub logit: F,
    pub prob: F,
    pub node_reps: Vec<F>,
    pub session_rep: Vec<F>,
    pub conditioned_rep: Vec<F>,
}

fn rows_const<F: Scalar>(tape: &mut Tape<F>, rows: usize, cols: usize, data: impl Iterator<Item = f32>) -> Result<Var> {
    tape.constant(&[rows, cols], data.map(|v| F::of(f64::from(v))).collect())
}

/// Runs the network over several graphs at once on one tape. Graphs are
/// laid out as disjoint node blocks, so no information crosses graphs.
pub fn forward_batch<F: Scalar>(
    params: &ModelParams<F>,
    vars: &[Var],
    tape: &mut Tape<F>,
    graphs: &[&SessionGraph],
    personas: &[usize],
    mode: Mode,
) -> Result<BatchVars> {
    let cfg = &params.config;
    let lay = &params.layout;
    if graphs.is_empty() || graphs.len() != personas.len() {
        return Err(Error::Usage(format!(
            "forward needs one persona per graph, got {} graphs and {} personas",
            graphs.len(),
            personas.len()
        )));
    }
    let mut node_offsets = vec![0];
    let mut node_graph = Vec::new();
    let (mut edge_src, mut edge_dst) = (Vec::new(), Vec::new());
    for (gi, g) in graphs.iter().enumerate() {
        let t = g.num_nodes();
        if t == 0 {
            return Err(Error::EmptySession(g.session_id.clone()));
        }
        if personas[gi] >= cfg.num_personas {
            return Err(Error::Data(format!(
                "persona {} out of range for {} personas (session {})",
                personas[gi], cfg.num_personas, g.session_id
            )));
        }
        let off = *node_offsets.last().unwrap();
        for &(a, b) in &g.edges {
            edge_src.push(off + a);
            edge_dst.push(off + b);
        }
        node_graph.extend(std::iter::repeat_n(gi, t));
        node_offsets.push(off + t);
    }
    let n = *node_offsets.last().unwrap();
    let b = graphs.len();
    let mut drop = DropoutSites { mode, calls: 0 };
    let p = cfg.dropout;
    let v = |i: usize| vars[i];

    let edge_attr = rows_const(
        tape,
        edge_src.len(),
        NUM_CATEGORIES,
        graphs.iter().flat_map(|g| g.edge_attr.iter().copied()),
    )?;
    let mut h = project_inputs(params, vars, tape, graphs)?;

    // Attention runs over chain edges plus one self edge per node.
    let att_src: Vec<usize> = edge_src.iter().copied().chain(0..n).collect();
    let att_dst: Vec<usize> = edge_dst.iter().copied().chain(0..n).collect();
    let dh = cfg.head_dim();
    let mut attention = Vec::with_capacity(cfg.layers);
    for gl in &lay.gat {
        let mut hp = h;
        if !edge_src.is_empty() {
            let e = tape.matmul(edge_attr, v(gl.edge_w))?;
            let e = tape.add_bias(e, v(gl.edge_b))?;
            let injected = tape.scatter_add_rows(e, &edge_dst, n)?;
            hp = tape.add(h, injected)?;
        }
        let xs = tape.matmul(hp, v(gl.w_src))?;
        let xd = tape.matmul(hp, v(gl.w_dst))?;
        let zs = tape.index_rows(xs, &att_src)?;
        let zd = tape.index_rows(xd, &att_dst)?;
        let z = tape.add(zs, zd)?;
        let z = tape.leaky_relu(z, cfg.leaky_slope);
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut layer_att = Vec::with_capacity(cfg.heads);
        for k in 0..cfg.heads {
            let zk = tape.slice_cols(z, k * dh, (k + 1) * dh)?;
            let ak = tape.index_rows(v(gl.attn), &[k])?;
            let ak = tape.transpose(ak)?;
            let score = tape.matmul(zk, ak)?;
            let alpha = tape.segment_softmax(score, &att_dst, n)?;
            layer_att.push(alpha);
            let alpha = drop.apply(tape, alpha, p, cfg.attention_dropout)?;
            let xk = tape.slice_cols(xs, k * dh, (k + 1) * dh)?;
            let msg = tape.index_rows(xk, &att_src)?;
            let msg = tape.scale_rows(msg, alpha)?;
            heads.push(tape.scatter_add_rows(msg, &att_dst, n)?);
        }
        attention.push(layer_att);
        let agg = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let agg = tape.add_bias(agg, v(gl.bias))?;
        let agg = tape.elu(agg);
        let agg = drop.apply(tape, agg, p, cfg.output_dropout)?;
        h = tape.add(agg, h)?;
    }
    let node_reps = h;

    let session_rep = match cfg.readout {
        Readout::Set2Set => set2set_readout(params, vars, tape, node_reps, &node_graph, b)?,
        Readout::Mean => {
            let sums = tape.scatter_add_rows(node_reps, &node_graph, b)?;
            let inv: Vec<F> = node_offsets.windows(2).map(|w| F::one() / F::of((w[1] - w[0]) as f64)).collect();
            let inv = tape.constant(&[b], inv)?;
            tape.scale_rows(sums, inv)?
        }
    };

    let z_p = match cfg.persona_mode {
        PersonaMode::On => tape.index_rows(v(lay.persona), personas)?,
        PersonaMode::Off => tape.constant(&[b, cfg.persona_dim], vec![F::zero(); b * cfg.persona_dim])?,
    };
    let conditioned = tape.concat_cols(&[session_rep, z_p])?;
    let x = tape.matmul(conditioned, v(lay.head_w1))?;
    let x = tape.add_bias(x, v(lay.head_b1))?;
    let x = tape.elu(x);
    let x = drop.apply(tape, x, p, true)?;
    let x = tape.matmul(x, v(lay.head_w2))?;
    let logits = tape.add_bias(x, v(lay.head_b2))?;

    Ok(BatchVars {
        logits,
        node_reps,
        session_rep,
        conditioned,
        attention,
        attention_dst: att_dst,
        node_offsets,
    })
}

/// `LN(LN(text)·W_t + b_t + LN(peu)·W_p + b_p)` for every node of every graph.
pub fn project_inputs<F: Scalar>(
    params: &ModelParams<F>,
    vars: &[Var],
    tape: &mut Tape<F>,
    graphs: &[&SessionGraph],
) -> Result<Var> {
    let (cfg, lay) = (&params.config, &params.layout);
    let v = |i: usize| vars[i];
    let n: usize = graphs.iter().map(|g| g.num_nodes()).sum();
    if let Some(g) = graphs.iter().find(|g| g.text_dim != cfg.text_dim || g.node_text.len() != g.num_nodes() * cfg.text_dim) {
        return Err(Error::Config(format!(
            "graph {} has text dim {}, model expects {}",
            g.session_id, g.text_dim, cfg.text_dim
        )));
    }
    let text = rows_const(tape, n, cfg.text_dim, graphs.iter().flat_map(|g| g.node_text.iter().copied()))?;
    let peu = rows_const(tape, n, NUM_CATEGORIES, graphs.iter().flat_map(|g| g.node_peu.iter().copied()))?;
    let eps = cfg.ln_eps;
    let t = tape.layer_norm(text, v(lay.text_ln_g), v(lay.text_ln_b), eps)?;
    let t = tape.matmul(t, v(lay.text_w))?;
    let t = tape.add_bias(t, v(lay.text_b))?;
    let q = tape.layer_norm(peu, v(lay.peu_ln_g), v(lay.peu_ln_b), eps)?;
    let q = tape.matmul(q, v(lay.peu_w))?;
    let q = tape.add_bias(q, v(lay.peu_b))?;
    let fused = tape.add(t, q)?;
    tape.layer_norm(fused, v(lay.fuse_ln_g), v(lay.fuse_ln_b), eps)
}

/// Set2Set pooling: an LSTM over `[q ∥ r]` whose hidden state queries the
/// nodes of each graph by dot-product attention. Gate order is i, f, g, o.
pub fn set2set_readout<F: Scalar>(
    params: &ModelParams<F>,
    vars: &[Var],
    tape: &mut Tape<F>,
    nodes: Var,
    node_graph: &[usize],
    b: usize,
) -> Result<Var> {
    let h_dim = params.config.hidden;
    let lay = &params.layout;
    let ones = tape.constant(&[h_dim, 1], vec![F::one(); h_dim])?;
    let mut q_star = tape.constant(&[b, 2 * h_dim], vec![F::zero(); b * 2 * h_dim])?;
    let mut hs = tape.constant(&[b, h_dim], vec![F::zero(); b * h_dim])?;
    let mut cs = tape.constant(&[b, h_dim], vec![F::zero(); b * h_dim])?;
    for _ in 0..params.config.set2set_iters {
        let gi = tape.matmul(q_star, vars[lay.lstm_wih])?;
        let gh = tape.matmul(hs, vars[lay.lstm_whh])?;
        let gates = tape.add(gi, gh)?;
        let gates = tape.add_bias(gates, vars[lay.lstm_b])?;
        let i = tape.slice_cols(gates, 0, h_dim)?;
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(gates, h_dim, 2 * h_dim)?;
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(gates, 2 * h_dim, 3 * h_dim)?;
        let g = tape.tanh(g);
        let o = tape.slice_cols(gates, 3 * h_dim, 4 * h_dim)?;
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, cs)?;
        let ig = tape.mul(i, g)?;
        cs = tape.add(fc, ig)?;
        let tc = tape.tanh(cs);
        hs = tape.mul(o, tc)?;

        let qn = tape.index_rows(hs, node_graph)?;
        let prod = tape.mul(nodes, qn)?;
        let e = tape.matmul(prod, ones)?;
        let a = tape.segment_softmax(e, node_graph, b)?;
        let weighted = tape.scale_rows(nodes, a)?;
        let r = tape.scatter_add_rows(weighted, node_graph, b)?;
        q_star = tape.concat_cols(&[hs, r])?;
    }
    Ok(q_star)
}

/// Eval-mode forward of one graph under the given persona label.
pub fn predict<F: Scalar>(params: &ModelParams<F>, graph: &SessionGraph, persona: usize) -> Result<ForwardOutput<F>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape)?;
    let out = forward_batch(params, &vars, &mut tape, &[graph], &[persona], Mode::EVAL)?;
    let logit = tape.scalar(out.logits);
    Ok(ForwardOutput {
        logit,
        prob: crate::autodiff::sigmoid(logit),
        node_reps: tape.value(out.node_reps).to_vec(),
        session_rep: tape.value(out.session_rep).to_vec(),
        conditioned_rep: tape.value(out.conditioned).to_vec(),
    })
}
