use super::{Binding, LossKind, Model};
use crate::attention::temporal_mask;
use crate::error::{Error, Result};
use crate::graph_learning::{gumbel_adjacency, similarity_graph, AdjacencyMatrix, GraphMode};
use crate::moe::{decoder_layer_forward, ExpertAssignment, LayerCtx};
use crate::tensor::{Graph, RngStream, Tensor, Var};
use crate::tokenizer::{
    denormalize, embed_patches, normalize, patchify, project_output, SeriesBatch,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Every channel is its own univariate instance.
    Ci,
    /// The trailing `graph_layers` layers attend across channels under `G`.
    Cm,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub graph_mode: GraphMode,
    /// Gumbel temperature; the config value when unset.
    pub tau: Option<f64>,
    /// Fixed adjacency `[C, C]` or `[B, C, C]` replacing the learned one.
    pub graph_override: Option<Tensor>,
    pub rng: RngStream,
}

impl ForwardOptions {
    pub fn ci() -> Self {
        Self {
            mode: Mode::Ci,
            graph_mode: GraphMode::Eval,
            tau: None,
            graph_override: None,
            rng: RngStream::new(0),
        }
    }

    pub fn cm(graph_mode: GraphMode, rng: RngStream) -> Self {
        Self {
            mode: Mode::Cm,
            graph_mode,
            tau: None,
            graph_override: None,
            rng,
        }
    }

    pub fn with_graph(mut self, g: Tensor) -> Self {
        self.graph_override = Some(g);
        self
    }
}

pub struct ForwardOutput {
    /// `[B, C, N, P]` next-patch predictions in normalized units.
    pub pred: Var,
    /// Learned similarity `[B, C, C]` (cm mode without override).
    pub similarity: Option<Var>,
    pub adjacency: Option<AdjacencyMatrix>,
    /// Attention weights per layer.
    pub probs: Vec<Var>,
    pub assignments: Vec<Option<ExpertAssignment>>,
}

fn expand_graph(gt: &Tensor, b: usize, c: usize) -> Result<Tensor> {
    let s = gt.shape();
    let full = if s == [c, c] {
        Tensor::stack(&vec![gt.clone(); b])?
    } else if s == [b, c, c] {
        gt.clone()
    } else {
        return Err(Error::shape("forward", format!("graph {s:?} for B = {b}, C = {c}")));
    };
    for bi in 0..b {
        for i in 0..c {
            if full.get(&[bi, i, i]) == 0.0 {
                return Err(Error::Invalid("graph override has a zero diagonal".into()));
            }
        }
    }
    Ok(full)
}

/// Runs the decoder stack on `batch` (already normalized).
pub fn forward(
    g: &mut Graph,
    bind: &Binding,
    model: &Model,
    batch: &SeriesBatch,
    opts: &mut ForwardOptions,
) -> Result<ForwardOutput> {
    let cfg = &model.cfg;
    let pc = cfg.patch_config();
    let (b, c) = (batch.batch_size(), batch.channels());
    let (n, d) = (pc.num_patches(), cfg.d_model);

    let patches = g.constant(patchify(&batch.values, &pc)?);
    let h = embed_patches(g, patches, bind.var("embed.w")?, bind.opt("embed.b"))?;
    let mut h = g.reshape(h, &[b * c, n, d])?;

    let attn = cfg.attn_config();
    let ctx = LayerCtx {
        attn: &attn,
        moe: &cfg.moe,
        norm: cfg.norm,
    };
    let temporal = temporal_mask(n);
    let tmask = g.constant(temporal.clone());
    let split = match opts.mode {
        Mode::Ci => cfg.layers,
        Mode::Cm => cfg.frozen_layers(),
    };
    let mut probs = Vec::with_capacity(cfg.layers);
    let mut assignments = Vec::with_capacity(cfg.layers);
    for l in 0..split {
        let lv = model.layer_vars(bind, l)?;
        let bias = model.routers[l].as_ref().map(|r| r.bias.as_slice());
        let o = decoder_layer_forward(g, h, &lv, tmask, 1, n, &ctx, bias)?;
        h = o.out;
        probs.push(o.probs);
        assignments.push(o.assignment);
    }

    let mut similarity = None;
    let mut adjacency = None;
    if split < cfg.layers {
        let gmask = match &opts.graph_override {
            Some(gt) => g.constant(expand_graph(gt, b, c)?),
            None => {
                let shift = if cfg.graph.edge_bias {
                    let eb = bind.var("graph.edge_bias")?;
                    Some(g.slice(eb, 0, 2, 3)?)
                } else {
                    None
                };
                let z = similarity_graph(g, &batch.values, bind.var("graph.alpha_raw")?, shift)?;
                let logit_bias = if cfg.graph.edge_bias {
                    let eb = bind.var("graph.edge_bias")?;
                    Some(g.slice(eb, 0, 0, 2)?)
                } else {
                    None
                };
                let tau = opts.tau.unwrap_or(cfg.graph.tau);
                let adj = gumbel_adjacency(g, z, tau, &mut opts.rng, opts.graph_mode, logit_bias)?;
                let m = adj.mask;
                similarity = Some(z);
                adjacency = Some(adj);
                m
            }
        };
        let mask = g.kron_mask(gmask, &temporal)?;
        h = g.reshape(h, &[b, c * n, d])?;
        for l in split..cfg.layers {
            let lv = model.layer_vars(bind, l)?;
            let bias = model.routers[l].as_ref().map(|r| r.bias.as_slice());
            let o = decoder_layer_forward(g, h, &lv, mask, c, n, &ctx, bias)?;
            h = o.out;
            probs.push(o.probs);
            assignments.push(o.assignment);
        }
        h = g.reshape(h, &[b * c, n, d])?;
    }

    let y = project_output(g, h, bind.var("head.w")?, bind.opt("head.b"))?;
    let pred = g.reshape(y, &[b, c, n, pc.patch])?;
    Ok(ForwardOutput {
        pred,
        similarity,
        adjacency,
        probs,
        assignments,
    })
}

/// Mean squared error against next-patch targets `[B, C, N, P]`.
pub fn next_patch_loss(g: &mut Graph, pred: Var, target: &Tensor, kind: LossKind) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(Error::shape(
            "next_patch_loss",
            format!("prediction {:?} vs target {:?}", g.shape(pred), target.shape()),
        ));
    }
    let t = g.constant(target.clone());
    let (p, t) = match kind {
        LossKind::All => (pred, t),
        LossKind::LastOnly => {
            let n = target.shape()[2];
            (g.slice(pred, 2, n - 1, n)?, g.slice(t, 2, n - 1, n)?)
        }
    };
    let diff = g.sub(p, t)?;
    let sq = g.mul(diff, diff)?;
    g.mean_all(sq)
}

/// Forecast of the `F` steps after raw look-backs `values: [B, C, L]`, in
/// raw units.
pub fn predict(model: &Model, values: &Tensor, opts: &mut ForwardOptions) -> Result<Tensor> {
    let batch = normalize(&SeriesBatch::new(values.clone(), None)?)?;
    let mut g = Graph::new();
    let bind = Binding::new(&mut g, &model.params, &|_| false);
    let out = forward(&mut g, &bind, model, &batch, opts)?;
    let p = g.value(out.pred);
    let (b, c, n, f) = (p.shape()[0], p.shape()[1], p.shape()[2], p.shape()[3]);
    let mut last = Vec::with_capacity(b * c * f);
    for row in p.data().chunks(n * f) {
        last.extend_from_slice(&row[(n - 1) * f..]);
    }
    denormalize(&batch, &Tensor::new(vec![b, c, f], last)?)
}
