//! Channel-wise mixture of experts and the decoder layer built around it.
//!
//! Routing happens once per channel: the router scores of all `N` tokens of
//! a channel are averaged, softmaxed over experts, and the top-`K` experts
//! by `score + bias` process every token of that channel. The bias is a
//! non-learned running offset nudged toward balanced load after each
//! optimizer step; it affects which experts are picked but never the gate
//! values.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, AttnConfig, AttnVars};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::linear;

pub const RMS_EPS: f64 = 1e-8;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Routing {
    /// One expert set per channel (all `N` tokens share it).
    Channel,
    /// Ablation: every token routed on its own.
    Token,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Rms,
    Layer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeConfig {
    pub n_shared: usize,
    pub n_private: usize,
    pub top_k: usize,
    /// Hidden width of a private expert; `4d/K` when unset.
    pub expert_hidden: Option<usize>,
    /// Hidden width of a shared expert; the private width when unset.
    pub shared_hidden: Option<usize>,
    pub bias_rate: f64,
    /// Renormalize the selected gates to sum to 1.
    pub renormalize: bool,
    pub routing: Routing,
    /// Init std of the gating matrix. Kept small so early scores are near
    /// uniform and the selection bias can balance loads from the first steps.
    pub router_init_std: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            n_shared: 1,
            n_private: 8,
            top_k: 2,
            expert_hidden: None,
            shared_hidden: None,
            bias_rate: 1e-3,
            renormalize: false,
            routing: Routing::Channel,
            router_init_std: 0.02,
        }
    }
}

impl MoeConfig {
    pub fn expert_width(&self, d: usize) -> usize {
        self.expert_hidden
            .unwrap_or_else(|| (4 * d / self.top_k.max(1)).max(1))
    }

    pub fn shared_width(&self, d: usize) -> usize {
        self.shared_hidden.unwrap_or_else(|| self.expert_width(d))
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.n_private {
            return Err(Error::Config(format!(
                "top_k = {} must lie in 1..={} (n_private)",
                self.top_k, self.n_private
            )));
        }
        if self.expert_hidden == Some(0) || self.shared_hidden == Some(0) {
            return Err(Error::Config("expert hidden widths must be positive".into()));
        }
        if !(self.bias_rate >= 0.0) || !(self.router_init_std >= 0.0) {
            return Err(Error::Config("bias_rate and router_init_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// Selection bias and load counters of one MoE layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterState {
    pub bias: Vec<f64>,
    /// Selections since the last [`RouterState::update_bias`].
    pub counts: Vec<u64>,
    /// Selections since construction.
    pub lifetime: Vec<u64>,
}

impl RouterState {
    pub fn new(n_private: usize) -> Self {
        Self {
            bias: vec![0.0; n_private],
            counts: vec![0; n_private],
            lifetime: vec![0; n_private],
        }
    }

    pub fn record(&mut self, a: &ExpertAssignment) {
        for (e, &c) in a.counts.iter().enumerate() {
            self.counts[e] += c;
            self.lifetime[e] += c;
        }
    }

    /// `b_i += rate · sign(mean(c) − c_i)` with `sign(0) = 0`, then resets
    /// the counters.
    pub fn update_bias(&mut self, rate: f64) {
        let mean = self.counts.iter().sum::<u64>() as f64 / self.counts.len().max(1) as f64;
        for (b, &c) in self.bias.iter_mut().zip(&self.counts) {
            let e = mean - c as f64;
            if e != 0.0 {
                *b += rate * e.signum();
            }
        }
        self.counts.iter_mut().for_each(|c| *c = 0);
    }
}

/// Routing decision for `U` units (channels, or tokens under the ablation).
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertAssignment {
    /// Softmaxed router scores `s̄`, `[U, n_p]`.
    pub scores: Tensor,
    /// Gate values, nonzero exactly on selected experts, `[U, n_p]`.
    pub gates: Tensor,
    /// `K` expert indices per unit, in selection order.
    pub selected: Vec<Vec<usize>>,
    /// Selections per expert.
    pub counts: Vec<u64>,
}

/// Top-`k` of `scores + bias` per row; ties go to the lower index.
pub fn select_experts(scores: &Tensor, bias: &[f64], k: usize, renormalize: bool) -> Result<ExpertAssignment> {
    let s = scores.shape();
    if s.len() != 2 || s[1] != bias.len() || k == 0 || k > s[1] {
        return Err(Error::shape(
            "select_experts",
            format!("scores {s:?}, bias {}, k = {k}", bias.len()),
        ));
    }
    let (u, np) = (s[0], s[1]);
    let mut gates = Tensor::zeros(&[u, np]);
    let mut selected = Vec::with_capacity(u);
    let mut counts = vec![0u64; np];
    for (r, row) in scores.data().chunks(np).enumerate() {
        let mut order: Vec<usize> = (0..np).collect();
        order.sort_by(|&a, &b| {
            (row[b] + bias[b])
                .partial_cmp(&(row[a] + bias[a]))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(k);
        let total: f64 = order.iter().map(|&e| row[e]).sum();
        for &e in &order {
            let gv = if renormalize { row[e] / total } else { row[e] };
            gates.set(&[r, e], gv);
            counts[e] += 1;
        }
        selected.push(order);
    }
    Ok(ExpertAssignment {
        scores: scores.clone(),
        gates,
        selected,
        counts,
    })
}

/// `s̄ = softmax(mean_τ(H · 𝒢ᵀ))`, `[U, n_p]`, for `h: [U, N, d]` and
/// `cluster: [n_p, d]`.
pub fn router_scores(g: &mut Graph, h: Var, cluster: Var) -> Result<Var> {
    let ct = g.transpose(cluster)?;
    let s = g.matmul(h, ct)?;
    let s = g.mean_axis(s, 1, false)?;
    g.softmax_lastdim(s)
}

/// Scores and expert choice per channel; the returned node is `s̄`.
pub fn route_channels(
    g: &mut Graph,
    h: Var,
    cluster: Var,
    bias: &[f64],
    cfg: &MoeConfig,
) -> Result<(Var, ExpertAssignment)> {
    let sbar = router_scores(g, h, cluster)?;
    let a = select_experts(g.value(sbar), bias, cfg.top_k, cfg.renormalize)?;
    Ok((sbar, a))
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Option<Var>,
    pub w2: Var,
    pub b2: Option<Var>,
}

/// `GELU(x W₁ + b₁) W₂ + b₂`.
pub fn ffn(g: &mut Graph, x: Var, v: &FfnVars) -> Result<Var> {
    let y = linear(g, "ffn", x, v.w1, v.b1)?;
    let y = g.gelu(y)?;
    linear(g, "ffn", y, v.w2, v.b2)
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gain: Var,
    /// Only used by layer normalization.
    pub bias: Option<Var>,
}

pub fn norm(g: &mut Graph, x: Var, v: &NormVars, kind: NormKind) -> Result<Var> {
    match kind {
        NormKind::Rms => g.rmsnorm(x, v.gain, RMS_EPS),
        NormKind::Layer => {
            let b = v
                .bias
                .ok_or_else(|| Error::Invalid("layer normalization needs a bias".into()))?;
            g.layernorm(x, v.gain, b, LN_EPS)
        }
    }
}

#[derive(Clone, Debug)]
pub struct MoeVars {
    /// `[n_p, d]`.
    pub cluster: Var,
    pub shared: Vec<FfnVars>,
    pub private: Vec<FfnVars>,
    pub norm: NormVars,
}

/// `Norm(mean_s FFN_s(Ĥ) + Σ_{e selected} g_e FFN_e(Ĥ) + Ĥ)` for
/// `h: [U, N, d]`. Only selected experts are evaluated.
pub fn moe_forward(
    g: &mut Graph,
    h: Var,
    vars: &MoeVars,
    bias: &[f64],
    cfg: &MoeConfig,
    kind: NormKind,
) -> Result<(Var, ExpertAssignment)> {
    let shape = g.shape(h).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("moe_forward", format!("expected [U, N, d], got {shape:?}")));
    }
    let (u0, n, d) = (shape[0], shape[1], shape[2]);
    let x = match cfg.routing {
        Routing::Channel => h,
        Routing::Token => g.reshape(h, &[u0 * n, 1, d])?,
    };
    let u = g.shape(x)[0];

    let (sbar, assignment) = route_channels(g, x, vars.cluster, bias, cfg)?;
    let select = Tensor::from_fn(&[u, cfg.n_private], |i| {
        if assignment.selected[i[0]].contains(&i[1]) {
            1.0
        } else {
            0.0
        }
    });
    let select = g.constant(select);
    let mut gm = g.mul(sbar, select)?;
    if cfg.renormalize {
        let total = g.sum_axis(gm, 1, true)?;
        gm = g.div(gm, total)?;
    }

    let mut acc = x;
    if !vars.shared.is_empty() {
        let mut sum: Option<Var> = None;
        for s in &vars.shared {
            let y = ffn(g, x, s)?;
            sum = Some(match sum {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        let mean = g.scale(sum.unwrap(), 1.0 / vars.shared.len() as f64)?;
        acc = g.add(acc, mean)?;
    }
    for (e, expert) in vars.private.iter().enumerate() {
        let units: Vec<usize> = (0..u)
            .filter(|&r| assignment.selected[r].contains(&e))
            .collect();
        if units.is_empty() {
            continue;
        }
        let xe = g.index_select(x, &units)?;
        let ye = ffn(g, xe, expert)?;
        let col = g.slice(gm, 1, e, e + 1)?;
        let ge = g.index_select(col, &units)?;
        let ge = g.reshape(ge, &[units.len(), 1, 1])?;
        let ye = g.mul(ye, ge)?;
        let ye = g.scatter_rows(ye, &units, u)?;
        acc = g.add(acc, ye)?;
    }
    let out = norm(g, acc, &vars.norm, kind)?;
    let out = match cfg.routing {
        Routing::Channel => out,
        Routing::Token => g.reshape(out, &[u0, n, d])?,
    };
    Ok((out, assignment))
}

#[derive(Clone, Debug)]
pub enum FfnBlock {
    Dense { ffn: FfnVars, norm: NormVars },
    Moe(MoeVars),
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn: AttnVars,
    pub norm1: NormVars,
    pub block: FfnBlock,
}

/// Static settings shared by every layer of a model.
#[derive(Clone, Debug)]
pub struct LayerCtx<'a> {
    pub attn: &'a AttnConfig,
    pub moe: &'a MoeConfig,
    pub norm: NormKind,
}

pub struct LayerOutput {
    /// `[I, C·N, d]`.
    pub out: Var,
    pub probs: Var,
    pub assignment: Option<ExpertAssignment>,
}

/// `Ĥ = Norm(Attn(H) + H)` followed by the dense or MoE block. The MoE
/// routes each of the `I·C` channels of `h: [I, C·N, d]` as one unit.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer_forward(
    g: &mut Graph,
    h: Var,
    layer: &LayerVars,
    mask: Var,
    c: usize,
    n: usize,
    ctx: &LayerCtx<'_>,
    bias: Option<&[f64]>,
) -> Result<LayerOutput> {
    let shape = g.shape(h).to_vec();
    let att = attention_forward(g, h, &layer.attn, mask, c, n, ctx.attn)?;
    let res = g.add(att.out, h)?;
    let hh = norm(g, res, &layer.norm1, ctx.norm)?;
    match &layer.block {
        FfnBlock::Dense { ffn: f, norm: nv } => {
            let y = ffn(g, hh, f)?;
            let y = g.add(y, hh)?;
            let out = norm(g, y, nv, ctx.norm)?;
            Ok(LayerOutput {
                out,
                probs: att.probs,
                assignment: None,
            })
        }
        FfnBlock::Moe(mv) => {
            let (inst, d) = (shape[0], shape[2]);
            let bias = bias.ok_or_else(|| Error::Invalid("MoE layer needs router bias".into()))?;
            let units = g.reshape(hh, &[inst * c, n, d])?;
            let (y, a) = moe_forward(g, units, mv, bias, ctx.moe, ctx.norm)?;
            let out = g.reshape(y, &shape)?;
            Ok(LayerOutput {
                out,
                probs: att.probs,
                assignment: Some(a),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_flips_selection_not_gate() {
        let s = Tensor::from_rows(&[vec![0.8, 0.2]]).unwrap();
        let a = select_experts(&s, &[0.0, 0.0], 1, false).unwrap();
        assert_eq!(a.selected, vec![vec![0]]);
        assert_eq!(a.gates.data(), &[0.8, 0.0]);
        let b = select_experts(&s, &[-1.0, 1.0], 1, false).unwrap();
        assert_eq!(b.selected, vec![vec![1]]);
        assert_eq!(b.gates.data(), &[0.0, 0.2]);
    }

    #[test]
    fn full_selection_keeps_softmax_row() {
        let s = Tensor::from_rows(&[vec![0.5, 0.3, 0.2]]).unwrap();
        let a = select_experts(&s, &[0.0; 3], 3, false).unwrap();
        assert_eq!(a.gates, s);
        assert_eq!(a.counts, vec![1, 1, 1]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let s = Tensor::from_rows(&[vec![0.25, 0.25, 0.25, 0.25]]).unwrap();
        let a = select_experts(&s, &[0.0; 4], 2, false).unwrap();
        assert_eq!(a.selected, vec![vec![0, 1]]);
        let r = select_experts(&s, &[0.0; 4], 2, true).unwrap();
        assert_eq!(r.gates.data(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn sign_rule() {
        let mut st = RouterState::new(2);
        st.counts = vec![10, 0];
        st.update_bias(0.001);
        assert_eq!(st.bias, vec![-0.001, 0.001]);
        assert_eq!(st.counts, vec![0, 0]);
        st.counts = vec![4, 4];
        st.update_bias(0.001);
        assert_eq!(st.bias, vec![-0.001, 0.001]);
    }

    #[test]
    fn widths() {
        let c = MoeConfig::default();
        assert_eq!(c.expert_width(16), 32);
        assert_eq!(c.shared_width(16), 32);
        let bad = MoeConfig {
            top_k: 9,
            ..MoeConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
