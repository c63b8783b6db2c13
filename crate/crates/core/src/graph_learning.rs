//! Instance-wise variable graphs from spectral similarity.
//!
//! For each window the amplitude spectra of the `C` channels are compared
//! bin by bin. Channels with close spectra get a high similarity `Z_ij`,
//! which is turned into an edge probability and sampled with a two-class
//! Gumbel-Softmax. The sampled adjacency gates cross-variable attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{rfft_magnitudes, sample_gumbel, Graph, RngStream, Tensor, Var};

/// Guard added to the weighted log-distance before inversion.
pub const DEN_EPS: f64 = 1e-8;
/// Off-diagonal spreads below this are replaced by 1.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// `Z` is clamped to `[Z_CLAMP, 1 − Z_CLAMP]` before the logit.
pub const Z_CLAMP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    /// When set, `tau` is annealed linearly to this value over `anneal_steps`.
    pub tau_end: Option<f64>,
    pub anneal_steps: usize,
    /// Feed the three edge biases into sampling (off by default).
    pub edge_bias: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            tau_end: None,
            anneal_steps: 0,
            edge_bias: false,
        }
    }
}

impl GraphConfig {
    pub fn tau_at(&self, step: usize) -> f64 {
        match self.tau_end {
            Some(end) if self.anneal_steps > 0 => {
                let frac = (step as f64 / self.anneal_steps as f64).min(1.0);
                self.tau + (end - self.tau) * frac
            }
            _ => self.tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || self.tau_end.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("graph temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// Learnable parameters of the similarity and sampling steps.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqSimilarityParams {
    /// `[L/2]`; the per-bin weight is `sigmoid(alpha_raw)`.
    pub alpha_raw: Tensor,
    /// `[3]`: first-logit offset, second-logit offset, similarity shift.
    pub edge_bias: Tensor,
}

impl FreqSimilarityParams {
    /// `α = 0.5` on every bin and zero edge biases.
    pub fn new(lookback: usize) -> Self {
        Self {
            alpha_raw: Tensor::zeros(&[lookback / 2]),
            edge_bias: Tensor::zeros(&[3]),
        }
    }

    pub fn alpha(&self) -> Tensor {
        self.alpha_raw.map(|a| 1.0 / (1.0 + (-a).exp()))
    }
}

/// `log(1 + |amp_i − amp_j|)` for every ordered off-diagonal pair, as
/// `[B, C(C−1), L/2]` in row-major `(i, j ≠ i)` order.
pub fn log_amplitude_distances(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape("similarity", format!("expected [B, C, L], got {s:?}")));
    }
    let (b, c, l) = (s[0], s[1], s[2]);
    let half = l / 2;
    let amps = x
        .data()
        .chunks(l)
        .map(rfft_magnitudes)
        .collect::<Result<Vec<_>>>()?;
    let m = c * c.saturating_sub(1);
    let mut out = Vec::with_capacity(b * m * half);
    for bi in 0..b {
        for i in 0..c {
            for j in (0..c).filter(|&j| j != i) {
                let (ai, aj) = (&amps[bi * c + i], &amps[bi * c + j]);
                out.extend(ai.iter().zip(aj).map(|(p, q)| (p - q).abs().ln_1p()));
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, m, half], out))
}

/// Differentiable similarity `Z: [B, C, C]` of windows `x: [B, C, L]`.
///
/// Off-diagonal scores `Z̃ = 1 / (Σ_t α_t log(1 + D_t) + ε)` are z-scored per
/// window over all off-diagonal entries and squashed with a sigmoid; the
/// diagonal is exactly 1. `shift`, when given, is added to the z-scores.
pub fn similarity_graph(g: &mut Graph, x: &Tensor, alpha_raw: Var, shift: Option<Var>) -> Result<Var> {
    let ld = log_amplitude_distances(x)?;
    let (b, m, half) = (ld.shape()[0], ld.shape()[1], ld.shape()[2]);
    let c = x.shape()[1];
    if g.shape(alpha_raw) != [half] {
        return Err(Error::shape(
            "similarity",
            format!("alpha {:?} for {half} frequency bins", g.shape(alpha_raw)),
        ));
    }
    let eye = Tensor::from_fn(&[b, c, c], |i| if i[1] == i[2] { 1.0 } else { 0.0 });
    if c == 1 {
        return Ok(g.constant(eye));
    }

    let ld = g.constant(ld);
    let alpha = g.sigmoid(alpha_raw)?;
    let alpha = g.reshape(alpha, &[half, 1])?;
    let w = g.matmul(ld, alpha)?;
    let w = g.add_scalar(w, DEN_EPS)?;
    let zt = g.powf(w, -1.0)?;
    let zt = g.reshape(zt, &[b, m])?;

    let mu = g.mean_axis(zt, 1, true)?;
    let cen = g.sub(zt, mu)?;
    let sq = g.mul(cen, cen)?;
    let var = g.mean_axis(sq, 1, true)?;
    // floored rows use σ = 1 exactly: var·0 + 1
    let keep = g.value(var).map(|v| if v.sqrt() < SIGMA_FLOOR { 0.0 } else { 1.0 });
    let fill = keep.map(|k| 1.0 - k);
    let keep = g.constant(keep);
    let fill = g.constant(fill);
    let var = g.mul(var, keep)?;
    let var = g.add(var, fill)?;
    let sigma = g.powf(var, 0.5)?;
    let mut zs = g.div(cen, sigma)?;
    if let Some(s) = shift {
        zs = g.add(zs, s)?;
    }
    let off = g.sigmoid(zs)?;

    let off = g.reshape(off, &[b * m, 1])?;
    let mut idx = Vec::with_capacity(b * m);
    for bi in 0..b {
        for i in 0..c {
            for j in (0..c).filter(|&j| j != i) {
                idx.push(bi * c * c + i * c + j);
            }
        }
    }
    let full = g.scatter_rows(off, &idx, b * c * c)?;
    let full = g.reshape(full, &[b, c, c])?;
    let eye = g.constant(eye);
    g.add(full, eye)
}

/// Plain-value similarity of a single `[C, L]` window.
pub fn similarity_matrix(x: &Tensor, params: &FreqSimilarityParams) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::shape("similarity_matrix", format!("expected [C, L], got {:?}", x.shape())));
    }
    let c = x.shape()[0];
    let x3 = x.clone().reshape(&[1, c, x.shape()[1]])?;
    let mut g = Graph::new();
    let a = g.constant(params.alpha_raw.clone());
    let z = similarity_graph(&mut g, &x3, a, None)?;
    g.value(z).clone().reshape(&[c, c])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphMode {
    /// Gumbel sample, hard value forward, soft gradient backward.
    Train,
    /// Gumbel sample, soft value both ways.
    Soft,
    /// Deterministic `Z > 0.5`.
    Eval,
}

/// Sampled adjacency. `mask` is the graph node the attention layers consume.
#[derive(Clone, Debug)]
pub struct AdjacencyMatrix {
    pub soft: Tensor,
    pub hard: Tensor,
    pub mask: Var,
}

/// Two-class Gumbel-Softmax over logits `[log(Z/(1−Z)), log((1−Z)/Z)]`.
///
/// `z` is `[C, C]` or `[B, C, C]`. The first softmax component of two
/// logits equals `sigmoid` of their difference, which is what is computed.
/// `logit_bias`, when given, is a `[2]` node added to the two logits.
pub fn gumbel_adjacency(
    g: &mut Graph,
    z: Var,
    tau: f64,
    rng: &mut RngStream,
    mode: GraphMode,
    logit_bias: Option<Var>,
) -> Result<AdjacencyMatrix> {
    if !(tau > 0.0) {
        return Err(Error::domain("gumbel_adjacency", format!("temperature {tau} must be > 0")));
    }
    let shape = g.shape(z).to_vec();
    let r = shape.len();
    if !(r == 2 || r == 3) || shape[r - 1] != shape[r - 2] {
        return Err(Error::shape("gumbel_adjacency", format!("{shape:?}")));
    }
    let c = shape[r - 1];
    let diag = Tensor::from_fn(&shape, |i| if i[r - 1] == i[r - 2] { 1.0 } else { 0.0 });
    let off = diag.map(|d| 1.0 - d);

    let zc = g.clamp(z, Z_CLAMP, 1.0 - Z_CLAMP)?;
    let lz = g.log(zc)?;
    let one_minus = g.neg(zc)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let lm = g.log(one_minus)?;
    let logit = g.sub(lz, lm)?;
    let mut gap = g.scale(logit, 2.0)?;
    if let Some(b) = logit_bias {
        let b0 = g.slice(b, 0, 0, 1)?;
        let b1 = g.slice(b, 0, 1, 2)?;
        let db = g.sub(b0, b1)?;
        gap = g.add(gap, db)?;
    }

    if mode == GraphMode::Eval {
        let zv = g.value(z).data();
        let gv = g.value(gap).data();
        let pick = |f: &dyn Fn(usize) -> f64| -> Tensor {
            let data = diag.data().iter().enumerate().map(|(k, &d)| if d == 1.0 { 1.0 } else { f(k) });
            Tensor::from_parts(shape.clone(), data.collect())
        };
        let hard = pick(&|k| if zv[k] > 0.5 { 1.0 } else { 0.0 });
        let soft = pick(&|k| 1.0 / (1.0 + (-gv[k] / tau).exp()));
        let mask = g.constant(hard.clone());
        return Ok(AdjacencyMatrix { soft, hard, mask });
    }

    let e1 = sample_gumbel(&shape, rng);
    let e2 = sample_gumbel(&shape, rng);
    let noise = g.constant(Tensor::new(
        shape.clone(),
        e1.data().iter().zip(e2.data()).map(|(a, b)| a - b).collect(),
    )?);
    let noisy = g.add(gap, noise)?;
    let noisy = g.scale(noisy, 1.0 / tau)?;
    let soft = g.sigmoid(noisy)?;
    let off_c = g.constant(off);
    let diag_c = g.constant(diag.clone());
    let soft = g.mul(soft, off_c)?;
    let soft = g.add(soft, diag_c)?;
    let soft_v = g.value(soft).clone();
    let hard = Tensor::new(
        shape.clone(),
        soft_v
            .data()
            .iter()
            .zip(diag.data())
            .map(|(&p, &d)| if d == 1.0 || p > 0.5 { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let mask = match mode {
        GraphMode::Train => g.straight_through(soft, hard.clone())?,
        _ => soft,
    };
    debug_assert!(c == 0 || hard.data().iter().all(|&v| v == 0.0 || v == 1.0));
    Ok(AdjacencyMatrix {
        soft: soft_v,
        hard,
        mask,
    })
}
