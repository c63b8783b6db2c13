//! Any-variate causal attention over variable-major token sequences.
//!
//! A sequence of `C` variables with `N` tokens each is flattened so token
//! `(i, m)` sits at row `i·N + m`. Token `(i, m)` may attend to `(j, n)` iff
//! `G_ij = 1` and `n ≤ m`, i.e. the mask is `G ⊗ T` with `T` lower
//! triangular. Rotary positions restart at 0 for every variable, and each
//! head adds a learned scalar `u` to same-variable scores and `v` to
//! cross-variable scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var, MASK_NEG};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub heads: usize,
    /// Scale by `√d` instead of `√d_head`.
    pub full_width_scale: bool,
    pub rope_base: f64,
}

impl AttnConfig {
    pub fn new(heads: usize) -> Self {
        Self {
            heads,
            full_width_scale: false,
            rope_base: 10_000.0,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("d = {d} is not divisible by {} heads", self.heads)));
        }
        if (d / self.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary embeddings",
                d / self.heads
            )));
        }
        Ok(())
    }

    pub fn scale(&self, d: usize) -> f64 {
        if self.full_width_scale {
            (d as f64).sqrt()
        } else {
            ((d / self.heads) as f64).sqrt()
        }
    }
}

/// Graph handles of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    /// `[d, d]` each.
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    /// `[2, h]`: row 0 holds `u` per head, row 1 holds `v`.
    pub e_id: Var,
}

/// `T[m, n] = 1` iff `n ≤ m`.
pub fn temporal_mask(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |i| if i[1] <= i[0] { 1.0 } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    /// `G ⊗ T`, entries in `{0, 1}`.
    pub raw: Tensor,
    /// 0 where visible, [`MASK_NEG`] where blocked.
    pub additive: Tensor,
}

/// `M̃[(i·N + m), (j·N + n)] = G[i, j] · T[m, n]`.
pub fn kronecker_mask(g: &Tensor, t: &Tensor) -> Result<AttentionMask> {
    let (gs, ts) = (g.shape(), t.shape());
    if gs.len() != 2 || gs[0] != gs[1] || ts.len() != 2 || ts[0] != ts[1] {
        return Err(Error::shape("kronecker_mask", format!("{gs:?} ⊗ {ts:?}")));
    }
    let c = gs[0];
    if (0..c).any(|i| g.get(&[i, i]) == 0.0) {
        return Err(Error::Invalid(
            "adjacency has a zero diagonal entry; its first token row would be fully masked".into(),
        ));
    }
    let mut graph = Graph::new();
    let gv = graph.constant(g.clone());
    let m = graph.kron_mask(gv, t)?;
    let raw = graph.value(m).clone();
    let additive = raw.map(|v| if v > 0.0 { 0.0 } else { MASK_NEG });
    Ok(AttentionMask { raw, additive })
}

/// `[2, T²]` indicator rows: same variable, different variable.
pub fn identifier_pattern(c: usize, n: usize) -> Tensor {
    let t = c * n;
    Tensor::from_fn(&[2, t * t], |i| {
        let same = (i[1] / t) / n == (i[1] % t) / n;
        if same == (i[0] == 0) {
            1.0
        } else {
            0.0
        }
    })
}

/// Splits `[I, T, d]` into rotated heads `[I, h, T, d_h]`.
fn heads(g: &mut Graph, x: Var, w: Var, h: usize, rope: Option<(&[usize], f64)>) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (inst, t, d) = (s[0], s[1], s[2]);
    let y = g.matmul(x, w)?;
    let y = g.reshape(y, &[inst, t, h, d / h])?;
    let y = g.permute(y, &[0, 2, 1, 3])?;
    match rope {
        Some((pos, base)) => g.rotary(y, pos, base),
        None => Ok(y),
    }
}

fn check_input(g: &Graph, x: Var, c: usize, n: usize) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 3 || s[1] != c * n {
        return Err(Error::shape(
            "attention",
            format!("tokens {s:?} for C = {c}, N = {n}"),
        ));
    }
    Ok(())
}

/// Unmasked, unscaled scores `[I, h, T, T]`:
/// `⟨R_m W_Q h_{i,m}, R_n W_K h_{j,n}⟩ + u·1(i = j) + v·1(i ≠ j)` per head.
pub fn attention_scores(
    g: &mut Graph,
    x: Var,
    vars: &AttnVars,
    c: usize,
    n: usize,
    cfg: &AttnConfig,
) -> Result<Var> {
    check_input(g, x, c, n)?;
    let t = c * n;
    let h = cfg.heads;
    let pos: Vec<usize> = (0..t).map(|k| k % n).collect();
    let q = heads(g, x, vars.w_q, h, Some((&pos, cfg.rope_base)))?;
    let k = heads(g, x, vars.w_k, h, Some((&pos, cfg.rope_base)))?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;

    let pattern = g.constant(identifier_pattern(c, n));
    let e = g.transpose(vars.e_id)?;
    let bias = g.matmul(e, pattern)?;
    let bias = g.reshape(bias, &[1, h, t, t])?;
    g.add(scores, bias)
}

pub struct AttentionOutput {
    /// `[I, T, d]`.
    pub out: Var,
    /// Attention weights `[I, h, T, T]`.
    pub probs: Var,
}

/// `softmax((A + M_add)/scale) · V`, heads concatenated, then `W_O`.
///
/// `mask` is `[T, T]` or `[I, T, T]` with entries in `[0, 1]`.
pub fn attention_forward(
    g: &mut Graph,
    x: Var,
    vars: &AttnVars,
    mask: Var,
    c: usize,
    n: usize,
    cfg: &AttnConfig,
) -> Result<AttentionOutput> {
    let s = g.shape(x).to_vec();
    let (inst, t, d) = (s[0], s[1], s[2]);
    let scores = attention_scores(g, x, vars, c, n, cfg)?;
    let probs = g.masked_softmax(scores, mask, cfg.scale(d))?;
    let v = heads(g, x, vars.w_v, cfg.heads, None)?;
    let ctx = g.matmul(probs, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[inst, t, d])?;
    let out = g.matmul(ctx, vars.w_o)?;
    Ok(AttentionOutput { out, probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;

    #[test]
    fn temporal_masks() {
        assert_eq!(temporal_mask(1).data(), &[1.0]);
        assert_eq!(
            temporal_mask(3).data(),
            &[1., 0., 0., 1., 1., 0., 1., 1., 1.]
        );
        let t = temporal_mask(5);
        for m in 0..5 {
            let row: f64 = (0..5).map(|n| t.get(&[m, n])).sum();
            assert_eq!(row, (m + 1) as f64);
        }
    }

    #[test]
    fn kronecker_identity_and_full() {
        let t = temporal_mask(2);
        let id = kronecker_mask(&Tensor::eye(2), &t).unwrap();
        #[rustfmt::skip]
        let expect_id = [
            1., 0., 0., 0.,
            1., 1., 0., 0.,
            0., 0., 1., 0.,
            0., 0., 1., 1.,
        ];
        assert_eq!(id.raw.data(), &expect_id);
        let full = kronecker_mask(&Tensor::ones(&[2, 2]), &t).unwrap();
        #[rustfmt::skip]
        let expect_full = [
            1., 0., 1., 0.,
            1., 1., 1., 1.,
            1., 0., 1., 0.,
            1., 1., 1., 1.,
        ];
        assert_eq!(full.raw.data(), &expect_full);
        assert_eq!(full.additive.get(&[0, 1]), MASK_NEG);
        assert_eq!(kronecker_mask(&Tensor::ones(&[1, 1]), &temporal_mask(3)).unwrap().raw, temporal_mask(3));
        assert!(kronecker_mask(&Tensor::zeros(&[2, 2]), &t).is_err());
    }

    fn vars(g: &mut Graph, d: usize, h: usize, rng: &mut RngStream, eye_qk: bool) -> AttnVars {
        let mut w = |g: &mut Graph, eye: bool| {
            let t = if eye { Tensor::eye(d) } else { rng.normal_tensor(&[d, d], 0.5) };
            g.constant(t)
        };
        AttnVars {
            w_q: w(g, eye_qk),
            w_k: w(g, eye_qk),
            w_v: w(g, false),
            w_o: w(g, false),
            e_id: g.constant(Tensor::zeros(&[2, h])),
        }
    }

    #[test]
    fn equal_positions_cancel_rotation() {
        let mut rng = RngStream::new(1);
        let mut g = Graph::new();
        let mut v = vars(&mut g, 4, 1, &mut rng, true);
        v.e_id = g.constant(Tensor::from_rows(&[vec![0.7], vec![-0.2]]).unwrap());
        let tok = rng.normal_tensor(&[1, 3, 4], 1.0);
        let x = g.constant(tok.clone());
        let s = attention_scores(&mut g, x, &v, 1, 3, &AttnConfig::new(1)).unwrap();
        for m in 0..3 {
            let tt: f64 = (0..4).map(|k| tok.get(&[0, m, k]).powi(2)).sum();
            assert!((g.value(s).get(&[0, 0, m, m]) - (tt + 0.7)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = RngStream::new(2);
        let mut g = Graph::new();
        let v = vars(&mut g, 4, 2, &mut rng, false);
        let tok = rng.normal_tensor(&[1, 1, 4], 1.0);
        let x = g.constant(tok.clone());
        let m = g.constant(temporal_mask(1));
        let o = attention_forward(&mut g, x, &v, m, 1, 1, &AttnConfig::new(2)).unwrap();
        assert!(g.value(o.probs).data().iter().all(|&p| p == 1.0));
        let h = tok.reshape(&[1, 4]).unwrap();
        let expect = h
            .matmul(g.value(v.w_v))
            .unwrap()
            .matmul(g.value(v.w_o))
            .unwrap();
        assert!(g.value(o.out).clone().reshape(&[1, 4]).unwrap().rel_err(&expect) < 1e-12);
    }

    #[test]
    fn config_checks() {
        assert!(AttnConfig::new(3).validate(8).is_err());
        assert!(AttnConfig::new(8).validate(8).is_err());
        assert!(AttnConfig::new(2).validate(8).is_ok());
        let mut c = AttnConfig::new(2);
        assert_eq!(c.scale(8), 2.0);
        c.full_width_scale = true;
        assert_eq!(c.scale(16), 4.0);
    }
}
