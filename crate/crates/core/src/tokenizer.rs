//! Instance normalization, patching and the linear patch embedding / output
//! head.
//!
//! Series enter as `[B, C, L]` look-back windows with optional `[B, C, F]`
//! horizons. Every `(b, c)` series is normalized by its own look-back mean
//! and standard deviation; the horizon reuses those statistics. Patches are
//! length-`P` slices taken with stride `S`, and the token at position `τ`
//! is trained to predict the `P` values that follow its patch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Floor applied to per-window standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    /// Look-back length `L`.
    pub lookback: usize,
    /// Patch length `P`; the horizon `F` always equals it.
    pub patch: usize,
    /// Stride `S`; defaults to `P`.
    #[serde(default)]
    pub stride: Option<usize>,
}

impl PatchConfig {
    pub fn new(lookback: usize, patch: usize) -> Self {
        Self {
            lookback,
            patch,
            stride: None,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = Some(stride);
        self
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.patch)
    }

    pub fn horizon(&self) -> usize {
        self.patch
    }

    /// `N = (L − P)/S + 1`.
    pub fn num_patches(&self) -> usize {
        (self.lookback - self.patch) / self.stride() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let (l, p, s) = (self.lookback, self.patch, self.stride());
        if p == 0 || s == 0 {
            return Err(Error::Config("patch length and stride must be positive".into()));
        }
        if l < p {
            return Err(Error::Config(format!(
                "look-back {l} is shorter than the patch length {p}"
            )));
        }
        if (l - p) % s != 0 {
            return Err(Error::Config(format!(
                "(L - P) = {} is not divisible by stride {s}; trim {} samples from the head \
                 of the window",
                l - p,
                (l - p) % s
            )));
        }
        Ok(())
    }
}

/// A batch of windows plus the statistics used to normalize them.
#[derive(Clone, Debug)]
pub struct SeriesBatch {
    /// `[B, C, L]`.
    pub values: Tensor,
    /// `[B, C, F]` when targets are known.
    pub targets: Option<Tensor>,
    /// `[B, C]`.
    pub mean: Tensor,
    /// `[B, C]`, every entry ≥ [`STD_FLOOR`].
    pub std: Tensor,
    /// `(b, c)` pairs whose standard deviation was floored.
    pub floored: Vec<(usize, usize)>,
    pub normalized: bool,
}

impl SeriesBatch {
    /// Raw batch with identity statistics.
    pub fn new(values: Tensor, targets: Option<Tensor>) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::shape("series_batch", format!("values {:?}", values.shape())));
        }
        let (b, c) = (values.shape()[0], values.shape()[1]);
        if let Some(t) = &targets {
            if t.rank() != 3 || t.shape()[..2] != [b, c] {
                return Err(Error::shape(
                    "series_batch",
                    format!("targets {:?} for values {:?}", t.shape(), values.shape()),
                ));
            }
        }
        if !values.all_finite() || targets.as_ref().is_some_and(|t| !t.all_finite()) {
            return Err(Error::NonFinite { op: "series_batch" });
        }
        Ok(Self {
            values,
            targets,
            mean: Tensor::zeros(&[b, c]),
            std: Tensor::ones(&[b, c]),
            floored: Vec::new(),
            normalized: false,
        })
    }

    /// Splits `[B, C, L + F]` windows into look-back and horizon.
    pub fn from_windows(windows: &Tensor, lookback: usize) -> Result<Self> {
        let s = windows.shape();
        if s.len() != 3 || s[2] < lookback {
            return Err(Error::shape("from_windows", format!("{s:?} with L = {lookback}")));
        }
        let (b, c, w) = (s[0], s[1], s[2]);
        let f = w - lookback;
        let mut vals = Vec::with_capacity(b * c * lookback);
        let mut tgts = Vec::with_capacity(b * c * f);
        for row in windows.data().chunks(w) {
            vals.extend_from_slice(&row[..lookback]);
            tgts.extend_from_slice(&row[lookback..]);
        }
        let targets = (f > 0).then(|| Tensor::from_parts(vec![b, c, f], tgts));
        Self::new(Tensor::from_parts(vec![b, c, lookback], vals), targets)
    }

    pub fn batch_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn lookback(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Per-window instance normalization; targets share the look-back statistics.
pub fn normalize(batch: &SeriesBatch) -> Result<SeriesBatch> {
    if batch.normalized {
        return Err(Error::Invalid("batch is already normalized".into()));
    }
    let l = batch.lookback();
    let (b, c) = (batch.batch_size(), batch.channels());
    let mut mean = Vec::with_capacity(b * c);
    let mut std = Vec::with_capacity(b * c);
    let mut floored = Vec::new();
    let mut values = Vec::with_capacity(b * c * l);
    for (k, row) in batch.values.data().chunks(l).enumerate() {
        let m = row.iter().sum::<f64>() / l as f64;
        let var = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / l as f64;
        let mut s = var.sqrt();
        if s < STD_FLOOR {
            s = STD_FLOOR;
            floored.push((k / c, k % c));
            log::debug!("window ({}, {}) has zero variance; std floored", k / c, k % c);
        }
        values.extend(row.iter().map(|x| (x - m) / s));
        mean.push(m);
        std.push(s);
    }
    let targets = batch.targets.as_ref().map(|t| {
        let f = t.shape()[2];
        let mut out = Vec::with_capacity(t.numel());
        for (k, row) in t.data().chunks(f).enumerate() {
            out.extend(row.iter().map(|x| (x - mean[k]) / std[k]));
        }
        Tensor::from_parts(t.shape().to_vec(), out)
    });
    Ok(SeriesBatch {
        values: Tensor::from_parts(vec![b, c, l], values),
        targets,
        mean: Tensor::from_parts(vec![b, c], mean),
        std: Tensor::from_parts(vec![b, c], std),
        floored,
        normalized: true,
    })
}

/// Maps normalized values `x: [B, C, ...]` back to raw units with the
/// batch's statistics.
pub fn denormalize(batch: &SeriesBatch, x: &Tensor) -> Result<Tensor> {
    let (b, c) = (batch.batch_size(), batch.channels());
    if x.rank() < 2 || x.shape()[..2] != [b, c] {
        return Err(Error::shape("denormalize", format!("{:?} for B={b}, C={c}", x.shape())));
    }
    let inner = x.numel() / (b * c).max(1);
    let mut out = x.clone();
    for (k, row) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
        let (m, s) = (batch.mean.data()[k], batch.std.data()[k]);
        row.iter_mut().for_each(|v| *v = *v * s + m);
    }
    Ok(out)
}

/// `[B, C, L]` → `[B, C, N, P]`; patch `j` covers `x[j·S .. j·S + P]`.
pub fn patchify(values: &Tensor, cfg: &PatchConfig) -> Result<Tensor> {
    cfg.validate()?;
    let s = values.shape();
    if s.len() != 3 || s[2] != cfg.lookback {
        return Err(Error::shape(
            "patchify",
            format!("{s:?} does not end in L = {}", cfg.lookback),
        ));
    }
    let (n, p, st) = (cfg.num_patches(), cfg.patch, cfg.stride());
    let mut out = Vec::with_capacity(s[0] * s[1] * n * p);
    for row in values.data().chunks(cfg.lookback) {
        for j in 0..n {
            out.extend_from_slice(&row[j * st..j * st + p]);
        }
    }
    Ok(Tensor::from_parts(vec![s[0], s[1], n, p], out))
}

/// Next-patch targets `[B, C, N, P]`: token `τ` targets
/// `z[τ·S + P .. τ·S + 2P]` of the concatenated look-back and horizon `z`.
pub fn next_patch_targets(values: &Tensor, targets: &Tensor, cfg: &PatchConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (vs, ts) = (values.shape(), targets.shape());
    if vs.len() != 3 || ts.len() != 3 || vs[..2] != ts[..2] || ts[2] != cfg.horizon() {
        return Err(Error::shape(
            "next_patch_targets",
            format!("values {vs:?}, targets {ts:?}, F = {}", cfg.horizon()),
        ));
    }
    let (l, f) = (cfg.lookback, cfg.horizon());
    let (n, p, st) = (cfg.num_patches(), cfg.patch, cfg.stride());
    let mut full = Vec::with_capacity(l + f);
    let mut out = Vec::with_capacity(vs[0] * vs[1] * n * p);
    for (x, y) in values.data().chunks(l).zip(targets.data().chunks(f)) {
        full.clear();
        full.extend_from_slice(x);
        full.extend_from_slice(y);
        for tau in 0..n {
            let start = tau * st + p;
            out.extend_from_slice(&full[start..start + p]);
        }
    }
    Ok(Tensor::from_parts(vec![vs[0], vs[1], n, p], out))
}

/// `h = p · W_p (+ b)` over the last axis.
pub fn embed_patches(g: &mut Graph, patches: Var, w_p: Var, bias: Option<Var>) -> Result<Var> {
    linear(g, "embed_patches", patches, w_p, bias)
}

/// `ŷ = h · W_d (+ b)`; the output at token `τ` forecasts patch `τ + 1`.
pub fn project_output(g: &mut Graph, tokens: Var, w_d: Var, bias: Option<Var>) -> Result<Var> {
    linear(g, "project_output", tokens, w_d, bias)
}

pub(crate) fn linear(
    g: &mut Graph,
    op: &'static str,
    x: Var,
    w: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let (xs, ws) = (g.shape(x), g.shape(w));
    if ws.len() != 2 || xs.last() != Some(&ws[0]) {
        return Err(Error::shape(op, format!("input {xs:?} with weight {ws:?}")));
    }
    let y = g.matmul(x, w)?;
    match bias {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;

    #[test]
    fn patch_counts() {
        assert_eq!(PatchConfig::new(672, 96).num_patches(), 7);
        assert_eq!(PatchConfig::new(96, 96).num_patches(), 1);
        assert_eq!(PatchConfig::new(8, 4).with_stride(2).num_patches(), 3);
        let err = PatchConfig::new(9, 4).with_stride(2).validate().unwrap_err();
        assert!(err.to_string().contains("trim 1"));
    }

    #[test]
    fn overlapping_patches() {
        let x = Tensor::new(vec![1, 1, 8], (1..=8).map(f64::from).collect()).unwrap();
        let p = patchify(&x, &PatchConfig::new(8, 4).with_stride(2)).unwrap();
        assert_eq!(p.shape(), &[1, 1, 3, 4]);
        assert_eq!(
            p.data(),
            &[1., 2., 3., 4., 3., 4., 5., 6., 5., 6., 7., 8.]
        );
    }

    #[test]
    fn single_patch_is_the_series() {
        let x = Tensor::new(vec![1, 1, 4], vec![1., 2., 3., 4.]).unwrap();
        let p = patchify(&x, &PatchConfig::new(4, 4)).unwrap();
        assert_eq!(p.data(), x.data());
    }

    #[test]
    fn normalization_stats() {
        let b = SeriesBatch::new(Tensor::new(vec![1, 2, 4], vec![1., 2., 3., 4., 5., 5., 5., 5.]).unwrap(), None)
            .unwrap();
        let n = normalize(&b).unwrap();
        assert_eq!(n.mean.data(), &[2.5, 5.0]);
        let m0: f64 = n.values.data()[..4].iter().sum::<f64>() / 4.0;
        assert!(m0.abs() < 1e-12);
        assert_eq!(&n.values.data()[4..], &[0.0; 4]);
        assert_eq!(n.std.data()[1], STD_FLOOR);
        assert_eq!(n.floored, vec![(0, 1)]);
        assert!(normalize(&n).is_err());
    }

    #[test]
    fn normalize_round_trip() {
        let mut rng = RngStream::new(3);
        let v = rng.normal_tensor(&[3, 2, 16], 5.0).map(|x| x + 10.0);
        let t = rng.normal_tensor(&[3, 2, 4], 5.0);
        let n = normalize(&SeriesBatch::new(v.clone(), Some(t.clone())).unwrap()).unwrap();
        assert!(denormalize(&n, &n.values).unwrap().rel_err(&v) < 1e-10);
        assert!(denormalize(&n, n.targets.as_ref().unwrap()).unwrap().rel_err(&t) < 1e-10);
    }

    #[test]
    fn targets_shift_by_one_patch() {
        let cfg = PatchConfig::new(8, 4).with_stride(2);
        let x = Tensor::new(vec![1, 1, 8], (0..8).map(f64::from).collect()).unwrap();
        let y = Tensor::new(vec![1, 1, 4], (8..12).map(f64::from).collect()).unwrap();
        let t = next_patch_targets(&x, &y, &cfg).unwrap();
        assert_eq!(t.data(), &[4., 5., 6., 7., 6., 7., 8., 9., 8., 9., 10., 11.]);
    }

    #[test]
    fn embed_zero_patch_gives_bias() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(&[1, 1, 2, 3]));
        let w = g.constant(Tensor::ones(&[3, 4]));
        let b = g.constant(Tensor::from_vec(vec![1., 2., 3., 4.]));
        let h = embed_patches(&mut g, p, w, Some(b)).unwrap();
        assert_eq!(g.shape(h), &[1, 1, 2, 4]);
        assert_eq!(&g.value(h).data()[4..], &[1., 2., 3., 4.]);
        let h0 = embed_patches(&mut g, p, w, None).unwrap();
        assert!(g.value(h0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_head_shape() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[2, 3, 4, 8]));
        let w = g.constant(Tensor::ones(&[8, 5]));
        let y = project_output(&mut g, h, w, None).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 4, 5]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
