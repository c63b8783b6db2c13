use serde::Serialize;

use super::{predict, ForwardOptions, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// `1 − SSE/SST` with `SST` taken around each channel's own mean.
    pub r2: f64,
    pub count: usize,
}

/// Metrics of `pred` against `truth`, both `[W, C, F]` in raw units.
///
/// When `SST = 0`, `R²` is 1 for a perfect fit and 0 otherwise.
pub fn metrics_from(pred: &Tensor, truth: &Tensor) -> Result<Metrics> {
    if pred.shape() != truth.shape() || pred.rank() != 3 {
        return Err(Error::shape(
            "metrics",
            format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        ));
    }
    let (w, c, f) = (truth.shape()[0], truth.shape()[1], truth.shape()[2]);
    let n = pred.numel();
    if n == 0 {
        return Err(Error::Data("no values to score".into()));
    }
    let mut mean = vec![0.0; c];
    for (k, &y) in truth.data().iter().enumerate() {
        mean[(k / f) % c] += y;
    }
    mean.iter_mut().for_each(|m| *m /= (w * f) as f64);
    let (mut sse, mut sae, mut sst) = (0.0, 0.0, 0.0);
    for (k, (&p, &y)) in pred.data().iter().zip(truth.data()).enumerate() {
        sse += (p - y) * (p - y);
        sae += (p - y).abs();
        sst += (y - mean[(k / f) % c]).powi(2);
    }
    let r2 = if sst > 0.0 {
        1.0 - sse / sst
    } else if sse == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(Metrics {
        mse: sse / n as f64,
        mae: sae / n as f64,
        r2,
        count: n,
    })
}

/// Horizon-`F` metrics over `[C, L + F]` windows, in raw units.
pub fn evaluate(model: &Model, windows: &[Tensor], opts: &ForwardOptions, batch_size: usize) -> Result<Metrics> {
    let (l, f) = (model.cfg.lookback, model.cfg.horizon());
    let mut preds = Vec::with_capacity(windows.len());
    let mut truths = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let w = Tensor::stack(chunk)?;
        let (b, c) = (w.shape()[0], w.shape()[1]);
        if w.shape()[2] != l + f {
            return Err(Error::shape("evaluate", format!("window {:?}", w.shape())));
        }
        let mut look = Vec::with_capacity(b * c * l);
        let mut hor = Vec::with_capacity(b * c * f);
        for row in w.data().chunks(l + f) {
            look.extend_from_slice(&row[..l]);
            hor.extend_from_slice(&row[l..]);
        }
        let mut o = opts.clone();
        let p = predict(model, &Tensor::new(vec![b, c, l], look)?, &mut o)?;
        for i in 0..b {
            preds.push(p.index0(i));
        }
        let h = Tensor::new(vec![b, c, f], hor)?;
        for i in 0..b {
            truths.push(h.index0(i));
        }
    }
    metrics_from(&Tensor::stack(&preds)?, &Tensor::stack(&truths)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;

    #[test]
    fn perfect_and_mean_predictions() {
        let mut rng = RngStream::new(4);
        let y = rng.normal_tensor(&[5, 3, 4], 2.0);
        let m = metrics_from(&y, &y).unwrap();
        assert_eq!((m.mse, m.mae, m.r2), (0.0, 0.0, 1.0));

        let mut means = [0.0; 3];
        for (k, v) in y.data().iter().enumerate() {
            means[(k / 4) % 3] += v / 20.0;
        }
        let p = Tensor::from_fn(&[5, 3, 4], |i| means[i[1]]);
        assert!(metrics_from(&p, &y).unwrap().r2.abs() < 1e-6);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = RngStream::new(9);
        let y = rng.normal_tensor(&[4, 2, 3], 1.0);
        let p = rng.normal_tensor(&[4, 2, 3], 1.0);
        let m = metrics_from(&p, &y).unwrap();
        let (mut se, mut ae, mut st) = (0.0, 0.0, 0.0);
        for c in 0..2 {
            let mut mu = 0.0;
            for w in 0..4 {
                for f in 0..3 {
                    mu += y.get(&[w, c, f]) / 12.0;
                }
            }
            for w in 0..4 {
                for f in 0..3 {
                    let (a, b) = (p.get(&[w, c, f]), y.get(&[w, c, f]));
                    se += (a - b) * (a - b);
                    ae += (a - b).abs();
                    st += (b - mu) * (b - mu);
                }
            }
        }
        assert!((m.mse - se / 24.0).abs() <= 1e-10 * m.mse);
        assert!((m.mae - ae / 24.0).abs() <= 1e-10 * m.mae);
        assert!((m.r2 - (1.0 - se / st)).abs() <= 1e-10 * m.r2.abs());
    }
}
