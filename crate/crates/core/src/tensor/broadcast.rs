//! Numpy-style broadcasting for binary elementwise ops and the matching
//! gradient reduction.

use super::{strides, Tensor};
use crate::error::{Error, Result};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat source index for every flat output index when `src` is broadcast
/// up to `out`.
fn source_indices(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let src_numel: usize = src.iter().product();
    if src == out {
        return (0..n).collect();
    }
    if src_numel == 1 {
        return vec![0; n];
    }
    // trailing-suffix fast path: src matches the last axes of out exactly
    let r = out.len();
    let pad = r - src.len();
    let leading_ones = src.iter().take_while(|&&d| d == 1).count();
    if src[leading_ones..] == out[pad + leading_ones..] {
        return (0..n).map(|i| i % src_numel).collect();
    }
    let src_strides = strides(src);
    let mut st = vec![0usize; r];
    for i in 0..src.len() {
        if src[i] != 1 {
            st[pad + i] = src_strides[i];
        }
    }
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    let mut res = Vec::with_capacity(n);
    for _ in 0..n {
        res.push(off);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= st[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    res
}

pub(crate) fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        Error::shape(op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
    })?;
    let ia = source_indices(a.shape(), &out);
    let ib = source_indices(b.shape(), &out);
    let (ad, bd) = (a.data(), b.data());
    let data = ia.iter().zip(&ib).map(|(&i, &j)| f(ad[i], bd[j])).collect();
    Ok(Tensor::from_parts(out, data))
}

/// Sums `grad` (shaped like the broadcast output) back down to `target`.
pub(crate) fn reduce_to(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let idx = source_indices(target, grad.shape());
    let mut data = vec![0.0; target.iter().product()];
    for (g, &i) in grad.data().iter().zip(&idx) {
        data[i] += g;
    }
    Tensor::from_parts(target.to_vec(), data)
}
