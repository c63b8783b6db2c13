use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    /// 70/10/20 chronological.
    Standard,
    /// First 20% for training (its last tenth held out for validation),
    /// last 20% for testing.
    Fewshot,
}

/// Chronological, disjoint time ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Boundaries are `⌊fraction·T⌋`. Train and test must each hold at least one
/// `L + F` window; a validation range too short for one is folded back into
/// train and returned empty.
pub fn split(t: usize, scheme: SplitScheme, window: usize) -> Result<Split> {
    let at = |num: usize, den: usize| t * num / den;
    let (train, val, test) = match scheme {
        SplitScheme::Standard => (0..at(7, 10), at(7, 10)..at(8, 10), at(8, 10)..t),
        SplitScheme::Fewshot => {
            let end = at(2, 10);
            let cut = end - end / 10;
            (0..cut, cut..end, at(8, 10)..t)
        }
    };
    let (train, val) = if val.len() > window {
        (train, val)
    } else {
        (train.start..val.end, val.end..val.end)
    };
    for (name, r) in [("train", &train), ("test", &test)] {
        if r.len() < window + 1 {
            return Err(Error::Data(format!(
                "{name} segment {r:?} is shorter than one window of {window} steps plus one"
            )));
        }
    }
    Ok(Split { train, val, test })
}

/// Number of start offsets in a segment of `len` steps: `len − L − F`,
/// clamped at 0.
pub fn window_count(len: usize, window: usize) -> usize {
    len.saturating_sub(window)
}

/// `[C, window]` slices of `values: [C, T]` starting at
/// `range.start + s` for `s ∈ 0..window_count(range.len())`; no window
/// reaches past `range.end`.
pub fn windows(values: &Tensor, range: Range<usize>, window: usize) -> Result<Vec<Tensor>> {
    let (c, t) = (values.shape()[0], values.shape()[1]);
    if range.end > t {
        return Err(Error::Data(format!("range {range:?} outside 0..{t}")));
    }
    let n = window_count(range.len(), window);
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let start = range.start + s;
        let mut data = Vec::with_capacity(c * window);
        for row in values.data().chunks(t) {
            data.extend_from_slice(&row[start..start + window]);
        }
        out.push(Tensor::new(vec![c, window], data)?);
    }
    Ok(out)
}

/// Univariate `[1, L + F]` windows from every channel of every series,
/// `Σ_i C_i·(T_i − L − F)` in total, shuffled by `seed`. Series shorter
/// than a window are skipped with a warning.
pub fn extract_pretrain_samples(series: &[Tensor], window: usize, seed: u64) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for (i, s) in series.iter().enumerate() {
        if s.rank() != 2 {
            return Err(Error::Data(format!("series {i} has shape {:?}, expected [C, T]", s.shape())));
        }
        let t = s.shape()[1];
        if t < window {
            log::warn!("series {i}: T = {t} is shorter than one window ({window}); skipped");
            continue;
        }
        for row in s.data().chunks(t) {
            for start in 0..window_count(t, window) {
                out.push(Tensor::new(vec![1, window], row[start..start + window].to_vec())?);
            }
        }
    }
    RngStream::new(seed).shuffle(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fewshot_hundred() {
        let s = split(100, SplitScheme::Fewshot, 5).unwrap();
        assert_eq!((s.train, s.val, s.test), (0..20, 20..20, 80..100));
        let s = split(1000, SplitScheme::Fewshot, 5).unwrap();
        assert_eq!((s.train, s.val, s.test), (0..180, 180..200, 800..1000));
    }

    #[test]
    fn standard_hundred() {
        let s = split(100, SplitScheme::Standard, 5).unwrap();
        assert_eq!((s.train, s.val, s.test), (0..70, 70..80, 80..100));
    }

    #[test]
    fn too_short_segments() {
        assert!(split(100, SplitScheme::Fewshot, 20).is_err());
        assert!(split(100, SplitScheme::Standard, 19).is_ok());
        assert!(split(100, SplitScheme::Standard, 20).is_err());
    }

    #[test]
    fn example_counts() {
        let s = Tensor::zeros(&[3, 20]);
        assert_eq!(extract_pretrain_samples(&[s.clone()], 10, 0).unwrap().len(), 30);
        assert!(extract_pretrain_samples(&[Tensor::zeros(&[3, 10])], 10, 0).unwrap().is_empty());
        assert!(extract_pretrain_samples(&[Tensor::zeros(&[3, 9])], 10, 0).unwrap().is_empty());
        let two = extract_pretrain_samples(&[s, Tensor::zeros(&[2, 13])], 10, 0).unwrap();
        assert_eq!(two.len(), 36);
    }
}
