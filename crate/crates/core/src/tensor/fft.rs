use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

/// Amplitudes of the real DFT of `x` at bins `1..=L/2`; the DC bin is
/// dropped so the result has exactly `L/2` entries.
pub fn rfft_magnitudes(x: &[f64]) -> Result<Vec<f64>> {
    let l = x.len();
    if l % 2 != 0 {
        return Err(Error::Invalid(format!(
            "rfft_magnitudes needs an even length, got {l}; drop the oldest sample"
        )));
    }
    if l < 4 {
        return Err(Error::Invalid(format!("rfft_magnitudes needs length >= 4, got {l}")));
    }
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(l).process(&mut buf);
    Ok(buf[1..=l / 2].iter().map(|c| c.norm()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn naive(x: &[f64]) -> Vec<f64> {
        let l = x.len();
        (1..=l / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (k * t) as f64 / l as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn constant_series_has_no_energy_outside_dc() {
        let m = rfft_magnitudes(&[3.5; 16]).unwrap();
        assert_eq!(m.len(), 8);
        assert!(m.iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn unit_cosine_lands_in_one_bin() {
        let l = 32;
        let k = 5;
        let x: Vec<f64> = (0..l)
            .map(|t| (2.0 * PI * (k * t) as f64 / l as f64).cos())
            .collect();
        let m = rfft_magnitudes(&x).unwrap();
        let oracle = naive(&x);
        for (i, (&a, &b)) in m.iter().zip(&oracle).enumerate() {
            if i + 1 == k {
                assert!((a - l as f64 / 2.0).abs() < 1e-10);
            } else {
                assert!(a < 1e-10);
            }
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn matches_naive_dft_across_lengths() {
        let mut s = 12345u64;
        for l in [4usize, 8, 16, 32, 64] {
            let x: Vec<f64> = (0..l)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
                })
                .collect();
            let fast = rfft_magnitudes(&x).unwrap();
            let slow = naive(&x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-3), "L={l}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn odd_or_short_lengths_are_rejected() {
        assert!(rfft_magnitudes(&[1.0; 7]).is_err());
        assert!(rfft_magnitudes(&[1.0; 2]).is_err());
    }
}
