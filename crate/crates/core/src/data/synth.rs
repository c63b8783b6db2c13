use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub period: f64,
    pub amplitude: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub sinusoids: Vec<Sinusoid>,
    /// AR(1) coefficient of the additive noise process.
    pub ar: f64,
    /// Innovation std of the AR(1) process; 0 disables it.
    pub noise: f64,
}

/// `target[t] = source[t − delay] + sigma·ε`. Replaces the target's own
/// components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagCopy {
    pub source: usize,
    pub target: usize,
    pub delay: usize,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub length: usize,
    pub seed: u64,
    pub channels: Vec<ChannelSpec>,
    pub lags: Vec<LagCopy>,
}

impl SynthSpec {
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Every channel in dependency order; errors on cycles, double targets,
    /// out-of-range channels and `delay ≥ T`.
    fn order(&self) -> Result<Vec<usize>> {
        let c = self.channels.len();
        let mut parent = vec![None; c];
        for lag in &self.lags {
            if lag.source >= c || lag.target >= c {
                return Err(Error::Config(format!("lag {} -> {} outside {c} channels", lag.source, lag.target)));
            }
            if lag.delay >= self.length {
                return Err(Error::Config(format!("lag delay {} must be below T = {}", lag.delay, self.length)));
            }
            if !(lag.sigma >= 0.0) {
                return Err(Error::Config("lag sigma must be >= 0".into()));
            }
            if parent[lag.target].replace(lag.source).is_some() {
                return Err(Error::Config(format!("channel {} is copied twice", lag.target)));
            }
        }
        let mut order = Vec::with_capacity(c);
        let mut state = vec![0u8; c];
        fn visit(i: usize, parent: &[Option<usize>], state: &mut [u8], order: &mut Vec<usize>) -> Result<()> {
            match state[i] {
                2 => return Ok(()),
                1 => return Err(Error::Config(format!("lag map has a cycle through channel {i}"))),
                _ => {}
            }
            state[i] = 1;
            if let Some(p) = parent[i] {
                visit(p, parent, state, order)?;
            }
            state[i] = 2;
            order.push(i);
            Ok(())
        }
        for i in 0..c {
            visit(i, &parent, &mut state, &mut order)?;
        }
        Ok(order)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.length == 0 {
            return Err(Error::Config("synthetic series needs at least one channel and one step".into()));
        }
        for (i, ch) in self.channels.iter().enumerate() {
            if !(ch.ar.abs() < 1.0) || !(ch.noise >= 0.0) || ch.sinusoids.iter().any(|s| !(s.period > 0.0)) {
                return Err(Error::Config(format!(
                    "channel {i}: need |ar| < 1, noise >= 0 and positive periods"
                )));
            }
        }
        self.order().map(|_| ())
    }
}

/// Deterministic per seed. Every channel is generated over `T + max delay`
/// steps and the last `T` are kept, so lag copies are exact shifts over the
/// whole output.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let order = spec.order()?;
    let c = spec.channels.len();
    let pad = spec.lags.iter().map(|l| l.delay).max().unwrap_or(0);
    let total = spec.length + pad;
    let base = RngStream::new(spec.seed);
    let mut series: Vec<Vec<f64>> = vec![Vec::new(); c];
    for &i in &order {
        let mut rng = base.split(i as u64);
        series[i] = match spec.lags.iter().find(|l| l.target == i) {
            Some(lag) => {
                let src = &series[lag.source];
                (0..total)
                    .map(|t| {
                        let v = if t >= lag.delay { src[t - lag.delay] } else { src[0] };
                        let e = if lag.sigma > 0.0 { lag.sigma * rng.normal() } else { 0.0 };
                        v + e
                    })
                    .collect()
            }
            None => {
                let ch = &spec.channels[i];
                let mut e = 0.0;
                (0..total)
                    .map(|t| {
                        // time index relative to the kept window
                        let tt = t as f64 - pad as f64;
                        let s: f64 = ch
                            .sinusoids
                            .iter()
                            .map(|s| s.amplitude * (std::f64::consts::TAU * tt / s.period + s.phase).sin())
                            .sum();
                        if ch.noise > 0.0 {
                            e = ch.ar * e + ch.noise * rng.normal();
                        }
                        s + e
                    })
                    .collect()
            }
        };
    }
    let data: Vec<f64> = series.iter().flat_map(|s| s[pad..].iter().copied()).collect();
    Dataset::new((0..c).map(|i| format!("ch{i}")).collect(), Tensor::new(vec![c, spec.length], data)?)
}

/// Named generators used by the experiments and the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthPreset {
    /// Random two-tone sinusoids with light AR noise per channel.
    Sines,
    /// Channel `i` follows regime `i mod 4`: slow tone, fast tone,
    /// persistent AR noise, or a harmonic-rich square-like wave.
    Regimes,
    /// Channel 0 is a persistent AR process; channel `i > 0` copies channel
    /// `i − 1` with a delay of `delay` steps plus small noise.
    Lagged,
    /// The `Lagged` marginals with no cross-channel links.
    Independent,
}

impl SynthPreset {
    pub fn spec(self, channels: usize, length: usize, delay: usize, seed: u64) -> SynthSpec {
        let mut rng = RngStream::new(seed ^ 0x5eed);
        let mut tone = |lo: f64, hi: f64, amp: f64| Sinusoid {
            period: lo + (hi - lo) * rng.uniform(),
            amplitude: amp,
            phase: 0.0,
        };
        let mut chans = Vec::with_capacity(channels);
        let mut lags = Vec::new();
        for i in 0..channels {
            let ch = match self {
                SynthPreset::Sines => ChannelSpec {
                    sinusoids: vec![tone(8.0, 40.0, 1.0), tone(3.0, 8.0, 0.4)],
                    ar: 0.5,
                    noise: 0.05,
                },
                SynthPreset::Regimes => match i % 4 {
                    0 => ChannelSpec {
                        sinusoids: vec![tone(40.0, 60.0, 2.0)],
                        ar: 0.0,
                        noise: 0.05,
                    },
                    1 => ChannelSpec {
                        sinusoids: vec![tone(4.0, 6.0, 0.5)],
                        ar: 0.0,
                        noise: 0.05,
                    },
                    2 => ChannelSpec {
                        sinusoids: Vec::new(),
                        ar: 0.95,
                        noise: 0.3,
                    },
                    _ => {
                        let base = tone(12.0, 20.0, 1.0);
                        ChannelSpec {
                            sinusoids: (0..4)
                                .map(|k| {
                                    let m = (2 * k + 1) as f64;
                                    Sinusoid {
                                        period: base.period / m,
                                        amplitude: 1.0 / m,
                                        phase: 0.0,
                                    }
                                })
                                .collect(),
                            ar: 0.0,
                            noise: 0.05,
                        }
                    }
                },
                SynthPreset::Lagged | SynthPreset::Independent => ChannelSpec {
                    sinusoids: vec![tone(20.0, 30.0, 0.3)],
                    ar: 0.95,
                    noise: 0.3,
                },
            };
            chans.push(ch);
            if self == SynthPreset::Lagged && i > 0 {
                lags.push(LagCopy {
                    source: i - 1,
                    target: i,
                    delay,
                    sigma: 0.05,
                });
            }
        }
        SynthSpec {
            length,
            seed,
            channels: chans,
            lags,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(ch: ChannelSpec, t: usize) -> SynthSpec {
        SynthSpec {
            length: t,
            seed: 1,
            channels: vec![ch],
            lags: Vec::new(),
        }
    }

    #[test]
    fn pure_sinusoid_is_analytic() {
        let s = Sinusoid {
            period: 12.0,
            amplitude: 2.5,
            phase: 0.3,
        };
        let d = synth_generate(&one(
            ChannelSpec {
                sinusoids: vec![s],
                ..ChannelSpec::default()
            },
            50,
        ))
        .unwrap();
        for t in 0..50 {
            let want = 2.5 * (std::f64::consts::TAU * t as f64 / 12.0 + 0.3).sin();
            assert!((d.values.get(&[0, t]) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_lag_copy_is_a_shift() {
        let mut spec = SynthPreset::Lagged.spec(3, 200, 7, 4);
        for l in &mut spec.lags {
            l.sigma = 0.0;
        }
        let d = synth_generate(&spec).unwrap();
        for j in 1..3 {
            for t in 7..200 {
                assert_eq!(d.values.get(&[j, t]), d.values.get(&[j - 1, t - 7]));
            }
        }
    }

    #[test]
    fn ar1_autocorrelation() {
        let d = synth_generate(&one(
            ChannelSpec {
                sinusoids: Vec::new(),
                ar: 0.9,
                noise: 1.0,
            },
            10_000,
        ))
        .unwrap();
        let x = d.values.data();
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let v: f64 = x.iter().map(|a| (a - m) * (a - m)).sum();
        let c: f64 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
        assert!((c / v - 0.9).abs() < 0.05, "{}", c / v);
    }

    #[test]
    fn deterministic_and_validated() {
        let s = SynthPreset::Regimes.spec(4, 100, 0, 9);
        assert_eq!(synth_generate(&s).unwrap(), synth_generate(&s).unwrap());
        let mut cyc = SynthPreset::Independent.spec(2, 50, 0, 1);
        cyc.lags = vec![
            LagCopy { source: 0, target: 1, delay: 1, sigma: 0.0 },
            LagCopy { source: 1, target: 0, delay: 1, sigma: 0.0 },
        ];
        assert!(synth_generate(&cyc).is_err());
        let mut far = SynthPreset::Lagged.spec(2, 50, 50, 1);
        assert!(synth_generate(&far).is_err());
        far.lags[0].delay = 49;
        assert!(synth_generate(&far).is_ok());
    }
}
