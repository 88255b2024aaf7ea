//! Generated corpora for smoke tests and benchmarks.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::clean::{CleanSeries, Origin};

/// Sum of sinusoids with the given periods (in steps), amplitudes and phases,
/// plus Gaussian noise of standard deviation `noise`.
pub fn multi_sine<R: Rng + ?Sized>(
    len: usize,
    components: &[(f64, f64, f64)],
    noise: f64,
    rng: &mut R,
) -> Vec<f32> {
    let normal = Normal::new(0.0, noise.max(0.0)).expect("valid std");
    (0..len)
        .map(|t| {
            let s: f64 = components
                .iter()
                .map(|&(period, amp, phase)| amp * (TAU * t as f64 / period + phase).sin())
                .sum();
            (s + if noise > 0.0 { normal.sample(rng) } else { 0.0 }) as f32
        })
        .collect()
}

/// Periods used by [`sine_corpus`].
pub const SINE_PERIODS: [f64; 6] = [6.0, 12.0, 17.0, 24.0, 40.0, 64.0];

/// `count` series of `len` points, each mixing two or three of
/// [`SINE_PERIODS`] with random amplitudes and phases; overall scale is
/// close to unit variance.
pub fn sine_corpus(count: usize, len: usize, noise: f64, seed: u64) -> Vec<CleanSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let k = rng.random_range(2..=3);
            let comps: Vec<(f64, f64, f64)> = (0..k)
                .map(|_| {
                    let p = SINE_PERIODS[rng.random_range(0..SINE_PERIODS.len())];
                    (p, rng.random_range(0.4..1.0), rng.random_range(0.0..TAU))
                })
                .collect();
            CleanSeries {
                values: multi_sine(len, &comps, noise, &mut rng),
                origin: Origin {
                    source: format!("sine-{seed}-{i}"),
                    domain: "sine".into(),
                    start: 0,
                },
            }
        })
        .collect()
}

/// Regime `r` of the three-regime task: 0 is a fast sine, 1 a sawtooth, 2 a
/// square wave, each with random period, phase and level.
pub fn regime_series<R: Rng + ?Sized>(regime: usize, len: usize, noise: f64, rng: &mut R) -> Vec<f32> {
    let normal = Normal::new(0.0, noise.max(0.0)).expect("valid std");
    let period = match regime % 3 {
        0 => rng.random_range(6.0..10.0),
        1 => rng.random_range(14.0..22.0),
        _ => rng.random_range(10.0..18.0),
    };
    let phase = rng.random_range(0.0..1.0);
    let level = rng.random_range(-0.5..0.5);
    (0..len)
        .map(|t| {
            let u = (t as f64 / period + phase).fract();
            let base = match regime % 3 {
                0 => (TAU * u).sin(),
                1 => 2.0 * u - 1.0,
                _ => {
                    if u < 0.5 {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            (level + base + if noise > 0.0 { normal.sample(rng) } else { 0.0 }) as f32
        })
        .collect()
}

/// `per_regime` series of each regime, tagged `regime0`..`regime2`.
pub fn regime_corpus(per_regime: usize, len: usize, noise: f64, seed: u64) -> Vec<CleanSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * per_regime);
    for i in 0..per_regime {
        for r in 0..3 {
            out.push(CleanSeries {
                values: regime_series(r, len, noise, &mut rng),
                origin: Origin {
                    source: format!("regime-{seed}-{i}"),
                    domain: format!("regime{r}"),
                    start: 0,
                },
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic_and_finite() {
        let a = sine_corpus(3, 200, 0.05, 4);
        assert_eq!(a, sine_corpus(3, 200, 0.05, 4));
        assert!(a.iter().all(|s| s.values.len() == 200 && s.values.iter().all(|v| v.is_finite())));
        let b = regime_corpus(2, 50, 0.0, 1);
        assert_eq!(b.len(), 6);
        assert_eq!(b[4].origin.domain, "regime1");
        assert!(b[2].values.iter().all(|&v| (v.abs() - 1.0).abs() < 0.51));
    }

    #[test]
    fn single_sine_has_its_period() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = multi_sine(48, &[(12.0, 1.0, 0.3)], 0.0, &mut rng);
        for t in 0..36 {
            assert!((x[t] - x[t + 12]).abs() < 1e-5);
        }
    }
}
