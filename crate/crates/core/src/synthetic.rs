//! Seeded synthetic multivariate series with injected anomalies.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the additive noise; each feature's clean signal has
/// peak amplitude at most 1.
pub const NOISE_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnomalyKind {
    /// Constant offset over the anomaly span.
    LevelShift,
    /// Alternating-sign spikes over the anomaly span.
    SpikeBurst,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalySpec {
    pub count: usize,
    pub magnitude: f64,
    pub width: usize,
    /// `None` picks a kind per anomaly from the seed.
    pub kind: Option<AnomalyKind>,
}

impl AnomalySpec {
    pub fn none() -> Self {
        AnomalySpec {
            count: 0,
            magnitude: 4.0 * NOISE_SIGMA,
            width: 1,
            kind: None,
        }
    }
}

impl Default for AnomalySpec {
    fn default() -> Self {
        AnomalySpec {
            count: 1,
            magnitude: 4.0 * NOISE_SIGMA,
            width: 5,
            kind: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InjectedAnomaly {
    pub start: usize,
    pub width: usize,
    pub feature: usize,
    pub kind: AnomalyKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSeries {
    /// `[L, F]`
    pub series: Tensor,
    pub labels: Vec<bool>,
    /// True at each anomaly's first row and at the first row after it.
    pub changepoints: Vec<bool>,
    pub anomalies: Vec<InjectedAnomaly>,
}

/// Sums of 2 or 3 sinusoids per feature plus Gaussian noise, with anomalies
/// anywhere in the series.
pub fn generate_synthetic(n_features: usize, length: usize, anomalies: &AnomalySpec, seed: u64) -> Result<SyntheticSeries> {
    generate_synthetic_in(n_features, length, anomalies, 0..length, seed)
}

/// As [`generate_synthetic`], with anomalies confined to `region`.
pub fn generate_synthetic_in(
    n_features: usize,
    length: usize,
    spec: &AnomalySpec,
    region: Range<usize>,
    seed: u64,
) -> Result<SyntheticSeries> {
    if n_features == 0 || length < 2 {
        return Err(Error::contract("need at least one feature and two rows"));
    }
    if region.end > length || region.start >= region.end {
        return Err(Error::contract(format!("anomaly region {region:?} does not fit {length} rows")));
    }
    if spec.count > 0 && (spec.width == 0 || !spec.magnitude.is_finite()) {
        return Err(Error::contract("anomalies need a positive width and finite magnitude"));
    }
    // Anomalies are separated by at least one normal row.
    let needed = spec.count * spec.width + spec.count.saturating_sub(1);
    let span = region.end - region.start;
    if needed > span {
        return Err(Error::contract(format!(
            "{} anomalies of width {} do not fit in {span} rows",
            spec.count, spec.width
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut data = vec![0.0; length * n_features];
    for f in 0..n_features {
        let k = rng.random_range(2..=3);
        let mut amps: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = amps.iter().sum();
        amps.iter_mut().for_each(|a| *a /= total);
        let waves: Vec<(f64, f64, f64)> = amps
            .into_iter()
            .map(|a| {
                let period = rng.random_range(8.0..32.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (a, std::f64::consts::TAU / period, phase)
            })
            .collect();
        for t in 0..length {
            let clean: f64 = waves.iter().map(|&(a, w, p)| a * (w * t as f64 + p).sin()).sum();
            data[t * n_features + f] = clean + noise.sample(&mut rng);
        }
    }

    let free = span - needed;
    let mut offsets: Vec<usize> = (0..spec.count).map(|_| rng.random_range(0..=free)).collect();
    offsets.sort_unstable();
    let mut labels = vec![false; length];
    let mut changepoints = vec![false; length];
    let mut injected = Vec::with_capacity(spec.count);
    for (i, off) in offsets.into_iter().enumerate() {
        let start = region.start + off + i * (spec.width + 1);
        let feature = rng.random_range(0..n_features);
        let kind = spec.kind.unwrap_or(if rng.random_bool(0.5) {
            AnomalyKind::LevelShift
        } else {
            AnomalyKind::SpikeBurst
        });
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        for (j, t) in (start..start + spec.width).enumerate() {
            let delta = match kind {
                AnomalyKind::LevelShift => sign * spec.magnitude,
                AnomalyKind::SpikeBurst => {
                    if j % 2 == 0 {
                        sign * spec.magnitude
                    } else {
                        -sign * spec.magnitude
                    }
                }
            };
            data[t * n_features + feature] += delta;
            labels[t] = true;
        }
        changepoints[start] = true;
        if start + spec.width < length {
            changepoints[start + spec.width] = true;
        }
        injected.push(InjectedAnomaly {
            start,
            width: spec.width,
            feature,
            kind,
        });
    }

    Ok(SyntheticSeries {
        series: Tensor::new(vec![length, n_features], data)?,
        labels,
        changepoints,
        anomalies: injected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn no_anomalies_means_no_labels() {
        let s = generate_synthetic(3, 200, &AnomalySpec::none(), 1).unwrap();
        assert_eq!(s.series.shape(), &[200, 3]);
        assert!(s.labels.iter().all(|&l| !l));
        assert!(s.changepoints.iter().all(|&l| !l));
    }

    #[test]
    fn single_spike_of_width_five() {
        let spec = AnomalySpec {
            count: 1,
            width: 5,
            magnitude: 1.0,
            kind: Some(AnomalyKind::SpikeBurst),
        };
        let s = generate_synthetic(2, 100, &spec, 3).unwrap();
        assert_eq!(s.labels.iter().filter(|&&l| l).count(), 5);
        let a = s.anomalies[0];
        assert!(s.labels[a.start..a.start + 5].iter().all(|&l| l));
    }

    #[test]
    fn same_seed_same_output() {
        let spec = AnomalySpec::default();
        assert_eq!(generate_synthetic(3, 150, &spec, 9).unwrap(), generate_synthetic(3, 150, &spec, 9).unwrap());
        assert_ne!(generate_synthetic(3, 150, &spec, 9).unwrap(), generate_synthetic(3, 150, &spec, 10).unwrap());
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let spec = AnomalySpec {
            count: 3,
            width: 10,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(1, 31, &spec, 0), Err(Error::Contract(_))));
        assert!(generate_synthetic(1, 32, &spec, 0).is_ok());
        assert!(generate_synthetic_in(1, 100, &spec, 90..101, 0).is_err());
    }

    #[test]
    fn injection_shifts_only_the_chosen_feature() {
        let clean = generate_synthetic(3, 120, &AnomalySpec::none(), 4).unwrap();
        let spec = AnomalySpec {
            count: 2,
            width: 6,
            magnitude: 2.0,
            kind: Some(AnomalyKind::LevelShift),
        };
        let dirty = generate_synthetic(3, 120, &spec, 4).unwrap();
        // The base signal consumes the same random stream, so only anomaly
        // rows differ, by exactly the magnitude.
        for t in 0..120 {
            for f in 0..3 {
                let d = dirty.series.at(&[t, f]) - clean.series.at(&[t, f]);
                let hit = dirty.anomalies.iter().any(|a| a.feature == f && (a.start..a.start + a.width).contains(&t));
                if hit {
                    assert!((d.abs() - 2.0).abs() < 1e-12);
                } else {
                    assert_eq!(d, 0.0);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn anomalies_are_disjoint_and_inside_region(
            count in 0usize..6, width in 1usize..8, seed in 0u64..1000, lo in 0usize..40
        ) {
            let region = lo..lo + 60;
            let spec = AnomalySpec { count, width, magnitude: 1.0, kind: None };
            prop_assume!(count * width + count.saturating_sub(1) <= 60);
            let s = generate_synthetic_in(2, 120, &spec, region.clone(), seed).unwrap();
            prop_assert_eq!(s.labels.iter().filter(|&&l| l).count(), count * width);
            for w in s.anomalies.windows(2) {
                prop_assert!(w[0].start + w[0].width < w[1].start);
            }
            for a in &s.anomalies {
                prop_assert!(a.start >= region.start && a.start + a.width <= region.end);
            }
        }
    }
}
