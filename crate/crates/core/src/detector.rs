//! Per-feature MAE thresholds and point-level anomaly flags.

use serde::{Deserialize, Serialize};

use crate::data::{NormalizerStats, WindowedDataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Windows reconstructed per forward pass during scoring.
const SCORE_CHUNK: usize = 256;

/// `MAE_f = mean_t |x̂[t, f] - x[t, f]|` for one `[T, F]` window.
pub fn window_mae(x: &Tensor, x_hat: &Tensor) -> Result<Vec<f64>> {
    if x.shape() != x_hat.shape() || x.rank() != 2 {
        return Err(Error::shape(format!(
            "window MAE needs two equal [T, F] shapes, got {:?} and {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let (t, f) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; f];
    for (a, b) in x.data().chunks(f).zip(x_hat.data().chunks(f)) {
        for ((o, p), q) in out.iter_mut().zip(a).zip(b) {
            *o += (q - p).abs();
        }
    }
    out.iter_mut().for_each(|o| *o /= t as f64);
    Ok(out)
}

/// Per-window, per-feature MAE between `windows` and `recon`, both `[N, T, F]`.
pub fn window_errors(windows: &Tensor, recon: &Tensor) -> Result<Tensor> {
    if windows.shape() != recon.shape() || windows.rank() != 3 {
        return Err(Error::shape("windows and reconstructions must share an [N, T, F] shape"));
    }
    let [n, t, f] = [windows.shape()[0], windows.shape()[1], windows.shape()[2]];
    let mut out = Vec::with_capacity(n * f);
    for w in 0..n {
        let lo = w * t * f;
        let a = Tensor::new(vec![t, f], windows.data()[lo..lo + t * f].to_vec())?;
        let b = Tensor::new(vec![t, f], recon.data()[lo..lo + t * f].to_vec())?;
        out.extend(window_mae(&a, &b)?);
    }
    Tensor::new(vec![n, f], out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdProfile {
    pub per_feature_threshold: Vec<f64>,
    pub sensitivity: f64,
    /// `[N, F]` training-window MAEs.
    pub calibration_errors: Tensor,
    /// Statistics the calibration windows were normalized with.
    pub normalizer: Option<NormalizerStats>,
}

impl ThresholdProfile {
    /// Thresholds are `sensitivity * max_n errors[n, f]`.
    pub fn from_errors(errors: Tensor, sensitivity: f64, normalizer: Option<NormalizerStats>) -> Result<Self> {
        if !(sensitivity > 0.0 && sensitivity.is_finite()) {
            return Err(Error::contract(format!("sensitivity must be positive, got {sensitivity}")));
        }
        if errors.rank() != 2 {
            return Err(Error::shape("calibration errors must be [N, F]"));
        }
        let f = errors.shape()[1];
        let mut max = vec![f64::NEG_INFINITY; f];
        for row in errors.data().chunks(f) {
            for (m, e) in max.iter_mut().zip(row) {
                *m = m.max(*e);
            }
        }
        Ok(ThresholdProfile {
            per_feature_threshold: max.into_iter().map(|m| sensitivity * m).collect(),
            sensitivity,
            calibration_errors: errors,
            normalizer,
        })
    }

    /// Same calibration at a different sensitivity.
    pub fn with_sensitivity(&self, sensitivity: f64) -> Result<Self> {
        Self::from_errors(self.calibration_errors.clone(), sensitivity, self.normalizer.clone())
    }

    pub fn n_features(&self) -> usize {
        self.per_feature_threshold.len()
    }
}

/// Thresholds from the model's worst reconstruction on `train_windows`.
pub fn calibrate(model: &Model, train_windows: &WindowedDataset, sensitivity: f64) -> Result<ThresholdProfile> {
    if train_windows.is_empty() {
        return Err(Error::contract("cannot calibrate on an empty dataset"));
    }
    let recon = model.reconstruct(&train_windows.windows, SCORE_CHUNK)?;
    let errors = window_errors(&train_windows.windows, &recon)?;
    ThresholdProfile::from_errors(errors, sensitivity, train_windows.normalizer.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointLabels {
    /// One flag per series row.
    pub flags: Vec<bool>,
    /// `per_feature_flags[t][f]`
    pub per_feature_flags: Vec<Vec<bool>>,
    /// `[N, F]` test-window MAEs.
    pub window_errors: Tensor,
}

impl PointLabels {
    pub fn flagged_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Rows `index,flag,f0,..` preceded by a header.
    pub fn to_csv(&self) -> String {
        let f = self.per_feature_flags.first().map_or(0, Vec::len);
        let mut s = String::from("index,flag");
        for j in 0..f {
            s.push_str(&format!(",f{j}"));
        }
        s.push('\n');
        for (i, (&flag, per)) in self.flags.iter().zip(&self.per_feature_flags).enumerate() {
            s.push_str(&format!("{i},{}", u8::from(flag)));
            for &p in per {
                s.push_str(&format!(",{}", u8::from(p)));
            }
            s.push('\n');
        }
        s
    }
}

/// Maps window errors to point flags: a window is anomalous in feature `f`
/// when its error exceeds that feature's threshold, and every row covered by
/// such a window is flagged for `f`.
pub fn flag_points(
    errors: &Tensor,
    thresholds: &[f64],
    start_indices: &[usize],
    timesteps: usize,
    series_len: usize,
) -> Result<(Vec<bool>, Vec<Vec<bool>>)> {
    let f = thresholds.len();
    if errors.rank() != 2 || errors.shape()[1] != f || errors.shape()[0] != start_indices.len() {
        return Err(Error::shape("window errors do not match thresholds and window starts"));
    }
    let mut per = vec![vec![false; f]; series_len];
    for (row, &start) in errors.data().chunks(f).zip(start_indices) {
        if start + timesteps > series_len {
            return Err(Error::contract("window extends beyond the series"));
        }
        for (j, (&e, &th)) in row.iter().zip(thresholds).enumerate() {
            if e > th {
                for p in &mut per[start..start + timesteps] {
                    p[j] = true;
                }
            }
        }
    }
    let flags = per.iter().map(|p| p.iter().any(|&b| b)).collect();
    Ok((flags, per))
}

pub fn detect(model: &Model, profile: &ThresholdProfile, test_windows: &WindowedDataset) -> Result<PointLabels> {
    if test_windows.stride != 1 {
        return Err(Error::contract(format!("detection needs stride 1, got {}", test_windows.stride)));
    }
    if test_windows.is_empty() {
        return Err(Error::contract("no test windows"));
    }
    match (&profile.normalizer, &test_windows.normalizer) {
        (Some(a), Some(b)) if a == b => {}
        (None, None) => {}
        _ => {
            return Err(Error::contract(
                "test windows must be normalized with the calibration statistics",
            ))
        }
    }
    if test_windows.n_features() != profile.n_features() {
        return Err(Error::contract(format!(
            "profile has {} features, test windows have {}",
            profile.n_features(),
            test_windows.n_features()
        )));
    }
    let recon = model.reconstruct(&test_windows.windows, SCORE_CHUNK)?;
    let errors = window_errors(&test_windows.windows, &recon)?;
    let (flags, per_feature_flags) = flag_points(
        &errors,
        &profile.per_feature_threshold,
        &test_windows.start_indices,
        test_windows.timesteps(),
        test_windows.series_len,
    )?;
    Ok(PointLabels {
        flags,
        per_feature_flags,
        window_errors: errors,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub threshold: f64,
}

impl Histogram {
    /// `bin_left,bin_right,count` rows and a trailing `# threshold=` line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{:.11e},{:.11e},{c}\n", self.edges[i], self.edges[i + 1]));
        }
        s.push_str(&format!("# threshold={:.11e}\n", self.threshold));
        s
    }
}

/// Equal-width histogram of one feature's calibration errors over their
/// `[min, max]` range.
pub fn error_histogram(profile: &ThresholdProfile, feature: usize, bins: usize) -> Result<Histogram> {
    if feature >= profile.n_features() {
        return Err(Error::contract(format!(
            "feature {feature} out of range for {} features",
            profile.n_features()
        )));
    }
    if bins == 0 {
        return Err(Error::contract("need at least one bin"));
    }
    let f = profile.n_features();
    let values: Vec<f64> = profile.calibration_errors.data().iter().skip(feature).step_by(f).copied().collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|i| lo + width * i as f64).collect();
    edges.push(hi);
    let mut counts = vec![0; bins];
    for v in values {
        let k = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[k] += 1;
    }
    Ok(Histogram {
        edges,
        counts,
        threshold: profile.per_feature_threshold[feature],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(t: usize, f: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![t, f], v.to_vec()).unwrap()
    }

    #[test]
    fn mae_examples() {
        let x = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(window_mae(&x, &x).unwrap(), vec![0.0, 0.0]);
        assert_eq!(window_mae(&m(2, 1, &[0.0, 0.0]), &m(2, 1, &[1.0, -1.0])).unwrap(), vec![1.0]);
        assert!(matches!(window_mae(&x, &m(1, 2, &[0.0, 0.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn thresholds_follow_the_max_rule() {
        let e = m(3, 1, &[0.1, 0.3, 0.2]);
        let p = ThresholdProfile::from_errors(e.clone(), 1.0, None).unwrap();
        assert_eq!(p.per_feature_threshold, vec![0.3]);
        let half = p.with_sensitivity(0.5).unwrap();
        assert_eq!(half.per_feature_threshold, vec![0.15]);
        assert!(ThresholdProfile::from_errors(e, 0.0, None).is_err());
    }

    #[test]
    fn calibration_windows_never_self_flag() {
        let e = m(4, 2, &[0.1, 0.5, 0.4, 0.2, 0.3, 0.3, 0.4, 0.1]);
        let p = ThresholdProfile::from_errors(e.clone(), 1.0, None).unwrap();
        let (flags, _) = flag_points(&e, &p.per_feature_threshold, &[0, 1, 2, 3], 2, 5).unwrap();
        assert!(flags.iter().all(|&f| !f));
    }

    #[test]
    fn one_hot_window_flags_its_span_for_its_feature() {
        let e = m(3, 2, &[0.0, 0.0, 0.0, 5.0, 0.0, 0.0]);
        let (flags, per) = flag_points(&e, &[1.0, 1.0], &[0, 1, 2], 3, 5).unwrap();
        assert_eq!(flags, vec![false, true, true, true, false]);
        for (t, p) in per.iter().enumerate() {
            assert!(!p[0]);
            assert_eq!(p[1], (1..4).contains(&t));
        }
    }

    #[test]
    fn histogram_examples() {
        let e = m(4, 1, &[0.1, 0.2, 0.3, 0.4]);
        let p = ThresholdProfile::from_errors(e, 1.0, None).unwrap();
        let one = error_histogram(&p, 0, 1).unwrap();
        assert_eq!(one.counts, vec![4]);
        let two = error_histogram(&p, 0, 2).unwrap();
        assert_eq!(two.counts, vec![2, 2]);
        assert!(two.threshold >= *two.edges.last().unwrap());
        assert!(error_histogram(&p, 1, 2).is_err());
        assert!(error_histogram(&p, 0, 0).is_err());
        let flat = ThresholdProfile::from_errors(m(3, 1, &[0.2; 3]), 1.0, None).unwrap();
        assert_eq!(error_histogram(&flat, 0, 4).unwrap().counts, vec![3, 0, 0, 0]);
    }

    #[test]
    fn labels_csv_layout() {
        let labels = PointLabels {
            flags: vec![false, true],
            per_feature_flags: vec![vec![false, false], vec![false, true]],
            window_errors: m(1, 2, &[0.0, 1.0]),
        };
        assert_eq!(labels.to_csv(), "index,flag,f0,f1\n0,0,0,0\n1,1,0,1\n");
    }

    proptest! {
        #[test]
        fn flags_match_brute_force_union(
            (n, f, t, errs, th) in (1usize..12, 1usize..4, 1usize..5).prop_flat_map(|(n, f, t)| (
                Just(n), Just(f), Just(t),
                prop::collection::vec(0.0f64..1.0, n * f),
                prop::collection::vec(0.0f64..1.0, f),
            ))
        ) {
            let len = n + t - 1;
            let starts: Vec<usize> = (0..n).collect();
            let e = Tensor::new(vec![n, f], errs.clone()).unwrap();
            let (flags, per) = flag_points(&e, &th, &starts, t, len).unwrap();
            for p in 0..len {
                let mut any = false;
                for j in 0..f {
                    let hit = (0..n).any(|w| w <= p && p < w + t && errs[w * f + j] > th[j]);
                    prop_assert_eq!(per[p][j], hit);
                    any |= hit;
                }
                prop_assert_eq!(flags[p], any);
            }
        }

        #[test]
        fn lowering_sensitivity_never_removes_flags(
            errs in prop::collection::vec(0.0f64..1.0, 12),
            s_hi in 0.1f64..3.0, frac in 0.0f64..1.0,
        ) {
            let e = Tensor::new(vec![6, 2], errs).unwrap();
            let test = Tensor::new(vec![6, 2], (0..12).map(|i| (i as f64 * 0.37).fract()).collect()).unwrap();
            let hi = ThresholdProfile::from_errors(e.clone(), s_hi, None).unwrap();
            let lo = hi.with_sensitivity(s_hi * frac.max(0.01)).unwrap();
            let starts: Vec<usize> = (0..6).collect();
            let (fh, _) = flag_points(&test, &hi.per_feature_threshold, &starts, 3, 8).unwrap();
            let (fl, _) = flag_points(&test, &lo.per_feature_threshold, &starts, 3, 8).unwrap();
            for (a, b) in fh.iter().zip(&fl) {
                prop_assert!(!a || *b);
            }
        }

        #[test]
        fn histogram_counts_sum_to_n(vals in prop::collection::vec(0.0f64..10.0, 1..50), bins in 1usize..20) {
            let n = vals.len();
            let p = ThresholdProfile::from_errors(Tensor::new(vec![n, 1], vals).unwrap(), 1.0, None).unwrap();
            let h = error_histogram(&p, 0, bins).unwrap();
            prop_assert_eq!(h.counts.iter().sum::<usize>(), n);
            prop_assert!(h.threshold >= *h.edges.last().unwrap());
        }
    }
}
