//! Z-score normalization, sliding windows and chronological splits.
//!
//! Series are `[L, F]` tensors (rows are timesteps).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Features whose standard deviation falls below this are treated as constant.
pub const CONSTANT_SIGMA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    pub mu: Vec<f64>,
    /// Population standard deviation.
    pub sigma: Vec<f64>,
}

impl NormalizerStats {
    pub fn n_features(&self) -> usize {
        self.mu.len()
    }

    pub fn is_constant(&self, feature: usize) -> bool {
        self.sigma[feature] < CONSTANT_SIGMA
    }
}

fn series_dims(series: &Tensor) -> Result<(usize, usize)> {
    match *series.shape() {
        [l, f] => Ok((l, f)),
        ref s => Err(Error::shape(format!("series must be [L, F], got {s:?}"))),
    }
}

pub fn fit_normalizer(series: &Tensor) -> Result<NormalizerStats> {
    let (l, f) = series_dims(series)?;
    if l < 2 {
        return Err(Error::contract(format!("need at least 2 rows to fit a normalizer, got {l}")));
    }
    let mut mu = vec![0.0; f];
    for row in series.data().chunks(f) {
        for (m, x) in mu.iter_mut().zip(row) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= l as f64);
    let mut var = vec![0.0; f];
    for row in series.data().chunks(f) {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mu) {
            *v += (x - m) * (x - m);
        }
    }
    let sigma = var.into_iter().map(|v| (v / l as f64).sqrt()).collect();
    Ok(NormalizerStats { mu, sigma })
}

/// `z = (x - mu) / sigma`; constant features map to 0.
pub fn apply_normalizer(stats: &NormalizerStats, series: &Tensor) -> Result<Tensor> {
    let (_, f) = series_dims(series)?;
    if f != stats.n_features() {
        return Err(Error::shape(format!(
            "normalizer fitted on {} features, series has {f}",
            stats.n_features()
        )));
    }
    let mut out = series.clone();
    for row in out.data_mut().chunks_mut(f) {
        for (j, x) in row.iter_mut().enumerate() {
            *x = if stats.is_constant(j) {
                0.0
            } else {
                (*x - stats.mu[j]) / stats.sigma[j]
            };
        }
    }
    Ok(out)
}

/// `x = z * sigma + mu`.
pub fn invert_normalizer(stats: &NormalizerStats, z: &Tensor) -> Result<Tensor> {
    let (_, f) = series_dims(z)?;
    if f != stats.n_features() {
        return Err(Error::shape("feature count does not match normalizer"));
    }
    let mut out = z.clone();
    for row in out.data_mut().chunks_mut(f) {
        for (j, x) in row.iter_mut().enumerate() {
            *x = *x * stats.sigma[j] + stats.mu[j];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    /// `[N, T, F]`
    pub windows: Tensor,
    /// Series index of each window's first row.
    pub start_indices: Vec<usize>,
    pub stride: usize,
    /// Length of the series the windows were cut from.
    pub series_len: usize,
    /// Statistics the series was normalized with, if any.
    pub normalizer: Option<NormalizerStats>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.start_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start_indices.is_empty()
    }

    pub fn timesteps(&self) -> usize {
        self.windows.shape()[1]
    }

    pub fn n_features(&self) -> usize {
        self.windows.shape()[2]
    }

    /// Windows at `indices`, in that order, as `[len, T, F]`.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::contract("cannot gather zero windows"));
        }
        let per = self.timesteps() * self.n_features();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.windows.data()[i * per..(i + 1) * per]);
        }
        Tensor::new(vec![indices.len(), self.timesteps(), self.n_features()], data)
    }

    /// Subset keeping the listed windows.
    pub fn select(&self, indices: &[usize]) -> Result<WindowedDataset> {
        Ok(WindowedDataset {
            windows: self.gather(indices)?,
            start_indices: indices.iter().map(|&i| self.start_indices[i]).collect(),
            stride: self.stride,
            series_len: self.series_len,
            normalizer: self.normalizer.clone(),
        })
    }
}

/// Windows of length `t` every `stride` rows.
pub fn make_windows(series: &Tensor, t: usize, stride: usize) -> Result<WindowedDataset> {
    let (l, f) = series_dims(series)?;
    if stride == 0 || t == 0 {
        return Err(Error::contract("window length and stride must be at least 1"));
    }
    if l < t {
        return Err(Error::contract(format!("series of {l} rows is shorter than window length {t}")));
    }
    let n = (l - t) / stride + 1;
    let starts: Vec<usize> = (0..n).map(|i| i * stride).collect();
    let mut data = Vec::with_capacity(n * t * f);
    for &s in &starts {
        data.extend_from_slice(&series.data()[s * f..(s + t) * f]);
    }
    Ok(WindowedDataset {
        windows: Tensor::new(vec![n, t, f], data)?,
        start_indices: starts,
        stride,
        series_len: l,
        normalizer: None,
    })
}

/// Normalizes `series` with `stats` and windows it with stride 1.
pub fn normalized_windows(stats: &NormalizerStats, series: &Tensor, t: usize) -> Result<WindowedDataset> {
    let z = apply_normalizer(stats, series)?;
    let mut ds = make_windows(&z, t, 1)?;
    ds.normalizer = Some(stats.clone());
    Ok(ds)
}

/// Rows `[start, end)` of a series.
pub fn slice_rows(series: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (l, f) = series_dims(series)?;
    if start >= end || end > l {
        return Err(Error::contract(format!("row range {start}..{end} is invalid for {l} rows")));
    }
    Tensor::new(vec![end - start, f], series.data()[start * f..end * f].to_vec())
}

/// Training data ready for fitting: the normalizer comes from the training
/// rows only.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub stats: NormalizerStats,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
}

/// Splits rows chronologically (the last `val_fraction` for validation),
/// fits the normalizer on the training rows and windows both parts.
pub fn prepare_training_data(series: &Tensor, t: usize, val_fraction: f64) -> Result<PreparedData> {
    let (l, _) = series_dims(series)?;
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::contract(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let n_val = ((l as f64) * val_fraction).round() as usize;
    let n_train = l.saturating_sub(n_val);
    if n_val < t || n_train < t.max(2) {
        return Err(Error::contract(format!(
            "{l} rows split into {n_train} train / {n_val} validation rows; each part needs at least {t}"
        )));
    }
    let train_rows = slice_rows(series, 0, n_train)?;
    let val_rows = slice_rows(series, n_train, l)?;
    let stats = fit_normalizer(&train_rows)?;
    let train = normalized_windows(&stats, &train_rows, t)?;
    let mut val = normalized_windows(&stats, &val_rows, t)?;
    for s in &mut val.start_indices {
        *s += n_train;
    }
    val.series_len = l;
    Ok(PreparedData { stats, train, val })
}

/// Chronological split of an already windowed dataset: the last
/// `val_fraction` of windows validate, and training windows overlapping any
/// validation window are dropped.
pub fn split_windows(ds: &WindowedDataset, val_fraction: f64) -> Result<(WindowedDataset, WindowedDataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::contract(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let n = ds.len();
    let n_val = ((n as f64) * val_fraction).round().max(1.0) as usize;
    if n_val >= n {
        return Err(Error::contract(format!("{n} windows leave nothing to train on")));
    }
    let first_val = n - n_val;
    let val_start = ds.start_indices[first_val];
    let t = ds.timesteps();
    let train_idx: Vec<usize> = (0..first_val).filter(|&i| ds.start_indices[i] + t <= val_start).collect();
    if train_idx.is_empty() {
        return Err(Error::contract("no training windows remain after the chronological split"));
    }
    let val_idx: Vec<usize> = (first_val..n).collect();
    Ok((ds.select(&train_idx)?, ds.select(&val_idx)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn fit_examples() {
        let s = fit_normalizer(&col(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(s.mu, vec![2.0]);
        assert!((s.sigma[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let c = fit_normalizer(&col(&[5.0, 5.0])).unwrap();
        assert_eq!(c.sigma, vec![0.0]);
        assert!(c.is_constant(0));
        assert!(matches!(fit_normalizer(&col(&[1.0])), Err(Error::Contract(_))));
    }

    #[test]
    fn apply_examples() {
        let x = col(&[1.0, 2.0, 3.0]);
        let s = fit_normalizer(&x).unwrap();
        let z = apply_normalizer(&s, &x).unwrap();
        let k = 1.5f64.sqrt();
        for (a, b) in z.data().iter().zip([-k, 0.0, k]) {
            assert!((a - b).abs() < 1e-12);
        }
        let wide = Tensor::zeros(&[3, 2]);
        assert!(matches!(apply_normalizer(&s, &wide), Err(Error::Shape(_))));
        let c = fit_normalizer(&col(&[5.0, 5.0])).unwrap();
        assert_eq!(apply_normalizer(&c, &col(&[5.0, 7.0])).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn window_examples() {
        let x = col(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let w = make_windows(&x, 3, 1).unwrap();
        assert_eq!(w.start_indices, vec![0, 1, 2]);
        assert_eq!(w.windows.shape(), &[3, 3, 1]);
        assert_eq!(w.windows.data()[3..6], [1.0, 2.0, 3.0]);
        let w2 = make_windows(&x, 3, 2).unwrap();
        assert_eq!(w2.start_indices, vec![0, 2]);
        let whole = make_windows(&x, 5, 1).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole.windows.data(), x.data());
        assert!(matches!(make_windows(&x, 6, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn window_split_drops_overlap() {
        let x = col(&(0..20).map(f64::from).collect::<Vec<_>>());
        let w = make_windows(&x, 4, 1).unwrap();
        let (tr, va) = split_windows(&w, 0.2).unwrap();
        let val_start = va.start_indices[0];
        assert_eq!(va.len(), 3);
        assert!(tr.start_indices.iter().all(|&s| s + 4 <= val_start));
        assert_eq!(*tr.start_indices.last().unwrap(), val_start - 4);
    }

    #[test]
    fn stats_ignore_validation_rows() {
        let mut rows: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let a = prepare_training_data(&col(&rows), 5, 0.2).unwrap();
        for v in &mut rows[40..] {
            *v += 100.0;
        }
        let b = prepare_training_data(&col(&rows), 5, 0.2).unwrap();
        assert_eq!(a.stats, b.stats);
        assert_eq!(a.train, b.train);
        assert_ne!(a.val.windows, b.val.windows);
        assert_eq!(b.val.start_indices[0], 40);
    }

    proptest! {
        #[test]
        fn normalized_series_has_unit_moments(
            rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 2..40)
        ) {
            let x = Tensor::from_rows(&rows).unwrap();
            let s = fit_normalizer(&x).unwrap();
            let z = apply_normalizer(&s, &x).unwrap();
            let l = rows.len() as f64;
            for j in 0..3 {
                if s.sigma[j] < 1e-6 {
                    continue;
                }
                let col: Vec<f64> = z.data().iter().skip(j).step_by(3).copied().collect();
                let mean = col.iter().sum::<f64>() / l;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / l;
                prop_assert!(mean.abs() < 1e-10);
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-10);
            }
            let back = invert_normalizer(&s, &z).unwrap();
            for (a, b) in back.data().iter().zip(x.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }

        #[test]
        fn window_count_and_coverage(l in 1usize..60, t in 1usize..10, stride in 1usize..5) {
            prop_assume!(l >= t);
            let x = col(&(0..l).map(|i| i as f64).collect::<Vec<_>>());
            let w = make_windows(&x, t, stride).unwrap();
            prop_assert_eq!(w.len(), (l - t) / stride + 1);
            for (i, &s) in w.start_indices.iter().enumerate() {
                for k in 0..t {
                    prop_assert_eq!(w.windows.at(&[i, k, 0]), (s + k) as f64);
                }
            }
        }
    }
}
