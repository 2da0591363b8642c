//! Benchmark loop over labeled series: train on each series' clean head,
//! detect on its labeled tail, score, and aggregate.

use std::fmt::Write as _;

use crate::data::{normalized_windows, prepare_training_data, slice_rows, NormalizerStats};
use crate::detector::{calibrate, detect, PointLabels, ThresholdProfile};
use crate::error::{Error, Result};
use crate::metrics::{confusion, f1, far_mar, scaled_average, ConfusionCounts};
use crate::model::{Model, ModelSpec};
use crate::nab::{changepoint_windows, flag_indices, flags_to_changepoints, nab_tally, NabProfile, NabTally};
use crate::synthetic::{generate_synthetic_in, AnomalySpec};
use crate::tensor::Tensor;
use crate::train::{train_with_validation, TrainConfig, TrainReport};

/// A series whose first `train_rows` rows are anomaly-free.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSeries {
    pub name: String,
    /// `[L, F]`
    pub series: Tensor,
    pub anomaly: Vec<bool>,
    /// Without changepoint labels, the edges of the anomaly labels are used.
    pub changepoint: Option<Vec<bool>>,
    pub train_rows: usize,
}

impl LabeledSeries {
    fn len(&self) -> usize {
        self.series.shape()[0]
    }

    fn check(&self, timesteps: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(format!("{}: {m}", self.name)));
        if self.series.rank() != 2 {
            return bad("series must be [L, F]".into());
        }
        let l = self.len();
        if self.anomaly.len() != l || self.changepoint.as_ref().is_some_and(|c| c.len() != l) {
            return bad(format!("labels do not cover all {l} rows"));
        }
        if self.train_rows >= l || l - self.train_rows < timesteps {
            return bad(format!(
                "{} training rows leave no test window of {timesteps} rows in {l}",
                self.train_rows
            ));
        }
        if self.anomaly[..self.train_rows].iter().any(|&a| a) {
            return bad("the training slice contains labeled anomalies".into());
        }
        Ok(())
    }

    /// Changepoint labels for the test rows.
    fn test_changepoints(&self) -> Vec<bool> {
        match &self.changepoint {
            Some(c) => c[self.train_rows..].to_vec(),
            None => {
                let mut edges = flags_to_changepoints(&self.anomaly);
                if self.anomaly[self.train_rows] {
                    edges[self.train_rows] = true;
                }
                edges[self.train_rows..].to_vec()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub sensitivity: f64,
    pub n_runs: usize,
    /// Run `r` uses seed `base_seed + r`.
    pub base_seed: u64,
    /// Width of the NAB scoring windows; `None` derives it from the series.
    pub nab_window: Option<f64>,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.sensitivity > 0.0 && self.sensitivity.is_finite()) {
            return Err(Error::Config(format!("sensitivity must be positive, got {}", self.sensitivity)));
        }
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be at least 1".into()));
        }
        if let Some(w) = self.nab_window {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("nab_window must be positive, got {w}")));
            }
        }
        Ok(())
    }
}

/// Seed for dataset `index` (in name order) within a run seeded `run_seed`.
pub fn dataset_seed(run_seed: u64, index: usize) -> u64 {
    run_seed.wrapping_mul(1000).wrapping_add(index as u64)
}

/// A model trained on one series' clean slice, with its thresholds.
#[derive(Debug, Clone)]
pub struct FittedDetector {
    pub model: Model,
    pub stats: NormalizerStats,
    pub profile: ThresholdProfile,
    pub report: TrainReport,
}

impl FittedDetector {
    /// Point flags for raw (unnormalized) rows.
    pub fn detect_rows(&self, rows: &Tensor) -> Result<PointLabels> {
        let windows = normalized_windows(&self.stats, rows, self.model.spec().timesteps)?;
        detect(&self.model, &self.profile, &windows)
    }
}

/// Normalizes, trains and calibrates on the clean slice of `ds`.
pub fn fit_dataset(ds: &LabeledSeries, cfg: &BenchConfig, seed: u64) -> Result<FittedDetector> {
    let t = cfg.model.timesteps;
    ds.check(t)?;
    if ds.series.shape()[1] != cfg.model.n_features {
        return Err(Error::Dataset(format!(
            "{}: {} features, model expects {}",
            ds.name,
            ds.series.shape()[1],
            cfg.model.n_features
        )));
    }
    let clean = slice_rows(&ds.series, 0, ds.train_rows)?;
    let prepared = prepare_training_data(&clean, t, cfg.train.val_fraction)?;
    let mut model = Model::build(&ModelSpec {
        seed,
        ..cfg.model.clone()
    })?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let report = train_with_validation(&mut model, &prepared.train, &prepared.val, &train_cfg)?;
    let all_clean = normalized_windows(&prepared.stats, &clean, t)?;
    let profile = calibrate(&model, &all_clean, cfg.sensitivity)?;
    Ok(FittedDetector {
        model,
        stats: prepared.stats,
        profile,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetScores {
    pub name: String,
    pub counts: ConfusionCounts,
    pub f1: f64,
    pub far: f64,
    pub mar: f64,
    /// Standard, lowFP, lowFN.
    pub nab: [f64; 3],
    pub nab_tallies: [NabTally; 3],
    pub scaled_average: f64,
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
}

/// Scores a fitted detector on the labeled tail of `ds`.
pub fn score_dataset(ds: &LabeledSeries, fitted: &FittedDetector, nab_window: Option<f64>) -> Result<DatasetScores> {
    let test = slice_rows(&ds.series, ds.train_rows, ds.len())?;
    let truth = &ds.anomaly[ds.train_rows..];
    let flags = fitted.detect_rows(&test)?.flags;
    let counts = confusion(&flags, truth)?;
    let (far, mar) = far_mar(&counts).map_err(|e| Error::Dataset(format!("{}: {e}", ds.name)))?;
    let cps = ds.test_changepoints();
    if !cps.iter().any(|&c| c) {
        return Err(Error::Dataset(format!("{}: no changepoints in the test rows", ds.name)));
    }
    let windows = changepoint_windows(&cps, nab_window)?;
    let detections = flag_indices(&flags_to_changepoints(&flags));
    let mut nab = [0.0; 3];
    let mut tallies = [NabTally::default(); 3];
    for (k, p) in NabProfile::ALL.iter().enumerate() {
        tallies[k] = nab_tally(&detections, &windows, p)?;
        nab[k] = tallies[k].normalized()?;
    }
    let f = f1(&counts);
    Ok(DatasetScores {
        name: ds.name.clone(),
        counts,
        f1: f,
        far,
        mar,
        nab,
        nab_tallies: tallies,
        scaled_average: scaled_average(f, nab[0]),
        epochs_run: fitted.report.epochs_run(),
        final_train_loss: fitted.report.final_train_loss,
        final_val_loss: fitted.report.final_val_loss,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AggregateScores {
    pub f1: f64,
    pub far: f64,
    pub mar: f64,
    pub nab: [f64; 3],
    pub scaled_average: f64,
}

impl AggregateScores {
    /// Per-dataset means.
    pub fn mean_of(scores: &[DatasetScores]) -> AggregateScores {
        let n = scores.len() as f64;
        let mean = |f: &dyn Fn(&DatasetScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
        let nab = [0, 1, 2].map(|k| mean(&|s| s.nab[k]));
        let f1 = mean(&|s| s.f1);
        AggregateScores {
            f1,
            far: mean(&|s| s.far),
            mar: mean(&|s| s.mar),
            nab,
            scaled_average: scaled_average(f1, nab[0]),
        }
    }

    /// Counts and NAB tallies summed over datasets before scoring.
    pub fn pooled(scores: &[DatasetScores]) -> Result<AggregateScores> {
        let counts = scores.iter().fold(ConfusionCounts::default(), |a, s| a + s.counts);
        let (far, mar) = far_mar(&counts)?;
        let mut nab = [0.0; 3];
        for (k, v) in nab.iter_mut().enumerate() {
            *v = scores
                .iter()
                .fold(NabTally::default(), |a, s| a + s.nab_tallies[k])
                .normalized()?;
        }
        let f = f1(&counts);
        Ok(AggregateScores {
            f1: f,
            far,
            mar,
            nab,
            scaled_average: scaled_average(f, nab[0]),
        })
    }

    fn mean_over(runs: &[AggregateScores]) -> AggregateScores {
        let n = runs.len() as f64;
        let mean = |f: &dyn Fn(&AggregateScores) -> f64| runs.iter().map(f).sum::<f64>() / n;
        AggregateScores {
            f1: mean(&|a| a.f1),
            far: mean(&|a| a.far),
            mar: mean(&|a| a.mar),
            nab: [0, 1, 2].map(|k| mean(&|a| a.nab[k])),
            scaled_average: mean(&|a| a.scaled_average),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    /// In dataset-name order.
    pub datasets: Vec<DatasetScores>,
    pub aggregate: AggregateScores,
    pub pooled: AggregateScores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkResult {
    pub sensitivity: f64,
    pub runs: Vec<RunResult>,
    pub mean: AggregateScores,
    /// F1, FAR and MAR from the run with the best aggregate F1; NAB scores
    /// from the run with the best aggregate standard NAB.
    pub best: AggregateScores,
    pub best_outlier_run: usize,
    pub best_changepoint_run: usize,
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn run_benchmark(datasets: &[LabeledSeries], cfg: &BenchConfig) -> Result<BenchmarkResult> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::Dataset("no datasets to benchmark".into()));
    }
    let mut ordered: Vec<&LabeledSeries> = datasets.iter().collect();
    ordered.sort_by(|a, b| a.name.cmp(&b.name));
    if ordered.windows(2).any(|w| w[0].name == w[1].name) {
        return Err(Error::Dataset("dataset names must be unique".into()));
    }
    for ds in &ordered {
        ds.check(cfg.model.timesteps)?;
    }

    let mut runs = Vec::with_capacity(cfg.n_runs);
    for r in 0..cfg.n_runs {
        let seed = cfg.base_seed.wrapping_add(r as u64);
        let mut scores = Vec::with_capacity(ordered.len());
        for (i, ds) in ordered.iter().enumerate() {
            let fitted = fit_dataset(ds, cfg, dataset_seed(seed, i))?;
            scores.push(score_dataset(ds, &fitted, cfg.nab_window)?);
        }
        runs.push(RunResult {
            seed,
            aggregate: AggregateScores::mean_of(&scores),
            pooled: AggregateScores::pooled(&scores)?,
            datasets: scores,
        });
    }

    let aggregates: Vec<AggregateScores> = runs.iter().map(|r| r.aggregate).collect();
    let best_outlier_run = argmax(aggregates.iter().map(|a| a.f1));
    let best_changepoint_run = argmax(aggregates.iter().map(|a| a.nab[0]));
    let (bo, bc) = (aggregates[best_outlier_run], aggregates[best_changepoint_run]);
    Ok(BenchmarkResult {
        sensitivity: cfg.sensitivity,
        mean: AggregateScores::mean_over(&aggregates),
        best: AggregateScores {
            f1: bo.f1,
            far: bo.far,
            mar: bo.mar,
            nab: bc.nab,
            scaled_average: scaled_average(bo.f1, bc.nab[0]),
        },
        best_outlier_run,
        best_changepoint_run,
        runs,
    })
}

/// Column order of [`BenchmarkResult::report`].
pub const REPORT_COLUMNS: &str = "run,seed,dataset,f1,far_pct,mar_pct,nab_standard,nab_low_fp,nab_low_fn,scaled_average,tp,fp,fn,tn,epochs_run,final_train_loss,final_val_loss";

/// Column order of [`BenchmarkResult::leaderboard_row`].
pub const LEADERBOARD_COLUMNS: &str = "method,sensitivity,n_runs,f1_mean,far_mean,mar_mean,nab_standard_mean,nab_low_fp_mean,nab_low_fn_mean,scaled_average_mean,f1_best,far_best,mar_best,nab_standard_best,nab_low_fp_best,nab_low_fn_best,scaled_average_best,config_sha256";

fn agg_fields(a: &AggregateScores) -> String {
    format!(
        "{:.6},{:.4},{:.4},{:.4},{:.4},{:.4},{:.6}",
        a.f1, a.far, a.mar, a.nab[0], a.nab[1], a.nab[2], a.scaled_average
    )
}

impl BenchmarkResult {
    /// One row per dataset and run, then per-run `mean` (over datasets) and
    /// `pooled` rows, then `mean` and `best` rows over runs. Aggregate rows
    /// leave count and loss columns empty.
    pub fn report(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{REPORT_COLUMNS}").unwrap();
        for (r, run) in self.runs.iter().enumerate() {
            for d in &run.datasets {
                let c = d.counts;
                let agg = AggregateScores {
                    f1: d.f1,
                    far: d.far,
                    mar: d.mar,
                    nab: d.nab,
                    scaled_average: d.scaled_average,
                };
                writeln!(
                    s,
                    "{r},{},{},{},{},{},{},{},{},{:.6e},{:.6e}",
                    run.seed,
                    d.name,
                    agg_fields(&agg),
                    c.tp,
                    c.fp,
                    c.fn_,
                    c.tn,
                    d.epochs_run,
                    d.final_train_loss,
                    d.final_val_loss
                )
                .unwrap();
            }
            writeln!(s, "{r},{},@mean,{},,,,,,,", run.seed, agg_fields(&run.aggregate)).unwrap();
            writeln!(s, "{r},{},@pooled,{},,,,,,,", run.seed, agg_fields(&run.pooled)).unwrap();
        }
        writeln!(s, "mean,,@all,{},,,,,,,", agg_fields(&self.mean)).unwrap();
        writeln!(
            s,
            "best,{}/{},@all,{},,,,,,,",
            self.runs[self.best_outlier_run].seed,
            self.runs[self.best_changepoint_run].seed,
            agg_fields(&self.best)
        )
        .unwrap();
        s
    }

    pub fn leaderboard_row(&self, method: &str, config_sha256: &str) -> String {
        format!(
            "{method},{},{},{},{},{config_sha256}",
            self.sensitivity,
            self.runs.len(),
            agg_fields(&self.mean),
            agg_fields(&self.best)
        )
    }
}

/// Seeded synthetic benchmark: each series has a clean head of
/// `train_rows` rows and anomalies confined to the following `test_rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSuite {
    pub n_datasets: usize,
    pub n_features: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub anomalies: AnomalySpec,
    /// Dataset `i` is generated from seed `seed + i`.
    pub seed: u64,
}

impl Default for SyntheticSuite {
    fn default() -> Self {
        SyntheticSuite {
            n_datasets: 5,
            n_features: 3,
            train_rows: 1200,
            test_rows: 400,
            anomalies: AnomalySpec {
                count: 2,
                magnitude: 2.0,
                width: 80,
                kind: None,
            },
            seed: 100,
        }
    }
}

impl SyntheticSuite {
    pub fn build(&self) -> Result<Vec<LabeledSeries>> {
        self.generate(&self.anomalies)
    }

    /// The same series without anomalies.
    pub fn build_clean(&self) -> Result<Vec<LabeledSeries>> {
        self.generate(&AnomalySpec::none())
    }

    fn generate(&self, spec: &AnomalySpec) -> Result<Vec<LabeledSeries>> {
        let len = self.train_rows + self.test_rows;
        (0..self.n_datasets)
            .map(|i| {
                let s = generate_synthetic_in(
                    self.n_features,
                    len,
                    spec,
                    self.train_rows..len,
                    self.seed.wrapping_add(i as u64),
                )?;
                Ok(LabeledSeries {
                    name: format!("synthetic-{i:02}"),
                    series: s.series,
                    anomaly: s.labels,
                    changepoint: Some(s.changepoints),
                    train_rows: self.train_rows,
                })
            })
            .collect()
    }
}
