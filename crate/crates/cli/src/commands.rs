//! The five commands. Each one checks its inputs, computes every artifact in
//! memory, and only then creates the output directory and writes files, so a
//! failed run leaves nothing behind.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use lstmcaps::bench::{run_benchmark, BenchConfig, LabeledSeries, SyntheticSuite, LEADERBOARD_COLUMNS};
use lstmcaps::checkpoint;
use lstmcaps::compare::compare_designs;
use lstmcaps::data::{normalized_windows, prepare_training_data, slice_rows};
use lstmcaps::detector::{calibrate, detect, error_histogram, ThresholdProfile};
use lstmcaps::io::{csv_bytes, load_csv, LoadedSeries, SeriesFile};
use lstmcaps::metrics::{confusion, f1, far_mar};
use lstmcaps::model::{matched_quartet, Design, Model, ModelSpec};
use lstmcaps::nab::{changepoint_windows, flag_indices, flags_to_changepoints, nab_tally, NabProfile};
use lstmcaps::synthetic::generate_synthetic;
use lstmcaps::train::train_with_validation;
use sha2::{Digest, Sha256};

use crate::config::{LabelColumn, RunConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const PROFILE_FILE: &str = "profile.json";
pub const MANIFEST_FILE: &str = "manifest.txt";
/// Wall-clock timings; the only output that differs between identical runs.
pub const TIMING_FILE: &str = "timing.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Detect,
    Benchmark,
    CompareDesigns,
    Generate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Detect => "detect",
            Command::Benchmark => "benchmark",
            Command::CompareDesigns => "compare-designs",
            Command::Generate => "generate",
        }
    }
}

struct Outputs {
    files: Vec<(String, Vec<u8>)>,
    inputs: Vec<PathBuf>,
    notes: Vec<String>,
}

impl Outputs {
    fn new() -> Self {
        Outputs {
            files: Vec::new(),
            inputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn require<'a>(v: &'a Option<PathBuf>, key: &str, cmd: Command) -> Result<&'a PathBuf> {
    match v {
        Some(p) => Ok(p),
        None => bail!("{} needs the '{key}' config key", cmd.name()),
    }
}

fn require_file(p: &Path) -> Result<()> {
    ensure!(p.is_file(), "input file {} does not exist", p.display());
    Ok(())
}

/// Checks that every input the command reads is present.
fn preflight(cmd: Command, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Command::Train => require_file(require(&cfg.train_data, "train_data", cmd)?),
        Command::Detect => {
            require_file(require(&cfg.test_data, "test_data", cmd)?)?;
            let dir = require(&cfg.model_dir, "model_dir", cmd)?;
            require_file(&dir.join(CHECKPOINT_FILE))?;
            require_file(&dir.join(PROFILE_FILE))
        }
        Command::Benchmark => match &cfg.dataset_dir {
            Some(d) => {
                ensure!(d.is_dir(), "dataset directory {} does not exist", d.display());
                Ok(())
            }
            None => Ok(()),
        },
        Command::CompareDesigns => match &cfg.train_data {
            Some(p) => require_file(p),
            None => Ok(()),
        },
        Command::Generate => Ok(()),
    }
}

/// Runs `cmd` and writes its artifacts and a manifest into `out`.
pub fn run(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    preflight(cmd, cfg)?;
    let started = Instant::now();
    let mut o = Outputs::new();
    match cmd {
        Command::Train => cmd_train(cfg, &mut o)?,
        Command::Detect => cmd_detect(cfg, &mut o)?,
        Command::Benchmark => cmd_benchmark(cfg, &mut o)?,
        Command::CompareDesigns => cmd_compare(cfg, &mut o)?,
        Command::Generate => cmd_generate(cfg, &mut o)?,
    }
    let elapsed = started.elapsed().as_secs_f64();

    let mut manifest = String::new();
    writeln!(manifest, "command = {}", cmd.name())?;
    writeln!(manifest, "version = {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(manifest, "config_sha256 = {}", cfg.sha256())?;
    writeln!(manifest, "seed = {}", cfg.model.seed)?;
    for p in &o.inputs {
        let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        writeln!(manifest, "input = {} sha256={}", p.display(), sha256_hex(&bytes))?;
    }
    for (name, bytes) in &o.files {
        writeln!(manifest, "output = {name} sha256={}", sha256_hex(bytes))?;
    }
    for n in &o.notes {
        writeln!(manifest, "note = {n}")?;
    }
    o.add("config.txt", cfg.canonical_text());
    o.add(MANIFEST_FILE, manifest);
    o.add(TIMING_FILE, format!("wall_seconds = {elapsed:.3}\n"));

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, bytes) in &o.files {
        let path = out.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn header_has(path: &Path, delimiter: u8, name: &str) -> Result<bool> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().next().unwrap_or("");
    Ok(first.split(delimiter as char).any(|h| h.trim() == name))
}

fn series_file(cfg: &RunConfig, path: &Path) -> Result<SeriesFile> {
    if cfg.skab_preset {
        return Ok(SeriesFile {
            feature_columns: cfg.feature_columns.clone(),
            ..SeriesFile::skab(path)
        });
    }
    let label = |c: &LabelColumn| -> Result<Option<String>> {
        Ok(match c {
            LabelColumn::None => None,
            LabelColumn::Named(n) => Some(n.clone()),
            LabelColumn::Auto(n) => header_has(path, cfg.delimiter, n)?.then(|| n.clone()),
        })
    };
    Ok(SeriesFile {
        path: path.to_path_buf(),
        delimiter: cfg.delimiter,
        timestamp_column: cfg.timestamp_column.clone(),
        feature_columns: cfg.feature_columns.clone(),
        anomaly_column: label(&cfg.anomaly_column)?,
        changepoint_column: label(&cfg.changepoint_column)?,
    })
}

fn load(cfg: &RunConfig, path: &Path, o: &mut Outputs) -> Result<LoadedSeries> {
    o.inputs.push(path.to_path_buf());
    Ok(load_csv(&series_file(cfg, path)?)?)
}

fn cmd_train(cfg: &RunConfig, o: &mut Outputs) -> Result<()> {
    let path = cfg.train_data.as_ref().expect("checked in preflight");
    let data = load(cfg, path, o)?;
    let rows = cfg.train_rows.min(data.series.shape()[0]);
    if let Some(a) = &data.anomaly {
        ensure!(!a[..rows].iter().any(|&x| x), "the first {rows} training rows contain labeled anomalies");
    }
    let clean = slice_rows(&data.series, 0, rows)?;
    let spec = cfg.model_for(clean.shape()[1]);
    let prepared = prepare_training_data(&clean, spec.timesteps, cfg.train.val_fraction)?;
    let mut model = Model::build(&spec)?;
    let report = train_with_validation(&mut model, &prepared.train, &prepared.val, &cfg.train)?;
    let all = normalized_windows(&prepared.stats, &clean, spec.timesteps)?;
    let profile = calibrate(&model, &all, 1.0)?;

    let mut text = format!(
        "design = {}\nparameters = {}\ntraining_rows = {rows}\n",
        spec.design,
        model.parameter_count()
    );
    text.push_str(&report.to_text());
    o.add("train_report.txt", text);
    o.add(CHECKPOINT_FILE, checkpoint::to_bytes(&model, Some(&prepared.stats)));
    o.add(PROFILE_FILE, serde_json::to_vec(&profile)?);
    Ok(())
}

fn cmd_detect(cfg: &RunConfig, o: &mut Outputs) -> Result<()> {
    let dir = cfg.model_dir.as_ref().expect("checked in preflight");
    let ckpt = dir.join(CHECKPOINT_FILE);
    let prof = dir.join(PROFILE_FILE);
    o.inputs.push(ckpt.clone());
    o.inputs.push(prof.clone());
    let (model, stats) = checkpoint::load(&ckpt)?;
    let stats = stats.context("checkpoint carries no normalizer statistics")?;
    let profile: ThresholdProfile =
        serde_json::from_slice(&fs::read(&prof)?).with_context(|| format!("parsing {}", prof.display()))?;
    let profile = profile.with_sensitivity(cfg.sensitivity)?;
    let test = load(cfg, cfg.test_data.as_ref().expect("checked in preflight"), o)?;
    let windows = normalized_windows(&stats, &test.series, model.spec().timesteps)?;
    let labels = detect(&model, &profile, &windows)?;
    o.add("labels.csv", labels.to_csv());
    for j in 0..profile.n_features() {
        o.add(format!("histogram-f{j}.csv"), error_histogram(&profile, j, cfg.histogram_bins)?.to_csv());
    }

    let mut s = String::new();
    writeln!(s, "sensitivity = {}", cfg.sensitivity)?;
    writeln!(s, "flagged_points = {}", labels.flagged_count())?;
    if let Some(truth) = &test.anomaly {
        let c = confusion(&labels.flags, truth)?;
        writeln!(s, "tp = {}\nfp = {}\nfn = {}\ntn = {}", c.tp, c.fp, c.fn_, c.tn)?;
        writeln!(s, "f1 = {:.6}", f1(&c))?;
        if let Ok((far, mar)) = far_mar(&c) {
            writeln!(s, "far_pct = {far:.4}\nmar_pct = {mar:.4}")?;
        }
        for j in 0..profile.n_features() {
            let per: Vec<bool> = labels.per_feature_flags.iter().map(|p| p[j]).collect();
            writeln!(s, "f1_feature_{j} = {:.6}", f1(&confusion(&per, truth)?))?;
        }
        let cps = test.changepoint.clone().unwrap_or_else(|| flags_to_changepoints(truth));
        if cps.iter().any(|&c| c) {
            let windows = changepoint_windows(&cps, cfg.nab_window)?;
            let dets = flag_indices(&flags_to_changepoints(&labels.flags));
            for p in NabProfile::ALL {
                writeln!(s, "nab_{} = {:.4}", p.name, nab_tally(&dets, &windows, &p)?.normalized()?)?;
            }
        }
    }
    o.add("scores.txt", s);
    Ok(())
}

/// Every `.csv` below `dir`, sorted by relative path.
fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn load_dataset_dir(cfg: &RunConfig, dir: &Path, o: &mut Outputs) -> Result<Vec<LabeledSeries>> {
    let mut datasets = Vec::new();
    for path in csv_files(dir)? {
        let spec = series_file(cfg, &path)?;
        let label = spec.anomaly_column.clone().unwrap_or_default();
        if label.is_empty() || !header_has(&path, spec.delimiter, &label)? {
            o.notes.push(format!("skipped {} (no anomaly labels)", path.display()));
            continue;
        }
        let data = load(cfg, &path, o)?;
        let name = path.strip_prefix(dir).unwrap_or(&path).display().to_string();
        datasets.push(LabeledSeries {
            name,
            series: data.series,
            anomaly: data.anomaly.expect("label column present"),
            changepoint: data.changepoint,
            train_rows: cfg.train_rows,
        });
    }
    ensure!(!datasets.is_empty(), "no labeled datasets under {}", dir.display());
    Ok(datasets)
}

fn synthetic_suite(cfg: &RunConfig) -> SyntheticSuite {
    SyntheticSuite {
        n_datasets: cfg.synthetic_datasets,
        n_features: cfg.model.n_features,
        train_rows: cfg.synthetic_train_rows,
        test_rows: cfg.synthetic_test_rows,
        anomalies: cfg.anomalies.clone(),
        seed: cfg.data_seed,
    }
}

fn cmd_benchmark(cfg: &RunConfig, o: &mut Outputs) -> Result<()> {
    let datasets = match &cfg.dataset_dir {
        Some(dir) => load_dataset_dir(cfg, dir, o)?,
        None => synthetic_suite(cfg).build()?,
    };
    let f = datasets[0].series.shape()[1];
    ensure!(
        datasets.iter().all(|d| d.series.shape()[1] == f),
        "datasets disagree on the feature count"
    );
    let bench = BenchConfig {
        model: cfg.model_for(f),
        train: cfg.train.clone(),
        sensitivity: cfg.sensitivity,
        n_runs: cfg.n_runs,
        base_seed: cfg.model.seed,
        nab_window: cfg.nab_window,
    };
    let result = run_benchmark(&datasets, &bench)?;
    o.add("benchmark_report.csv", result.report());
    let method = format!("design-{}", cfg.model.design);
    o.add(
        "leaderboard.csv",
        format!("{LEADERBOARD_COLUMNS}\n{}\n", result.leaderboard_row(&method, &cfg.sha256())),
    );
    Ok(())
}

fn cmd_compare(cfg: &RunConfig, o: &mut Outputs) -> Result<()> {
    let n_seeds = cfg.n_runs;
    let series = match &cfg.train_data {
        Some(p) => {
            let data = load(cfg, p, o)?;
            vec![data.series; n_seeds]
        }
        None => (0..n_seeds)
            .map(|i| {
                let s = generate_synthetic(
                    cfg.model.n_features,
                    cfg.compare_rows,
                    &lstmcaps::synthetic::AnomalySpec::none(),
                    cfg.data_seed.wrapping_add(i as u64),
                )?;
                Ok(s.series)
            })
            .collect::<Result<_>>()?,
    };
    let f = series[0].shape()[1];
    let base = ModelSpec {
        design: Design::A,
        ..cfg.model_for(f)
    };
    let specs: Vec<ModelSpec> = if cfg.match_parameters {
        matched_quartet(&base, cfg.max_width)?.to_vec()
    } else {
        Design::ALL.iter().map(|&d| ModelSpec { design: d, ..base.clone() }).collect()
    };
    let c = compare_designs(&specs, &series, &cfg.train, cfg.model.seed)?;
    o.add("comparison.csv", c.to_table());
    o.add("comparison_runs.csv", c.runs_table());
    Ok(())
}

fn cmd_generate(cfg: &RunConfig, o: &mut Outputs) -> Result<()> {
    let suite = synthetic_suite(cfg);
    let names: Vec<String> = (0..suite.n_features).map(|j| format!("f{j}")).collect();
    for ds in suite.build()? {
        let bytes = csv_bytes(&names, &ds.series, Some(&ds.anomaly), ds.changepoint.as_deref())?;
        o.add(format!("{}.csv", ds.name), bytes);
    }
    Ok(())
}
