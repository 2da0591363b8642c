//! `key = value` run configuration.
//!
//! Every key has a default. Files and `--set` overrides may only name known
//! keys, and every value is parsed and range-checked before a command runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lstmcaps::layers::Routing;
use lstmcaps::model::{Design, ModelSpec};
use lstmcaps::optim::AdamConfig;
use lstmcaps::synthetic::{AnomalyKind, AnomalySpec};
use lstmcaps::train::TrainConfig;
use sha2::{Digest, Sha256};

/// Keys and defaults. An empty default means "unset".
const DEFAULTS: &[(&str, &str)] = &[
    // model
    ("design", "A"),
    ("timesteps", "64"),
    ("branch_width", "32"),
    ("encoder_layers", "1"),
    ("capsule_dim", "32"),
    ("routing", "uniform"),
    ("dropout_rate", "0.2"),
    // training
    ("epochs", "100"),
    ("learning_rate", "0.001"),
    ("batch_size", "64"),
    ("adam_beta1", "0.9"),
    ("adam_beta2", "0.999"),
    ("adam_epsilon", "1e-8"),
    ("early_stop_patience", "20"),
    ("val_fraction", "0.2"),
    ("seed", "0"),
    // detection and scoring
    ("sensitivity", "1.0"),
    ("histogram_bins", "20"),
    ("nab_window", ""),
    ("n_runs", "5"),
    // input files
    ("train_data", ""),
    ("test_data", ""),
    ("model_dir", ""),
    ("dataset_dir", ""),
    ("train_rows", "400"),
    ("skab_preset", "false"),
    ("delimiter", ","),
    ("timestamp_column", ""),
    ("feature_columns", ""),
    ("anomaly_column", "auto"),
    ("changepoint_column", "auto"),
    // synthetic data
    ("data_seed", "100"),
    ("synthetic_datasets", "5"),
    ("n_features", "3"),
    ("synthetic_train_rows", "1200"),
    ("synthetic_test_rows", "400"),
    ("anomaly_count", "2"),
    ("anomaly_magnitude", "2.0"),
    ("anomaly_width", "80"),
    ("anomaly_kind", "mixed"),
    // design comparison
    ("compare_rows", "300"),
    ("match_parameters", "true"),
    ("max_width", "64"),
];

/// Label column setting: `auto` uses the column when the file has it.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelColumn {
    None,
    Auto(String),
    Named(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    raw: BTreeMap<String, String>,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub sensitivity: f64,
    pub histogram_bins: usize,
    pub nab_window: Option<f64>,
    pub n_runs: usize,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub model_dir: Option<PathBuf>,
    pub dataset_dir: Option<PathBuf>,
    pub train_rows: usize,
    pub skab_preset: bool,
    pub delimiter: u8,
    pub timestamp_column: Option<String>,
    pub feature_columns: Option<Vec<String>>,
    pub anomaly_column: LabelColumn,
    pub changepoint_column: LabelColumn,
    pub data_seed: u64,
    pub synthetic_datasets: usize,
    pub synthetic_train_rows: usize,
    pub synthetic_test_rows: usize,
    pub anomalies: AnomalySpec,
    pub compare_rows: usize,
    pub match_parameters: bool,
    pub max_width: usize,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("config key '{key}': cannot parse '{v}': {e}"))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn parse_routing(v: &str) -> Result<Routing> {
    match v {
        "uniform" => Ok(Routing::Uniform),
        _ => match v.strip_prefix("dynamic:") {
            Some(n) => Ok(Routing::Dynamic {
                iterations: parse("routing", n)?,
            }),
            None => bail!("config key 'routing': expected 'uniform' or 'dynamic:N', got '{v}'"),
        },
    }
}

fn label_column(v: &str, default_name: &str) -> LabelColumn {
    match v {
        "" | "none" => LabelColumn::None,
        "auto" => LabelColumn::Auto(default_name.to_string()),
        _ => LabelColumn::Named(v.to_string()),
    }
}

/// Splits `key = value` text into pairs; `#` starts a comment line.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{origin}:{}: expected 'key = value', got '{line}'", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn defaults() -> Result<Self> {
        Self::from_pairs(Vec::new())
    }

    /// Reads an optional config file, then applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: Vec<(String, String)>) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                parse_pairs(&text, &p.display().to_string())?
            }
            None => Vec::new(),
        };
        pairs.extend(overrides);
        Self::from_pairs(pairs)
    }

    pub fn from_pairs(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut raw: BTreeMap<String, String> = DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in pairs {
            match raw.get_mut(&k) {
                Some(slot) => *slot = v,
                None => bail!("unknown config key '{k}'"),
            }
        }
        let g = |k: &str| raw[k].as_str();

        let design: Design = g("design").parse().map_err(|e| anyhow!("config key 'design': {e}"))?;
        let model = ModelSpec {
            design,
            n_features: parse("n_features", g("n_features"))?,
            timesteps: parse("timesteps", g("timesteps"))?,
            branch_width: parse("branch_width", g("branch_width"))?,
            encoder_layers: parse("encoder_layers", g("encoder_layers"))?,
            capsule_dim: parse("capsule_dim", g("capsule_dim"))?,
            routing: parse_routing(g("routing"))?,
            dropout_rate: parse("dropout_rate", g("dropout_rate"))?,
            seed: parse("seed", g("seed"))?,
        };
        model.validate()?;
        let train = TrainConfig {
            epochs: parse("epochs", g("epochs"))?,
            learning_rate: parse("learning_rate", g("learning_rate"))?,
            batch_size: parse("batch_size", g("batch_size"))?,
            adam: AdamConfig {
                beta1: parse("adam_beta1", g("adam_beta1"))?,
                beta2: parse("adam_beta2", g("adam_beta2"))?,
                eps: parse("adam_epsilon", g("adam_epsilon"))?,
            },
            early_stop_patience: parse("early_stop_patience", g("early_stop_patience"))?,
            val_fraction: parse("val_fraction", g("val_fraction"))?,
            seed: model.seed,
        };
        train.validate()?;
        let adam = train.adam;
        if !((0.0..1.0).contains(&adam.beta1) && (0.0..1.0).contains(&adam.beta2) && adam.eps > 0.0) {
            bail!("Adam needs 0 <= beta < 1 and a positive epsilon");
        }

        let sensitivity: f64 = parse("sensitivity", g("sensitivity"))?;
        if !(sensitivity > 0.0 && sensitivity.is_finite()) {
            bail!("config key 'sensitivity' must be positive, got {sensitivity}");
        }
        let nab_window = match g("nab_window") {
            "" => None,
            v => {
                let w: f64 = parse("nab_window", v)?;
                if !(w > 0.0 && w.is_finite()) {
                    bail!("config key 'nab_window' must be positive, got {w}");
                }
                Some(w)
            }
        };
        let delimiter = match g("delimiter") {
            "tab" | "\\t" => b'\t',
            d if d.len() == 1 => d.as_bytes()[0],
            d => bail!("config key 'delimiter' must be one character or 'tab', got '{d}'"),
        };
        let anomaly_kind = match g("anomaly_kind") {
            "mixed" => None,
            "level_shift" => Some(AnomalyKind::LevelShift),
            "spike_burst" => Some(AnomalyKind::SpikeBurst),
            k => bail!("config key 'anomaly_kind' must be mixed, level_shift or spike_burst, got '{k}'"),
        };
        let cfg = RunConfig {
            model,
            train,
            sensitivity,
            histogram_bins: parse("histogram_bins", g("histogram_bins"))?,
            nab_window,
            n_runs: parse("n_runs", g("n_runs"))?,
            train_data: opt_path(g("train_data")),
            test_data: opt_path(g("test_data")),
            model_dir: opt_path(g("model_dir")),
            dataset_dir: opt_path(g("dataset_dir")),
            train_rows: parse("train_rows", g("train_rows"))?,
            skab_preset: parse("skab_preset", g("skab_preset"))?,
            delimiter,
            timestamp_column: (!g("timestamp_column").is_empty()).then(|| g("timestamp_column").to_string()),
            feature_columns: (!g("feature_columns").is_empty())
                .then(|| g("feature_columns").split(',').map(|s| s.trim().to_string()).collect()),
            anomaly_column: label_column(g("anomaly_column"), "anomaly"),
            changepoint_column: label_column(g("changepoint_column"), "changepoint"),
            data_seed: parse("data_seed", g("data_seed"))?,
            synthetic_datasets: parse("synthetic_datasets", g("synthetic_datasets"))?,
            synthetic_train_rows: parse("synthetic_train_rows", g("synthetic_train_rows"))?,
            synthetic_test_rows: parse("synthetic_test_rows", g("synthetic_test_rows"))?,
            anomalies: AnomalySpec {
                count: parse("anomaly_count", g("anomaly_count"))?,
                magnitude: parse("anomaly_magnitude", g("anomaly_magnitude"))?,
                width: parse("anomaly_width", g("anomaly_width"))?,
                kind: anomaly_kind,
            },
            compare_rows: parse("compare_rows", g("compare_rows"))?,
            match_parameters: parse("match_parameters", g("match_parameters"))?,
            max_width: parse("max_width", g("max_width"))?,
            raw,
        };
        let positive = [
            ("histogram_bins", cfg.histogram_bins),
            ("n_runs", cfg.n_runs),
            ("train_rows", cfg.train_rows),
            ("synthetic_datasets", cfg.synthetic_datasets),
            ("synthetic_train_rows", cfg.synthetic_train_rows),
            ("synthetic_test_rows", cfg.synthetic_test_rows),
            ("compare_rows", cfg.compare_rows),
            ("max_width", cfg.max_width),
        ];
        for (k, v) in positive {
            if v == 0 {
                bail!("config key '{k}' must be at least 1");
            }
        }
        Ok(cfg)
    }

    /// Every key in sorted order, one `key = value` line each.
    pub fn canonical_text(&self) -> String {
        self.raw.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }

    /// Model spec with the feature count of the data at hand.
    pub fn model_for(&self, n_features: usize) -> ModelSpec {
        ModelSpec {
            n_features,
            ..self.model.clone()
        }
    }
}
