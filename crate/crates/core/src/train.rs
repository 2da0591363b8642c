//! Reconstruction training with Adam, MSE loss and early stopping.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::autodiff::Graph;
use crate::data::{split_windows, WindowedDataset};
use crate::error::{Error, Result};
use crate::layers::ModelRng;
use crate::model::{Mode, Model};
use crate::optim::{adam_step, AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub early_stop_patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 0.001,
            batch_size: 64,
            adam: AdamConfig::default(),
            early_stop_patience: 20,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.early_stop_patience > self.epochs {
            return bad(format!(
                "early_stop_patience {} exceeds epochs {}",
                self.early_stop_patience, self.epochs
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training-mode batch loss per epoch.
    pub train_loss_curve: Vec<f64>,
    /// Inference-mode validation loss per epoch.
    pub val_loss_curve: Vec<f64>,
    /// Zero-based epoch whose weights were kept.
    pub best_epoch: usize,
    /// Inference-mode training loss of the kept weights.
    pub final_train_loss: f64,
    /// Validation loss of the kept weights.
    pub final_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.val_loss_curve.len()
    }

    /// `key = value` lines; loss curves are comma-separated.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.12e}")).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        writeln!(s, "epochs_run = {}", self.epochs_run()).unwrap();
        writeln!(s, "best_epoch = {}", self.best_epoch).unwrap();
        writeln!(s, "stopped_early = {}", self.stopped_early).unwrap();
        writeln!(s, "final_train_loss = {:.12e}", self.final_train_loss).unwrap();
        writeln!(s, "final_val_loss = {:.12e}", self.final_val_loss).unwrap();
        writeln!(s, "overfit_percent = {:.6}", overfit_percentage(self.final_train_loss, self.final_val_loss).unwrap_or(f64::NAN)).unwrap();
        writeln!(s, "train_loss_curve = {}", join(&self.train_loss_curve)).unwrap();
        writeln!(s, "val_loss_curve = {}", join(&self.val_loss_curve)).unwrap();
        s
    }
}

/// Patience-based stopping on a monitored loss; only strict improvements
/// reset the counter.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
        }
    }

    /// Records an epoch's loss; returns true if it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.wait = 0;
            true
        } else {
            self.wait += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.wait > 0 && self.wait >= self.patience
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

/// Inference-mode mean squared reconstruction error over every element.
pub fn evaluate_loss(model: &Model, data: &WindowedDataset, chunk: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let recon = model.reconstruct(&data.windows, chunk)?;
    let sum: f64 = recon
        .data()
        .iter()
        .zip(data.windows.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / recon.numel() as f64)
}

fn check_compatible(model: &Model, data: &WindowedDataset, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::contract(format!("{what} set is empty")));
    }
    let spec = model.spec();
    if data.timesteps() != spec.timesteps || data.n_features() != spec.n_features {
        return Err(Error::shape(format!(
            "{what} windows are [T={}, F={}] but the model expects [T={}, F={}]",
            data.timesteps(),
            data.n_features(),
            spec.timesteps,
            spec.n_features
        )));
    }
    Ok(())
}

/// Splits `data` chronologically per `cfg.val_fraction`, then trains.
pub fn train(model: &mut Model, data: &WindowedDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let (tr, va) = split_windows(data, cfg.val_fraction)?;
    train_with_validation(model, &tr, &va, cfg)
}

/// Trains on `train_set`, early-stopping on `val_set`, and restores the
/// weights with the best validation loss.
pub fn train_with_validation(
    model: &mut Model,
    train_set: &WindowedDataset,
    val_set: &WindowedDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_compatible(model, train_set, "training")?;
    check_compatible(model, val_set, "validation")?;

    let mut shuffle_rng = ModelRng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ModelRng::seed_from_u64(cfg.seed ^ 0x5DEE_CE66_D1CE_5EED);
    let mut adam = AdamState::new(model.parameters().into_iter().map(|(_, t)| t), cfg.adam);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best_params = model.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let x = train_set.gather(batch)?;
            let mut g = Graph::new();
            let params = model.bind(&mut g);
            let xv = g.constant(x);
            let y = model.forward_graph(&mut g, &params, xv, Mode::Training(&mut dropout_rng))?;
            let diff = g.sub(y, xv)?;
            let sq = g.mul(diff, diff)?;
            let loss = g.mean(sq);
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            g.backward(loss)?;
            let grads: Vec<&[f64]> = params
                .iter()
                .map(|&p| g.grad(p).expect("every parameter reaches the loss"))
                .collect();
            adam_step(&mut model.parameters_mut(), &grads, &mut adam, cfg.learning_rate)?;
            loss_sum += value;
            batches += 1;
        }
        train_curve.push(loss_sum / batches as f64);

        let val = evaluate_loss(model, val_set, cfg.batch_size)?;
        if !val.is_finite() {
            return Err(Error::Diverged { epoch, loss: val });
        }
        val_curve.push(val);
        if stopper.observe(epoch, val) {
            best_params = model.clone();
        }
        if stopper.should_stop() {
            stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }

    *model = best_params;
    let (best_epoch, best_val) = stopper.best();
    Ok(TrainReport {
        train_loss_curve: train_curve,
        val_loss_curve: val_curve,
        best_epoch,
        final_train_loss: evaluate_loss(model, train_set, cfg.batch_size)?,
        final_val_loss: best_val,
        stopped_early,
    })
}

/// `100 * (val - train) / train`.
pub fn overfit_percentage(train_loss: f64, val_loss: f64) -> Result<f64> {
    if train_loss <= 0.0 || train_loss.is_nan() {
        return Err(Error::contract(format!("training loss must be positive, got {train_loss}")));
    }
    Ok(100.0 * (val_loss - train_loss) / train_loss)
}

/// `100 * (without - with) / without`: relative validation-loss reduction.
pub fn val_loss_improvement(caps_val: f64, nocaps_val: f64) -> Result<f64> {
    if nocaps_val <= 0.0 || nocaps_val.is_nan() {
        return Err(Error::contract(format!("reference loss must be positive, got {nocaps_val}")));
    }
    Ok(100.0 * (nocaps_val - caps_val) / nocaps_val)
}
