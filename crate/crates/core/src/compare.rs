//! Side-by-side training of several designs over repeated seeds.

use std::fmt::Write as _;

use crate::data::prepare_training_data;
use crate::error::{Error, Result};
use crate::model::{Design, Model, ModelSpec};
use crate::tensor::Tensor;
use crate::train::{overfit_percentage, train_with_validation, val_loss_improvement, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DesignRun {
    pub seed: u64,
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub overfit_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignSummary {
    pub spec: ModelSpec,
    pub parameter_count: usize,
    pub runs: Vec<DesignRun>,
    pub avg_train_loss: f64,
    pub avg_val_loss: f64,
    /// Losses of the run with the lowest validation loss.
    pub best_train_loss: f64,
    pub best_val_loss: f64,
    /// Overfitting of the averaged losses.
    pub overfit_pct: f64,
    /// Mean of the per-run overfitting percentages.
    pub mean_run_overfit_pct: f64,
    /// Validation-loss reduction against the capsule-free counterpart
    /// (A against B, C against D); `None` for designs without capsules or
    /// when the counterpart was not run.
    pub val_improvement_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignComparison {
    pub designs: Vec<DesignSummary>,
}

fn counterpart(d: Design) -> Option<Design> {
    match d {
        Design::A => Some(Design::B),
        Design::C => Some(Design::D),
        Design::B | Design::D => None,
    }
}

/// Trains every spec once per entry of `series`; run `i` uses `series[i]`
/// and seed `base_seed + i` for initialization, shuffling and dropout.
pub fn compare_designs(
    specs: &[ModelSpec],
    series: &[Tensor],
    cfg: &TrainConfig,
    base_seed: u64,
) -> Result<DesignComparison> {
    cfg.validate()?;
    if specs.is_empty() || series.is_empty() {
        return Err(Error::Config("need at least one design and one series".into()));
    }
    let mut designs = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate()?;
        let mut runs = Vec::with_capacity(series.len());
        for (i, s) in series.iter().enumerate() {
            let seed = base_seed.wrapping_add(i as u64);
            let data = prepare_training_data(s, spec.timesteps, cfg.val_fraction)?;
            let mut model = Model::build(&ModelSpec { seed, ..spec.clone() })?;
            let report = train_with_validation(&mut model, &data.train, &data.val, &TrainConfig { seed, ..cfg.clone() })?;
            runs.push(DesignRun {
                seed,
                epochs_run: report.epochs_run(),
                final_train_loss: report.final_train_loss,
                final_val_loss: report.final_val_loss,
                overfit_pct: overfit_percentage(report.final_train_loss, report.final_val_loss)?,
            });
        }
        let n = runs.len() as f64;
        let avg_train_loss = runs.iter().map(|r| r.final_train_loss).sum::<f64>() / n;
        let avg_val_loss = runs.iter().map(|r| r.final_val_loss).sum::<f64>() / n;
        let best = runs
            .iter()
            .min_by(|a, b| a.final_val_loss.total_cmp(&b.final_val_loss))
            .expect("at least one run");
        designs.push(DesignSummary {
            spec: spec.clone(),
            parameter_count: Model::build(spec)?.parameter_count(),
            best_train_loss: best.final_train_loss,
            best_val_loss: best.final_val_loss,
            overfit_pct: overfit_percentage(avg_train_loss, avg_val_loss)?,
            mean_run_overfit_pct: runs.iter().map(|r| r.overfit_pct).sum::<f64>() / n,
            avg_train_loss,
            avg_val_loss,
            val_improvement_pct: None,
            runs,
        });
    }
    let val_by_design: Vec<(Design, f64)> = designs.iter().map(|d| (d.spec.design, d.avg_val_loss)).collect();
    for d in &mut designs {
        if let Some(other) = counterpart(d.spec.design) {
            if let Some(&(_, nocaps)) = val_by_design.iter().find(|(x, _)| *x == other) {
                d.val_improvement_pct = Some(val_loss_improvement(d.avg_val_loss, nocaps)?);
            }
        }
    }
    Ok(DesignComparison { designs })
}

pub const COMPARISON_COLUMNS: &str = "design,parameters,avg_final_train_loss,avg_final_val_loss,best_final_train_loss,best_final_val_loss,overfit_pct,mean_run_overfit_pct,val_loss_improvement_pct";

impl DesignComparison {
    pub fn get(&self, design: Design) -> Option<&DesignSummary> {
        self.designs.iter().find(|d| d.spec.design == design)
    }

    /// One row per design; the improvement column reads `N/A` where it does
    /// not apply.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{COMPARISON_COLUMNS}").unwrap();
        for d in &self.designs {
            let imp = d.val_improvement_pct.map_or("N/A".to_string(), |v| format!("{v:.2}"));
            writeln!(
                s,
                "{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.2},{:.2},{imp}",
                d.spec.design,
                d.parameter_count,
                d.avg_train_loss,
                d.avg_val_loss,
                d.best_train_loss,
                d.best_val_loss,
                d.overfit_pct,
                d.mean_run_overfit_pct
            )
            .unwrap();
        }
        s
    }

    /// Per-run losses, one row per design and seed.
    pub fn runs_table(&self) -> String {
        let mut s = String::from("design,seed,epochs_run,final_train_loss,final_val_loss,overfit_pct\n");
        for d in &self.designs {
            for r in &d.runs {
                writeln!(
                    s,
                    "{},{},{},{:.6e},{:.6e},{:.2}",
                    d.spec.design, r.seed, r.epochs_run, r.final_train_loss, r.final_val_loss, r.overfit_pct
                )
                .unwrap();
            }
        }
        s
    }
}
