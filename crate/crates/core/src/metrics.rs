//! Point-level confusion counts, F1, false/missed alarm rates and the
//! F1/NAB composite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

pub fn confusion(pred: &[bool], truth: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `TP / (TP + (FP + FN) / 2)`, or 0 when nothing was predicted or labeled.
pub fn f1(c: &ConfusionCounts) -> f64 {
    let denom = c.tp as f64 + 0.5 * (c.fp + c.fn_) as f64;
    if denom == 0.0 {
        0.0
    } else {
        c.tp as f64 / denom
    }
}

/// False-alarm and missed-alarm rates in percent.
pub fn far_mar(c: &ConfusionCounts) -> Result<(f64, f64)> {
    if c.fp + c.tn == 0 {
        return Err(Error::UndefinedRate("FAR needs at least one negative point".into()));
    }
    if c.fn_ + c.tp == 0 {
        return Err(Error::UndefinedRate("MAR needs at least one positive point".into()));
    }
    Ok((
        100.0 * c.fp as f64 / (c.fp + c.tn) as f64,
        100.0 * c.fn_ as f64 / (c.fn_ + c.tp) as f64,
    ))
}

/// `(F1 + NAB / 100) / 2`, with negative NAB clamped to 0.
pub fn scaled_average(f1: f64, nab_standard: f64) -> f64 {
    (f1 + nab_standard.max(0.0) / 100.0) / 2.0
}
