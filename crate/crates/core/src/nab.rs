//! NAB changepoint scoring, following the SKAB harness.
//!
//! Windows are closed intervals `[start, end]` in (possibly fractional)
//! series-index units. Within each window only the first detection counts,
//! scored by a tanh curve that falls from `a_tp` at the window start to
//! `a_fp` at its end. Detections outside every window cost a flat `a_fp`
//! each and undetected windows cost `a_fn`. Scores normalize so that no
//! detections give 0 and a detection at every window start gives 100.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Resolution of the positional scoring curve.
const DETAIL: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NabProfile {
    pub name: &'static str,
    pub a_tp: f64,
    pub a_fp: f64,
    pub a_fn: f64,
}

impl NabProfile {
    pub const STANDARD: NabProfile = NabProfile {
        name: "standard",
        a_tp: 1.0,
        a_fp: -0.11,
        a_fn: -1.0,
    };
    pub const LOW_FP: NabProfile = NabProfile {
        name: "lowFP",
        a_tp: 1.0,
        a_fp: -0.22,
        a_fn: -1.0,
    };
    pub const LOW_FN: NabProfile = NabProfile {
        name: "lowFN",
        a_tp: 1.0,
        a_fp: -0.11,
        a_fn: -2.0,
    };
    pub const ALL: [NabProfile; 3] = [Self::STANDARD, Self::LOW_FP, Self::LOW_FN];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NabWindow {
    pub start: f64,
    pub end: f64,
}

impl NabWindow {
    pub fn new(start: f64, end: f64) -> Self {
        NabWindow { start, end }
    }

    fn contains(&self, t: f64) -> bool {
        self.start <= t && t <= self.end
    }
}

/// Rejects empty or zero-width windows and windows that overlap or are out
/// of order. Consecutive windows may share an endpoint.
pub fn validate_windows(windows: &[NabWindow]) -> Result<()> {
    for w in windows {
        if !(w.start.is_finite() && w.end.is_finite() && w.start < w.end) {
            return Err(Error::contract(format!(
                "window [{}, {}] must have finite bounds and positive width",
                w.start, w.end
            )));
        }
    }
    for pair in windows.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(Error::contract(format!(
                "windows [{}, {}] and [{}, {}] overlap or are unsorted",
                pair[0].start, pair[0].end, pair[1].start, pair[1].end
            )));
        }
    }
    Ok(())
}

/// Unnormalized score with its null and perfect references. Tallies from
/// several series can be added before normalizing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NabTally {
    pub score: f64,
    pub null: f64,
    pub perfect: f64,
}

impl NabTally {
    /// `100 * (score - null) / (perfect - null)`.
    pub fn normalized(&self) -> Result<f64> {
        let span = self.perfect - self.null;
        if span == 0.0 {
            return Err(Error::UndefinedRate("NAB needs at least one labeled window".into()));
        }
        Ok(100.0 * (self.score - self.null) / span)
    }
}

impl std::ops::Add for NabTally {
    type Output = NabTally;

    fn add(self, o: NabTally) -> NabTally {
        NabTally {
            score: self.score + o.score,
            null: self.null + o.null,
            perfect: self.perfect + o.perfect,
        }
    }
}

/// Reward for the first detection at `t` inside `w`.
pub fn positional_score(w: &NabWindow, t: f64, profile: &NabProfile) -> f64 {
    let event = (((t - w.start) / (w.end - w.start)) * DETAIL as f64) as usize;
    let event = event.min(DETAIL - 1);
    let x = -FRAC_PI_2 + event as f64 * (std::f64::consts::PI / (DETAIL - 1) as f64);
    let half = (profile.a_tp - profile.a_fp) / 2.0;
    half * -x.tanh() / FRAC_PI_2.tanh() + half + profile.a_fp
}

/// Raw tally for detection indices (any order) against `windows`.
pub fn nab_tally(detections: &[usize], windows: &[NabWindow], profile: &NabProfile) -> Result<NabTally> {
    validate_windows(windows)?;
    let mut times: Vec<f64> = detections.iter().map(|&d| d as f64).collect();
    times.sort_by(f64::total_cmp);
    let mut score = 0.0;
    let mut false_pos = 0usize;
    if let (Some(first), Some(last)) = (windows.first(), windows.last()) {
        false_pos += times.iter().filter(|&&t| t < first.start).count();
        false_pos += times.iter().filter(|&&t| t > last.end).count();
        for pair in windows.windows(2) {
            false_pos += times.iter().filter(|&&t| t > pair[0].end && t < pair[1].start).count();
        }
    } else {
        false_pos = times.len();
    }
    for w in windows {
        match times.iter().find(|&&t| w.contains(t)) {
            Some(&t) => score += positional_score(w, t, profile),
            None => score += profile.a_fn,
        }
    }
    score += profile.a_fp * false_pos as f64;
    let n = windows.len() as f64;
    Ok(NabTally {
        score,
        null: n * profile.a_fn,
        perfect: n * profile.a_tp,
    })
}

/// Normalized NAB score of a detection-flag series.
pub fn nab_score(detections: &[bool], windows: &[NabWindow], profile: &NabProfile) -> Result<f64> {
    nab_tally(&flag_indices(detections), windows, profile)?.normalized()
}

pub fn flag_indices(flags: &[bool]) -> Vec<usize> {
    flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect()
}

/// Scoring windows for labeled changepoints: each window ends at its
/// changepoint and reaches back `width` samples. Without a width, it is a
/// tenth of the series span divided by the changepoint count plus one. Where
/// windows overlap, the later one starts at the earlier one's end.
pub fn changepoint_windows(changepoints: &[bool], width: Option<f64>) -> Result<Vec<NabWindow>> {
    let cps = flag_indices(changepoints);
    if cps.is_empty() {
        return Ok(Vec::new());
    }
    let td = match width {
        Some(w) if w > 0.0 && w.is_finite() => w,
        Some(w) => return Err(Error::contract(format!("window width must be positive, got {w}"))),
        None => (changepoints.len() - 1) as f64 / (cps.len() + 1) as f64 * 0.1,
    };
    let mut windows: Vec<NabWindow> = cps.iter().map(|&c| NabWindow::new(c as f64 - td, c as f64)).collect();
    for i in 1..windows.len() {
        if windows[i - 1].end >= windows[i].start {
            windows[i].start = windows[i - 1].end;
        }
    }
    Ok(windows)
}

/// Changepoint detections from point flags: every rising and falling edge.
pub fn flags_to_changepoints(flags: &[bool]) -> Vec<bool> {
    let mut out = vec![false; flags.len()];
    for i in 1..flags.len() {
        out[i] = flags[i] != flags[i - 1];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(a: f64, b: f64) -> NabWindow {
        NabWindow::new(a, b)
    }

    #[test]
    fn anchors() {
        let ws = [w(10.0, 30.0), w(60.0, 90.0)];
        let none = vec![false; 120];
        assert_eq!(nab_score(&none, &ws, &NabProfile::STANDARD).unwrap(), 0.0);
        let mut perfect = none.clone();
        perfect[10] = true;
        perfect[60] = true;
        for p in NabProfile::ALL {
            assert!((nab_score(&perfect, &ws, &p).unwrap() - 100.0).abs() < 1e-12);
        }
        let mut far_fp = none;
        far_fp[110] = true;
        assert!(nab_score(&far_fp, &ws, &NabProfile::STANDARD).unwrap() < 0.0);
    }

    #[test]
    fn curve_endpoints() {
        let win = w(0.0, 10.0);
        let p = NabProfile::STANDARD;
        assert!((positional_score(&win, 0.0, &p) - 1.0).abs() < 1e-12);
        assert!((positional_score(&win, 10.0, &p) - p.a_fp).abs() < 1e-12);
        let mid = positional_score(&win, 5.0, &p);
        assert!(mid > p.a_fp && mid < 1.0);
    }

    #[test]
    fn malformed_windows_are_rejected() {
        let p = NabProfile::STANDARD;
        assert!(nab_tally(&[], &[w(5.0, 5.0)], &p).is_err());
        assert!(nab_tally(&[], &[w(5.0, 9.0), w(8.0, 12.0)], &p).is_err());
        assert!(nab_tally(&[], &[w(5.0, 9.0), w(9.0, 12.0)], &p).is_ok());
        assert!(matches!(nab_score(&[true], &[], &p), Err(Error::UndefinedRate(_))));
    }

    #[test]
    fn shared_endpoint_scores_for_both_windows() {
        let p = NabProfile::STANDARD;
        let t = nab_tally(&[9], &[w(5.0, 9.0), w(9.0, 12.0)], &p).unwrap();
        let expected = positional_score(&w(5.0, 9.0), 9.0, &p) + positional_score(&w(9.0, 12.0), 9.0, &p);
        assert!((t.score - expected).abs() < 1e-15);
    }

    #[test]
    fn window_builder_cuts_overlaps() {
        let mut cp = vec![false; 200];
        for i in [50, 52, 150] {
            cp[i] = true;
        }
        let ws = changepoint_windows(&cp, None).unwrap();
        let td = 199.0 / 4.0 * 0.1;
        assert_eq!(ws, vec![w(50.0 - td, 50.0), w(50.0, 52.0), w(150.0 - td, 150.0)]);
        assert!(changepoint_windows(&[false; 10], None).unwrap().is_empty());
    }

    #[test]
    fn edges_of_flags() {
        let f = [false, true, true, false, false, true];
        assert_eq!(flags_to_changepoints(&f), vec![false, true, false, true, false, true]);
        assert_eq!(flags_to_changepoints(&[true, true]), vec![false, false]);
    }

    proptest! {
        #[test]
        fn earlier_detection_never_scores_lower(
            start in 0.0f64..50.0, len in 1.0f64..60.0, a in 0.0f64..1.0, b in 0.0f64..1.0
        ) {
            let win = w(start, start + len);
            let (early, late) = if a <= b { (a, b) } else { (b, a) };
            let t_early = (start + early * len).ceil() as usize;
            let t_late = (start + late * len).floor() as usize;
            prop_assume!(t_early as f64 <= start + len && t_late as f64 >= start && t_early <= t_late);
            for p in NabProfile::ALL {
                let se = nab_tally(&[t_early], &[win], &p).unwrap().normalized().unwrap();
                let sl = nab_tally(&[t_late], &[win], &p).unwrap().normalized().unwrap();
                prop_assert!(se >= sl);
            }
        }

        #[test]
        fn score_is_at_most_100(dets in prop::collection::vec(0usize..100, 0..20)) {
            let ws = [w(10.0, 20.0), w(40.0, 55.5), w(70.0, 71.0)];
            for p in NabProfile::ALL {
                let s = nab_tally(&dets, &ws, &p).unwrap().normalized().unwrap();
                prop_assert!(s <= 100.0 + 1e-12);
            }
        }
    }
}
