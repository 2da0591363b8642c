//! Central finite-difference gradient checking.
//!
//! Only compiled for tests or with the `test-utils` feature. It evaluates the
//! loss through forward passes alone, so it never touches the backward code it
//! is checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.mismatches.is_empty()
    }
}

/// Which parameter elements to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// A seeded uniform sample of this many elements across all parameters.
    Sample { count: usize, seed: u64 },
}

fn loss_value<F>(params: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Compares `backward` gradients of the scalar built by `build` against
/// central differences with step `eps`.
///
/// An element passes when its absolute error is at most [`ABS_TOL`] or its
/// relative error `|a - n| / max(|a|, |n|)` is below [`REL_TOL`].
pub fn check_gradients<F>(params: &[Tensor], build: F, eps: f64, coverage: Coverage) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();

    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |i| (pi, i)))
        .collect();
    let picked: Vec<(usize, usize)> = match coverage {
        Coverage::All => all,
        Coverage::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = count.min(all.len());
            let mut idx = sample(&mut rng, all.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|k| all[k]).collect()
        }
    };

    let mut report = GradCheckReport::default();
    let mut work = params.to_vec();
    for (pi, i) in picked {
        let orig = work[pi].data()[i];
        work[pi].data_mut()[i] = orig + eps;
        let up = loss_value(&work, &build)?;
        work[pi].data_mut()[i] = orig - eps;
        let down = loss_value(&work, &build)?;
        work[pi].data_mut()[i] = orig;

        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[pi][i];
        let abs = (a - numeric).abs();
        let rel = if abs == 0.0 { 0.0 } else { abs / a.abs().max(numeric.abs()) };
        report.checked += 1;
        if abs > ABS_TOL {
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel >= REL_TOL {
                report.mismatches.push(GradMismatch {
                    param: pi,
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Random tensor with entries uniform in `[-scale, scale]`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl rand::Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}
