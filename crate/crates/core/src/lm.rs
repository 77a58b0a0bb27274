//! Levenberg–Marquardt for small dense or row-sparse least-squares problems.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A least-squares objective `Σ r_k(p)²`.
pub trait LeastSquares {
    fn num_params(&self) -> usize;

    fn residuals(&self, p: &[f64]) -> Result<Vec<f64>>;

    /// Dense Jacobian, one row per residual.
    fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>>;

    /// `(JᵀJ, Jᵀr)` at `p`. Override when the Jacobian is sparse.
    fn normal_equations(&self, p: &[f64], r: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let j = self.jacobian(p)?;
        let r = DVector::from_column_slice(r);
        Ok((j.transpose() * &j, j.transpose() * r))
    }

    /// Box constraints `(lower, upper)`; steps are projected onto them.
    fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmOptions {
    pub max_iters: usize,
    /// Stop when an accepted step lowers the RSS by less than this fraction.
    pub tol: f64,
    pub initial_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iters: 500,
            tol: 1e-8,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmStatus {
    /// Relative RSS change fell below tolerance, or the RSS reached zero.
    Converged,
    /// The gradient vanished at a point with nonzero RSS.
    ZeroGradient,
    /// No step lowered the RSS even at maximal damping.
    Stalled,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmReport {
    pub params: Vec<f64>,
    pub rss: f64,
    pub initial_rss: f64,
    /// Accepted steps.
    pub iterations: usize,
    pub status: LmStatus,
}

impl LmReport {
    pub fn converged(&self) -> bool {
        self.status == LmStatus::Converged
    }
}

const MAX_DAMPING: f64 = 1e16;
const DIAG_FLOOR: f64 = 1e-12;

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

fn project(p: &mut [f64], bounds: &Option<(Vec<f64>, Vec<f64>)>) {
    if let Some((lo, hi)) = bounds {
        for ((x, l), h) in p.iter_mut().zip(lo).zip(hi) {
            *x = x.clamp(*l, *h);
        }
    }
}

/// Minimizes from `p0`; `on_accept(params, rss)` runs after every accepted step.
pub fn minimize<P: LeastSquares + ?Sized>(
    problem: &P,
    p0: &[f64],
    options: &LmOptions,
    mut on_accept: impl FnMut(&[f64], f64),
) -> Result<LmReport> {
    let np = problem.num_params();
    if p0.len() != np {
        return Err(Error::DimensionMismatch {
            expected: np,
            got: p0.len(),
        });
    }
    let bounds = problem.bounds();
    let mut p = p0.to_vec();
    project(&mut p, &bounds);
    let mut r = problem.residuals(&p)?;
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite residuals at the initial point".into()));
    }
    let mut rss = sum_sq(&r);
    let initial_rss = rss;
    let mut lambda = options.initial_damping;
    let mut iterations = 0;
    let mut status = LmStatus::MaxIterations;
    let tiny = f64::MIN_POSITIVE.sqrt();

    while iterations < options.max_iters {
        if rss <= tiny {
            status = LmStatus::Converged;
            break;
        }
        let (jtj, g) = problem.normal_equations(&p, &r)?;
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite Jacobian".into()));
        }
        // With bounds, only the components that can move count.
        let free_grad = g.iter().enumerate().fold(0.0f64, |acc, (k, &gk)| {
            let blocked = bounds.as_ref().is_some_and(|(lo, hi)| {
                (p[k] <= lo[k] && gk > 0.0) || (p[k] >= hi[k] && gk < 0.0)
            });
            if blocked {
                acc
            } else {
                acc.max(gk.abs())
            }
        });
        if free_grad == 0.0 {
            status = LmStatus::ZeroGradient;
            break;
        }
        let diag: Vec<f64> = (0..np).map(|k| jtj[(k, k)].max(DIAG_FLOOR)).collect();
        let mut accepted = None;
        while lambda <= MAX_DAMPING {
            let mut a = jtj.clone();
            for k in 0..np {
                a[(k, k)] += lambda * diag[k];
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&g));
            let mut trial: Vec<f64> = p.iter().zip(step.iter()).map(|(x, d)| x + d).collect();
            project(&mut trial, &bounds);
            // A trial point the model cannot evaluate counts as a rejected step.
            let Ok(r_new) = problem.residuals(&trial) else {
                lambda *= 10.0;
                continue;
            };
            let rss_new = sum_sq(&r_new);
            if rss_new.is_finite() && rss_new < rss {
                lambda = (lambda / 3.0).max(1e-12);
                accepted = Some((trial, r_new, rss_new));
                break;
            }
            lambda *= 10.0;
        }
        let Some((trial, r_new, rss_new)) = accepted else {
            status = LmStatus::Stalled;
            break;
        };
        let rel = (rss - rss_new) / rss;
        p = trial;
        r = r_new;
        rss = rss_new;
        iterations += 1;
        on_accept(&p, rss);
        if rel < options.tol {
            status = LmStatus::Converged;
            break;
        }
    }
    if status == LmStatus::Stalled && rss <= tiny {
        status = LmStatus::Converged;
    }
    Ok(LmReport {
        params: p,
        rss,
        initial_rss,
        iterations,
        status,
    })
}

/// Standard errors from `(JᵀJ)⁻¹ · RSS/(m − p)`. `None` when singular or `m ≤ p`.
pub fn parameter_errors<P: LeastSquares + ?Sized>(problem: &P, p: &[f64]) -> Result<Option<Vec<f64>>> {
    let r = problem.residuals(p)?;
    let m = r.len();
    let np = problem.num_params();
    if m <= np {
        return Ok(None);
    }
    let (jtj, _) = problem.normal_equations(p, &r)?;
    let s2 = sum_sq(&r) / (m - np) as f64;
    Ok(jtj.try_inverse().map(|inv| (0..np).map(|k| (inv[(k, k)] * s2).max(0.0).sqrt()).collect()))
}

/// Central-difference Jacobian, for problems without an analytic form and for tests.
pub fn central_difference<F>(f: F, p: &[f64], step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut jac = DMatrix::zeros(0, p.len());
    let mut q = p.to_vec();
    for k in 0..p.len() {
        let h = step * p[k].abs().max(1.0);
        q[k] = p[k] + h;
        let up = f(&q)?;
        q[k] = p[k] - h;
        let down = f(&q)?;
        q[k] = p[k];
        if k == 0 {
            jac = DMatrix::zeros(up.len(), p.len());
        }
        for (row, (u, d)) in up.iter().zip(&down).enumerate() {
            jac[(row, k)] = (u - d) / (2.0 * h);
        }
    }
    Ok(jac)
}
