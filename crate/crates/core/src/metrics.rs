//! Learning-quality metrics: relative energy difference, sample-size laws and
//! k-body validation.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::estimation::{estimate_kbody, Estimate, FilterReport, LeakageEstimate};
use crate::model::{energy_unchecked, DecoherenceModel, IsingModel};
use crate::observables::{kbody_correlation, SequenceFlags};
use crate::sim::Dataset;

pub const DEFAULT_CONFIGS: usize = 1000;
pub const DEFAULT_REPEATS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    /// Mean over repeats.
    pub epsilon: f64,
    pub n_configs: usize,
    pub repeats: usize,
    /// Spread of the per-repeat values.
    pub std: f64,
    /// A coupling set had zero energy spread on some sample; `epsilon` is then NaN.
    pub degenerate: bool,
}

/// Relative energy difference on one configuration sample:
/// `⟨|E₁ − E₂|⟩ / √(δE₁ · δE₂)` with `δE` the standard deviation of `E`.
fn epsilon_once<R: Rng + ?Sized>(j1: &IsingModel, j2: &IsingModel, n_configs: usize, rng: &mut R) -> Option<f64> {
    let n = j1.n();
    let (mut diff, mut s1, mut q1, mut s2, mut q2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut spins = vec![1i8; n];
    for _ in 0..n_configs {
        for s in spins.iter_mut() {
            *s = if rng.random::<bool>() { 1 } else { -1 };
        }
        let e1 = energy_unchecked(j1, &spins);
        let e2 = energy_unchecked(j2, &spins);
        diff += (e1 - e2).abs();
        s1 += e1;
        q1 += e1 * e1;
        s2 += e2;
        q2 += e2 * e2;
    }
    let m = n_configs as f64;
    let var = |s: f64, q: f64| ((q - s * s / m) / (m - 1.0)).max(0.0);
    let den = (var(s1, q1).sqrt() * var(s2, q2).sqrt()).sqrt();
    if den > 0.0 {
        Some(diff / m / den)
    } else {
        None
    }
}

/// Monte-Carlo `ε(J₁, J₂)` over uniform ±1 configurations, couplings only.
///
/// Each repeat draws its own sample from a stream seeded by `rng`; numerator and
/// both spreads share that sample. Not gauge invariant.
pub fn epsilon<R: RngCore + ?Sized>(
    j1: &IsingModel,
    j2: &IsingModel,
    n_configs: usize,
    repeats: usize,
    rng: &mut R,
) -> Result<PrecisionReport> {
    check_len(j1.n(), j2.n())?;
    if n_configs < 2 || repeats == 0 {
        return Err(Error::invalid("need at least two configurations and one repeat"));
    }
    let (j1, j2) = (j1.without_fields(), j2.without_fields());
    let mut values = Vec::with_capacity(repeats);
    let mut degenerate = false;
    for _ in 0..repeats {
        let mut stream = ChaCha8Rng::seed_from_u64(rng.next_u64());
        match epsilon_once(&j1, &j2, n_configs, &mut stream) {
            Some(v) => values.push(v),
            None => degenerate = true,
        }
    }
    if degenerate {
        return Ok(PrecisionReport {
            epsilon: f64::NAN,
            n_configs,
            repeats,
            std: f64::NAN,
            degenerate,
        });
    }
    let mean = values.iter().sum::<f64>() / repeats as f64;
    let std = if repeats > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(PrecisionReport {
        epsilon: mean,
        n_configs,
        repeats,
        std,
        degenerate,
    })
}

/// Fit of `RSS = a/M + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RssScaling {
    pub a: f64,
    pub b: f64,
    pub r2: f64,
    pub se_a: f64,
    pub se_b: f64,
}

struct Line {
    slope: f64,
    intercept: f64,
    r2: f64,
    se_slope: f64,
    se_intercept: f64,
}

/// Ordinary least squares `y = slope·x + intercept`.
fn fit_line(x: &[f64], y: &[f64]) -> Result<Line> {
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::invalid("degenerate design: all abscissae equal"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let (se_slope, se_intercept) = if x.len() > 2 {
        let s2 = sse / (m - 2.0);
        ((s2 / sxx).sqrt(), (s2 * (1.0 / m + mx * mx / sxx)).sqrt())
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(Line {
        slope,
        intercept,
        r2,
        se_slope,
        se_intercept,
    })
}

fn distinct(values: &[f64]) -> usize {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

/// Linear regression of RSS on `1/M`. `b` is reported raw and may be negative.
pub fn rss_scaling_fit(points: &[(usize, f64)]) -> Result<RssScaling> {
    let x: Vec<f64> = points.iter().map(|&(m, _)| 1.0 / m as f64).collect();
    let y: Vec<f64> = points.iter().map(|&(_, r)| r).collect();
    if points.iter().any(|&(m, r)| m == 0 || !r.is_finite()) {
        return Err(Error::invalid("sample sizes must be positive and RSS finite"));
    }
    if distinct(&x) < 3 {
        return Err(Error::invalid("need at least three distinct sample sizes"));
    }
    let l = fit_line(&x, &y)?;
    Ok(RssScaling {
        a: l.slope,
        b: l.intercept,
        r2: l.r2,
        se_a: l.se_slope,
        se_b: l.se_intercept,
    })
}

/// Fit of `ε ∝ M^{−α}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionScaling {
    pub alpha: f64,
    pub se: f64,
    pub prefactor: f64,
}

/// Log-log regression of ε on M.
pub fn precision_scaling(points: &[(usize, f64)]) -> Result<PrecisionScaling> {
    if points.len() < 3 {
        return Err(Error::invalid("need at least three points"));
    }
    if points.iter().any(|&(m, e)| m == 0 || !(e > 0.0 && e.is_finite())) {
        return Err(Error::invalid("precision values must be positive and sample sizes nonzero"));
    }
    let x: Vec<f64> = points.iter().map(|&(m, _)| (m as f64).ln()).collect();
    let y: Vec<f64> = points.iter().map(|&(_, e)| e.ln()).collect();
    let l = fit_line(&x, &y)?;
    Ok(PrecisionScaling {
        alpha: -l.slope,
        se: l.se_slope,
        prefactor: l.intercept.exp(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationThreshold {
    pub max_z: f64,
    /// Fraction of time points that must lie within `max_z`.
    pub min_fraction: f64,
}

impl Default for ValidationThreshold {
    fn default() -> Self {
        ValidationThreshold {
            max_z: 4.0,
            min_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbodyValidation {
    pub set: Vec<usize>,
    pub times: Vec<f64>,
    pub predicted: Vec<f64>,
    pub estimated: Vec<Estimate>,
    pub z: Vec<f64>,
    pub max_z: f64,
    pub fraction_within: f64,
    pub passed: bool,
}

pub const MAX_VALIDATION_K: usize = 8;

/// Compares predicted k-body correlations of a fitted model with the corrected
/// estimates from `dataset`, one entry per index set.
pub fn validate_kbody(
    model: &IsingModel,
    dec: &DecoherenceModel,
    dataset: &Dataset,
    filter: &FilterReport,
    leakage: Option<&LeakageEstimate>,
    index_sets: &[Vec<usize>],
    threshold: ValidationThreshold,
) -> Result<Vec<KbodyValidation>> {
    check_len(dataset.n, model.n())?;
    let flags = SequenceFlags::new(dataset.echo, !dec.is_zero());
    index_sets
        .iter()
        .map(|set| {
            if set.is_empty() || set.len() > MAX_VALIDATION_K {
                return Err(Error::invalid(format!(
                    "index sets must hold 1 to {MAX_VALIDATION_K} ions, got {}",
                    set.len()
                )));
            }
            let estimated = estimate_kbody(dataset, filter, leakage, set)?;
            let predicted = dataset
                .times
                .iter()
                .map(|&t| kbody_correlation(model, dec, t, set, flags))
                .collect::<Result<Vec<_>>>()?;
            let z: Vec<f64> = predicted
                .iter()
                .zip(&estimated)
                .map(|(p, e)| (p - e.value).abs() / e.se)
                .collect();
            let max_z = z.iter().copied().fold(0.0, f64::max);
            let within = z.iter().filter(|&&v| v <= threshold.max_z).count();
            let fraction_within = within as f64 / z.len().max(1) as f64;
            Ok(KbodyValidation {
                set: set.clone(),
                times: dataset.times.clone(),
                predicted,
                estimated,
                z,
                max_z,
                fraction_within,
                passed: fraction_within >= threshold.min_fraction,
            })
        })
        .collect()
}
