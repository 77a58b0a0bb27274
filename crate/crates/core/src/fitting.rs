//! Least-squares fits of echoed-quench observables.
//!
//! Every scheme is a forward model from a parameter vector to the flattened
//! observable vector (per time: magnetizations, then packed pair correlations) with
//! an analytic Jacobian stored row-sparse. `JᵀJ` is accumulated from the sparse rows;
//! for the coupling fit a row touches `O(n)` of the `n(n−1)/2` parameters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::estimation::ObservableSet;
use crate::lm::{minimize, parameter_errors, LeastSquares, LmOptions, LmStatus};
use crate::model::{pair_count, pair_index, pairs, DecoherenceModel, IsingModel};
use crate::observables::{SequenceFlags, TimeKernel};
use crate::phonon::{coupling_kernel, ModeSet, ToneSpec};

/// Sparse Jacobian: per observable, `(parameter, ∂value/∂parameter)`.
pub type SparseRows = Vec<Vec<(usize, f64)>>;

/// Unweighted residual sum of squares between predicted and observed values.
pub fn rss(predicted: &[f64], observed: &ObservableSet) -> Result<f64> {
    let obs = observed.values();
    check_len(obs.len(), predicted.len())?;
    Ok(predicted.iter().zip(&obs).map(|(p, o)| (p - o) * (p - o)).sum())
}

/// RSS of a model's predictions against `observed`.
pub fn model_rss(model: &IsingModel, dec: &DecoherenceModel, flags: SequenceFlags, observed: &ObservableSet) -> Result<f64> {
    check_len(observed.n, model.n())?;
    let table = crate::observables::batch_observables(model, dec, &observed.times, flags)?;
    rss(&table.flatten(), observed)
}

/// Leave-one-out products `Π_{l≠k} f_l` without division.
fn leave_one_out(f: &[f64], out: &mut Vec<f64>) {
    let m = f.len();
    out.clear();
    out.resize(m, 1.0);
    let mut acc = 1.0;
    for k in 0..m {
        out[k] = acc;
        acc *= f[k];
    }
    acc = 1.0;
    for k in (0..m).rev() {
        out[k] *= acc;
        acc *= f[k];
    }
}

/// Observables and their sparse gradient with respect to the packed couplings.
pub fn coupling_rows(
    model: &IsingModel,
    dec: &DecoherenceModel,
    times: &[f64],
    flags: SequenceFlags,
) -> Result<(Vec<f64>, SparseRows)> {
    let n = model.n();
    if flags.include_decoherence {
        check_len(n, dec.n())?;
    }
    let per_time = n + pair_count(n);
    let mut values = Vec::with_capacity(times.len() * per_time);
    let mut rows = Vec::with_capacity(times.len() * per_time);
    let mut fac = Vec::with_capacity(n);
    let mut loo = Vec::with_capacity(n);
    let mut fm = Vec::with_capacity(n);
    let mut loo_m = Vec::with_capacity(n);
    for &t in times {
        let kern = TimeKernel::new(model, dec, t, flags);
        for i in 0..n {
            let pre = kern.mag_prefactor(i);
            let others: Vec<usize> = (0..n).filter(|&k| k != i).collect();
            fac.clear();
            fac.extend(others.iter().map(|&k| kern.cos[k * n + i]));
            leave_one_out(&fac, &mut loo);
            let prod: f64 = if others.is_empty() { 1.0 } else { loo[0] * fac[0] };
            values.push(pre * prod);
            rows.push(
                others
                    .iter()
                    .enumerate()
                    .map(|(a, &k)| {
                        let (lo, hi) = if k < i { (k, i) } else { (i, k) };
                        (pair_index(n, lo, hi), -2.0 * t * kern.sin[k * n + i] * pre * loo[a])
                    })
                    .collect(),
            );
        }
        for (i, j) in pairs(n) {
            let (pp, pm) = kern.pair_prefactors(i, j);
            let others: Vec<usize> = (0..n).filter(|&k| k != i && k != j).collect();
            let terms: Vec<(f64, f64, f64, f64)> = others.iter().map(|&k| kern.pair_terms(i, j, k)).collect();
            fac.clear();
            fac.extend(terms.iter().map(|x| x.0));
            fm.clear();
            fm.extend(terms.iter().map(|x| x.1));
            leave_one_out(&fac, &mut loo);
            leave_one_out(&fm, &mut loo_m);
            let (prod_p, prod_m) = if others.is_empty() {
                (1.0, 1.0)
            } else {
                (loo[0] * fac[0], loo_m[0] * fm[0])
            };
            values.push(pp * prod_p + pm * prod_m);
            let mut row = Vec::with_capacity(2 * others.len());
            for (a, &k) in others.iter().enumerate() {
                let (_, _, sp, sm) = terms[a];
                let dp = -2.0 * t * sp * pp * loo[a];
                let dm = 2.0 * t * sm * pm * loo_m[a];
                let ki = if k < i { pair_index(n, k, i) } else { pair_index(n, i, k) };
                let kj = if k < j { pair_index(n, k, j) } else { pair_index(n, j, k) };
                row.push((ki, dp - dm));
                row.push((kj, dp + dm));
            }
            rows.push(row);
        }
    }
    Ok((values, rows))
}

fn densify(rows: &SparseRows, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows.len(), cols);
    for (r, row) in rows.iter().enumerate() {
        for &(c, v) in row {
            m[(r, c)] += v;
        }
    }
    m
}

/// `∂(all observables)/∂J`, columns in packed pair order.
pub fn jacobian_full(model: &IsingModel, dec: &DecoherenceModel, times: &[f64], flags: SequenceFlags) -> Result<DMatrix<f64>> {
    let (_, rows) = coupling_rows(model, dec, times, flags)?;
    Ok(densify(&rows, pair_count(model.n())))
}

/// A parameterized prediction of the flattened observable vector.
pub trait ForwardModel {
    fn num_params(&self) -> usize;
    fn predict(&self, p: &[f64]) -> Result<Vec<f64>>;
    fn predict_with_jacobian(&self, p: &[f64]) -> Result<(Vec<f64>, SparseRows)>;
    fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }
}

/// Dense Jacobian of a forward model, for tests and diagnostics.
pub fn forward_jacobian<F: ForwardModel + ?Sized>(model: &F, p: &[f64]) -> Result<DMatrix<f64>> {
    let (_, rows) = model.predict_with_jacobian(p)?;
    Ok(densify(&rows, model.num_params()))
}

struct Objective<'a, F: ForwardModel> {
    model: &'a F,
    target: Vec<f64>,
    weights: Option<Vec<f64>>,
}

impl<'a, F: ForwardModel> Objective<'a, F> {
    fn new(model: &'a F, observed: &ObservableSet, weighted: bool) -> Self {
        Objective {
            model,
            target: observed.values(),
            weights: weighted.then(|| observed.ses().iter().map(|s| 1.0 / s).collect()),
        }
    }

    fn weight(&self, k: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[k])
    }
}

impl<F: ForwardModel> LeastSquares for Objective<'_, F> {
    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    fn residuals(&self, p: &[f64]) -> Result<Vec<f64>> {
        let pred = self.model.predict(p)?;
        check_len(self.target.len(), pred.len())?;
        Ok(pred
            .iter()
            .zip(&self.target)
            .enumerate()
            .map(|(k, (a, b))| (a - b) * self.weight(k))
            .collect())
    }

    fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        let (_, rows) = self.model.predict_with_jacobian(p)?;
        let mut j = densify(&rows, self.num_params());
        for k in 0..rows.len() {
            let w = self.weight(k);
            j.row_mut(k).iter_mut().for_each(|x| *x *= w);
        }
        Ok(j)
    }

    fn normal_equations(&self, p: &[f64], r: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let np = self.num_params();
        let (_, rows) = self.model.predict_with_jacobian(p)?;
        let mut jtj = DMatrix::zeros(np, np);
        let mut g = DVector::zeros(np);
        for (k, row) in rows.iter().enumerate() {
            let w = self.weight(k);
            for &(a, va) in row {
                g[a] += w * va * r[k];
                for &(b, vb) in row {
                    jtj[(a, b)] += w * w * va * vb;
                }
            }
        }
        Ok((jtj, g))
    }

    fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.model.bounds()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub lm: LmOptions,
    /// Inverse-standard-error weighting of residuals.
    pub weighted: bool,
    /// Held-out data evaluated after every accepted step.
    #[serde(skip)]
    pub test: Option<ObservableSet>,
}

impl FitOptions {
    pub fn with_test(mut self, test: ObservableSet) -> Self {
        self.test = Some(test);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub train_rss: f64,
    pub test_rss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult<P> {
    pub params: P,
    pub train_rss: f64,
    pub test_rss: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub status: LmStatus,
    /// Starting point first, then one entry per accepted step.
    pub learning_curve: Vec<CurvePoint>,
    /// Standard errors of the raw parameter vector, when identifiable.
    pub param_se: Option<Vec<f64>>,
}

fn run<F: ForwardModel, P>(
    model: &F,
    observed: &ObservableSet,
    p0: &[f64],
    options: &FitOptions,
    build: impl Fn(&[f64]) -> P,
) -> Result<FitResult<P>> {
    observed.validate()?;
    let objective = Objective::new(model, observed, options.weighted);
    if let Some(test) = &options.test {
        check_len(observed.num_observables(), test.num_observables())?;
    }
    let plain_rss = |p: &[f64], set: &ObservableSet| -> Result<f64> { rss(&model.predict(p)?, set) };
    let mut curve = vec![CurvePoint {
        iteration: 0,
        train_rss: plain_rss(p0, observed)?,
        test_rss: options.test.as_ref().map(|t| plain_rss(p0, t)).transpose()?,
    }];
    let mut failure = None;
    let report = minimize(&objective, p0, &options.lm, |p, _| {
        let train = plain_rss(p, observed);
        let test = options.test.as_ref().map(|t| plain_rss(p, t)).transpose();
        match (train, test) {
            (Ok(train_rss), Ok(test_rss)) => curve.push(CurvePoint {
                iteration: curve.len(),
                train_rss,
                test_rss,
            }),
            (Err(e), _) | (_, Err(e)) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    if report.status == LmStatus::ZeroGradient {
        log::warn!("fit made no progress: zero gradient at the starting point");
    }
    let param_se = parameter_errors(&objective, &report.params)?;
    let last = *curve.last().expect("curve has the starting point");
    Ok(FitResult {
        params: build(&report.params),
        train_rss: last.train_rss,
        test_rss: last.test_rss,
        iterations: report.iterations,
        converged: report.converged(),
        status: report.status,
        learning_curve: curve,
        param_se,
    })
}

/// O(N²) scheme: every coupling is a free parameter.
pub struct CouplingModel<'a> {
    pub n: usize,
    pub fields: Vec<f64>,
    pub dec: &'a DecoherenceModel,
    pub times: &'a [f64],
    pub flags: SequenceFlags,
}

impl CouplingModel<'_> {
    fn model(&self, p: &[f64]) -> Result<IsingModel> {
        IsingModel::from_upper(self.n, p, self.fields.clone())
    }
}

impl ForwardModel for CouplingModel<'_> {
    fn num_params(&self) -> usize {
        pair_count(self.n)
    }

    fn predict(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok(crate::observables::batch_observables(&self.model(p)?, self.dec, self.times, self.flags)?.flatten())
    }

    fn predict_with_jacobian(&self, p: &[f64]) -> Result<(Vec<f64>, SparseRows)> {
        coupling_rows(&self.model(p)?, self.dec, self.times, self.flags)
    }
}

fn echo_flags(dec: &DecoherenceModel) -> SequenceFlags {
    SequenceFlags::new(true, !dec.is_zero())
}

/// Fits all couplings to echoed data with the decoherence rates held fixed.
pub fn fit_full(
    observed: &ObservableSet,
    dec: &DecoherenceModel,
    init: &IsingModel,
    options: &FitOptions,
) -> Result<FitResult<IsingModel>> {
    let n = init.n();
    check_len(observed.n, n)?;
    check_len(n, dec.n())?;
    let fm = CouplingModel {
        n,
        fields: vec![0.0; n],
        dec,
        times: &observed.times,
        flags: echo_flags(dec),
    };
    let res = run(&fm, observed, &init.upper(), options, |p| {
        IsingModel::from_upper(n, p, vec![0.0; n]).expect("valid packed couplings")
    })?;
    Ok(res)
}

/// O(N) scheme: per-tone, per-ion amplitudes on top of fixed modes,
/// `J_ij = Σ_τ Ω^τ_i Ω^τ_j G^τ_ij`.
pub struct AmplitudeModel<'a> {
    pub n: usize,
    /// Per tone, the `n×n` kernel `G^τ`.
    pub kernels: Vec<Vec<f64>>,
    pub dec: &'a DecoherenceModel,
    pub times: &'a [f64],
    pub flags: SequenceFlags,
}

impl<'a> AmplitudeModel<'a> {
    pub fn new(
        modes: &ModeSet,
        tones: &[ToneSpec],
        dec: &'a DecoherenceModel,
        times: &'a [f64],
        flags: SequenceFlags,
    ) -> Result<Self> {
        if tones.is_empty() {
            return Err(Error::invalid("need at least one tone"));
        }
        let kernels = tones.iter().map(|t| coupling_kernel(modes, t)).collect::<Result<_>>()?;
        Ok(AmplitudeModel {
            n: modes.n(),
            kernels,
            dec,
            times,
            flags,
        })
    }

    pub fn couplings(&self, p: &[f64]) -> Result<IsingModel> {
        let n = self.n;
        check_len(n * self.kernels.len(), p.len())?;
        let mut j = vec![0.0; n * n];
        for (tau, g) in self.kernels.iter().enumerate() {
            let om = &p[tau * n..(tau + 1) * n];
            for a in 0..n {
                for b in 0..n {
                    j[a * n + b] += om[a] * om[b] * g[a * n + b];
                }
            }
        }
        IsingModel::from_matrix(n, &j, vec![0.0; n])
    }
}

impl ForwardModel for AmplitudeModel<'_> {
    fn num_params(&self) -> usize {
        self.n * self.kernels.len()
    }

    fn predict(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok(crate::observables::batch_observables(&self.couplings(p)?, self.dec, self.times, self.flags)?.flatten())
    }

    fn predict_with_jacobian(&self, p: &[f64]) -> Result<(Vec<f64>, SparseRows)> {
        let n = self.n;
        let (values, jrows) = coupling_rows(&self.couplings(p)?, self.dec, self.times, self.flags)?;
        let pair_list: Vec<(usize, usize)> = pairs(n).collect();
        let rows = jrows
            .into_iter()
            .map(|row| {
                let mut out = Vec::with_capacity(2 * row.len() * self.kernels.len());
                for (tau, g) in self.kernels.iter().enumerate() {
                    let om = &p[tau * n..(tau + 1) * n];
                    for &(c, v) in &row {
                        let (a, b) = pair_list[c];
                        let gab = g[a * n + b];
                        out.push((tau * n + a, v * om[b] * gab));
                        out.push((tau * n + b, v * om[a] * gab));
                    }
                }
                out
            })
            .collect();
        Ok((values, rows))
    }
}

/// Per-tone, per-ion amplitudes `amplitudes[τ][i]`.
pub type Amplitudes = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaFit {
    pub amplitudes: Amplitudes,
    pub couplings: IsingModel,
}

/// Fits the laser amplitudes of each tone with the mode structure held fixed.
/// Amplitude signs are free; a per-ion sign flip is a gauge transformation.
pub fn fit_omega(
    observed: &ObservableSet,
    dec: &DecoherenceModel,
    modes: &ModeSet,
    tones: &[ToneSpec],
    init: &[Vec<f64>],
    options: &FitOptions,
) -> Result<FitResult<OmegaFit>> {
    let n = modes.n();
    check_len(observed.n, n)?;
    check_len(tones.len(), init.len())?;
    let fm = AmplitudeModel::new(modes, tones, dec, &observed.times, echo_flags(dec))?;
    let p0: Vec<f64> = init
        .iter()
        .map(|v| check_len(n, v.len()).map(|_| v.clone()))
        .collect::<Result<Vec<_>>>()?
        .concat();
    run(&fm, observed, &p0, options, |p| OmegaFit {
        amplitudes: p.chunks(n).map(<[f64]>::to_vec).collect(),
        couplings: fm.couplings(p).expect("valid amplitudes"),
    })
}

/// Decoherence rates `[γ_cor; γ_ind]` with couplings and fields fixed.
pub struct DecoherenceForward<'a> {
    pub model: &'a IsingModel,
    pub times: &'a [f64],
    pub echo: bool,
}

impl DecoherenceForward<'_> {
    fn dec(&self, p: &[f64]) -> Result<DecoherenceModel> {
        let n = self.model.n();
        check_len(2 * n, p.len())?;
        // Bounds keep the rates non-negative; clamp the round-off.
        let clean = |v: &[f64]| v.iter().map(|x| x.max(0.0)).collect();
        DecoherenceModel::new(clean(&p[..n]), clean(&p[n..]))
    }
}

impl ForwardModel for DecoherenceForward<'_> {
    fn num_params(&self) -> usize {
        2 * self.model.n()
    }

    fn predict(&self, p: &[f64]) -> Result<Vec<f64>> {
        let flags = SequenceFlags::new(self.echo, true);
        Ok(crate::observables::batch_observables(self.model, &self.dec(p)?, self.times, flags)?.flatten())
    }

    fn predict_with_jacobian(&self, p: &[f64]) -> Result<(Vec<f64>, SparseRows)> {
        let n = self.model.n();
        let dec = self.dec(p)?;
        let (gc, gi) = (dec.gamma_cor(), dec.gamma_ind());
        let flags = SequenceFlags::new(self.echo, true);
        let mut values = Vec::new();
        let mut rows = Vec::new();
        for &t in self.times {
            let kern = TimeKernel::new(self.model, &dec, t, flags);
            let t2 = t * t;
            for i in 0..n {
                let m = kern.magnetization(i);
                values.push(m);
                rows.push(vec![(i, -2.0 * gc[i] * t2 * m), (n + i, -2.0 * gi[i] * t2 * m)]);
            }
            for (i, j) in pairs(n) {
                let (pp, pm) = kern.pair_prefactors(i, j);
                let (mut prod_p, mut prod_m) = (1.0, 1.0);
                for k in (0..n).filter(|&k| k != i && k != j) {
                    let (cp, cm, _, _) = kern.pair_terms(i, j, k);
                    prod_p *= cp;
                    prod_m *= cm;
                }
                let (bp, bm) = (pp * prod_p, pm * prod_m);
                let c = bp + bm;
                values.push(c);
                let sp = gc[i] + gc[j];
                let sm = gc[i] - gc[j];
                rows.push(vec![
                    (i, -2.0 * t2 * (sp * bp + sm * bm)),
                    (j, -2.0 * t2 * (sp * bp - sm * bm)),
                    (n + i, -2.0 * gi[i] * t2 * c),
                    (n + j, -2.0 * gi[j] * t2 * c),
                ]);
            }
        }
        Ok((values, rows))
    }

    fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let m = self.num_params();
        Some((vec![0.0; m], vec![f64::INFINITY; m]))
    }
}

/// Per-ion Gaussian rate `g²` from `−ln m_i(t) ≈ g² t²`.
fn gaussian_rate(observed: &ObservableSet, i: usize) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (ti, &t) in observed.times.iter().enumerate() {
        let m = observed.mag[ti][i].value;
        if t > 0.0 && m > 0.05 && m < 1.0 {
            num += t * t * (-m.ln());
            den += t.powi(4);
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Fits `2n` decoherence rates to far-detuned (`J ≈ 0`) echoed data.
pub fn fit_decoherence(observed: &ObservableSet, options: &FitOptions) -> Result<FitResult<DecoherenceModel>> {
    fit_decoherence_with(observed, &IsingModel::zeros(observed.n), true, options)
}

/// As [`fit_decoherence`] with known couplings and sequence.
///
/// Magnetizations fix `γ_ind² + γ_cor²` per ion; the pair envelopes
/// `exp(−[γ_ind,i² + γ_ind,j² + (γ_cor,i ± γ_cor,j)²]t²)` separate the two.
pub fn fit_decoherence_with(
    observed: &ObservableSet,
    model: &IsingModel,
    echo: bool,
    options: &FitOptions,
) -> Result<FitResult<DecoherenceModel>> {
    let n = model.n();
    check_len(observed.n, n)?;
    if observed.times.len() < 3 {
        return Err(Error::invalid("decoherence fit needs at least three time points"));
    }
    let fm = DecoherenceForward {
        model,
        times: &observed.times,
        echo,
    };
    let mut p0 = vec![0.0; 2 * n];
    for i in 0..n {
        let g = (gaussian_rate(observed, i) / 2.0).sqrt();
        p0[i] = g;
        p0[n + i] = g;
    }
    run(&fm, observed, &p0, options, |p| fm.dec(p).expect("bounded rates"))
}

/// Longitudinal fields on unechoed data, couplings and decoherence fixed.
pub struct FieldForward<'a> {
    pub model: &'a IsingModel,
    pub dec: &'a DecoherenceModel,
    pub times: &'a [f64],
}

impl FieldForward<'_> {
    fn flags(&self) -> SequenceFlags {
        SequenceFlags::new(false, !self.dec.is_zero())
    }

    fn with(&self, p: &[f64]) -> Result<IsingModel> {
        self.model.clone().with_fields(p.to_vec())
    }
}

impl ForwardModel for FieldForward<'_> {
    fn num_params(&self) -> usize {
        self.model.n()
    }

    fn predict(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok(crate::observables::batch_observables(&self.with(p)?, self.dec, self.times, self.flags())?.flatten())
    }

    fn predict_with_jacobian(&self, p: &[f64]) -> Result<(Vec<f64>, SparseRows)> {
        let n = self.model.n();
        let m = self.with(p)?;
        // Envelopes and coupling products without the field factors.
        let bare = SequenceFlags::new(true, !self.dec.is_zero());
        let mut values = Vec::new();
        let mut rows = Vec::new();
        for &t in self.times {
            let kern = TimeKernel::new(&m, self.dec, t, bare);
            for i in 0..n {
                let b = kern.magnetization(i);
                let (s, c) = (2.0 * p[i] * t).sin_cos();
                values.push(c * b);
                rows.push(vec![(i, -2.0 * t * s * b)]);
            }
            for (i, j) in pairs(n) {
                let (pp, pm) = kern.pair_prefactors(i, j);
                let (mut prod_p, mut prod_m) = (1.0, 1.0);
                for k in (0..n).filter(|&k| k != i && k != j) {
                    let (cp, cm, _, _) = kern.pair_terms(i, j, k);
                    prod_p *= cp;
                    prod_m *= cm;
                }
                let (bp, bm) = (pp * prod_p, pm * prod_m);
                let (sp, cp) = (2.0 * (p[i] + p[j]) * t).sin_cos();
                let (sm, cm) = (2.0 * (p[i] - p[j]) * t).sin_cos();
                values.push(cp * bp + cm * bm);
                let dp = -2.0 * t * sp * bp;
                let dm = -2.0 * t * sm * bm;
                rows.push(vec![(i, dp + dm), (j, dp - dm)]);
            }
        }
        Ok((values, rows))
    }

    fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = self.num_params();
        Some((vec![0.0; n], vec![f64::INFINITY; n]))
    }
}

/// Grid points per ion for the field initialization.
const FIELD_GRID: usize = 400;

/// Fits non-negative fields `h_i` to data taken without the echo.
///
/// Magnetizations depend on `cos(2h_i t)` only, so a per-ion grid search on them
/// seeds the joint fit. The search range ends at the sampling limit `π/(2Δt)`.
pub fn fit_fields(
    observed: &ObservableSet,
    model: &IsingModel,
    dec: &DecoherenceModel,
    flags: SequenceFlags,
    options: &FitOptions,
) -> Result<FitResult<Vec<f64>>> {
    if flags.echo {
        return Err(Error::invalid("field fit needs data taken without the spin echo"));
    }
    let n = model.n();
    check_len(observed.n, n)?;
    check_len(n, dec.n())?;
    let dt = observed
        .times
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let h_max = if dt.is_finite() && dt > 0.0 {
        std::f64::consts::PI / (2.0 * dt)
    } else {
        return Err(Error::invalid("field fit needs at least two distinct time points"));
    };
    let fm = FieldForward {
        model,
        dec,
        times: &observed.times,
    };
    let bare = fm.predict(&vec![0.0; n])?;
    let per_time = n + pair_count(n);
    let mut p0 = vec![0.0; n];
    for (i, h0) in p0.iter_mut().enumerate() {
        let cost = |h: f64| -> f64 {
            observed
                .times
                .iter()
                .enumerate()
                .map(|(ti, &t)| {
                    let pred = (2.0 * h * t).cos() * bare[ti * per_time + i];
                    (pred - observed.mag[ti][i].value).powi(2)
                })
                .sum()
        };
        *h0 = (0..=FIELD_GRID)
            .map(|g| h_max * g as f64 / FIELD_GRID as f64)
            .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
            .unwrap_or(0.0);
    }
    run(&fm, observed, &p0, options, |p| p.to_vec())
}
