//! Closed-form x-basis expectation values after Ising evolution from |+…+⟩.
//!
//! With zero decoherence these are exact for the spin-only model. Decoherence enters
//! as Gaussian envelopes; with the echo off the longitudinal-field cosines and the
//! envelopes are composed multiplicatively.

use serde::{Deserialize, Serialize};

use crate::error::{check_index, check_len, Error, Result};
use crate::model::{pair_count, pair_index, pairs, DecoherenceModel, IsingModel};

/// Largest k accepted by [`kbody_correlation`].
pub const MAX_KBODY: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceFlags {
    /// Spin echo in the middle of the evolution; cancels the longitudinal fields.
    pub echo: bool,
    pub include_decoherence: bool,
}

impl SequenceFlags {
    pub const ECHO: SequenceFlags = SequenceFlags {
        echo: true,
        include_decoherence: false,
    };

    pub fn new(echo: bool, include_decoherence: bool) -> Self {
        SequenceFlags {
            echo,
            include_decoherence,
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if t.is_finite() && t >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("evolution time must be ≥ 0, got {t}")))
    }
}

fn check_dec(model: &IsingModel, dec: &DecoherenceModel, flags: SequenceFlags) -> Result<()> {
    if flags.include_decoherence {
        check_len(model.n(), dec.n())?;
    }
    Ok(())
}

/// Per-time trigonometric tables shared by the scalar, batch and Jacobian kernels.
pub(crate) struct TimeKernel<'a> {
    pub n: usize,
    pub t: f64,
    model: &'a IsingModel,
    dec: &'a DecoherenceModel,
    flags: SequenceFlags,
    /// cos(2 J_ki t), row-major.
    pub cos: Vec<f64>,
    /// sin(2 J_ki t), row-major.
    pub sin: Vec<f64>,
}

impl<'a> TimeKernel<'a> {
    pub fn new(
        model: &'a IsingModel,
        dec: &'a DecoherenceModel,
        t: f64,
        flags: SequenceFlags,
    ) -> Self {
        let n = model.n();
        let mut cos = vec![1.0; n * n];
        let mut sin = vec![0.0; n * n];
        for (idx, &j) in model.matrix().iter().enumerate() {
            let (s, c) = (2.0 * j * t).sin_cos();
            cos[idx] = c;
            sin[idx] = s;
        }
        TimeKernel {
            n,
            t,
            model,
            dec,
            flags,
            cos,
            sin,
        }
    }

    /// Field factor and decoherence envelope of a single spin.
    pub fn mag_prefactor(&self, i: usize) -> f64 {
        let t = self.t;
        let mut f = 1.0;
        if !self.flags.echo {
            f *= (2.0 * self.model.fields()[i] * t).cos();
        }
        if self.flags.include_decoherence {
            let gi = self.dec.gamma_ind()[i];
            let gc = self.dec.gamma_cor()[i];
            f *= (-(gi * gi + gc * gc) * t * t).exp();
        }
        f
    }

    /// Prefactors of the `J_ki + J_kj` and `J_ki − J_kj` branches of a pair.
    pub fn pair_prefactors(&self, i: usize, j: usize) -> (f64, f64) {
        let t = self.t;
        let (mut plus, mut minus) = (0.5, 0.5);
        if !self.flags.echo {
            let h = self.model.fields();
            plus *= (2.0 * (h[i] + h[j]) * t).cos();
            minus *= (2.0 * (h[i] - h[j]) * t).cos();
        }
        if self.flags.include_decoherence {
            let gi = self.dec.gamma_ind();
            let gc = self.dec.gamma_cor();
            let base = gi[i] * gi[i] + gi[j] * gi[j];
            let sp = gc[i] + gc[j];
            let sm = gc[i] - gc[j];
            plus *= (-(base + sp * sp) * t * t).exp();
            minus *= (-(base + sm * sm) * t * t).exp();
        }
        (plus, minus)
    }

    pub fn magnetization(&self, i: usize) -> f64 {
        let n = self.n;
        let row = &self.cos[i * n..(i + 1) * n];
        let prod: f64 = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .map(|(_, c)| c)
            .product();
        self.mag_prefactor(i) * prod
    }

    /// Branch cosines `cos 2(J_ki ± J_kj)t` for every spectator k.
    #[inline]
    pub fn pair_terms(&self, i: usize, j: usize, k: usize) -> (f64, f64, f64, f64) {
        let n = self.n;
        let (ci, si) = (self.cos[k * n + i], self.sin[k * n + i]);
        let (cj, sj) = (self.cos[k * n + j], self.sin[k * n + j]);
        // cos(a ± b), sin(a ± b)
        (
            ci * cj - si * sj,
            ci * cj + si * sj,
            si * cj + ci * sj,
            si * cj - ci * sj,
        )
    }

    pub fn pair(&self, i: usize, j: usize) -> f64 {
        let (pp, pm) = self.pair_prefactors(i, j);
        let mut prod_p = 1.0;
        let mut prod_m = 1.0;
        for k in 0..self.n {
            if k == i || k == j {
                continue;
            }
            let (cp, cm, _, _) = self.pair_terms(i, j, k);
            prod_p *= cp;
            prod_m *= cm;
        }
        pp * prod_p + pm * prod_m
    }
}

/// `⟨σ_x^i(t)⟩`.
pub fn magnetization(
    model: &IsingModel,
    dec: &DecoherenceModel,
    t: f64,
    i: usize,
    flags: SequenceFlags,
) -> Result<f64> {
    check_index(i, model.n())?;
    check_time(t)?;
    check_dec(model, dec, flags)?;
    Ok(TimeKernel::new(model, dec, t, flags).magnetization(i))
}

/// `⟨σ_x^i(t) σ_x^j(t)⟩`.
pub fn pair_correlation(
    model: &IsingModel,
    dec: &DecoherenceModel,
    t: f64,
    i: usize,
    j: usize,
    flags: SequenceFlags,
) -> Result<f64> {
    check_index(i, model.n())?;
    check_index(j, model.n())?;
    if i == j {
        return Err(Error::invalid("pair correlation needs two distinct ions"));
    }
    check_time(t)?;
    check_dec(model, dec, flags)?;
    Ok(TimeKernel::new(model, dec, t, flags).pair(i, j))
}

/// `⟨σ_x^{i_1} ⋯ σ_x^{i_k}⟩` by summing over the 2^k sign assignments of the selected
/// spins. The sum is invariant under `s → −s`, so only assignments with the first
/// spin up are visited, in Gray-code order so each step costs O(n).
pub fn kbody_correlation(
    model: &IsingModel,
    dec: &DecoherenceModel,
    t: f64,
    indices: &[usize],
    flags: SequenceFlags,
) -> Result<f64> {
    let n = model.n();
    let k = indices.len();
    if k == 0 {
        return Err(Error::invalid("k-body correlation needs at least one ion"));
    }
    if k > MAX_KBODY {
        return Err(Error::invalid(format!("k = {k} exceeds the cap of {MAX_KBODY}")));
    }
    let mut selected = vec![false; n];
    for &i in indices {
        check_index(i, n)?;
        if selected[i] {
            return Err(Error::invalid(format!("duplicate ion index {i}")));
        }
        selected[i] = true;
    }
    check_time(t)?;
    check_dec(model, dec, flags)?;

    let spectators: Vec<usize> = (0..n).filter(|&l| !selected[l]).collect();
    let h = model.fields();
    let (gi, gc) = (dec.gamma_ind(), dec.gamma_cor());
    let ind_sum: f64 = if flags.include_decoherence {
        indices.iter().map(|&i| gi[i] * gi[i]).sum()
    } else {
        0.0
    };

    // Running sums for the all-up assignment.
    let mut signs = vec![1.0f64; k];
    let mut field = if flags.echo {
        0.0
    } else {
        indices.iter().map(|&i| h[i]).sum()
    };
    let mut cor = if flags.include_decoherence {
        indices.iter().map(|&i| gc[i]).sum()
    } else {
        0.0
    };
    let mut local: Vec<f64> = spectators
        .iter()
        .map(|&l| indices.iter().map(|&i| model.coupling(l, i)).sum())
        .collect();

    let terms = 1usize << (k - 1);
    let mut total = 0.0;
    for step in 0..terms {
        if step > 0 {
            // Flip the spin given by the lowest set bit of the step (never spin 0).
            let m = step.trailing_zeros() as usize + 1;
            let i = indices[m];
            signs[m] = -signs[m];
            let s = signs[m];
            if !flags.echo {
                field += 2.0 * s * h[i];
            }
            if flags.include_decoherence {
                cor += 2.0 * s * gc[i];
            }
            for (a, &l) in local.iter_mut().zip(&spectators) {
                *a += 2.0 * s * model.coupling(l, i);
            }
        }
        let mut term = (2.0 * field * t).cos();
        if flags.include_decoherence {
            term *= (-(ind_sum + cor * cor) * t * t).exp();
        }
        for a in &local {
            term *= (2.0 * a * t).cos();
        }
        total += term;
    }
    Ok(total / terms as f64)
}

/// Early-time approximation `4 J² t²` of the connected correlator
/// `⟨σ_x^i σ_x^j⟩ − ⟨σ_x^i⟩⟨σ_x^j⟩`; only valid while `J t ≪ 1`.
pub fn early_time_connected(coupling: f64, t: f64) -> f64 {
    4.0 * coupling * coupling * t * t
}

/// `½ cos(φ_i − φ_j)`: the phase-averaged connected σ_z correlation used to diagnose
/// a misaligned laser wavefront. Panics on an out-of-range index.
pub fn phase_misalignment_correlation(phi: &[f64], i: usize, j: usize) -> f64 {
    0.5 * (phi[i] - phi[j]).cos()
}

/// Predicted magnetizations and pair correlations on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableTable {
    pub n: usize,
    pub times: Vec<f64>,
    /// `mag[t][i]`
    pub mag: Vec<Vec<f64>>,
    /// `corr[t][pair_index(i, j)]`
    pub corr: Vec<Vec<f64>>,
}

impl ObservableTable {
    pub fn corr_at(&self, ti: usize, i: usize, j: usize) -> f64 {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.corr[ti][pair_index(self.n, a, b)]
    }

    /// Values in residual order: per time, magnetizations then packed correlations.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.times.len() * (self.n + pair_count(self.n)));
        for (m, c) in self.mag.iter().zip(&self.corr) {
            out.extend_from_slice(m);
            out.extend_from_slice(c);
        }
        out
    }
}

/// All magnetizations and correlations for every time.
///
/// Cost per time point: O(n²) trigonometric evaluations, O(n²) for the
/// magnetizations and O(n³) for the correlations. Branch cosines are assembled from
/// the shared `cos/sin(2 J t)` tables by angle addition, so the O(n³) part is
/// multiply-add only; the products themselves do not factorize further.
pub fn batch_observables(
    model: &IsingModel,
    dec: &DecoherenceModel,
    times: &[f64],
    flags: SequenceFlags,
) -> Result<ObservableTable> {
    check_dec(model, dec, flags)?;
    let n = model.n();
    let mut mag = Vec::with_capacity(times.len());
    let mut corr = Vec::with_capacity(times.len());
    for &t in times {
        check_time(t)?;
        let kernel = TimeKernel::new(model, dec, t, flags);
        mag.push((0..n).map(|i| kernel.magnetization(i)).collect());
        corr.push(pairs(n).map(|(i, j)| kernel.pair(i, j)).collect());
    }
    Ok(ObservableTable {
        n,
        times: times.to_vec(),
        mag,
        corr,
    })
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Brute-force state-vector reference: diagonal phases followed by a
    //! Walsh–Hadamard transform into the x basis.
    use num_complex::Complex64;

    use crate::model::IsingModel;

    /// Probability of every x-basis outcome; bit `i` set means spin `i` read `−1`.
    pub fn x_distribution(model: &IsingModel, fields: &[f64], t: f64) -> Vec<f64> {
        let n = model.n();
        let dim = 1usize << n;
        let mut amp: Vec<Complex64> = (0..dim)
            .map(|z| {
                let s: Vec<f64> = (0..n)
                    .map(|i| if z >> i & 1 == 1 { -1.0 } else { 1.0 })
                    .collect();
                let mut e = 0.0;
                for i in 0..n {
                    for j in i + 1..n {
                        e += model.coupling(i, j) * s[i] * s[j];
                    }
                    e += fields[i] * s[i];
                }
                Complex64::from_polar(1.0, -e * t)
            })
            .collect();
        // Plain O(4^n) Hadamard for independence from the fast transform.
        let mut out = vec![Complex64::new(0.0, 0.0); dim];
        for (y, o) in out.iter_mut().enumerate() {
            for (z, a) in amp.iter().enumerate() {
                let parity = (y & z).count_ones() % 2;
                if parity == 0 {
                    *o += a;
                } else {
                    *o -= a;
                }
            }
        }
        amp.clear();
        out.iter().map(|a| a.norm_sqr() / (dim * dim) as f64).collect()
    }

    /// `⟨Π_{i∈set} σ_x^i⟩` from the distribution.
    pub fn expectation(dist: &[f64], set: &[usize]) -> f64 {
        dist.iter()
            .enumerate()
            .map(|(y, p)| {
                let odd = set.iter().filter(|&&i| y >> i & 1 == 1).count() % 2 == 1;
                if odd {
                    -p
                } else {
                    *p
                }
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::{expectation, x_distribution};
    use super::*;
    use crate::model::gauge_flip;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const NO_DEC: SequenceFlags = SequenceFlags {
        echo: true,
        include_decoherence: false,
    };
    const NO_ECHO: SequenceFlags = SequenceFlags {
        echo: false,
        include_decoherence: false,
    };

    fn random_model(n: usize, rng: &mut ChaCha8Rng) -> IsingModel {
        let fields = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        IsingModel::random(n, 0.6, rng).with_fields(fields).unwrap()
    }

    #[test]
    fn trivial_values() {
        let m = IsingModel::zeros(4);
        let d = DecoherenceModel::none(4);
        assert_eq!(magnetization(&m, &d, 3.0, 2, NO_DEC).unwrap(), 1.0);
        assert_eq!(kbody_correlation(&m, &d, 3.0, &[0, 1, 3], NO_DEC).unwrap(), 1.0);

        let j = 0.3;
        let m = IsingModel::from_upper(2, &[j], vec![0.0; 2]).unwrap();
        let d = DecoherenceModel::none(2);
        let t = std::f64::consts::PI / (4.0 * j);
        assert!(magnetization(&m, &d, t, 0, NO_DEC).unwrap().abs() < 1e-15);
        for t in [0.0, 0.4, 7.0] {
            assert_eq!(pair_correlation(&m, &d, t, 0, 1, NO_DEC).unwrap(), 1.0);
        }
    }

    #[test]
    fn value_one_at_time_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_model(6, &mut rng);
        let d = DecoherenceModel::uniform(6, 0.2, 0.3).unwrap();
        let flags = SequenceFlags::new(false, true);
        assert_eq!(magnetization(&m, &d, 0.0, 3, flags).unwrap(), 1.0);
        assert_eq!(pair_correlation(&m, &d, 0.0, 1, 4, flags).unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        let m = IsingModel::zeros(3);
        let d = DecoherenceModel::none(3);
        assert!(magnetization(&m, &d, -1.0, 0, NO_DEC).is_err());
        assert!(magnetization(&m, &d, 1.0, 3, NO_DEC).is_err());
        assert!(pair_correlation(&m, &d, 1.0, 1, 1, NO_DEC).is_err());
        assert!(kbody_correlation(&m, &d, 1.0, &[0, 0], NO_DEC).is_err());
        assert!(kbody_correlation(&m, &d, 1.0, &[], NO_DEC).is_err());
        let big = IsingModel::zeros(20);
        let dbig = DecoherenceModel::none(20);
        let idx: Vec<usize> = (0..17).collect();
        assert!(kbody_correlation(&big, &dbig, 1.0, &idx, NO_DEC).is_err());
        let short = DecoherenceModel::none(2);
        let flags = SequenceFlags::new(true, true);
        assert!(magnetization(&m, &short, 1.0, 0, flags).is_err());
    }

    #[test]
    fn matches_state_vector_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let m = random_model(5, &mut rng);
        let d = DecoherenceModel::none(5);
        let t = 0.7;
        let dist = x_distribution(&m, m.fields(), t);
        for i in 0..5 {
            let exact = expectation(&dist, &[i]);
            assert!((magnetization(&m, &d, t, i, NO_ECHO).unwrap() - exact).abs() < 1e-10);
            for j in i + 1..5 {
                let exact = expectation(&dist, &[i, j]);
                let v = pair_correlation(&m, &d, t, i, j, NO_ECHO).unwrap();
                assert!((v - exact).abs() < 1e-10);
            }
        }

        let m = random_model(8, &mut rng);
        let d = DecoherenceModel::none(8);
        let dist = x_distribution(&m, m.fields(), 0.5);
        for set in [vec![0, 3, 7], vec![1, 2, 5, 6], vec![0, 2, 4, 6, 7]] {
            let exact = expectation(&dist, &set);
            let v = kbody_correlation(&m, &d, 0.5, &set, NO_ECHO).unwrap();
            assert!((v - exact).abs() < 1e-10, "{set:?}: {v} vs {exact}");
        }
        // With the echo the fields drop out.
        let dist = x_distribution(&m, &[0.0; 8], 0.5);
        let v = kbody_correlation(&m, &d, 0.5, &[1, 4, 5], NO_DEC).unwrap();
        assert!((v - expectation(&dist, &[1, 4, 5])).abs() < 1e-10);
    }

    #[test]
    fn kbody_specializes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_model(6, &mut rng);
        let d = DecoherenceModel::new(
            (0..6).map(|_| rng.random_range(0.0..0.2)).collect(),
            (0..6).map(|_| rng.random_range(0.0..0.2)).collect(),
        )
        .unwrap();
        for flags in [NO_DEC, NO_ECHO, SequenceFlags::new(false, true)] {
            for t in [0.3, 1.1] {
                let k1 = kbody_correlation(&m, &d, t, &[2], flags).unwrap();
                let m1 = magnetization(&m, &d, t, 2, flags).unwrap();
                assert!((k1 - m1).abs() < 1e-12);
                let k2 = kbody_correlation(&m, &d, t, &[4, 1], flags).unwrap();
                let p2 = pair_correlation(&m, &d, t, 1, 4, flags).unwrap();
                assert!((k2 - p2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoherence_envelopes_without_couplings() {
        let m = IsingModel::zeros(3);
        let d = DecoherenceModel::new(vec![0.05, 0.02, 0.0], vec![0.1, 0.15, 0.07]).unwrap();
        let flags = SequenceFlags::new(true, true);
        for t in [0.5, 2.0, 9.0] {
            let want = (-(0.1f64.powi(2) + 0.05f64.powi(2)) * t * t).exp();
            assert!((magnetization(&m, &d, t, 0, flags).unwrap() - want).abs() < 1e-15);
            let base = 0.1f64.powi(2) + 0.15f64.powi(2);
            let want = 0.5 * (-(base + 0.07f64.powi(2)) * t * t).exp()
                + 0.5 * (-(base + 0.03f64.powi(2)) * t * t).exp();
            assert!((pair_correlation(&m, &d, t, 0, 1, flags).unwrap() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn early_time_limit() {
        assert_eq!(early_time_connected(0.0, 5.0), 0.0);
        assert!((early_time_connected(0.1, 0.1) - 4e-4).abs() < 1e-18);

        // Remainder of the connected correlator beyond 4J²t² is O(t⁴).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = IsingModel::random(6, 1.0, &mut rng);
        let d = DecoherenceModel::none(6);
        let remainder = |t: f64| {
            let c = pair_correlation(&m, &d, t, 0, 1, NO_DEC).unwrap();
            let a = magnetization(&m, &d, t, 0, NO_DEC).unwrap();
            let b = magnetization(&m, &d, t, 1, NO_DEC).unwrap();
            (c - a * b - early_time_connected(m.coupling(0, 1), t)).abs()
        };
        let ts = [0.02, 0.01, 0.005];
        let coeffs: Vec<f64> = ts.iter().map(|&t| remainder(t) / t.powi(4)).collect();
        let slope = (remainder(0.02) / remainder(0.005)).ln() / 4f64.ln();
        assert!((slope - 4.0).abs() < 0.05, "slope {slope}");
        assert!(coeffs.iter().all(|c| *c < coeffs[2] * 1.1));
    }

    #[test]
    fn batch_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = random_model(10, &mut rng);
        let d = DecoherenceModel::uniform(10, 0.05, 0.1).unwrap();
        let times = [0.0, 0.3, 1.7];
        for flags in [NO_DEC, SequenceFlags::new(false, true)] {
            let table = batch_observables(&m, &d, &times, flags).unwrap();
            assert!(table.mag[0].iter().chain(&table.corr[0]).all(|&v| v == 1.0));
            for (ti, &t) in times.iter().enumerate() {
                for i in 0..10 {
                    let v = magnetization(&m, &d, t, i, flags).unwrap();
                    assert!((table.mag[ti][i] - v).abs() < 1e-12);
                }
                for (i, j) in pairs(10) {
                    let v = pair_correlation(&m, &d, t, i, j, flags).unwrap();
                    assert!((table.corr_at(ti, i, j) - v).abs() < 1e-12);
                }
            }
        }
        // Correlated dephasing couples to the sign of each spin, so the gauge check
        // uses independent dephasing only.
        let d = DecoherenceModel::uniform(10, 0.0, 0.1).unwrap();
        let flipped = gauge_flip(&m, 3).unwrap();
        let flags = SequenceFlags::new(true, true);
        let a = batch_observables(&m, &d, &times, flags).unwrap();
        let b = batch_observables(&flipped, &d, &times, flags).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn misalignment_correlation() {
        let pi = std::f64::consts::PI;
        assert_eq!(phase_misalignment_correlation(&[0.3, 0.3], 0, 1), 0.5);
        assert!((phase_misalignment_correlation(&[0.0, pi], 0, 1) + 0.5).abs() < 1e-15);

        // Averaging cos(φ_i+Δ)cos(φ_j+Δ) over a uniform global phase Δ.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let phi = [rng.random_range(0.0..2.0 * pi), rng.random_range(0.0..2.0 * pi)];
        let samples = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..samples {
            let delta = rng.random_range(0.0..2.0 * pi);
            acc += (phi[0] + delta).cos() * (phi[1] + delta).cos();
        }
        let mc = acc / samples as f64;
        assert!((mc - phase_misalignment_correlation(&phi, 0, 1)).abs() < 1e-3);
        assert_eq!(
            phase_misalignment_correlation(&phi, 0, 1),
            phase_misalignment_correlation(&phi, 1, 0)
        );
    }

    proptest! {
        #[test]
        fn echoed_observables_are_gauge_invariant(seed in 0u64..500, flip in 0usize..7, t in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(7, &mut rng);
            let f = gauge_flip(&m, flip).unwrap();
            let d = DecoherenceModel::uniform(7, 0.0, 0.1).unwrap();
            let flags = SequenceFlags::new(true, true);
            for i in 0..7 {
                let a = magnetization(&m, &d, t, i, flags).unwrap();
                let b = magnetization(&f, &d, t, i, flags).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
            let a = pair_correlation(&m, &d, t, 1, 5, flags).unwrap();
            let b = pair_correlation(&f, &d, t, 1, 5, flags).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            let a = kbody_correlation(&m, &d, t, &[0, 2, 6], flags).unwrap();
            let b = kbody_correlation(&f, &d, t, &[0, 2, 6], flags).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn values_are_bounded(seed in 0u64..500, t in 0.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(6, &mut rng);
            let d = DecoherenceModel::uniform(6, 0.1, 0.2).unwrap();
            let flags = SequenceFlags::new(false, true);
            let table = batch_observables(&m, &d, &[t], flags).unwrap();
            for v in table.flatten() {
                prop_assert!(v.abs() <= 1.0 + 1e-12);
            }
            let k = kbody_correlation(&m, &d, t, &[0, 1, 2, 3], flags).unwrap();
            prop_assert!(k.abs() <= 1.0 + 1e-12);
        }
    }
}
