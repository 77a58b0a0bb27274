//! Ising Hamiltonian parameterization, spin configurations and the sign-flip gauge.
//!
//! All coefficients are angular frequencies in rad/ms and evolution times are in ms,
//! so the phase picked up by a coupling over time `t` is literally `2·J·t`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_index, check_len, Error, Result};

/// Number of unordered ion pairs.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Position of the pair `(i, j)`, `i < j`, in the packed row-major upper triangle.
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

/// All pairs `i < j` in packed order.
pub fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

/// Long-range Ising model `H = Σ_{i<j} J_ij σ_z^i σ_z^j + Σ_i h_i σ_z^i`.
///
/// Couplings are kept as a full symmetric matrix with zero diagonal; files use the
/// packed upper triangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelFile", try_from = "ModelFile")]
pub struct IsingModel {
    n: usize,
    couplings: Vec<f64>,
    fields: Vec<f64>,
}

impl IsingModel {
    pub fn zeros(n: usize) -> Self {
        IsingModel {
            n,
            couplings: vec![0.0; n * n],
            fields: vec![0.0; n],
        }
    }

    /// Builds a model from the packed upper triangle of the coupling matrix.
    pub fn from_upper(n: usize, upper: &[f64], fields: Vec<f64>) -> Result<Self> {
        check_len(pair_count(n), upper.len())?;
        check_len(n, fields.len())?;
        let mut model = IsingModel::zeros(n);
        for ((i, j), &v) in pairs(n).zip(upper) {
            model.set_coupling(i, j, v);
        }
        model.fields = fields;
        model.validate()?;
        Ok(model)
    }

    /// Builds a model from a full matrix, which must be symmetric with zero diagonal.
    pub fn from_matrix(n: usize, matrix: &[f64], fields: Vec<f64>) -> Result<Self> {
        check_len(n * n, matrix.len())?;
        check_len(n, fields.len())?;
        let model = IsingModel {
            n,
            couplings: matrix.to_vec(),
            fields,
        };
        model.validate()?;
        Ok(model)
    }

    /// Random couplings uniform in `[-scale, scale]`, zero fields.
    pub fn random<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Self {
        let upper: Vec<f64> = (0..pair_count(n))
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        IsingModel::from_upper(n, &upper, vec![0.0; n]).expect("consistent dimensions")
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        for i in 0..n {
            if self.couplings[i * n + i] != 0.0 {
                return Err(Error::invalid(format!("nonzero diagonal coupling at {i}")));
            }
            for j in i + 1..n {
                let a = self.couplings[i * n + j];
                let b = self.couplings[j * n + i];
                if !a.is_finite() {
                    return Err(Error::invalid(format!("non-finite coupling ({i},{j})")));
                }
                if a != b {
                    return Err(Error::invalid(format!("asymmetric coupling ({i},{j})")));
                }
            }
        }
        if let Some(i) = self.fields.iter().position(|h| !h.is_finite()) {
            return Err(Error::invalid(format!("non-finite field at {i}")));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        self.couplings[i * self.n + j]
    }

    /// Row `i` of the coupling matrix (entry `i` is zero).
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.couplings[i * self.n..(i + 1) * self.n]
    }

    pub fn set_coupling(&mut self, i: usize, j: usize, value: f64) {
        assert!(i != j, "diagonal couplings are fixed at zero");
        let n = self.n;
        self.couplings[i * n + j] = value;
        self.couplings[j * n + i] = value;
    }

    pub fn matrix(&self) -> &[f64] {
        &self.couplings
    }

    pub fn fields(&self) -> &[f64] {
        &self.fields
    }

    pub fn with_fields(mut self, fields: Vec<f64>) -> Result<Self> {
        check_len(self.n, fields.len())?;
        self.fields = fields;
        self.validate()?;
        Ok(self)
    }

    /// Packed upper triangle, the fitting parameter vector of the full scheme.
    pub fn upper(&self) -> Vec<f64> {
        pairs(self.n).map(|(i, j)| self.coupling(i, j)).collect()
    }

    /// Same couplings with all fields zeroed.
    pub fn without_fields(&self) -> Self {
        IsingModel {
            fields: vec![0.0; self.n],
            ..self.clone()
        }
    }

    pub fn frobenius_distance(&self, other: &IsingModel) -> Result<f64> {
        check_len(self.n, other.n)?;
        Ok(self
            .couplings
            .iter()
            .zip(&other.couplings)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

/// A classical σ_z configuration with entries ±1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpinConfiguration(Vec<i8>);

impl SpinConfiguration {
    pub fn new(spins: Vec<i8>) -> Result<Self> {
        if let Some(i) = spins.iter().position(|&s| s != 1 && s != -1) {
            return Err(Error::invalid(format!("spin {i} is not ±1")));
        }
        Ok(SpinConfiguration(spins))
    }

    pub fn all_up(n: usize) -> Self {
        SpinConfiguration(vec![1; n])
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        SpinConfiguration((0..n).map(|_| if rng.random() { 1 } else { -1 }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn spins(&self) -> &[i8] {
        &self.0
    }

    pub fn flipped(&self, i: usize) -> Self {
        let mut s = self.0.clone();
        s[i] = -s[i];
        SpinConfiguration(s)
    }

    pub fn negated(&self) -> Self {
        SpinConfiguration(self.0.iter().map(|s| -s).collect())
    }
}

/// `E(s) = Σ_{i<j} J_ij s_i s_j + Σ_i h_i s_i`.
pub fn energy(model: &IsingModel, config: &SpinConfiguration) -> Result<f64> {
    check_len(model.n, config.len())?;
    Ok(energy_unchecked(model, config.spins()))
}

pub(crate) fn energy_unchecked(model: &IsingModel, s: &[i8]) -> f64 {
    let n = model.n;
    let mut e = 0.0;
    for i in 0..n {
        let row = model.row(i);
        let si = f64::from(s[i]);
        let mut local = 0.0;
        for j in i + 1..n {
            local += row[j] * f64::from(s[j]);
        }
        e += si * (local + model.fields[i]);
    }
    e
}

/// Flips the sign of every coupling touching ion `i`. Fields are left alone: the
/// gauge only holds for the echoed, field-cancelled sequence.
pub fn gauge_flip(model: &IsingModel, i: usize) -> Result<IsingModel> {
    check_index(i, model.n)?;
    let mut out = model.clone();
    for j in 0..model.n {
        if j != i {
            let v = -model.coupling(i, j);
            out.set_coupling(i, j, v);
        }
    }
    Ok(out)
}

/// Applies a full sign vector `D`: `J → D J D`.
pub fn apply_gauge(model: &IsingModel, signs: &[i8]) -> Result<IsingModel> {
    check_len(model.n, signs.len())?;
    let mut out = model.clone();
    for (i, j) in pairs(model.n) {
        let v = f64::from(signs[i] * signs[j]) * model.coupling(i, j);
        out.set_coupling(i, j, v);
    }
    Ok(out)
}

/// Frobenius distance between `m1` and the closest gauge copy `D m2 D` found by greedy
/// single-ion sign flips starting from `D = I`.
///
/// This is a heuristic: it is exact whenever a gauge copy is close, but the underlying
/// problem is combinatorial and greedy descent can stop in a local minimum.
pub fn gauge_distance(m1: &IsingModel, m2: &IsingModel) -> Result<f64> {
    Ok(gauge_align(m1, m2)?.1)
}

/// Greedy gauge alignment; returns the sign vector applied to `m2` and the distance.
pub fn gauge_align(m1: &IsingModel, m2: &IsingModel) -> Result<(Vec<i8>, f64)> {
    check_len(m1.n, m2.n)?;
    let n = m1.n;
    let mut d = vec![1i8; n];
    loop {
        // Change of ‖J1 − D J2 D‖² when flipping d_i is 8 Σ_j J1_ij d_i d_j J2_ij.
        let mut best = (0.0, usize::MAX);
        for i in 0..n {
            let r1 = m1.row(i);
            let r2 = m2.row(i);
            let delta: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| 8.0 * r1[j] * f64::from(d[i] * d[j]) * r2[j])
                .sum();
            if delta < best.0 {
                best = (delta, i);
            }
        }
        if best.1 == usize::MAX || best.0 > -1e-300 {
            break;
        }
        d[best.1] = -d[best.1];
    }
    let aligned = apply_gauge(m2, &d)?;
    let dist = m1.frobenius_distance(&aligned)?;
    Ok((d, dist))
}

/// Per-ion Gaussian decoherence rates (rad/ms): correlated and independent parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DecoherenceFile", into = "DecoherenceFile")]
pub struct DecoherenceModel {
    gamma_cor: Vec<f64>,
    gamma_ind: Vec<f64>,
}

impl DecoherenceModel {
    pub fn new(gamma_cor: Vec<f64>, gamma_ind: Vec<f64>) -> Result<Self> {
        check_len(gamma_cor.len(), gamma_ind.len())?;
        for (name, v) in [("gamma_cor", &gamma_cor), ("gamma_ind", &gamma_ind)] {
            if let Some(i) = v.iter().position(|g| !g.is_finite() || *g < 0.0) {
                return Err(Error::invalid(format!("{name}[{i}] must be finite and ≥ 0")));
            }
        }
        Ok(DecoherenceModel {
            gamma_cor,
            gamma_ind,
        })
    }

    pub fn none(n: usize) -> Self {
        DecoherenceModel {
            gamma_cor: vec![0.0; n],
            gamma_ind: vec![0.0; n],
        }
    }

    pub fn uniform(n: usize, gamma_cor: f64, gamma_ind: f64) -> Result<Self> {
        DecoherenceModel::new(vec![gamma_cor; n], vec![gamma_ind; n])
    }

    pub fn n(&self) -> usize {
        self.gamma_cor.len()
    }

    pub fn gamma_cor(&self) -> &[f64] {
        &self.gamma_cor
    }

    pub fn gamma_ind(&self) -> &[f64] {
        &self.gamma_ind
    }

    pub fn is_zero(&self) -> bool {
        self.gamma_cor.iter().chain(&self.gamma_ind).all(|&g| g == 0.0)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    n: usize,
    j_upper: Vec<f64>,
    h: Vec<f64>,
    units: String,
}

impl From<IsingModel> for ModelFile {
    fn from(m: IsingModel) -> Self {
        ModelFile {
            n: m.n,
            j_upper: m.upper(),
            h: m.fields,
            units: UNITS.to_string(),
        }
    }
}

impl TryFrom<ModelFile> for IsingModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.units != UNITS {
            return Err(Error::Format(format!("unsupported units {:?}", f.units)));
        }
        IsingModel::from_upper(f.n, &f.j_upper, f.h)
    }
}

#[derive(Serialize, Deserialize)]
struct DecoherenceFile {
    gamma_cor: Vec<f64>,
    gamma_ind: Vec<f64>,
    #[serde(default = "default_units")]
    units: String,
}

fn default_units() -> String {
    UNITS.to_string()
}

impl From<DecoherenceModel> for DecoherenceFile {
    fn from(d: DecoherenceModel) -> Self {
        DecoherenceFile {
            gamma_cor: d.gamma_cor,
            gamma_ind: d.gamma_ind,
            units: UNITS.to_string(),
        }
    }
}

impl TryFrom<DecoherenceFile> for DecoherenceModel {
    type Error = Error;

    fn try_from(f: DecoherenceFile) -> Result<Self> {
        if f.units != UNITS {
            return Err(Error::Format(format!("unsupported units {:?}", f.units)));
        }
        DecoherenceModel::new(f.gamma_cor, f.gamma_ind)
    }
}

const UNITS: &str = "rad_per_ms";

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_energy(m: &IsingModel, s: &[i8]) -> f64 {
        let mut e = 0.0;
        for i in 0..m.n() {
            for j in 0..m.n() {
                if i < j {
                    e += m.coupling(i, j) * f64::from(s[i]) * f64::from(s[j]);
                }
            }
            e += m.fields()[i] * f64::from(s[i]);
        }
        e
    }

    #[test]
    fn energy_by_hand() {
        let m = IsingModel::from_upper(2, &[1.0], vec![0.0, 0.0]).unwrap();
        let up = SpinConfiguration::new(vec![1, 1]).unwrap();
        assert_eq!(energy(&m, &up).unwrap(), 1.0);

        let m = IsingModel::from_upper(2, &[1.0], vec![0.5, 0.0]).unwrap();
        let s = SpinConfiguration::new(vec![1, -1]).unwrap();
        assert_eq!(energy(&m, &s).unwrap(), -0.5);
    }

    #[test]
    fn energy_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fields: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = IsingModel::random(8, 1.0, &mut rng).with_fields(fields).unwrap();
        for _ in 0..20 {
            let s = SpinConfiguration::random(8, &mut rng);
            let e = energy(&m, &s).unwrap();
            assert!((e - naive_energy(&m, s.spins())).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_dimension_mismatch() {
        let m = IsingModel::zeros(3);
        let s = SpinConfiguration::all_up(4);
        assert!(matches!(energy(&m, &s), Err(Error::DimensionMismatch { .. })));
        assert!(SpinConfiguration::new(vec![1, 0]).is_err());
    }

    #[test]
    fn flip_definition_and_range() {
        let m = IsingModel::from_upper(3, &[1.0, 2.0, 3.0], vec![0.0; 3]).unwrap();
        let f = gauge_flip(&m, 0).unwrap();
        assert_eq!(f.upper(), vec![-1.0, -2.0, 3.0]);
        assert_eq!(gauge_flip(&f, 0).unwrap(), m);
        assert!(matches!(
            gauge_flip(&m, 3),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn gauge_distance_of_copies_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = IsingModel::random(7, 1.0, &mut rng);
        assert_eq!(gauge_distance(&m, &m).unwrap(), 0.0);
        let f = gauge_flip(&gauge_flip(&m, 2).unwrap(), 5).unwrap();
        assert!(gauge_distance(&m, &f).unwrap() < 1e-15);
        assert!(gauge_distance(&m, &f).unwrap() <= m.frobenius_distance(&f).unwrap());
    }

    fn exhaustive_gauge_distance(m1: &IsingModel, m2: &IsingModel) -> f64 {
        let n = m1.n();
        let mut best = f64::INFINITY;
        for mask in 0..(1u32 << n) {
            let mut d = 0.0;
            for (i, j) in pairs(n) {
                let si = if mask >> i & 1 == 1 { -1.0 } else { 1.0 };
                let sj = if mask >> j & 1 == 1 { -1.0 } else { 1.0 };
                let r = m1.coupling(i, j) - si * sj * m2.coupling(i, j);
                d += 2.0 * r * r;
            }
            best = best.min(d.sqrt());
        }
        best
    }

    #[test]
    fn gauge_distance_recovers_perturbation_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m1 = IsingModel::random(6, 1.0, &mut rng);
        let mut m2 = gauge_flip(&gauge_flip(&m1, 1).unwrap(), 4).unwrap();
        let mut delta = IsingModel::zeros(6);
        for (i, j) in pairs(6) {
            let d = rng.random_range(-1e-3..1e-3);
            delta.set_coupling(i, j, d);
            m2.set_coupling(i, j, m2.coupling(i, j) + d);
        }
        let oracle = exhaustive_gauge_distance(&m1, &m2);
        let greedy = gauge_distance(&m1, &m2).unwrap();
        let delta_norm = delta.frobenius_distance(&IsingModel::zeros(6)).unwrap();
        assert!((greedy - oracle).abs() < 1e-12);
        assert!((greedy - delta_norm).abs() < 1e-12);
    }

    #[test]
    fn json_uses_packed_upper_triangle() {
        let m = IsingModel::from_upper(3, &[1.0, 2.0, 3.0], vec![0.1, 0.2, 0.3]).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(
            text,
            r#"{"n":3,"j_upper":[1.0,2.0,3.0],"h":[0.1,0.2,0.3],"units":"rad_per_ms"}"#
        );
        let back: IsingModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        let bad = r#"{"n":3,"j_upper":[1.0,2.0],"h":[0,0,0],"units":"rad_per_ms"}"#;
        assert!(serde_json::from_str::<IsingModel>(bad).is_err());
    }

    #[test]
    fn decoherence_rejects_negative_rates() {
        assert!(DecoherenceModel::new(vec![0.1, -0.1], vec![0.0, 0.0]).is_err());
        assert!(DecoherenceModel::new(vec![0.1], vec![0.0, 0.0]).is_err());
        assert!(DecoherenceModel::uniform(3, 0.05, 0.1).is_ok());
    }

    proptest! {
        #[test]
        fn flip_matches_spin_flip_without_fields(seed in 0u64..1000, i in 0usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = IsingModel::random(7, 1.0, &mut rng);
            let s = SpinConfiguration::random(7, &mut rng);
            let lhs = energy(&gauge_flip(&m, i).unwrap(), &s).unwrap();
            let rhs = energy(&m, &s.flipped(i)).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
            let neg = energy(&m, &s.negated()).unwrap();
            prop_assert!((energy(&m, &s).unwrap() - neg).abs() < 1e-12);
        }

        #[test]
        fn exhaustive_gauge_distance_is_symmetric(seed in 0u64..200, n in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = IsingModel::random(n, 1.0, &mut rng);
            let b = IsingModel::random(n, 1.0, &mut rng);
            let ab = exhaustive_gauge_distance(&a, &b);
            let ba = exhaustive_gauge_distance(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(gauge_distance(&a, &b).unwrap() >= ab - 1e-12);
        }
    }
}
