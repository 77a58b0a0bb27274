//! Planar ion-crystal mechanics and the phonon-mediated coupling model.
//!
//! Mechanics run in dimensionless units: lengths in `ℓ = (e²/4πε₀mω_s²)^{1/3}` and
//! energies in `mω_s²ℓ²`, where `ω_s` is the potential's fixed scale frequency. The
//! crystal lies in the x–z plane; y is the transverse (drumhead) direction.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_index, check_len, Error, Result};
use crate::lm::{central_difference, minimize, LeastSquares, LmOptions, LmStatus};
use crate::model::IsingModel;

pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;

/// `ℓ` in µm for an ion of `mass_amu` at scale frequency `omega` (rad/ms).
pub fn length_scale_um(mass_amu: f64, omega: f64) -> f64 {
    let w = omega * 1e3;
    let k = ELEMENTARY_CHARGE * ELEMENTARY_CHARGE / (4.0 * std::f64::consts::PI * VACUUM_PERMITTIVITY);
    (k / (mass_amu * ATOMIC_MASS_UNIT * w * w)).cbrt() * 1e6
}

const GRADIENT_TOL: f64 = 1e-10;
const MAX_NEWTON_ITERS: usize = 300;
const COLLISION_DISTANCE: f64 = 1e-6;
const MAX_ION_STEP: f64 = 0.05;
const ORTHONORMAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Cubic {
    pub x3: f64,
    pub x2z: f64,
    pub xz2: f64,
    pub z3: f64,
    pub xy2: f64,
    pub zy2: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Quartic {
    pub y2z2: f64,
    pub y2x2: f64,
    pub x2z2: f64,
    pub z4: f64,
}

/// Single-ion trap potential
/// `½Σ_a (ω_a/ω_s)² a² + Σ c·(cubic monomial) + Σ q·(quartic monomial)`
/// in scaled units. `harmonic` holds the physical `(ω_x, ω_y, ω_z)` in rad/ms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapPotential {
    pub scale_frequency: f64,
    pub harmonic: [f64; 3],
    #[serde(default)]
    pub cubic: Cubic,
    #[serde(default)]
    pub quartic: Quartic,
}

/// Individually fittable potential coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    /// `(ω_x/ω_s)²`
    QuadX,
    /// `(ω_z/ω_s)²`
    QuadZ,
    X3,
    X2Z,
    XZ2,
    Z3,
    XY2,
    ZY2,
    Y2Z2,
    Y2X2,
    X2Z2,
    Z4,
}

impl TrapPotential {
    /// Harmonic trap with `ω_s = ω_z`.
    pub fn harmonic(wx: f64, wy: f64, wz: f64) -> Result<Self> {
        let p = TrapPotential {
            scale_frequency: wz,
            harmonic: [wx, wy, wz],
            cubic: Cubic::default(),
            quartic: Quartic::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_frequency.is_finite() && self.scale_frequency > 0.0) {
            return Err(Error::invalid("scale frequency must be positive"));
        }
        if self.harmonic.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("trap frequencies must be positive"));
        }
        Ok(())
    }

    fn k(&self) -> [f64; 3] {
        let s = self.scale_frequency;
        self.harmonic.map(|w| (w / s) * (w / s))
    }

    pub fn get(&self, term: Term) -> f64 {
        let k = self.k();
        match term {
            Term::QuadX => k[0],
            Term::QuadZ => k[2],
            Term::X3 => self.cubic.x3,
            Term::X2Z => self.cubic.x2z,
            Term::XZ2 => self.cubic.xz2,
            Term::Z3 => self.cubic.z3,
            Term::XY2 => self.cubic.xy2,
            Term::ZY2 => self.cubic.zy2,
            Term::Y2Z2 => self.quartic.y2z2,
            Term::Y2X2 => self.quartic.y2x2,
            Term::X2Z2 => self.quartic.x2z2,
            Term::Z4 => self.quartic.z4,
        }
    }

    /// Quadratic terms take `(ω/ω_s)²` and must stay positive.
    pub fn set(&mut self, term: Term, value: f64) {
        let s = self.scale_frequency;
        match term {
            Term::QuadX => self.harmonic[0] = s * value.max(0.0).sqrt(),
            Term::QuadZ => self.harmonic[2] = s * value.max(0.0).sqrt(),
            Term::X3 => self.cubic.x3 = value,
            Term::X2Z => self.cubic.x2z = value,
            Term::XZ2 => self.cubic.xz2 = value,
            Term::Z3 => self.cubic.z3 = value,
            Term::XY2 => self.cubic.xy2 = value,
            Term::ZY2 => self.cubic.zy2 = value,
            Term::Y2Z2 => self.quartic.y2z2 = value,
            Term::Y2X2 => self.quartic.y2x2 = value,
            Term::X2Z2 => self.quartic.x2z2 = value,
            Term::Z4 => self.quartic.z4 = value,
        }
    }

    /// In-plane (y = 0) trap energy of one ion.
    pub fn ion_energy(&self, x: f64, z: f64) -> f64 {
        let k = self.k();
        let (c, q) = (&self.cubic, &self.quartic);
        0.5 * (k[0] * x * x + k[2] * z * z)
            + c.x3 * x * x * x
            + c.x2z * x * x * z
            + c.xz2 * x * z * z
            + c.z3 * z * z * z
            + q.x2z2 * x * x * z * z
            + q.z4 * z * z * z * z
    }

    fn ion_gradient(&self, x: f64, z: f64) -> [f64; 2] {
        let k = self.k();
        let (c, q) = (&self.cubic, &self.quartic);
        [
            k[0] * x + 3.0 * c.x3 * x * x + 2.0 * c.x2z * x * z + c.xz2 * z * z + 2.0 * q.x2z2 * x * z * z,
            k[2] * z
                + c.x2z * x * x
                + 2.0 * c.xz2 * x * z
                + 3.0 * c.z3 * z * z
                + 2.0 * q.x2z2 * x * x * z
                + 4.0 * q.z4 * z * z * z,
        ]
    }

    /// `(∂xx, ∂xz, ∂zz)`.
    fn ion_hessian(&self, x: f64, z: f64) -> [f64; 3] {
        let k = self.k();
        let (c, q) = (&self.cubic, &self.quartic);
        [
            k[0] + 6.0 * c.x3 * x + 2.0 * c.x2z * z + 2.0 * q.x2z2 * z * z,
            2.0 * c.x2z * x + 2.0 * c.xz2 * z + 4.0 * q.x2z2 * x * z,
            k[2] + 2.0 * c.xz2 * x + 6.0 * c.z3 * z + 2.0 * q.x2z2 * x * x + 12.0 * q.z4 * z * z,
        ]
    }

    /// `∂²V/∂y²` at `(x, 0, z)`.
    pub fn transverse_curvature(&self, x: f64, z: f64) -> f64 {
        let k = self.k();
        let (c, q) = (&self.cubic, &self.quartic);
        k[1] + 2.0 * (c.xy2 * x + c.zy2 * z) + 2.0 * (q.y2z2 * z * z + q.y2x2 * x * x)
    }

    /// Whether the single-ion potential is locally convex in all three directions on
    /// a grid over `[−r, r]²`.
    pub fn is_confining(&self, r: f64) -> bool {
        let steps = 40;
        (0..=steps).all(|a| {
            (0..=steps).all(|b| {
                let x = -r + 2.0 * r * a as f64 / steps as f64;
                let z = -r + 2.0 * r * b as f64 / steps as f64;
                let [hxx, hxz, hzz] = self.ion_hessian(x, z);
                hxx > 0.0 && hxx * hzz - hxz * hxz > 0.0 && self.transverse_curvature(x, z) > 0.0
            })
        })
    }
}

/// Total in-plane energy, trap plus Coulomb.
pub fn crystal_energy(potential: &TrapPotential, positions: &[[f64; 2]]) -> f64 {
    let mut e: f64 = positions.iter().map(|p| potential.ion_energy(p[0], p[1])).sum();
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            let dx = positions[i][0] - positions[j][0];
            let dz = positions[i][1] - positions[j][1];
            e += 1.0 / (dx * dx + dz * dz).sqrt();
        }
    }
    e
}

fn crystal_gradient(potential: &TrapPotential, x: &[f64]) -> DVector<f64> {
    let n = x.len() / 2;
    let mut g = DVector::zeros(2 * n);
    for i in 0..n {
        let [gx, gz] = potential.ion_gradient(x[2 * i], x[2 * i + 1]);
        g[2 * i] += gx;
        g[2 * i + 1] += gz;
        for j in i + 1..n {
            let dx = x[2 * i] - x[2 * j];
            let dz = x[2 * i + 1] - x[2 * j + 1];
            let r2 = dx * dx + dz * dz;
            let inv3 = 1.0 / (r2 * r2.sqrt());
            g[2 * i] -= dx * inv3;
            g[2 * i + 1] -= dz * inv3;
            g[2 * j] += dx * inv3;
            g[2 * j + 1] += dz * inv3;
        }
    }
    g
}

fn crystal_hessian(potential: &TrapPotential, x: &[f64]) -> DMatrix<f64> {
    let n = x.len() / 2;
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        let [hxx, hxz, hzz] = potential.ion_hessian(x[2 * i], x[2 * i + 1]);
        h[(2 * i, 2 * i)] += hxx;
        h[(2 * i, 2 * i + 1)] += hxz;
        h[(2 * i + 1, 2 * i)] += hxz;
        h[(2 * i + 1, 2 * i + 1)] += hzz;
        for j in i + 1..n {
            let d = [x[2 * i] - x[2 * j], x[2 * i + 1] - x[2 * j + 1]];
            let r2 = d[0] * d[0] + d[1] * d[1];
            let r = r2.sqrt();
            let inv3 = 1.0 / (r2 * r);
            let inv5 = inv3 / r2;
            for a in 0..2 {
                for b in 0..2 {
                    let delta = if a == b { 1.0 } else { 0.0 };
                    let v = 3.0 * d[a] * d[b] * inv5 - delta * inv3;
                    h[(2 * i + a, 2 * i + b)] += v;
                    h[(2 * j + a, 2 * j + b)] += v;
                    h[(2 * i + a, 2 * j + b)] -= v;
                    h[(2 * j + a, 2 * i + b)] -= v;
                }
            }
        }
    }
    h
}

fn min_distance(x: &[f64]) -> f64 {
    let n = x.len() / 2;
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[2 * i] - x[2 * j];
            let dz = x[2 * i + 1] - x[2 * j + 1];
            best = best.min((dx * dx + dz * dz).sqrt());
        }
    }
    best
}

fn unflatten(x: &[f64]) -> Vec<[f64; 2]> {
    x.chunks(2).map(|c| [c[0], c[1]]).collect()
}

/// Norm of the total in-plane force.
pub fn gradient_norm(potential: &TrapPotential, positions: &[[f64; 2]]) -> f64 {
    let x: Vec<f64> = positions.iter().flatten().copied().collect();
    crystal_gradient(potential, &x).norm()
}

/// Harmonic starting point for [`fit_potential_staged`]: the in-plane curvatures for
/// which the measured positions best balance the Coulomb forces, by linear least
/// squares. `omega_y` is taken as given.
pub fn harmonic_from_positions(positions: &[[f64; 2]], omega_y: f64, scale_frequency: f64) -> Result<TrapPotential> {
    if positions.len() < 2 {
        return Err(Error::invalid("need at least two ions to balance forces"));
    }
    let x: Vec<f64> = positions.iter().flatten().copied().collect();
    if min_distance(&x) < COLLISION_DISTANCE {
        return Err(Error::invalid("ion positions coincide"));
    }
    let n = positions.len();
    let mut coulomb = vec![0.0; 2 * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dx = x[2 * i] - x[2 * j];
                let dz = x[2 * i + 1] - x[2 * j + 1];
                let inv3 = (dx * dx + dz * dz).powf(-1.5);
                coulomb[2 * i] += dx * inv3;
                coulomb[2 * i + 1] += dz * inv3;
            }
        }
    }
    let mut k = [0.0; 2];
    for (axis, k) in k.iter_mut().enumerate() {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            num += x[2 * i + axis] * coulomb[2 * i + axis];
            den += x[2 * i + axis] * x[2 * i + axis];
        }
        if !(den > 0.0 && num > 0.0) {
            return Err(Error::invalid("positions do not determine an in-plane curvature"));
        }
        *k = num / den;
    }
    let pot = TrapPotential {
        scale_frequency,
        harmonic: [scale_frequency * k[0].sqrt(), omega_y, scale_frequency * k[1].sqrt()],
        cubic: Cubic::default(),
        quartic: Quartic::default(),
    };
    pot.validate()?;
    Ok(pot)
}

/// Local minimum of the crystal energy reached from `init` by damped Newton with a
/// backtracking line search.
pub fn equilibrium(potential: &TrapPotential, init: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    potential.validate()?;
    if init.is_empty() {
        return Err(Error::invalid("need at least one ion"));
    }
    let mut x: Vec<f64> = init.iter().flatten().copied().collect();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial positions must be finite"));
    }
    if min_distance(&x) < COLLISION_DISTANCE {
        return Err(Error::invalid("initial positions must be distinct"));
    }
    let dim = x.len();
    let mut e = crystal_energy(potential, &unflatten(&x));
    for _ in 0..MAX_NEWTON_ITERS {
        let g = crystal_gradient(potential, &x);
        let gn = g.norm();
        if gn < GRADIENT_TOL {
            return Ok(unflatten(&x));
        }
        let h = crystal_hessian(potential, &x);
        let scale = (0..dim).map(|k| h[(k, k)].abs()).fold(1.0, f64::max);
        let mut shift = 0.0;
        let step = loop {
            let mut a = h.clone();
            for k in 0..dim {
                a[(k, k)] += shift;
            }
            if let Some(chol) = a.cholesky() {
                break -chol.solve(&g);
            }
            shift = if shift == 0.0 { 1e-8 * scale } else { shift * 4.0 };
        };
        // Capping the per-ion displacement keeps the search in the basin of `init`.
        let longest = step
            .as_slice()
            .chunks(2)
            .map(|d| d[0].hypot(d[1]))
            .fold(0.0, f64::max);
        let step = if longest > MAX_ION_STEP { step * (MAX_ION_STEP / longest) } else { step };
        let slope = g.dot(&step);
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + alpha * d).collect();
            if min_distance(&trial) > COLLISION_DISTANCE {
                let e_new = crystal_energy(potential, &unflatten(&trial));
                // Once the expected energy change drowns in round-off, which happens
                // near a minimum and along soft modes, judge by the force norm instead.
                let ok = if (alpha * slope).abs() < 1e-11 * e.abs().max(1.0) {
                    crystal_gradient(potential, &trial).norm() < gn
                } else {
                    e_new < e + 1e-4 * alpha * slope
                };
                if ok {
                    x = trial;
                    e = e_new;
                    moved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !moved {
            return Err(Error::NonConvergence(format!(
                "equilibrium line search failed at force norm {gn:.3e}"
            )));
        }
    }
    let gn = crystal_gradient(potential, &x).norm();
    Err(Error::NonConvergence(format!(
        "equilibrium not reached in {MAX_NEWTON_ITERS} iterations (force norm {gn:.3e})"
    )))
}

/// Transverse normal modes: frequencies in rad/ms, descending, and orthonormal
/// vectors `vectors[k][i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSet {
    pub frequencies: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

impl ModeSet {
    pub fn new(frequencies: Vec<f64>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        let m = ModeSet { frequencies, vectors };
        m.validate()?;
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn num_modes(&self) -> usize {
        self.frequencies.len()
    }

    /// `b_ik`.
    pub fn b(&self, i: usize, k: usize) -> f64 {
        self.vectors[k][i]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        check_len(self.frequencies.len(), self.vectors.len())?;
        check_len(n, self.frequencies.len())?;
        if self.frequencies.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("mode frequencies must be positive"));
        }
        for v in &self.vectors {
            check_len(n, v.len())?;
        }
        if self.orthonormality_error() > ORTHONORMAL_TOL {
            return Err(Error::invalid("mode vectors are not orthonormal"));
        }
        Ok(())
    }

    /// `max |BᵀB − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (a, va) in self.vectors.iter().enumerate() {
            for (b, vb) in self.vectors.iter().enumerate() {
                let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Symmetric y-block of the Hessian at an in-plane configuration.
pub fn transverse_hessian(potential: &TrapPotential, positions: &[[f64; 2]]) -> DMatrix<f64> {
    let n = positions.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = potential.transverse_curvature(positions[i][0], positions[i][1]);
        for j in 0..n {
            if j == i {
                continue;
            }
            let dx = positions[i][0] - positions[j][0];
            let dz = positions[i][1] - positions[j][1];
            let inv3 = 1.0 / (dx * dx + dz * dz).powf(1.5);
            k[(i, i)] -= inv3;
            k[(i, j)] = inv3;
        }
    }
    k
}

/// Drumhead modes at an equilibrium.
pub fn transverse_modes(potential: &TrapPotential, positions: &[[f64; 2]]) -> Result<ModeSet> {
    potential.validate()?;
    let x: Vec<f64> = positions.iter().flatten().copied().collect();
    if x.is_empty() {
        return Err(Error::invalid("need at least one ion"));
    }
    let gn = crystal_gradient(potential, &x).norm();
    if gn > 1e-6 {
        return Err(Error::invalid(format!(
            "positions are not an equilibrium (force norm {gn:.3e})"
        )));
    }
    let n = positions.len();
    let eig = SymmetricEigen::new(transverse_hessian(potential, positions));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut frequencies = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n);
    for &k in &order {
        let lambda = eig.eigenvalues[k];
        if lambda <= 0.0 {
            return Err(Error::Unstable(format!(
                "transverse mode with squared frequency {lambda:.3e} (scaled)"
            )));
        }
        frequencies.push(potential.scale_frequency * lambda.sqrt());
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        // Largest component positive, for reproducible signs.
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, c)| if c.abs() > v[best].abs() + 1e-12 { i } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        vectors.push(v);
    }
    let modes = ModeSet { frequencies, vectors };
    modes.validate()?;
    Ok(modes)
}

/// Normalized sideband excitation weights `b_ik² / Σ_i b_ik²` of mode `k`.
pub fn sideband_pattern(modes: &ModeSet, k: usize) -> Result<Vec<f64>> {
    check_index(k, modes.num_modes())?;
    let sq: Vec<f64> = modes.vectors[k].iter().map(|b| b * b).collect();
    let total: f64 = sq.iter().sum();
    Ok(sq.into_iter().map(|w| w / total).collect())
}

/// One laser beat note: detuning `μ` (rad/ms) and Lamb–Dicke factors per mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToneSpec {
    pub detuning: f64,
    pub lamb_dicke: Vec<f64>,
}

impl ToneSpec {
    /// `η_k = η_ref·√(ω_ref/ω_k)`.
    pub fn mass_scaled(detuning: f64, modes: &ModeSet, eta_ref: f64, omega_ref: f64) -> Result<Self> {
        if !(eta_ref > 0.0 && omega_ref > 0.0) {
            return Err(Error::invalid("reference Lamb-Dicke factor and frequency must be positive"));
        }
        let tone = ToneSpec {
            detuning,
            lamb_dicke: modes.frequencies.iter().map(|w| eta_ref * (omega_ref / w).sqrt()).collect(),
        };
        tone.validate(modes)?;
        Ok(tone)
    }

    pub fn validate(&self, modes: &ModeSet) -> Result<()> {
        check_len(modes.num_modes(), self.lamb_dicke.len())?;
        if self.lamb_dicke.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::invalid("Lamb-Dicke factors must be positive"));
        }
        for (k, &w) in modes.frequencies.iter().enumerate() {
            if (self.detuning - w).abs() <= 1e-12 * w.abs().max(1.0) {
                return Err(Error::Resonance {
                    detuning: self.detuning,
                    mode: k,
                    frequency: w,
                });
            }
        }
        Ok(())
    }
}

/// Gaussian beam profile in the crystal plane (scaled units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBeam {
    pub peak: f64,
    pub center: [f64; 2],
    /// Full widths at half maximum along x and z.
    pub fwhm: [f64; 2],
}

impl GaussianBeam {
    pub fn amplitude(&self, p: [f64; 2]) -> f64 {
        let c = 4.0 * std::f64::consts::LN_2;
        let u = (p[0] - self.center[0]) / self.fwhm[0];
        let v = (p[1] - self.center[1]) / self.fwhm[1];
        self.peak * (-c * (u * u + v * v)).exp()
    }
}

/// Per-ion AC Stark amplitudes (rad/ms) and wavefront phases (rad).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaserProfile {
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beam: Option<GaussianBeam>,
}

impl LaserProfile {
    pub fn uniform(n: usize, omega: f64) -> Self {
        LaserProfile {
            amplitudes: vec![omega; n],
            phases: vec![0.0; n],
            beam: None,
        }
    }

    pub fn from_beam(beam: GaussianBeam, positions: &[[f64; 2]]) -> Self {
        LaserProfile {
            amplitudes: positions.iter().map(|&p| beam.amplitude(p)).collect(),
            phases: vec![0.0; positions.len()],
            beam: Some(beam),
        }
    }
}

/// `G_ij = Σ_k η_k² b_ik b_jk / (8(μ − ω_k))`, so that `J_ij = Ω_i Ω_j G_ij`.
pub fn coupling_kernel(modes: &ModeSet, tone: &ToneSpec) -> Result<Vec<f64>> {
    tone.validate(modes)?;
    let n = modes.n();
    let mut g = vec![0.0; n * n];
    for (k, (&w, &eta)) in modes.frequencies.iter().zip(&tone.lamb_dicke).enumerate() {
        let c = eta * eta / (8.0 * (tone.detuning - w));
        let b = &modes.vectors[k];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    g[i * n + j] += c * (b[i] * b[j]);
                }
            }
        }
    }
    Ok(g)
}

/// Couplings with a separate amplitude vector per tone, summed over tones.
pub fn coupling_matrix_per_tone(modes: &ModeSet, tones: &[ToneSpec], amplitudes: &[Vec<f64>]) -> Result<IsingModel> {
    check_len(tones.len(), amplitudes.len())?;
    let n = modes.n();
    let mut j = vec![0.0; n * n];
    for (tone, omega) in tones.iter().zip(amplitudes) {
        check_len(n, omega.len())?;
        let g = coupling_kernel(modes, tone)?;
        for a in 0..n {
            for b in 0..n {
                j[a * n + b] += omega[a] * omega[b] * g[a * n + b];
            }
        }
    }
    IsingModel::from_matrix(n, &j, vec![0.0; n])
}

/// Phonon-mediated couplings for one laser profile shared by all tones, including
/// the wavefront attenuation `cos(φ_i − φ_j)`.
pub fn coupling_matrix(modes: &ModeSet, tones: &[ToneSpec], laser: &LaserProfile) -> Result<IsingModel> {
    check_len(modes.n(), laser.amplitudes.len())?;
    let amps = vec![laser.amplitudes.clone(); tones.len()];
    let j = coupling_matrix_per_tone(modes, tones, &amps)?;
    apply_wavefront(&j, &laser.phases)
}

/// `J_ij → J_ij·cos(φ_i − φ_j)`.
pub fn apply_wavefront(model: &IsingModel, phases: &[f64]) -> Result<IsingModel> {
    let n = model.n();
    check_len(n, phases.len())?;
    let mut out = model.clone();
    for i in 0..n {
        for j in i + 1..n {
            out.set_coupling(i, j, model.coupling(i, j) * (phases[i] - phases[j]).cos());
        }
    }
    Ok(out)
}

/// Reads `ion,x_um,z_um` rows and converts to scaled units.
pub fn read_positions_csv<R: BufRead>(input: R, length_um: f64) -> Result<Vec<[f64; 2]>> {
    let mut rows: Vec<(usize, [f64; 2])> = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("ion")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!("line {}: expected 3 columns", lineno + 1)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))
        };
        let ion = fields[0]
            .parse::<usize>()
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        rows.push((ion, [parse(fields[1])? / length_um, parse(fields[2])? / length_um]));
    }
    rows.sort_by_key(|r| r.0);
    if rows.iter().enumerate().any(|(k, r)| r.0 != k) {
        return Err(Error::Format("ion indices must be 0..n without gaps".into()));
    }
    Ok(rows.into_iter().map(|r| r.1).collect())
}

pub fn write_positions_csv<W: Write>(mut out: W, positions: &[[f64; 2]], length_um: f64) -> Result<()> {
    writeln!(out, "ion,x_um,z_um")?;
    for (i, p) in positions.iter().enumerate() {
        writeln!(out, "{i},{},{}", p[0] * length_um, p[1] * length_um)?;
    }
    Ok(())
}

/// Measurements available to the staged potential fit. Frequencies are
/// `(rank, ω)` with rank 0 the highest mode; patterns are `(rank, weights)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialData {
    pub positions: Vec<[f64; 2]>,
    pub frequencies: Vec<(usize, f64)>,
    pub patterns: Vec<(usize, Vec<f64>)>,
}

/// Residual normalization: positions in scaled units, frequencies in rad/ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitScales {
    pub position: f64,
    pub frequency: f64,
}

impl Default for FitScales {
    /// About 1 µm at ℓ ≈ 10 µm and 1 kHz.
    fn default() -> Self {
        FitScales {
            position: 0.1,
            frequency: 2.0 * std::f64::consts::PI,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Objectives {
    positions: bool,
    frequencies: bool,
    patterns: bool,
}

struct Stage {
    name: &'static str,
    terms: &'static [Term],
    objectives: Objectives,
}

const STAGES: [Stage; 5] = [
    Stage {
        name: "initial quadratics",
        terms: &[Term::QuadX, Term::QuadZ],
        objectives: Objectives { positions: true, frequencies: true, patterns: false },
    },
    Stage {
        name: "cubics within xz plane",
        terms: &[Term::X3, Term::X2Z, Term::XZ2, Term::Z3],
        objectives: Objectives { positions: true, frequencies: false, patterns: false },
    },
    Stage {
        name: "refine quadratics",
        terms: &[Term::QuadX, Term::QuadZ],
        objectives: Objectives { positions: true, frequencies: true, patterns: false },
    },
    Stage {
        name: "symmetric quartics",
        terms: &[Term::QuadX, Term::QuadZ, Term::Y2Z2, Term::Y2X2, Term::X2Z2, Term::Z4],
        objectives: Objectives { positions: true, frequencies: true, patterns: false },
    },
    Stage {
        name: "cubics along y",
        terms: &[Term::XY2, Term::ZY2],
        objectives: Objectives { positions: false, frequencies: false, patterns: true },
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub terms: Vec<Term>,
    pub initial_rss: f64,
    pub rss: f64,
    pub iterations: usize,
    pub status: Option<LmStatus>,
    /// No data for this stage's objective; its terms were set to zero.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagedFit {
    pub potential: TrapPotential,
    pub stages: Vec<StageReport>,
}

struct StageProblem<'a> {
    base: TrapPotential,
    terms: &'a [Term],
    objectives: Objectives,
    data: &'a PotentialData,
    scales: FitScales,
}

impl StageProblem<'_> {
    fn potential(&self, p: &[f64]) -> TrapPotential {
        let mut pot = self.base.clone();
        for (&t, &v) in self.terms.iter().zip(p) {
            pot.set(t, v);
        }
        pot
    }
}

impl LeastSquares for StageProblem<'_> {
    fn num_params(&self) -> usize {
        self.terms.len()
    }

    fn residuals(&self, p: &[f64]) -> Result<Vec<f64>> {
        let pot = self.potential(p);
        let eq = equilibrium(&pot, &self.data.positions)?;
        let mut r = Vec::new();
        if self.objectives.positions {
            for (a, b) in eq.iter().zip(&self.data.positions) {
                r.push((a[0] - b[0]) / self.scales.position);
                r.push((a[1] - b[1]) / self.scales.position);
            }
        }
        if self.objectives.frequencies || self.objectives.patterns {
            let modes = transverse_modes(&pot, &eq)?;
            if self.objectives.frequencies {
                for &(rank, w) in &self.data.frequencies {
                    r.push((modes.frequencies[rank] - w) / self.scales.frequency);
                }
            }
            if self.objectives.patterns {
                for (rank, weights) in &self.data.patterns {
                    let calc = sideband_pattern(&modes, *rank)?;
                    r.extend(calc.iter().zip(weights).map(|(a, b)| a - b));
                }
            }
        }
        Ok(r)
    }

    fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        central_difference(|q| self.residuals(q), p, 1e-6)
    }

    fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let lo = self
            .terms
            .iter()
            .map(|t| match t {
                Term::QuadX | Term::QuadZ => 1e-6,
                _ => f64::NEG_INFINITY,
            })
            .collect();
        Some((lo, vec![f64::INFINITY; self.terms.len()]))
    }
}

/// Five-stage fit of the trap potential. Each stage is a bounded least-squares
/// problem over its own terms, starting from the previous stage's potential with all
/// other terms frozen. `init` supplies `ω_y` (never fitted) and starting values.
pub fn fit_potential_staged(
    data: &PotentialData,
    init: &TrapPotential,
    scales: FitScales,
    options: &LmOptions,
) -> Result<StagedFit> {
    init.validate()?;
    let n = data.positions.len();
    if n == 0 {
        return Err(Error::invalid("no measured positions"));
    }
    if data.frequencies.len() < 2 {
        return Err(Error::invalid("need at least two measured frequencies"));
    }
    for &(rank, _) in &data.frequencies {
        check_index(rank, n)?;
    }
    for (rank, w) in &data.patterns {
        check_index(*rank, n)?;
        check_len(n, w.len())?;
    }
    let mut pot = init.clone();
    let mut stages = Vec::with_capacity(STAGES.len());
    for stage in &STAGES {
        if stage.objectives.patterns && data.patterns.is_empty() {
            for &t in stage.terms {
                pot.set(t, 0.0);
            }
            log::warn!("stage '{}' has no mode-pattern data; its terms are set to 0", stage.name);
            stages.push(StageReport {
                name: stage.name.into(),
                terms: stage.terms.to_vec(),
                initial_rss: 0.0,
                rss: 0.0,
                iterations: 0,
                status: None,
                skipped: true,
            });
            continue;
        }
        let problem = StageProblem {
            base: pot.clone(),
            terms: stage.terms,
            objectives: stage.objectives,
            data,
            scales,
        };
        let p0: Vec<f64> = stage.terms.iter().map(|&t| pot.get(t)).collect();
        let rep = minimize(&problem, &p0, options, |_, _| {}).map_err(|e| match e {
            Error::Unstable(m) | Error::NonConvergence(m) => {
                Error::NonConvergence(format!("stage '{}' diverged: {m}", stage.name))
            }
            other => other,
        })?;
        pot = problem.potential(&rep.params);
        log::debug!("stage '{}': rss {:.3e} -> {:.3e}", stage.name, rep.initial_rss, rep.rss);
        stages.push(StageReport {
            name: stage.name.into(),
            terms: stage.terms.to_vec(),
            initial_rss: rep.initial_rss,
            rss: rep.rss,
            iterations: rep.iterations,
            status: Some(rep.status),
            skipped: false,
        });
    }
    let extent = data
        .positions
        .iter()
        .map(|p| p[0].abs().max(p[1].abs()))
        .fold(0.0, f64::max);
    if !pot.is_confining(1.2 * extent.max(1e-3)) {
        return Err(Error::Unstable("fitted potential is not confining over the crystal".into()));
    }
    let eq = equilibrium(&pot, &data.positions)?;
    transverse_modes(&pot, &eq)?;
    Ok(StagedFit { potential: pot, stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn planar_potential() -> TrapPotential {
        TrapPotential {
            scale_frequency: 1.0,
            harmonic: [1.4, 8.0, 1.0],
            cubic: Cubic::default(),
            quartic: Quartic::default(),
        }
    }

    fn random_init(n: usize, radius: f64, seed: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random_range(-radius..radius), rng.random_range(-radius..radius)])
            .collect()
    }

    #[test]
    fn yb_length_scale() {
        let l = length_scale_um(171.0, 2.0 * std::f64::consts::PI * 147.0);
        assert!((l - 9.8).abs() < 0.1, "{l}");
    }

    #[test]
    fn single_ion_sits_at_origin() {
        let mut pot = planar_potential();
        pot.cubic.x2z = 0.01;
        let eq = equilibrium(&pot, &[[0.3, -0.2]]).unwrap();
        assert!(eq[0][0].abs() < 1e-10 && eq[0][1].abs() < 1e-10);
        let modes = transverse_modes(&pot, &eq).unwrap();
        assert_eq!(modes.num_modes(), 1);
        assert!((modes.frequencies[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn two_ions_balance_trap_and_coulomb() {
        let pot = TrapPotential::harmonic(3.0, 5.0, 1.0).unwrap();
        let eq = equilibrium(&pot, &[[0.0, -0.5], [0.01, 0.4]]).unwrap();
        // z·k_z = 1/(2z)² with k_z = 1.
        let a = 0.25f64.cbrt();
        let mut z: Vec<f64> = eq.iter().map(|p| p[1]).collect();
        z.sort_by(f64::total_cmp);
        assert!((z[0] + a).abs() < 1e-10 && (z[1] - a).abs() < 1e-10);
        let modes = transverse_modes(&pot, &eq).unwrap();
        assert!((modes.frequencies[0] - 5.0).abs() < 1e-8 * 5.0);
        let tilt = (25.0f64 - 1.0).sqrt();
        assert!((modes.frequencies[1] - tilt).abs() < 1e-8 * tilt);
        let w = sideband_pattern(&modes, 1).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn planar_crystal_is_stable_and_orthonormal() {
        let pot = planar_potential();
        let eq = equilibrium(&pot, &random_init(20, 2.0, 1)).unwrap();
        assert!(gradient_norm(&pot, &eq) < 1e-10);
        let modes = transverse_modes(&pot, &eq).unwrap();
        assert!(modes.orthonormality_error() < 1e-10);
        assert!(modes.frequencies.windows(2).all(|w| w[0] >= w[1]));
        // Uniform trap: the highest mode is the centre-of-mass mode at ω_y.
        assert!((modes.frequencies[0] - 8.0).abs() < 1e-9);
        let w = sideband_pattern(&modes, 0).unwrap();
        assert!(w.iter().all(|x| (x - 1.0 / 20.0).abs() < 1e-9));
    }

    /// Gradient descent on z alone for a chain, independent of the Newton solver.
    fn chain_by_descent(kz: f64, z4: f64, mut z: Vec<f64>) -> Vec<f64> {
        let n = z.len();
        for _ in 0..200_000 {
            let mut g = vec![0.0; n];
            for i in 0..n {
                g[i] = kz * z[i] + 4.0 * z4 * z[i].powi(3);
                for j in 0..n {
                    if i != j {
                        let d = z[i] - z[j];
                        g[i] -= d.signum() / (d * d);
                    }
                }
            }
            let gn: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if gn < 1e-11 {
                break;
            }
            for (zi, gi) in z.iter_mut().zip(&g) {
                *zi -= 0.01 * gi;
            }
        }
        z.sort_by(f64::total_cmp);
        z
    }

    #[test]
    fn anharmonic_chain_matches_independent_minimizer() {
        let mut pot = TrapPotential::harmonic(30.0, 40.0, 1.0).unwrap();
        pot.quartic.z4 = 0.002;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for restart in 0..3 {
            let init: Vec<[f64; 2]> = (0..20)
                .map(|i| [rng.random_range(-0.01..0.01), (i as f64 - 9.5) * 0.8 + rng.random_range(-0.1..0.1)])
                .collect();
            let eq = equilibrium(&pot, &init).unwrap();
            let mut z: Vec<f64> = eq.iter().map(|p| p[1]).collect();
            z.sort_by(f64::total_cmp);
            let start: Vec<f64> = (0..20).map(|i| (i as f64 - 9.5) * (0.9 + 0.05 * restart as f64)).collect();
            let oracle = chain_by_descent(1.0, 0.002, start);
            for (a, b) in z.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
            assert!(eq.iter().all(|p| p[0].abs() < 1e-9));
        }
    }

    /// Full three-dimensional energy with all y-dependent terms.
    fn energy_3d(pot: &TrapPotential, r: &[[f64; 3]]) -> f64 {
        let k = pot.k();
        let (c, q) = (&pot.cubic, &pot.quartic);
        let mut e = 0.0;
        for &[x, y, z] in r {
            e += 0.5 * (k[0] * x * x + k[1] * y * y + k[2] * z * z)
                + c.x3 * x.powi(3)
                + c.x2z * x * x * z
                + c.xz2 * x * z * z
                + c.z3 * z.powi(3)
                + c.xy2 * x * y * y
                + c.zy2 * z * y * y
                + q.y2z2 * y * y * z * z
                + q.y2x2 * y * y * x * x
                + q.x2z2 * x * x * z * z
                + q.z4 * z.powi(4);
        }
        for i in 0..r.len() {
            for j in i + 1..r.len() {
                let d: f64 = (0..3).map(|a| (r[i][a] - r[j][a]).powi(2)).sum();
                e += 1.0 / d.sqrt();
            }
        }
        e
    }

    #[test]
    fn transverse_hessian_matches_finite_differences() {
        let mut pot = planar_potential();
        pot.cubic.xy2 = 0.3;
        pot.cubic.zy2 = -0.2;
        pot.quartic.y2z2 = 0.05;
        pot.quartic.y2x2 = 0.04;
        let eq = equilibrium(&pot, &random_init(7, 1.5, 3)).unwrap();
        let k = transverse_hessian(&pot, &eq);
        let r0: Vec<[f64; 3]> = eq.iter().map(|p| [p[0], 0.0, p[1]]).collect();
        let h = 1e-4;
        for i in 0..7 {
            for j in 0..7 {
                let at = |di: f64, dj: f64| {
                    let mut r = r0.clone();
                    r[i][1] += di;
                    r[j][1] += dj;
                    energy_3d(&pot, &r)
                };
                let fd = (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h);
                assert!((fd - k[(i, j)]).abs() < 1e-5, "({i},{j}) {fd} vs {}", k[(i, j)]);
            }
        }
        // The xy² and zy² terms shift the diagonal site by site.
        let base = transverse_hessian(&planar_potential(), &eq);
        for i in 0..7 {
            let shift = 2.0 * (0.3 * eq[i][0] - 0.2 * eq[i][1]) + 2.0 * (0.05 * eq[i][1].powi(2) + 0.04 * eq[i][0].powi(2));
            assert!((k[(i, i)] - base[(i, i)] - shift).abs() < 1e-12);
        }
    }

    #[test]
    fn unstable_crystal_is_reported() {
        let pot = TrapPotential::harmonic(1.4, 1.2, 1.0).unwrap();
        let eq = equilibrium(&pot, &random_init(20, 2.0, 4)).unwrap();
        assert!(matches!(transverse_modes(&pot, &eq), Err(Error::Unstable(_))));
        assert!(equilibrium(&pot, &[[0.0, 0.0], [0.0, 0.0]]).is_err());
    }

    #[test]
    fn scaled_units_are_invariant() {
        let pot = planar_potential();
        let mut fast = pot.clone();
        fast.scale_frequency *= 3.0;
        fast.harmonic = fast.harmonic.map(|w| w * 3.0);
        let init = random_init(10, 1.5, 5);
        let a = equilibrium(&pot, &init).unwrap();
        let b = equilibrium(&fast, &init).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
        }
        let ma = transverse_modes(&pot, &a).unwrap();
        let mb = transverse_modes(&fast, &b).unwrap();
        for (x, y) in ma.frequencies.iter().zip(&mb.frequencies) {
            assert!((3.0 * x - y).abs() < 1e-12 * y);
        }
    }

    fn toy_modes(n: usize, seed: u64) -> ModeSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let q = a.qr().q();
        let freqs = (0..n).map(|k| 10.0 - k as f64).collect();
        ModeSet::new(freqs, (0..n).map(|k| q.column(k).iter().copied().collect()).collect()).unwrap()
    }

    #[test]
    fn couplings_match_triple_loop() {
        let modes = toy_modes(5, 6);
        let tones = vec![
            ToneSpec::mass_scaled(10.5, &modes, 0.08, 10.0).unwrap(),
            ToneSpec::mass_scaled(5.7, &modes, 0.08, 10.0).unwrap(),
        ];
        let laser = LaserProfile {
            amplitudes: vec![1.0, 0.8, 1.2, 0.9, 1.1],
            phases: vec![0.0, 0.1, -0.2, 0.3, 0.05],
            beam: None,
        };
        let j = coupling_matrix(&modes, &tones, &laser).unwrap();
        for a in 0..5 {
            assert_eq!(j.coupling(a, a), 0.0);
            for b in 0..5 {
                if a == b {
                    continue;
                }
                let mut v = 0.0;
                for t in &tones {
                    for k in 0..5 {
                        v += t.lamb_dicke[k].powi(2) * modes.b(a, k) * modes.b(b, k) * laser.amplitudes[a]
                            * laser.amplitudes[b]
                            / (8.0 * (t.detuning - modes.frequencies[k]));
                    }
                }
                v *= (laser.phases[a] - laser.phases[b]).cos();
                assert!((j.coupling(a, b) - v).abs() < 1e-12);
                assert_eq!(j.coupling(a, b), j.coupling(b, a));
            }
        }
        let dark = LaserProfile::uniform(5, 0.0);
        assert!(coupling_matrix(&modes, &tones, &dark).unwrap().upper().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn near_resonance_gives_rank_one_pattern() {
        let modes = toy_modes(8, 7);
        let k = 4;
        let tone = ToneSpec::mass_scaled(modes.frequencies[k] + 1e-4, &modes, 0.08, 10.0).unwrap();
        let j = coupling_matrix(&modes, &[tone], &LaserProfile::uniform(8, 1.0)).unwrap();
        let outer: Vec<f64> = crate::model::pairs(8).map(|(a, b)| modes.b(a, k) * modes.b(b, k)).collect();
        let ju = j.upper();
        let dot: f64 = ju.iter().zip(&outer).map(|(x, y)| x * y).sum();
        let corr = dot / (ju.iter().map(|x| x * x).sum::<f64>().sqrt() * outer.iter().map(|x| x * x).sum::<f64>().sqrt());
        // Above the mode the sign flips overall; the pattern is what matters.
        assert!(corr.abs() > 0.999, "{corr}");
        for (x, y) in ju.iter().zip(&outer) {
            assert_eq!(x.signum(), y.signum());
        }
        let exact = ToneSpec {
            detuning: modes.frequencies[2],
            lamb_dicke: vec![0.1; 8],
        };
        assert!(matches!(exact.validate(&modes), Err(Error::Resonance { mode: 2, .. })));
    }

    #[test]
    fn wavefront_attenuation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = IsingModel::random(6, 1.0, &mut rng);
        assert_eq!(apply_wavefront(&m, &[0.7; 6]).unwrap(), m);
        let mut phi = vec![0.0; 6];
        phi[2] = std::f64::consts::FRAC_PI_2;
        let w = apply_wavefront(&m, &phi).unwrap();
        assert!(w.coupling(0, 2).abs() < 1e-15);
        assert_eq!(w.coupling(0, 1), m.coupling(0, 1));
        let phi: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let w = apply_wavefront(&m, &phi).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                if a != b {
                    let v = m.coupling(a, b) * (phi[a] - phi[b]).cos();
                    assert!((w.coupling(a, b) - v).abs() < 1e-15);
                }
            }
        }
        assert!(apply_wavefront(&m, &[0.0; 5]).is_err());
    }

    #[test]
    fn pattern_is_normalized_square() {
        let modes = toy_modes(6, 9);
        for k in 0..6 {
            let w = sideband_pattern(&modes, k).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..6 {
                assert!((w[i] - modes.b(i, k).powi(2)).abs() < 1e-12);
            }
        }
        assert!(sideband_pattern(&modes, 6).is_err());
    }

    #[test]
    fn positions_csv_round_trip() {
        let pos = random_init(4, 2.0, 10);
        let mut buf = Vec::new();
        write_positions_csv(&mut buf, &pos, 9.8).unwrap();
        let back = read_positions_csv(std::io::Cursor::new(buf), 9.8).unwrap();
        for (a, b) in pos.iter().zip(&back) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
        assert!(read_positions_csv(std::io::Cursor::new("ion,x_um,z_um\n1,0,0\n"), 9.8).is_err());
    }

    fn synthetic(truth: &TrapPotential, n: usize, seed: u64, with_pattern: bool) -> PotentialData {
        let eq = equilibrium(truth, &random_init(n, 2.5, seed)).unwrap();
        let modes = transverse_modes(truth, &eq).unwrap();
        let mut frequencies: Vec<(usize, f64)> = (0..10.min(n)).map(|r| (r, modes.frequencies[r])).collect();
        frequencies.push((n - 1, modes.frequencies[n - 1]));
        let patterns = if with_pattern {
            vec![(n - 1, sideband_pattern(&modes, n - 1).unwrap())]
        } else {
            Vec::new()
        };
        PotentialData {
            positions: eq,
            frequencies,
            patterns,
        }
    }

    #[test]
    fn staged_fit_null_recovery() {
        let truth = planar_potential();
        let data = synthetic(&truth, 12, 11, false);
        let mut init = truth.clone();
        init.harmonic[0] *= 1.05;
        init.harmonic[2] *= 0.97;
        let fit = fit_potential_staged(&data, &init, FitScales::default(), &LmOptions::default()).unwrap();
        let p = &fit.potential;
        for t in [Term::X3, Term::X2Z, Term::XZ2, Term::Z3, Term::XY2, Term::ZY2, Term::Y2Z2, Term::Y2X2, Term::X2Z2, Term::Z4] {
            assert!(p.get(t).abs() < 1e-6, "{t:?} = {}", p.get(t));
        }
        assert!((p.harmonic[0] - 1.4).abs() < 1e-6);
        assert!(fit.stages[4].skipped);
        assert_eq!(fit.stages.len(), 5);
        assert_eq!(fit.stages[1].name, "cubics within xz plane");
    }

    #[test]
    fn staged_fit_rejects_thin_data() {
        let truth = planar_potential();
        let mut data = synthetic(&truth, 6, 12, false);
        data.frequencies.truncate(1);
        assert!(fit_potential_staged(&data, &truth, FitScales::default(), &LmOptions::default()).is_err());
    }
}
