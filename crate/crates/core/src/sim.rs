//! Synthetic single-shot data for the echoed Ramsey-type quench.
//!
//! The exact sampler builds the 2^n vector of diagonal phases `e^{-iE(s)t}`, rotates
//! it into the x basis with a fast Walsh–Hadamard transform and draws outcomes from
//! the resulting distribution. Decoherence is realized per trial as random residual
//! fields `(γ_cor,i·λ + γ_ind,i·ξ_i)/√2` with shared `λ ~ N(0,1)` and independent
//! `ξ_i ~ N(0,1)`; averaging `cos(2ht)` over them reproduces the Gaussian envelopes
//! of the analytic observables.

use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::estimation::{Estimate, ObservableSet};
use crate::model::{DecoherenceModel, IsingModel};
use crate::observables::{batch_observables, SequenceFlags};

/// Memory guard for the exact sampler.
pub const MAX_EXACT_IONS: usize = 24;

/// Trials in `first..=last` (global trial index: `time_index · M + shot`) during
/// which `ions` sit outside their calibrated sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigChange {
    pub first: usize,
    pub last: usize,
    pub ions: Vec<usize>,
}

impl ConfigChange {
    pub fn contains(&self, trial: usize) -> bool {
        (self.first..=self.last).contains(&trial)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorChannels {
    /// Per-ion, per-shot bit-flip probability. Also applied to the cooling-stage
    /// brightness check, where it shows up as occasional isolated dark ions.
    pub spam_flip: f64,
    /// Per-ion leakage rate (1/ms); leak probability at time t is `rate·t`, clipped.
    pub leakage_rate: Vec<f64>,
    pub decoherence: DecoherenceModel,
    pub config_change: Vec<ConfigChange>,
}

impl ErrorChannels {
    pub fn none(n: usize) -> Self {
        ErrorChannels {
            spam_flip: 0.0,
            leakage_rate: vec![0.0; n],
            decoherence: DecoherenceModel::none(n),
            config_change: Vec::new(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.spam_flip) {
            return Err(Error::invalid("spam_flip must lie in [0, 1)"));
        }
        check_len(n, self.leakage_rate.len())?;
        if self.leakage_rate.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::invalid("leakage rates must be finite and ≥ 0"));
        }
        check_len(n, self.decoherence.n())?;
        for change in &self.config_change {
            if change.first > change.last {
                return Err(Error::invalid("config change with empty trial range"));
            }
            if let Some(&i) = change.ions.iter().find(|&&i| i >= n) {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
        }
        Ok(())
    }

    /// Leak probability of ion `i` at time `t`.
    pub fn leak_probability(&self, i: usize, t: f64) -> f64 {
        (self.leakage_rate[i] * t).clamp(0.0, 1.0 - f64::EPSILON)
    }
}

/// The two leakage-compensation groups: the plain sequence, and the sequence with an
/// extra π pulse exchanging |0⟩ and |1⟩ right before detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Plain,
    PiBeforeMeasure,
}

impl Group {
    /// `+1` for the plain group, `−1` when the readout is inverted.
    pub fn sign(self) -> f64 {
        match self {
            Group::Plain => 1.0,
            Group::PiBeforeMeasure => -1.0,
        }
    }
}

/// One experimental trial. `bits[i] = true` is a bright detection (|1⟩); dark reads
/// as σ = +1, bright as σ = −1. `seq` is the trial's position within its time block
/// when the data were taken and survives filtering and splitting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShotRecord {
    pub time_index: usize,
    pub seq: usize,
    pub group: Group,
    pub bits: Vec<bool>,
    pub cooling_bright: Vec<bool>,
}

impl ShotRecord {
    /// Readout value σ = ±1 of ion `i`.
    #[inline]
    pub fn value(&self, i: usize) -> f64 {
        if self.bits[i] {
            -1.0
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuenchSchedule {
    pub times: Vec<f64>,
    pub shots_per_time: usize,
    pub echo: bool,
}

impl QuenchSchedule {
    pub fn new(times: Vec<f64>, shots_per_time: usize, echo: bool) -> Result<Self> {
        let s = QuenchSchedule {
            times,
            shots_per_time,
            echo,
        };
        s.validate()?;
        Ok(s)
    }

    /// `steps` equally spaced times from 0 to `t_max` inclusive.
    pub fn uniform(t_max: f64, steps: usize, shots_per_time: usize, echo: bool) -> Result<Self> {
        if steps < 1 {
            return Err(Error::invalid("schedule needs at least one time step"));
        }
        let times = if steps == 1 {
            vec![0.0]
        } else {
            (0..steps)
                .map(|k| t_max * k as f64 / (steps - 1) as f64)
                .collect()
        };
        QuenchSchedule::new(times, shots_per_time, echo)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(Error::invalid("schedule has no times"));
        }
        if self.times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::invalid("schedule times must be ≥ 0"));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("schedule times must be strictly increasing"));
        }
        if self.shots_per_time == 0 {
            return Err(Error::invalid("shots_per_time must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub times: Vec<f64>,
    pub echo: bool,
    pub records: Vec<ShotRecord>,
}

impl Dataset {
    pub fn records_at(&self, time_index: usize) -> impl Iterator<Item = &ShotRecord> {
        self.records
            .iter()
            .filter(move |r| r.time_index == time_index)
    }

    pub fn count_at(&self, time_index: usize) -> usize {
        self.records_at(time_index).count()
    }

    pub fn has_both_groups(&self) -> bool {
        (0..self.times.len()).all(|ti| {
            let mut plain = false;
            let mut pi = false;
            for r in self.records_at(ti) {
                match r.group {
                    Group::Plain => plain = true,
                    Group::PiBeforeMeasure => pi = true,
                }
            }
            plain && pi
        })
    }

    /// Keeps the records whose positions appear in `keep` (sorted or not).
    pub fn subset(&self, keep: &[usize]) -> Dataset {
        let mut idx = keep.to_vec();
        idx.sort_unstable();
        idx.dedup();
        Dataset {
            n: self.n,
            times: self.times.clone(),
            echo: self.echo,
            records: idx.iter().map(|&k| self.records[k].clone()).collect(),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = DatasetHeader {
            n: self.n,
            times: self.times.clone(),
            echo: self.echo,
            groups: true,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            let line = RecordLine {
                ti: r.time_index,
                g: match r.group {
                    Group::Plain => 0,
                    Group::PiBeforeMeasure => 1,
                },
                bits: B64.encode(pack_bits(&r.bits)),
                cool: B64.encode(pack_bits(&r.cooling_bright)),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads the JSON-lines format; `seq` is reconstructed from file order.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Dataset> {
        let mut lines = input.lines();
        let header: DatasetHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::Format("empty dataset file".into())),
        };
        let mut seq = vec![0usize; header.times.len()];
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RecordLine = serde_json::from_str(&line)?;
            if rec.ti >= header.times.len() {
                return Err(Error::Format(format!("time index {} out of range", rec.ti)));
            }
            let decode = |s: &str| -> Result<Vec<bool>> {
                let bytes = B64
                    .decode(s)
                    .map_err(|e| Error::Format(format!("bad base64: {e}")))?;
                unpack_bits(&bytes, header.n)
            };
            let group = match rec.g {
                0 => Group::Plain,
                1 => Group::PiBeforeMeasure,
                g => return Err(Error::Format(format!("unknown group {g}"))),
            };
            records.push(ShotRecord {
                time_index: rec.ti,
                seq: seq[rec.ti],
                group,
                bits: decode(&rec.bits)?,
                cooling_bright: decode(&rec.cool)?,
            });
            seq[rec.ti] += 1;
        }
        Ok(Dataset {
            n: header.n,
            times: header.times,
            echo: header.echo,
            records,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    n: usize,
    times: Vec<f64>,
    echo: bool,
    groups: bool,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    ti: usize,
    g: u8,
    bits: String,
    cool: String,
}

/// Ion index ascending, least significant bit first within each byte.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<bool>> {
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::Format(format!(
            "expected {} packed bytes, got {}",
            n.div_ceil(8),
            bytes.len()
        )));
    }
    Ok((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

/// In-place Walsh–Hadamard transform (unnormalized).
pub fn fwht(a: &mut [Complex64]) {
    let len = a.len();
    debug_assert!(len.is_power_of_two());
    let mut h = 1;
    while h < len {
        for block in (0..len).step_by(2 * h) {
            for k in block..block + h {
                let x = a[k];
                let y = a[k + h];
                a[k] = x + y;
                a[k + h] = x - y;
            }
        }
        h *= 2;
    }
}

/// Exact x-basis sampler for one model and sequence.
pub struct QuenchSampler<'a> {
    model: &'a IsingModel,
    dec: &'a DecoherenceModel,
    echo: bool,
    noisy: bool,
    /// `E_J(z)` for every σ_z basis state; bit `i` of `z` set means `s_i = −1`.
    ising_energy: Vec<f64>,
}

impl<'a> QuenchSampler<'a> {
    pub fn new(model: &'a IsingModel, dec: &'a DecoherenceModel, flags: SequenceFlags) -> Result<Self> {
        let n = model.n();
        if n > MAX_EXACT_IONS {
            return Err(Error::invalid(format!(
                "exact sampling is limited to {MAX_EXACT_IONS} ions, got {n}"
            )));
        }
        model.validate()?;
        if flags.include_decoherence {
            check_len(n, dec.n())?;
        }
        let dim = 1usize << n;
        let mut ising_energy = vec![0.0; dim];
        ising_energy[0] = model.upper().iter().sum();
        // Flipping spin k (the top set bit) from +1 to −1 changes E by −2·Σ_j J_kj s_j.
        for k in 0..n {
            let row = model.row(k);
            for z in 0..(1usize << k) {
                let local: f64 = (0..k)
                    .map(|j| if z >> j & 1 == 1 { -row[j] } else { row[j] })
                    .sum::<f64>()
                    + row[k + 1..].iter().sum::<f64>();
                ising_energy[z | 1 << k] = ising_energy[z] - 2.0 * local;
            }
        }
        Ok(QuenchSampler {
            model,
            dec,
            echo: flags.echo,
            noisy: flags.include_decoherence && !dec.is_zero(),
            ising_energy,
        })
    }

    pub fn n(&self) -> usize {
        self.model.n()
    }

    /// Effective static fields: the model fields unless cancelled by the echo.
    fn static_fields(&self) -> Vec<f64> {
        if self.echo {
            vec![0.0; self.n()]
        } else {
            self.model.fields().to_vec()
        }
    }

    /// x-basis probabilities for given σ_z fields on top of the couplings.
    pub fn distribution_with_fields(&self, t: f64, fields: &[f64]) -> Vec<f64> {
        let n = self.n();
        let dim = 1usize << n;
        let mut amp: Vec<Complex64> = self
            .ising_energy
            .iter()
            .map(|&e| Complex64::from_polar(1.0, -e * t))
            .collect();
        // Field phase e^{-iΣ f_i s_i t} built as a product over ions.
        let mut w = vec![Complex64::new(0.0, 0.0); dim];
        w[0] = Complex64::from_polar(1.0, -fields.iter().sum::<f64>() * t);
        for (k, &f) in fields.iter().enumerate() {
            let step = Complex64::from_polar(1.0, 2.0 * f * t);
            for z in 0..(1usize << k) {
                w[z | 1 << k] = w[z] * step;
            }
        }
        for (a, b) in amp.iter_mut().zip(&w) {
            *a *= b;
        }
        fwht(&mut amp);
        let norm = 1.0 / (dim as f64 * dim as f64);
        amp.iter().map(|a| a.norm_sqr() * norm).collect()
    }

    /// Exact outcome distribution without decoherence.
    pub fn distribution(&self, t: f64) -> Vec<f64> {
        self.distribution_with_fields(t, &self.static_fields())
    }

    /// Draws the residual decoherence fields of one trial.
    pub fn noise_fields<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let lambda: f64 = StandardNormal.sample(rng);
        let (gc, gi) = (self.dec.gamma_cor(), self.dec.gamma_ind());
        (0..self.n())
            .map(|i| {
                let xi: f64 = StandardNormal.sample(rng);
                (gc[i] * lambda + gi[i] * xi) / std::f64::consts::SQRT_2
            })
            .collect()
    }

    /// One shot at time `t`.
    pub fn sample<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> Vec<bool> {
        let dist = if self.noisy {
            let mut fields = self.noise_fields(rng);
            for (f, h) in fields.iter_mut().zip(self.static_fields()) {
                *f += h;
            }
            self.distribution_with_fields(t, &fields)
        } else {
            self.distribution(t)
        };
        let y = draw_index(&dist, rng);
        index_to_bits(y, self.n())
    }

    fn time_sampler(&self, t: f64) -> TimeSampler<'_, 'a> {
        if self.noisy {
            TimeSampler::Noisy { sampler: self, t }
        } else {
            let mut cdf = self.distribution(t);
            let mut acc = 0.0;
            for p in cdf.iter_mut() {
                acc += *p;
                *p = acc;
            }
            TimeSampler::Fixed { cdf }
        }
    }
}

enum TimeSampler<'s, 'a> {
    Fixed { cdf: Vec<f64> },
    Noisy { sampler: &'s QuenchSampler<'a>, t: f64 },
}

impl TimeSampler<'_, '_> {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<bool> {
        match self {
            TimeSampler::Fixed { cdf } => {
                let total = *cdf.last().expect("nonempty distribution");
                let u = rng.random::<f64>() * total;
                let y = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                let n = cdf.len().trailing_zeros() as usize;
                index_to_bits(y, n)
            }
            TimeSampler::Noisy { sampler, t } => sampler.sample(*t, rng),
        }
    }
}

fn draw_index<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> usize {
    let total: f64 = dist.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, &p) in dist.iter().enumerate() {
        if u < p {
            return k;
        }
        u -= p;
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn index_to_bits(y: usize, n: usize) -> Vec<bool> {
    (0..n).map(|i| y >> i & 1 == 1).collect()
}

/// Single shot of the quench; bit `i` set means ion `i` ended in −x (bright).
pub fn exact_sample<R: Rng + ?Sized>(
    model: &IsingModel,
    dec: &DecoherenceModel,
    t: f64,
    flags: SequenceFlags,
    rng: &mut R,
) -> Result<Vec<bool>> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::invalid("evolution time must be ≥ 0"));
    }
    Ok(QuenchSampler::new(model, dec, flags)?.sample(t, rng))
}

/// Applies leakage, the group's readout inversion and SPAM to ideal x-basis bits.
/// `time_index` and `seq` of the returned record are zero; the caller sets them.
pub fn apply_errors<R: Rng + ?Sized>(
    bits: &[bool],
    channels: &ErrorChannels,
    t: f64,
    group: Group,
    rng: &mut R,
) -> ShotRecord {
    apply_errors_traced(bits, channels, t, group, rng).0
}

/// As [`apply_errors`], also returning which ions leaked.
pub fn apply_errors_traced<R: Rng + ?Sized>(
    bits: &[bool],
    channels: &ErrorChannels,
    t: f64,
    group: Group,
    rng: &mut R,
) -> (ShotRecord, Vec<bool>) {
    let n = bits.len();
    let mut out = Vec::with_capacity(n);
    let mut leaked = Vec::with_capacity(n);
    for (i, &b) in bits.iter().enumerate() {
        let p_leak = channels.leak_probability(i, t);
        let leak = p_leak > 0.0 && rng.random::<f64>() < p_leak;
        leaked.push(leak);
        if leak {
            out.push(false);
            continue;
        }
        let mut bit = match group {
            Group::Plain => b,
            Group::PiBeforeMeasure => !b,
        };
        if channels.spam_flip > 0.0 && rng.random::<f64>() < channels.spam_flip {
            bit = !bit;
        }
        out.push(bit);
    }
    let cooling_bright = (0..n)
        .map(|_| !(channels.spam_flip > 0.0 && rng.random::<f64>() < channels.spam_flip))
        .collect();
    (
        ShotRecord {
            time_index: 0,
            seq: 0,
            group,
            bits: out,
            cooling_bright,
        },
        leaked,
    )
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// RNG stream of one shot, independent of generation order.
pub fn shot_rng(seed: u64, time_index: usize, shot: usize) -> ChaCha8Rng {
    let key = splitmix(splitmix(seed ^ splitmix(time_index as u64)) ^ shot as u64);
    ChaCha8Rng::seed_from_u64(key)
}

/// Replays the full schedule: shots alternate between the plain and π-before-measure
/// groups, and trials inside a configuration change get dark cooling checks and
/// coin-flip readout on the displaced ions.
pub fn generate_dataset<R: RngCore + ?Sized>(
    model: &IsingModel,
    channels: &ErrorChannels,
    schedule: &QuenchSchedule,
    rng: &mut R,
) -> Result<Dataset> {
    let n = model.n();
    schedule.validate()?;
    channels.validate(n)?;
    let flags = SequenceFlags::new(schedule.echo, !channels.decoherence.is_zero());
    let sampler = QuenchSampler::new(model, &channels.decoherence, flags)?;
    let seed = rng.next_u64();
    let m = schedule.shots_per_time;
    let mut records = Vec::with_capacity(m * schedule.times.len());
    for (ti, &t) in schedule.times.iter().enumerate() {
        let draw = sampler.time_sampler(t);
        for shot in 0..m {
            let mut r = shot_rng(seed, ti, shot);
            let ideal = draw.sample(&mut r);
            let group = if shot % 2 == 0 {
                Group::Plain
            } else {
                Group::PiBeforeMeasure
            };
            let mut rec = apply_errors(&ideal, channels, t, group, &mut r);
            rec.time_index = ti;
            rec.seq = shot;
            let trial = ti * m + shot;
            for change in channels.config_change.iter().filter(|c| c.contains(trial)) {
                for &i in &change.ions {
                    rec.cooling_bright[i] = false;
                    rec.bits[i] = r.random();
                }
            }
            records.push(rec);
        }
    }
    Ok(Dataset {
        n,
        times: schedule.times.clone(),
        echo: schedule.echo,
        records,
    })
}

/// Large-n surrogate: analytic observables plus independent Gaussian noise of
/// variance `(1 − v²)/M` each. Cross-observable covariance is ignored.
pub fn moment_noise_dataset<R: Rng + ?Sized>(
    model: &IsingModel,
    dec: &DecoherenceModel,
    schedule: &QuenchSchedule,
    rng: &mut R,
) -> Result<ObservableSet> {
    schedule.validate()?;
    let flags = SequenceFlags::new(schedule.echo, !dec.is_zero());
    let table = batch_observables(model, dec, &schedule.times, flags)?;
    let m = schedule.shots_per_time as f64;
    let mut noisy = |v: f64| {
        let sd = ((1.0 - v * v).max(0.0) / m).sqrt();
        let z: f64 = StandardNormal.sample(rng);
        Estimate {
            value: v + sd * z,
            se: sd.max(1.0 / m),
        }
    };
    let mag = table
        .mag
        .iter()
        .map(|row| row.iter().map(|&v| noisy(v)).collect())
        .collect();
    let corr = table
        .corr
        .iter()
        .map(|row| row.iter().map(|&v| noisy(v)).collect())
        .collect();
    Ok(ObservableSet {
        n: model.n(),
        times: schedule.times.clone(),
        mag,
        corr,
        counts: vec![schedule.shots_per_time; schedule.times.len()],
    })
}
