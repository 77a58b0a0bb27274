//! From shot records to corrected moment estimates.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_index, check_len, Error, Result};
use crate::model::{pair_count, pair_index, pairs};
use crate::sim::{Dataset, Group, ShotRecord};

/// Trials per cooling-check window.
pub const FILTER_WINDOW: usize = 100;
/// A window is suspicious when an ion is dark more often than this.
pub const FILTER_MAX_DARK: usize = 5;
/// Bright runs at least this long survive in a suspicious window.
pub const FILTER_MIN_BRIGHT_RUN: usize = 5;
/// Dark streaks this long are discarded anywhere.
pub const FILTER_DARK_STREAK: usize = 3;

/// A value with its standard error. Serialized as `[value, se]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64)", into = "(f64, f64)")]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl From<(f64, f64)> for Estimate {
    fn from((value, se): (f64, f64)) -> Self {
        Estimate { value, se }
    }
}

impl From<Estimate> for (f64, f64) {
    fn from(e: Estimate) -> Self {
        (e.value, e.se)
    }
}

/// Estimated single-ion and pair moments for every time point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObservableFile")]
pub struct ObservableSet {
    pub n: usize,
    pub times: Vec<f64>,
    /// `mag[t][i]`.
    pub mag: Vec<Vec<Estimate>>,
    /// `corr[t][pair_index(n, i, j)]`, i < j.
    pub corr: Vec<Vec<Estimate>>,
    pub counts: Vec<usize>,
}

#[derive(Deserialize)]
struct ObservableFile {
    n: usize,
    times: Vec<f64>,
    mag: Vec<Vec<Estimate>>,
    corr: Vec<Vec<Estimate>>,
    counts: Vec<usize>,
}

impl TryFrom<ObservableFile> for ObservableSet {
    type Error = Error;
    fn try_from(f: ObservableFile) -> Result<Self> {
        let s = ObservableSet {
            n: f.n,
            times: f.times,
            mag: f.mag,
            corr: f.corr,
            counts: f.counts,
        };
        s.validate()?;
        Ok(s)
    }
}

impl ObservableSet {
    pub fn validate(&self) -> Result<()> {
        let nt = self.times.len();
        check_len(nt, self.mag.len())?;
        check_len(nt, self.corr.len())?;
        check_len(nt, self.counts.len())?;
        for (m, c) in self.mag.iter().zip(&self.corr) {
            check_len(self.n, m.len())?;
            check_len(pair_count(self.n), c.len())?;
        }
        if self.counts.contains(&0) {
            return Err(Error::invalid("every time point needs at least one sample"));
        }
        if self
            .mag
            .iter()
            .chain(&self.corr)
            .flatten()
            .any(|e| !e.value.is_finite() || !(e.se.is_finite() && e.se > 0.0))
        {
            return Err(Error::invalid("estimates must be finite with se > 0"));
        }
        Ok(())
    }

    pub fn num_observables(&self) -> usize {
        self.times.len() * (self.n + pair_count(self.n))
    }

    pub fn corr_at(&self, ti: usize, i: usize, j: usize) -> Estimate {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.corr[ti][pair_index(self.n, a, b)]
    }

    /// Per time: magnetizations, then packed correlations.
    pub fn values(&self) -> Vec<f64> {
        self.flat().map(|e| e.value).collect()
    }

    /// Standard errors in the order of [`ObservableSet::values`].
    pub fn ses(&self) -> Vec<f64> {
        self.flat().map(|e| e.se).collect()
    }

    fn flat(&self) -> impl Iterator<Item = &Estimate> {
        self.mag
            .iter()
            .zip(&self.corr)
            .flat_map(|(m, c)| m.iter().chain(c.iter()))
    }

    /// Keeps only the given time points.
    pub fn select_times(&self, indices: &[usize]) -> Result<ObservableSet> {
        for &k in indices {
            check_index(k, self.times.len())?;
        }
        Ok(ObservableSet {
            n: self.n,
            times: indices.iter().map(|&k| self.times[k]).collect(),
            mag: indices.iter().map(|&k| self.mag[k].clone()).collect(),
            corr: indices.iter().map(|&k| self.corr[k].clone()).collect(),
            counts: indices.iter().map(|&k| self.counts[k]).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterReport {
    /// Record positions in the input dataset.
    pub kept: Vec<usize>,
    pub discarded: Vec<usize>,
    /// Trials inside a dark streak of at least [`FILTER_DARK_STREAK`].
    pub streak_discards: usize,
    /// Trials dropped from suspicious windows outside long bright runs.
    pub window_discards: usize,
    pub suspicious_windows: usize,
}

impl FilterReport {
    /// Keeps everything.
    pub fn keep_all(dataset: &Dataset) -> Self {
        FilterReport {
            kept: (0..dataset.records.len()).collect(),
            ..Default::default()
        }
    }

    pub fn discard_fraction(&self) -> f64 {
        let total = self.kept.len() + self.discarded.len();
        if total == 0 {
            0.0
        } else {
            self.discarded.len() as f64 / total as f64
        }
    }
}

/// Indices of maximal runs of consecutive `seq` values satisfying `pred`.
fn runs(block: &[(usize, &ShotRecord)], pred: impl Fn(&ShotRecord) -> bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for k in 0..block.len() {
        let ok = pred(block[k].1);
        let continues = k > 0 && block[k].1.seq == block[k - 1].1.seq + 1;
        match (ok, start) {
            (true, Some(_)) if continues => {}
            (true, Some(s)) => {
                out.push((s, k));
                start = Some(k);
            }
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                out.push((s, k));
                start = None;
            }
            (false, None) => {}
        }
    }
    if let Some(s) = start {
        out.push((s, block.len()));
    }
    out
}

/// Cooling-check filter for ion-configuration changes.
///
/// Per time point, trials are ordered by `seq` and cut into non-overlapping windows of
/// [`FILTER_WINDOW`]. In a window where some ion is dark more than [`FILTER_MAX_DARK`]
/// times, only trials inside runs of at least [`FILTER_MIN_BRIGHT_RUN`] consecutive
/// trials with all such ions bright are kept. Anywhere, runs of at least
/// [`FILTER_DARK_STREAK`] consecutive dark checks of one ion are discarded.
/// Filtering an already filtered dataset discards nothing.
pub fn config_filter(dataset: &Dataset) -> Result<FilterReport> {
    let n = dataset.n;
    if let Some(r) = dataset.records.iter().find(|r| r.cooling_bright.len() != n) {
        return Err(Error::invalid(format!(
            "record at time index {} has {} cooling flags for {} ions",
            r.time_index,
            r.cooling_bright.len(),
            n
        )));
    }
    let mut blocks: BTreeMap<usize, Vec<(usize, &ShotRecord)>> = BTreeMap::new();
    for (pos, r) in dataset.records.iter().enumerate() {
        blocks.entry(r.time_index).or_default().push((pos, r));
    }
    let mut discard = vec![false; dataset.records.len()];
    let mut report = FilterReport::default();
    for block in blocks.values_mut() {
        block.sort_by_key(|(_, r)| r.seq);
        let mut by_streak = vec![false; block.len()];
        let mut by_window = vec![false; block.len()];
        for i in 0..n {
            for (s, e) in runs(block, |r| !r.cooling_bright[i]) {
                if e - s >= FILTER_DARK_STREAK {
                    by_streak[s..e].iter_mut().for_each(|d| *d = true);
                }
            }
        }
        let mut start = 0;
        while start < block.len() {
            let w = block[start].1.seq / FILTER_WINDOW;
            let end = start
                + block[start..]
                    .iter()
                    .take_while(|(_, r)| r.seq / FILTER_WINDOW == w)
                    .count();
            let suspicious: Vec<usize> = (0..n)
                .filter(|&i| {
                    block[start..end]
                        .iter()
                        .filter(|(_, r)| !r.cooling_bright[i])
                        .count()
                        > FILTER_MAX_DARK
                })
                .collect();
            if !suspicious.is_empty() {
                report.suspicious_windows += 1;
                let mut keep = vec![false; block.len()];
                for (s, e) in runs(block, |r| suspicious.iter().all(|&i| r.cooling_bright[i])) {
                    if e - s >= FILTER_MIN_BRIGHT_RUN {
                        keep[s..e].iter_mut().for_each(|k| *k = true);
                    }
                }
                for k in start..end {
                    by_window[k] = !keep[k];
                }
            }
            start = end;
        }
        for (k, &(pos, _)) in block.iter().enumerate() {
            if by_streak[k] {
                report.streak_discards += 1;
            } else if by_window[k] {
                report.window_discards += 1;
            }
            discard[pos] = by_streak[k] || by_window[k];
        }
    }
    for (pos, d) in discard.into_iter().enumerate() {
        if d {
            report.discarded.push(pos);
        } else {
            report.kept.push(pos);
        }
    }
    Ok(report)
}

/// Per-ion leakage probabilities and their linear-in-time fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageEstimate {
    pub times: Vec<f64>,
    /// `per_time[t][i]`.
    pub per_time: Vec<Vec<Estimate>>,
    /// Fitted leakage rate per ion (1/ms), ≥ 0.
    pub rate: Vec<f64>,
    pub rate_se: Vec<f64>,
    /// Ions whose unconstrained fit came out negative.
    pub clamped: Vec<bool>,
}

impl LeakageEstimate {
    /// No leakage on any ion.
    pub fn zero(n: usize, times: &[f64]) -> Self {
        LeakageEstimate {
            times: times.to_vec(),
            per_time: vec![vec![Estimate { value: 0.0, se: 0.0 }; n]; times.len()],
            rate: vec![0.0; n],
            rate_se: vec![0.0; n],
            clamped: vec![false; n],
        }
    }

    /// Correction factor input for ion `i` at time `t`, from the fitted line.
    pub fn probability(&self, i: usize, t: f64) -> f64 {
        (self.rate[i] * t).clamp(0.0, 1.0 - 1e-12)
    }
}

fn group_blocks<'d>(
    dataset: &'d Dataset,
    kept: &[usize],
) -> Result<Vec<[Vec<&'d ShotRecord>; 2]>> {
    let mut blocks: Vec<[Vec<&ShotRecord>; 2]> =
        (0..dataset.times.len()).map(|_| [Vec::new(), Vec::new()]).collect();
    for &pos in kept {
        let r = dataset
            .records
            .get(pos)
            .ok_or(Error::IndexOutOfRange {
                index: pos,
                len: dataset.records.len(),
            })?;
        check_len(dataset.n, r.bits.len())?;
        let g = match r.group {
            Group::Plain => 0,
            Group::PiBeforeMeasure => 1,
        };
        blocks
            .get_mut(r.time_index)
            .ok_or(Error::IndexOutOfRange {
                index: r.time_index,
                len: dataset.times.len(),
            })?[g]
            .push(r);
    }
    Ok(blocks)
}

fn parity_mean(records: &[&ShotRecord], set: &[usize]) -> f64 {
    let odd = records
        .iter()
        .filter(|r| set.iter().filter(|&&i| r.bits[i]).count() % 2 == 1)
        .count();
    1.0 - 2.0 * odd as f64 / records.len() as f64
}

/// Binomial variance of a ±1 mean, floored so that a saturated group still counts.
fn mean_variance(mu: f64, count: usize) -> f64 {
    let c = count as f64;
    (1.0 - mu * mu).max(1.0 / c) / c
}

/// Leakage from the average of the two groups' single-ion means, then a
/// least-squares line through the origin in t.
pub fn estimate_leakage(dataset: &Dataset) -> Result<LeakageEstimate> {
    let all: Vec<usize> = (0..dataset.records.len()).collect();
    estimate_leakage_kept(dataset, &all)
}

/// As [`estimate_leakage`], restricted to the kept record positions.
pub fn estimate_leakage_kept(dataset: &Dataset, kept: &[usize]) -> Result<LeakageEstimate> {
    let n = dataset.n;
    let blocks = group_blocks(dataset, kept)?;
    let mut per_time = Vec::with_capacity(blocks.len());
    for (ti, [plain, pi]) in blocks.iter().enumerate() {
        if plain.is_empty() || pi.is_empty() {
            return Err(Error::invalid(format!(
                "time index {ti} lacks one of the two readout groups"
            )));
        }
        let row = (0..n)
            .map(|i| {
                let mp = parity_mean(plain, &[i]);
                let mq = parity_mean(pi, &[i]);
                Estimate {
                    value: 0.5 * (mp + mq),
                    se: 0.5 * (mean_variance(mp, plain.len()) + mean_variance(mq, pi.len())).sqrt(),
                }
            })
            .collect::<Vec<_>>();
        per_time.push(row);
    }
    let t2: f64 = dataset.times.iter().map(|t| t * t).sum();
    let mut rate = vec![0.0; n];
    let mut rate_se = vec![0.0; n];
    let mut clamped = vec![false; n];
    if t2 > 0.0 {
        for i in 0..n {
            let r: f64 = dataset
                .times
                .iter()
                .zip(&per_time)
                .map(|(t, row)| t * row[i].value)
                .sum::<f64>()
                / t2;
            let var: f64 = dataset
                .times
                .iter()
                .zip(&per_time)
                .map(|(t, row)| t * t * row[i].se * row[i].se)
                .sum::<f64>()
                / (t2 * t2);
            rate_se[i] = var.sqrt();
            if r < 0.0 {
                clamped[i] = true;
                log::info!("leakage fit for ion {i} is negative ({r:.3e}); clamped to 0");
            } else {
                rate[i] = r;
            }
        }
    }
    Ok(LeakageEstimate {
        times: dataset.times.clone(),
        per_time,
        rate,
        rate_se,
        clamped,
    })
}

/// Leakage-corrected parity estimate of `set` at every time point.
///
/// Half the difference of the two groups' parity means (with the π group
/// sign-adjusted for |set|), divided by `Π(1 − ε̂_L)`. `leakage = None` skips the
/// division.
pub fn estimate_kbody(
    dataset: &Dataset,
    filter: &FilterReport,
    leakage: Option<&LeakageEstimate>,
    set: &[usize],
) -> Result<Vec<Estimate>> {
    for &i in set {
        check_index(i, dataset.n)?;
    }
    let blocks = group_blocks(dataset, &filter.kept)?;
    let sign = if set.len().is_multiple_of(2) { 1.0 } else { -1.0 };
    blocks
        .iter()
        .enumerate()
        .map(|(ti, [plain, pi])| {
            if plain.is_empty() || pi.is_empty() {
                return Err(Error::invalid(format!(
                    "time index {ti} has no kept trials in one of the groups"
                )));
            }
            let t = dataset.times[ti];
            let div: f64 = match leakage {
                Some(l) => set.iter().map(|&i| 1.0 - l.probability(i, t)).product(),
                None => 1.0,
            };
            let mp = parity_mean(plain, set);
            let mq = parity_mean(pi, set);
            Ok(Estimate {
                value: 0.5 * (mp + sign * mq) / div,
                se: 0.5 * (mean_variance(mp, plain.len()) + mean_variance(mq, pi.len())).sqrt() / div,
            })
        })
        .collect()
}

/// Raw parity mean of `set` in one group, per time point, without any correction.
pub fn group_parity(dataset: &Dataset, kept: &[usize], set: &[usize], group: Group) -> Result<Vec<Estimate>> {
    for &i in set {
        check_index(i, dataset.n)?;
    }
    let g = match group {
        Group::Plain => 0,
        Group::PiBeforeMeasure => 1,
    };
    let blocks = group_blocks(dataset, kept)?;
    blocks
        .iter()
        .enumerate()
        .map(|(ti, b)| {
            let recs = &b[g];
            if recs.is_empty() {
                return Err(Error::invalid(format!("time index {ti} has no trials in group")));
            }
            let mu = parity_mean(recs, set);
            Ok(Estimate {
                value: mu,
                se: mean_variance(mu, recs.len()).sqrt(),
            })
        })
        .collect()
}

/// All magnetizations and pair correlations, corrected as in [`estimate_kbody`].
pub fn estimate_observables(
    dataset: &Dataset,
    filter: &FilterReport,
    leakage: Option<&LeakageEstimate>,
) -> Result<ObservableSet> {
    let n = dataset.n;
    if let Some(l) = leakage {
        check_len(n, l.rate.len())?;
    }
    let blocks = group_blocks(dataset, &filter.kept)?;
    let mut mag = Vec::with_capacity(blocks.len());
    let mut corr = Vec::with_capacity(blocks.len());
    let mut counts = Vec::with_capacity(blocks.len());
    for (ti, [plain, pi]) in blocks.iter().enumerate() {
        if plain.is_empty() || pi.is_empty() {
            return Err(Error::invalid(format!(
                "time index {ti} has no kept trials in one of the groups"
            )));
        }
        let t = dataset.times[ti];
        let keep = |i: usize| match leakage {
            Some(l) => 1.0 - l.probability(i, t),
            None => 1.0,
        };
        // ±1 readout per record, row-major.
        let values = |recs: &[&ShotRecord]| -> Vec<f64> {
            recs.iter()
                .flat_map(|r| (0..n).map(move |i| r.value(i)))
                .collect()
        };
        let (vp, vq) = (values(plain), values(pi));
        let (np, nq) = (plain.len(), pi.len());
        let combine = |mp: f64, mq: f64, sign: f64, div: f64| Estimate {
            value: 0.5 * (mp + sign * mq) / div,
            se: 0.5 * (mean_variance(mp, np) + mean_variance(mq, nq)).sqrt() / div,
        };
        let col_mean = |v: &[f64], count: usize, i: usize| -> f64 {
            (0..count).map(|r| v[r * n + i]).sum::<f64>() / count as f64
        };
        let pair_mean = |v: &[f64], count: usize, i: usize, j: usize| -> f64 {
            (0..count).map(|r| v[r * n + i] * v[r * n + j]).sum::<f64>() / count as f64
        };
        mag.push(
            (0..n)
                .map(|i| combine(col_mean(&vp, np, i), col_mean(&vq, nq, i), -1.0, keep(i)))
                .collect(),
        );
        corr.push(
            pairs(n)
                .map(|(i, j)| {
                    combine(
                        pair_mean(&vp, np, i, j),
                        pair_mean(&vq, nq, i, j),
                        1.0,
                        keep(i) * keep(j),
                    )
                })
                .collect(),
        );
        counts.push(np + nq);
    }
    Ok(ObservableSet {
        n,
        times: dataset.times.clone(),
        mag,
        corr,
        counts,
    })
}

/// Random per-time split: `fraction` of each time point's records go to the first
/// dataset. Each group within a time point is split separately, so both halves keep
/// both readout groups.
pub fn split<R: Rng + ?Sized>(dataset: &Dataset, fraction: f64, rng: &mut R) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("split fraction must lie in (0, 1)"));
    }
    let mut strata: BTreeMap<(usize, bool), Vec<usize>> = BTreeMap::new();
    for (pos, r) in dataset.records.iter().enumerate() {
        strata
            .entry((r.time_index, r.group == Group::Plain))
            .or_default()
            .push(pos);
    }
    for ti in 0..dataset.times.len() {
        let size: usize = [true, false]
            .iter()
            .map(|&g| strata.get(&(ti, g)).map_or(0, Vec::len))
            .sum();
        if size < 2 {
            return Err(Error::invalid(format!(
                "time index {ti} has too few records to split"
            )));
        }
    }
    let mut first = Vec::new();
    let mut second = Vec::new();
    for positions in strata.values_mut() {
        positions.shuffle(rng);
        let cut = ((positions.len() as f64) * fraction).round() as usize;
        first.extend_from_slice(&positions[..cut]);
        second.extend_from_slice(&positions[cut..]);
    }
    Ok((dataset.subset(&first), dataset.subset(&second)))
}
