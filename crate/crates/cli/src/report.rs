//! Figure-data tables from a directory of artifacts.
//!
//! Inputs in `--dir`: `data.jsonl` (dataset), `decoherence.json`, `init.json`
//! (starting couplings), `fit_on.json` (O(N) fit result) and `amplitudes.json`
//! (calibrated per-tone amplitudes). Outputs in `--out`:
//!
//! | file | columns |
//! |---|---|
//! | `rss_vs_m.csv` | `shots_per_time, train_rss, status` |
//! | `learning_curve.csv` | `iteration, train_rss, test_rss` |
//! | `epsilon_vs_m.csv` | `shots_per_time, pairs, epsilon, epsilon_std` |
//! | `omega_ratio.csv` | `tone, ion, fitted_rad_per_ms, calibrated_rad_per_ms, ratio` |
//! | `kbody_validation.csv` | `set, k, time_ms, predicted, estimated, se, z` |
//!
//! plus `summary.json` with the RSS law, the ε exponent and the validation verdicts.
//! Amplitude ratios use magnitudes, since per-ion signs are a gauge choice.

use std::path::PathBuf;

use hamlearn::fitting::{fit_full, FitOptions, FitResult};
use hamlearn::metrics::{epsilon, precision_scaling, rss_scaling_fit, validate_kbody, ValidationThreshold};
use hamlearn::sim::Dataset;
use hamlearn::{DecoherenceModel, IsingModel};
use log::info;

use crate::commands::{lm_options, print_json, observables_of, random_sets, rng};
use crate::error::CliError;
use crate::{files, parallel, ReportArgs};

pub const INPUTS: [&str; 5] = ["data.jsonl", "decoherence.json", "init.json", "fit_on.json", "amplitudes.json"];

/// Records with `seq` in `lo..hi` at every time point.
fn shots(ds: &Dataset, lo: usize, hi: usize) -> Dataset {
    let keep: Vec<usize> = ds
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| (lo..hi).contains(&r.seq))
        .map(|(k, _)| k)
        .collect();
    ds.subset(&keep)
}

fn status_name<S: serde::Serialize>(s: &S) -> String {
    serde_json::to_value(s).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

fn fmt(x: f64) -> String {
    x.to_string()
}

struct Ctx {
    ds: Dataset,
    dec: DecoherenceModel,
    init: IsingModel,
    options: FitOptions,
}

impl Ctx {
    fn fit(&self, lo: usize, hi: usize) -> Result<FitResult<IsingModel>, CliError> {
        let (obs, _, _) = observables_of(&shots(&self.ds, lo, hi), true, true)?;
        Ok(fit_full(&obs, &self.dec, &self.init, &self.options)?)
    }
}

pub fn run(a: &ReportArgs, seed: u64, threads: usize) -> Result<(), CliError> {
    let path = |name: &str| -> PathBuf { a.dir.join(name) };
    let missing: Vec<&str> = INPUTS.iter().copied().filter(|f| !path(f).is_file()).collect();
    if !missing.is_empty() {
        return Err(CliError::io(format!(
            "missing artifacts in {}: {}",
            a.dir.display(),
            missing.join(", ")
        ))
        .with_hint("produce them with generate, fit --scheme decoherence, couplings and fit --scheme on"));
    }
    let ds = files::read_dataset(&path("data.jsonl"))?;
    let ctx = Ctx {
        dec: files::read_decoherence(&path("decoherence.json"))?,
        init: files::read_model(&path("init.json"))?,
        options: FitOptions {
            lm: lm_options(a.max_iters, a.tol)?,
            ..FitOptions::default()
        },
        ds,
    };
    let available = (0..ctx.ds.times.len()).map(|t| ctx.ds.count_at(t)).min().unwrap_or(0);
    let sizes: Vec<usize> = a.sizes.iter().copied().filter(|&m| m >= 2 && m <= available).collect();
    if sizes.len() < 3 {
        return Err(CliError::validation(format!(
            "need at least three sizes up to {available} shots per time, got {:?}",
            a.sizes
        )));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(format!("{}: {e}", a.out.display())))?;

    // RSS against M, and ε from disjoint equal-size pairs.
    let mut tasks: Vec<(usize, usize, usize)> = sizes.iter().map(|&m| (m, 0, m)).collect();
    for &m in &sizes {
        for p in 0..(available / (2 * m)).min(a.pairs) {
            tasks.push((m, 2 * p * m, (2 * p + 1) * m));
            tasks.push((m, (2 * p + 1) * m, (2 * p + 2) * m));
        }
    }
    info!("running {} fits on {threads} threads", tasks.len());
    let fits: Vec<Result<FitResult<IsingModel>, CliError>> = parallel::map(threads, &tasks, |&(_, lo, hi)| ctx.fit(lo, hi));
    let fits = fits.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut rss_rows = Vec::new();
    let mut rss_points = Vec::new();
    for (&(m, _, _), f) in tasks.iter().zip(&fits).take(sizes.len()) {
        rss_points.push((m, f.train_rss));
        rss_rows.push(vec![m.to_string(), fmt(f.train_rss), status_name(&f.status)]);
    }
    files::write_csv(&a.out.join("rss_vs_m.csv"), &["shots_per_time", "train_rss", "status"], &rss_rows)?;

    let mut eps_rows = Vec::new();
    let mut eps_points = Vec::new();
    let pair_fits: Vec<_> = tasks.iter().zip(&fits).skip(sizes.len()).collect();
    for (idx, &m) in sizes.iter().enumerate() {
        let mine: Vec<_> = pair_fits.iter().filter(|((mm, _, _), _)| *mm == m).map(|(_, f)| f).collect();
        let mut values = Vec::new();
        for (p, pair) in mine.chunks(2).enumerate() {
            let mut r = rng(seed, 100 + (idx * 64 + p) as u64);
            let rep = epsilon(&pair[0].params, &pair[1].params, a.configs, a.repeats, &mut r)?;
            values.push(rep.epsilon);
        }
        if values.is_empty() {
            continue;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        eps_points.push((m, mean));
        eps_rows.push(vec![m.to_string(), values.len().to_string(), fmt(mean), fmt(std)]);
    }
    files::write_csv(
        &a.out.join("epsilon_vs_m.csv"),
        &["shots_per_time", "pairs", "epsilon", "epsilon_std"],
        &eps_rows,
    )?;

    // Learning curve on a train/test split of the full dataset.
    let (train, test) = hamlearn::estimation::split(&ctx.ds, 1.0 - a.test_fraction, &mut rng(seed, 1))?;
    let (train_obs, _, _) = observables_of(&train, true, true)?;
    let (test_obs, _, _) = observables_of(&test, true, true)?;
    let tt = fit_full(&train_obs, &ctx.dec, &ctx.init, &ctx.options.clone().with_test(test_obs))?;
    let curve_rows: Vec<Vec<String>> = tt
        .learning_curve
        .iter()
        .map(|c| vec![c.iteration.to_string(), fmt(c.train_rss), c.test_rss.map_or(String::new(), fmt)])
        .collect();
    files::write_csv(&a.out.join("learning_curve.csv"), &["iteration", "train_rss", "test_rss"], &curve_rows)?;

    // Fitted over calibrated amplitudes.
    let fitted = files::read_amplitudes(&path("fit_on.json"))?;
    let calibrated = files::read_amplitudes(&path("amplitudes.json"))?;
    if fitted.len() != calibrated.len() || fitted.iter().zip(&calibrated).any(|(f, c)| f.len() != c.len()) {
        return Err(CliError::validation("fit_on.json and amplitudes.json disagree in shape"));
    }
    let mut omega_rows = Vec::new();
    for (tone, (f, c)) in fitted.iter().zip(&calibrated).enumerate() {
        for (ion, (fv, cv)) in f.iter().zip(c).enumerate() {
            let ratio = if *cv != 0.0 { fv.abs() / cv.abs() } else { f64::NAN };
            omega_rows.push(vec![tone.to_string(), ion.to_string(), fmt(*fv), fmt(*cv), fmt(ratio)]);
        }
    }
    files::write_csv(
        &a.out.join("omega_ratio.csv"),
        &["tone", "ion", "fitted_rad_per_ms", "calibrated_rad_per_ms", "ratio"],
        &omega_rows,
    )?;

    // k-body validation of the largest-M fit against the full dataset.
    let best = &fits[sizes.len() - 1].params;
    let sets = random_sets(ctx.ds.n, &a.k, 1, &mut rng(seed, 3))?;
    let (_, filter, leak) = observables_of(&ctx.ds, true, true)?;
    let checks = validate_kbody(best, &ctx.dec, &ctx.ds, &filter, leak.as_ref(), &sets, ValidationThreshold::default())?;
    let mut kb_rows = Vec::new();
    for (s, v) in checks.iter().enumerate() {
        for t in 0..v.times.len() {
            kb_rows.push(vec![
                s.to_string(),
                v.set.len().to_string(),
                fmt(v.times[t]),
                fmt(v.predicted[t]),
                fmt(v.estimated[t].value),
                fmt(v.estimated[t].se),
                fmt(v.z[t]),
            ]);
        }
    }
    files::write_csv(
        &a.out.join("kbody_validation.csv"),
        &["set", "k", "time_ms", "predicted", "estimated", "se", "z"],
        &kb_rows,
    )?;

    let law = rss_scaling_fit(&rss_points).ok();
    let alpha = if eps_points.len() >= 2 { precision_scaling(&eps_points).ok() } else { None };
    let summary = serde_json::json!({
        "seed": seed,
        "sizes": sizes,
        "rss_law": law,
        "epsilon_exponent": alpha,
        "final_train_rss": tt.train_rss,
        "final_test_rss": tt.test_rss,
        "kbody": checks.iter().map(|v| serde_json::json!({"set": v.set, "passed": v.passed, "fraction_within": v.fraction_within})).collect::<Vec<_>>(),
    });
    files::write_json(&a.out.join("summary.json"), &summary)?;
    print_json(&summary)
}
