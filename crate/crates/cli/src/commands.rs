use std::io::Write;
use std::path::Path;

use hamlearn::estimation::{
    config_filter, estimate_leakage_kept, estimate_observables, split, FilterReport, LeakageEstimate,
    ObservableSet,
};
use hamlearn::fitting::{
    fit_decoherence, fit_fields, fit_full, fit_omega, model_rss, FitOptions, FitResult,
};
use hamlearn::lm::LmOptions;
use hamlearn::metrics::{epsilon, validate_kbody, ValidationThreshold};
use hamlearn::observables::SequenceFlags;
use hamlearn::phonon::{
    coupling_matrix_per_tone, equilibrium, harmonic_from_positions, read_positions_csv, transverse_modes,
    fit_potential_staged, FitScales, ModeSet, PotentialData, ToneSpec, TrapPotential,
};
use hamlearn::sim::{generate_dataset, ConfigChange, Dataset, ErrorChannels, QuenchSchedule};
use hamlearn::{DecoherenceModel, IsingModel};
use log::info;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::CliError;
use crate::files;
use crate::{
    Cli, Command, CouplingsArgs, EpsilonArgs, EstimateArgs, FitArgs, GenerateArgs, PhononFitArgs, Scheme,
    ValidateArgs,
};

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => generate(a, require_seed(cli, "generate")?),
        Command::Estimate(a) => estimate(a, cli.seed),
        Command::Fit(a) => fit(a),
        Command::PhononFit(a) => phonon_fit(a),
        Command::Couplings(a) => couplings(a),
        Command::Epsilon(a) => epsilon_cmd(a, require_seed(cli, "epsilon")?),
        Command::Validate(a) => validate(a, cli.seed),
        Command::Report(a) => crate::report::run(a, require_seed(cli, "report")?, cli.threads),
    }
}

pub fn require_seed(cli: &Cli, command: &str) -> Result<u64, CliError> {
    cli.seed
        .ok_or_else(|| CliError::validation(format!("`{command}` is stochastic and needs --seed")))
}

pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Pretty JSON on stdout. A closed pipe is not an error.
pub fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(value).map_err(|e| CliError::io(e.to_string()))?;
    match writeln!(std::io::stdout().lock(), "{s}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

/// 13 times from 0 to 9 ms.
pub fn default_times() -> Vec<f64> {
    (0..13).map(|k| 0.75 * k as f64).collect()
}

fn parse_config_change(spec: &str) -> Result<ConfigChange, CliError> {
    let bad = || CliError::validation(format!("config change {spec:?} is not first:last:i,j,…"));
    let mut parts = spec.splitn(3, ':');
    let (Some(first), Some(last), Some(ions)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(bad());
    };
    Ok(ConfigChange {
        first: first.trim().parse().map_err(|_| bad())?,
        last: last.trim().parse().map_err(|_| bad())?,
        ions: ions
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?,
    })
}

fn generate(a: &GenerateArgs, seed: u64) -> Result<(), CliError> {
    let model = files::read_model(&a.model)?;
    let n = model.n();
    let channels = match &a.channels {
        Some(path) => files::read_json::<ErrorChannels>(path)?,
        None => {
            let mut c = ErrorChannels::none(n);
            c.spam_flip = a.spam;
            c.leakage_rate = vec![a.leak_rate; n];
            c.decoherence = match &a.decoherence {
                Some(path) => files::read_decoherence(path)?,
                None => DecoherenceModel::uniform(n, a.gamma_cor, a.gamma_ind)?,
            };
            c.config_change = a.config_change.iter().map(|s| parse_config_change(s)).collect::<Result<_, _>>()?;
            c
        }
    };
    let times = a.times.clone().unwrap_or_else(default_times);
    let schedule = QuenchSchedule::new(times, a.shots, !a.no_echo)?;
    let ds = generate_dataset(&model, &channels, &schedule, &mut rng(seed, 0))?;
    files::write_dataset(&a.out, &ds)?;
    let injected: usize = (0..ds.records.len())
        .filter(|&t| channels.config_change.iter().any(|c| c.contains(t)))
        .count();
    print_json(&serde_json::json!({
        "n": n,
        "times_ms": ds.times,
        "shots_per_time": a.shots,
        "records": ds.records.len(),
        "echo": ds.echo,
        "config_change_trials": injected,
    }))
}

/// Configuration filter, leakage estimate and observables for one dataset.
pub fn observables_of(
    ds: &Dataset,
    filter: bool,
    leakage: bool,
) -> Result<(ObservableSet, FilterReport, Option<LeakageEstimate>), CliError> {
    let report = if filter {
        config_filter(ds)?
    } else {
        FilterReport::keep_all(ds)
    };
    let leak = if leakage {
        Some(estimate_leakage_kept(ds, &report.kept)?)
    } else {
        None
    };
    let obs = estimate_observables(ds, &report, leak.as_ref())?;
    Ok((obs, report, leak))
}

fn estimate(a: &EstimateArgs, seed: Option<u64>) -> Result<(), CliError> {
    let ds = files::read_dataset(&a.data)?;
    let (train, test) = match a.test_fraction {
        Some(f) => {
            let seed = seed.ok_or_else(|| CliError::validation("--test-fraction needs --seed"))?;
            let out = a
                .test_out
                .as_ref()
                .ok_or_else(|| CliError::validation("--test-fraction needs --test-out"))?;
            let (train, test) = split(&ds, 1.0 - f, &mut rng(seed, 1))?;
            (train, Some((test, out)))
        }
        None => (ds, None),
    };
    let (obs, report, leak) = observables_of(&train, !a.no_filter, !a.no_leakage)?;
    files::write_json(&a.out, &obs)?;
    if let Some((test, path)) = test {
        let (test_obs, _, _) = observables_of(&test, !a.no_filter, !a.no_leakage)?;
        files::write_json(path, &test_obs)?;
    }
    if let (Some(path), Some(l)) = (&a.leakage_out, &leak) {
        files::write_json(path, l)?;
    }
    print_json(&serde_json::json!({
        "records": report.kept.len() + report.discarded.len(),
        "kept": report.kept.len(),
        "discarded": report.discarded.len(),
        "discard_fraction": report.discard_fraction(),
        "suspicious_windows": report.suspicious_windows,
        "leakage_rate_per_ms": leak.map(|l| l.rate),
    }))
}

pub fn lm_options(max_iters: usize, tol: f64) -> Result<LmOptions, CliError> {
    if !(tol.is_finite() && tol >= 0.0) {
        return Err(CliError::validation("--tol must be finite and ≥ 0"));
    }
    Ok(LmOptions {
        max_iters,
        tol,
        ..LmOptions::default()
    })
}

fn need_decoherence(path: &Option<std::path::PathBuf>) -> Result<DecoherenceModel, CliError> {
    match path {
        Some(p) => files::read_decoherence(p),
        None => Err(CliError::validation("no decoherence rates given (--decoherence)").with_hint(
            "fit them first on J = 0 data: hamlearn fit --scheme decoherence --train <obs.json> --out decoherence.json",
        )),
    }
}

fn need<'p>(path: &'p Option<std::path::PathBuf>, flag: &str, scheme: &str) -> Result<&'p Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::validation(format!("scheme {scheme} needs {flag}")))
}

struct Theory {
    modes: ModeSet,
    tones: Vec<ToneSpec>,
    amplitudes: Vec<Vec<f64>>,
}

impl Theory {
    fn load(a: &FitArgs, scheme: &str) -> Result<Self, CliError> {
        let modes = files::read_modes(need(&a.modes, "--modes", scheme)?)?;
        let tones = files::read_tones(need(&a.tones, "--tones", scheme)?, &modes)?;
        let amplitudes = files::read_amplitudes(need(&a.amplitudes, "--amplitudes", scheme)?)?;
        Ok(Theory { modes, tones, amplitudes })
    }

    fn couplings(&self) -> Result<IsingModel, CliError> {
        Ok(coupling_matrix_per_tone(&self.modes, &self.tones, &self.amplitudes)?)
    }
}

/// Fit result as JSON with the scheme name added.
fn write_fit<P: Serialize>(path: &Path, scheme: &str, res: &FitResult<P>) -> Result<(), CliError> {
    let mut v = serde_json::to_value(res).map_err(|e| CliError::io(e.to_string()))?;
    v["scheme"] = scheme.into();
    files::write_json(path, &v)
}

fn write_curve<P>(path: &Path, res: &FitResult<P>) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = res
        .learning_curve
        .iter()
        .map(|c| {
            vec![
                c.iteration.to_string(),
                c.train_rss.to_string(),
                c.test_rss.map_or(String::new(), |t| t.to_string()),
            ]
        })
        .collect();
    files::write_csv(path, &["iteration", "train_rss", "test_rss"], &rows)
}

fn finish<P: Serialize>(a: &FitArgs, scheme: &str, res: &FitResult<P>) -> Result<(), CliError> {
    write_fit(&a.out, scheme, res)?;
    if let Some(c) = &a.curve {
        write_curve(c, res)?;
    }
    print_json(&serde_json::json!({
        "scheme": scheme,
        "train_rss": res.train_rss,
        "test_rss": res.test_rss,
        "iterations": res.iterations,
        "status": res.status,
        "converged": res.converged,
    }))?;
    if res.converged {
        Ok(())
    } else {
        Err(CliError::numerical(format!(
            "fit stopped with status {:?} after {} iterations; result written to {}",
            res.status,
            res.iterations,
            a.out.display()
        )))
    }
}

fn fit(a: &FitArgs) -> Result<(), CliError> {
    let train = files::read_observables(&a.train)?;
    let test = a.test.as_deref().map(files::read_observables).transpose()?;
    let mut options = FitOptions {
        lm: lm_options(a.max_iters, a.tol)?,
        weighted: a.weighted,
        test: None,
    };
    if let Some(t) = test.clone() {
        options = options.with_test(t);
    }
    match a.scheme {
        Scheme::On2 => {
            let dec = need_decoherence(&a.decoherence)?;
            let init = match &a.init {
                Some(p) => files::read_model(p)?,
                None if a.modes.is_some() => Theory::load(a, "on2")?.couplings()?,
                None => {
                    return Err(CliError::validation("scheme on2 needs a starting point").with_hint(
                        "pass --init <model.json>, or --modes/--tones/--amplitudes to start from theory couplings",
                    ))
                }
            };
            let res = fit_full(&train, &dec, &init, &options)?;
            finish(a, "on2", &res)
        }
        Scheme::On => {
            let dec = need_decoherence(&a.decoherence)?;
            let th = Theory::load(a, "on")?;
            let res = fit_omega(&train, &dec, &th.modes, &th.tones, &th.amplitudes, &options)?;
            finish(a, "on", &res)
        }
        Scheme::O1 => {
            let dec = need_decoherence(&a.decoherence)?;
            let model = Theory::load(a, "o1")?.couplings()?;
            let flags = SequenceFlags::new(true, !dec.is_zero());
            let train_rss = model_rss(&model, &dec, flags, &train)?;
            let test_rss = test.as_ref().map(|t| model_rss(&model, &dec, flags, t)).transpose()?;
            files::write_json(
                &a.out,
                &serde_json::json!({
                    "scheme": "o1",
                    "params": model,
                    "train_rss": train_rss,
                    "test_rss": test_rss,
                }),
            )?;
            print_json(&serde_json::json!({ "scheme": "o1", "train_rss": train_rss, "test_rss": test_rss }))
        }
        Scheme::Decoherence => {
            let res = fit_decoherence(&train, &options)?;
            finish(a, "decoherence", &res)
        }
        Scheme::Fields => {
            let model = files::read_model(need(&a.init, "--init (known couplings)", "fields")?)?;
            let dec = match &a.decoherence {
                Some(p) => files::read_decoherence(p)?,
                None => DecoherenceModel::none(model.n()),
            };
            let flags = SequenceFlags::new(false, !dec.is_zero());
            let res = fit_fields(&train, &model, &dec, flags, &options)?;
            finish(a, "fields", &res)
        }
    }
}

fn phonon_fit(a: &PhononFitArgs) -> Result<(), CliError> {
    let mut data: PotentialData = files::read_json(&a.data)?;
    if let Some(csv) = &a.positions_csv {
        data.positions = read_positions_csv(files::open(csv)?, a.length_um)?;
    }
    let start = match (&a.start, a.omega_y) {
        (Some(p), _) => files::read_json::<TrapPotential>(p)?,
        (None, Some(wy)) => harmonic_from_positions(&data.positions, wy, a.scale_frequency)?,
        (None, None) => {
            return Err(CliError::validation("need --start <potential.json> or --omega-y for the harmonic guess"))
        }
    };
    let fit = fit_potential_staged(&data, &start, FitScales::default(), &lm_options(a.max_iters, a.tol)?)?;
    for s in &fit.stages {
        info!("stage {:?}: rss {:.3e} -> {:.3e}", s.name, s.initial_rss, s.rss);
    }
    files::write_json(&a.out, &fit)?;
    if let Some(path) = &a.modes_out {
        let eq = equilibrium(&fit.potential, &data.positions)?;
        files::write_json(path, &transverse_modes(&fit.potential, &eq)?)?;
    }
    print_json(&fit.stages)
}

fn couplings(a: &CouplingsArgs) -> Result<(), CliError> {
    let modes = match (&a.modes, &a.potential, &a.positions_csv) {
        (Some(p), _, _) => files::read_modes(p)?,
        (None, Some(pot), Some(csv)) => {
            let pot: TrapPotential = files::read_json(pot)?;
            let init = read_positions_csv(files::open(csv)?, a.length_um)?;
            let eq = equilibrium(&pot, &init)?;
            transverse_modes(&pot, &eq)?
        }
        _ => return Err(CliError::validation("need --modes, or --potential with --positions-csv")),
    };
    let tones = files::read_tones(&a.tones, &modes)?;
    let amplitudes = files::read_amplitudes(&a.amplitudes)?;
    let model = coupling_matrix_per_tone(&modes, &tones, &amplitudes)?;
    files::write_json(&a.out, &model)?;
    if let Some(path) = &a.modes_out {
        files::write_json(path, &modes)?;
    }
    print_json(&serde_json::json!({
        "n": model.n(),
        "tones": tones.len(),
        "max_abs_coupling": model.upper().iter().fold(0.0f64, |m, j| m.max(j.abs())),
    }))
}

fn epsilon_cmd(a: &EpsilonArgs, seed: u64) -> Result<(), CliError> {
    let j1 = files::read_model(&a.a)?;
    let j2 = files::read_model(&a.b)?;
    let rep = epsilon(&j1, &j2, a.configs, a.repeats, &mut rng(seed, 2))?;
    if let Some(path) = &a.out {
        files::write_json(path, &rep)?;
    }
    print_json(&rep)
}

fn parse_sets(spec: &str) -> Result<Vec<Vec<usize>>, CliError> {
    spec.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|set| {
            set.split(',')
                .map(|i| {
                    i.trim()
                        .parse()
                        .map_err(|_| CliError::validation(format!("bad ion index {i:?} in --sets")))
                })
                .collect()
        })
        .collect()
}

/// `per_k` sorted random index sets for each order in `orders`.
pub fn random_sets(n: usize, orders: &[usize], per_k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>, CliError> {
    let mut sets = Vec::new();
    for &k in orders {
        if k == 0 || k > n {
            return Err(CliError::validation(format!("cannot draw {k} of {n} ions")));
        }
        for _ in 0..per_k {
            let mut s = sample(rng, n, k).into_vec();
            s.sort_unstable();
            sets.push(s);
        }
    }
    Ok(sets)
}

fn validate(a: &ValidateArgs, seed: Option<u64>) -> Result<(), CliError> {
    let model = files::read_model(&a.model)?;
    let dec = match &a.decoherence {
        Some(p) => files::read_decoherence(p)?,
        None => DecoherenceModel::none(model.n()),
    };
    let ds = files::read_dataset(&a.data)?;
    let sets = match &a.sets {
        Some(spec) => parse_sets(spec)?,
        None => {
            let seed = seed.ok_or_else(|| CliError::validation("random index sets need --seed (or pass --sets)"))?;
            random_sets(ds.n, &a.k, a.per_k, &mut rng(seed, 3))?
        }
    };
    let (_, report, leak) = observables_of(&ds, !a.no_filter, !a.no_leakage)?;
    let threshold = ValidationThreshold {
        max_z: a.max_z,
        min_fraction: a.min_fraction,
    };
    let results = validate_kbody(&model, &dec, &ds, &report, leak.as_ref(), &sets, threshold)?;
    if let Some(path) = &a.out {
        files::write_json(path, &results)?;
    }
    let summary: Vec<_> = results
        .iter()
        .map(|v| {
            serde_json::json!({
                "set": v.set,
                "max_z": v.max_z,
                "fraction_within": v.fraction_within,
                "passed": v.passed,
            })
        })
        .collect();
    print_json(&summary)
}
