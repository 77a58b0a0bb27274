use hamlearn::estimation::{estimate_observables, FilterReport, ObservableSet};
use hamlearn::fitting::{fit_full, FitOptions};
use hamlearn::sim::{generate_dataset, Dataset, ErrorChannels, QuenchSchedule};
use hamlearn::{DecoherenceModel, IsingModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(n: usize, seed: u64) -> IsingModel {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let up: Vec<f64> = (0..n * (n - 1) / 2).map(|_| r.random_range(-0.3..0.3)).collect();
    IsingModel::from_upper(n, &up, vec![0.0; n]).unwrap()
}

fn times() -> Vec<f64> {
    (0..10).map(|k| 0.5 * k as f64).collect()
}

#[test]
fn dataset_survives_jsonl() {
    let truth = model(5, 1);
    let schedule = QuenchSchedule::new(times(), 50, true).unwrap();
    let mut ch = ErrorChannels::none(5);
    ch.spam_flip = 0.02;
    let ds = generate_dataset(&truth, &ch, &schedule, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut buf = Vec::new();
    ds.write_jsonl(&mut buf).unwrap();
    let back = Dataset::read_jsonl(buf.as_slice()).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn observables_survive_json() {
    let truth = model(4, 3);
    let schedule = QuenchSchedule::new(times(), 40, true).unwrap();
    let ds = generate_dataset(&truth, &ErrorChannels::none(4), &schedule, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let obs = estimate_observables(&ds, &FilterReport::keep_all(&ds), None).unwrap();
    let back: ObservableSet = serde_json::from_str(&serde_json::to_string(&obs).unwrap()).unwrap();
    assert_eq!(back, obs);
}

/// Simulate, estimate and fit: the couplings come back to within shot noise.
#[test]
fn fit_recovers_couplings() {
    let n = 5;
    let truth = model(n, 5);
    let dec = DecoherenceModel::uniform(n, 0.02, 0.03).unwrap();
    let schedule = QuenchSchedule::new(times(), 20_000, true).unwrap();
    let mut ch = ErrorChannels::none(n);
    ch.decoherence = dec.clone();
    let ds = generate_dataset(&truth, &ch, &schedule, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let obs = estimate_observables(&ds, &FilterReport::keep_all(&ds), None).unwrap();
    let start_up: Vec<f64> = truth.upper().iter().map(|j| 0.8 * j).collect();
    let start = IsingModel::from_upper(n, &start_up, vec![0.0; n]).unwrap();
    let fit = fit_full(&obs, &dec, &start, &FitOptions::default()).unwrap();
    assert!(fit.converged);
    for (a, b) in fit.params.upper().iter().zip(truth.upper()) {
        assert!((a - b).abs() < 0.01, "{a} vs {b}");
    }
}
