//! Loading and saving the library's file formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use hamlearn::estimation::ObservableSet;
use hamlearn::phonon::{ModeSet, ToneSpec};
use hamlearn::sim::Dataset;
use hamlearn::{DecoherenceModel, IsingModel};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::io(format!("cannot open {}: {e}", path.display())))
}

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", path.display())))
}

/// Unreadable files are I/O errors; readable files with the wrong content are
/// validation errors.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_reader(open(path)?).map_err(|e| {
        if e.is_io() {
            CliError::io(format!("{}: {e}", path.display()))
        } else {
            CliError::validation(format!("{}: {e}", path.display()))
        }
    })
}

fn from_value<T: DeserializeOwned>(path: &Path, v: serde_json::Value) -> Result<T, CliError> {
    serde_json::from_value(v).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    writeln!(out).and_then(|_| out.flush()).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

/// The file's JSON, or its `params` when it is a fit result.
fn unwrap_fit(path: &Path) -> Result<serde_json::Value, CliError> {
    let mut v: serde_json::Value = read_json(path)?;
    Ok(match v.get_mut("params") {
        Some(p) => p.take(),
        None => v,
    })
}

/// `key` of an object holding it, else the value itself.
fn field_or_self(mut v: serde_json::Value, key: &str) -> serde_json::Value {
    match v.get_mut(key) {
        Some(inner) => inner.take(),
        None => v,
    }
}

/// Couplings from a model file or from any fit result holding them (O(N²), O(N), O(1)).
pub fn read_model(path: &Path) -> Result<IsingModel, CliError> {
    from_value(path, field_or_self(unwrap_fit(path)?, "couplings"))
}

pub fn read_decoherence(path: &Path) -> Result<DecoherenceModel, CliError> {
    from_value(path, unwrap_fit(path)?)
}

/// Per-tone amplitudes: a bare `[[...], ...]` or an O(N) fit result.
pub fn read_amplitudes(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    from_value(path, field_or_self(unwrap_fit(path)?, "amplitudes"))
}

pub fn read_modes(path: &Path) -> Result<ModeSet, CliError> {
    let modes: ModeSet = read_json(path)?;
    modes.validate().map_err(CliError::from)?;
    Ok(modes)
}

/// A tone is either a full spec or `{detuning, eta_ref, omega_ref}` with mass-scaled
/// Lamb-Dicke factors.
#[derive(Deserialize)]
#[serde(untagged)]
enum ToneEntry {
    Full(ToneSpec),
    MassScaled { detuning: f64, eta_ref: f64, omega_ref: f64 },
}

pub fn read_tones(path: &Path, modes: &ModeSet) -> Result<Vec<ToneSpec>, CliError> {
    let entries: Vec<ToneEntry> = read_json(path)?;
    entries
        .into_iter()
        .map(|e| match e {
            ToneEntry::Full(t) => t.validate(modes).map(|_| t),
            ToneEntry::MassScaled {
                detuning,
                eta_ref,
                omega_ref,
            } => ToneSpec::mass_scaled(detuning, modes, eta_ref, omega_ref),
        })
        .collect::<hamlearn::Result<_>>()
        .map_err(CliError::from)
}

pub fn read_observables(path: &Path) -> Result<ObservableSet, CliError> {
    read_json(path)
}

pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::read_jsonl(open(path)?).map_err(|e| CliError::from(e).context(path))
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), CliError> {
    let mut out = create(path)?;
    ds.write_jsonl(&mut out).map_err(|e| CliError::from(e).context(path))?;
    out.flush().map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

/// Writes rows under a header; floats use the shortest round-trip form.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut out = create(path)?;
    let io = |e: std::io::Error| CliError::io(format!("{}: {e}", path.display()));
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for row in rows {
        writeln!(out, "{}", row.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}
