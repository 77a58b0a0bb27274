//! Learning long-range Ising Hamiltonians of trapped-ion crystals from global-quench
//! single-shot data.
//!
//! Units: couplings and fields in rad/ms, times in ms, so a coupling `J` accumulates
//! phase `2·J·t`.

pub mod error;
pub mod estimation;
pub mod fitting;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod observables;
pub mod phonon;
pub mod sim;

pub use error::{Error, ErrorKind, Result};
pub use model::{DecoherenceModel, IsingModel, SpinConfiguration};
