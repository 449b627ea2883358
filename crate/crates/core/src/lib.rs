//! Pulse-level simulation and analysis of autonomous quantum error correction
//! of Gottesman-Kitaev-Preskill (GKP) states in a three-mode circuit-QED
//! system (storage cavity, auxiliary transmon, readout/reset resonator).
//!
//! The crate is organized around the stages of the experiment it models:
//!
//! - [`hilbert`]: truncated-Fock-space linear algebra (operators, states,
//!   tensor products, displacement and parity operators).
//! - [`system`]: Hamiltonian and Lindbladian parameter sets, perturbative
//!   dressed-parameter formulas, and reconstruction of the Jaynes-Cummings
//!   model from measured dispersive quantities.
//! - [`pulse`]: pulse envelopes, drive schedules, DRAG, virtual-Z frames.
//! - [`lindblad`]: master-equation time evolution, including the displaced
//!   rotating storage frame used for large coherent drives.
//! - [`ecd`]: compilation of echoed conditional displacement sequences.
//! - [`gkp`]: finite-energy GKP states and code-level observables.
//! - [`protocol`]: end-to-end experiment protocols (reset, initialization,
//!   sBs error-correction rounds, tomography, lifetime measurements).
//! - [`fit`]: all curve fits and estimators used in the analysis.
//! - [`optimize`]: derivative-free closed-loop optimization and gate-level
//!   circuit search for initialization parameters.
//!
//! All frequencies and rates are angular (rad/s) internally; times are in
//! seconds. Configuration files use ordinary frequencies (Hz, i.e. the /2π
//! convention) and are converted at the boundary.

pub mod ecd;
pub mod fit;
pub mod gkp;
pub mod hilbert;
pub mod lindblad;
pub mod optimize;
pub mod protocol;
pub mod pulse;
pub mod system;

pub use hilbert::{Mode, ModeDims, Operator, QuantumState};

/// Complex double, the scalar type used throughout.
pub type C64 = num_complex::Complex64;

/// 2π, for converting between ordinary and angular frequencies.
pub const TWO_PI: f64 = std::f64::consts::TAU;
