//! Simulation and analysis toolkit for orientational decoherence of a planar
//! quantum rotor coupled to narrow-band field-gradient noise.
//!
//! The library models a rigid rotor with integer angular-momentum ladder
//! `|l>`, free Hamiltonian `H0 = omega_r * Lz^2 / hbar` and a quadrupole-type
//! coupling that exchanges angular momentum in units of 2. It provides:
//!
//! - [`rotor`]: states, density operators, and kinematics on a truncated
//!   angular-momentum window;
//! - [`noise`]: synthesis of band-limited Gaussian noise records, spectral
//!   estimation, and conversion between spectral density and the angular
//!   momentum diffusion coefficient;
//! - [`lindblad`]: deterministic master-equation propagation exploiting
//!   conservation of the coherence order `k = l - l'`;
//! - [`trajectory`]: stochastic Schroedinger propagation of individual noise
//!   realizations and ensemble reductions;
//! - [`ramsey`]: two-ion echo interferometry on rotational sidebands,
//!   including analytic contrast references;
//! - [`fit`]: damped least-squares fits for the standard analysis models.
//!
//! # Units
//!
//! Internally `hbar = 1`. Time is measured in milliseconds and angular
//! frequencies in rad/ms; `1 kHz = 2*pi rad/ms`. Angular momentum is counted
//! in integer steps of `hbar`, so the diffusion coefficient `D` carries units
//! of `hbar^2/ms` and appears in rate expressions as `D/hbar^2 = D` per ms.
//! Public interfaces that accept laboratory units (Hz, kHz) say so explicitly
//! in their names.

pub mod error;
pub mod fit;
pub mod lindblad;
pub mod math;
pub mod noise;
pub mod ramsey;
pub mod rotor;
pub mod trajectory;

pub use error::{Error, Result};

/// Fraction of probability (or coherence weight) that may leave the truncated
/// angular-momentum window before an evolution is considered invalid.
pub const LEAKAGE_BUDGET: f64 = 1e-6;
