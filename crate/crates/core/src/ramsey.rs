//! Two-ion sideband interferometer on the rotor ladder.
//!
//! Both ions share the rotational mode; a sideband pulse that excites an ion
//! from its ground electronic level `S` to the metastable level `D` kicks the
//! shared angular momentum by a fixed order `delta_ell`. The module builds
//! the instantaneous pulse unitaries, runs the three-pulse echo sequence
//! (pi/2 at t = 0, pi at tau/2, pi/2 with a scanned laser phase at tau) in a
//! choice of environments, and extracts the fringe contrast that measures
//! rotational coherence.
//!
//! Three environments are supported:
//!
//! * **none** — exact free phases between pulses; the reference for the
//!   closed-form fringe.
//! * **master equation** — the dephasing/diffusion generator evolves the
//!   composite density between pulses. Every coherence order evolves in
//!   closed form (spectrally along the diagonal), so this route is exact up
//!   to window truncation and fast enough for wide diffusion scans.
//! * **trajectory** — the split-step integrator drives all four internal
//!   channels with a shared noise record per realization and the fringe is
//!   ensemble averaged with deterministic batch reduction.
//!
//! The measured quantity is the mean excitation probability
//! `P(D) = Prob(DD) + (Prob(DS) + Prob(SD)) / 2` as a function of the final
//! pulse phase.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::math::{bessel_j, sinc};
use crate::noise::{generate_with_stream, NoiseTrajectory};
use crate::rotor::{Frame, LadderWindow, RotorParams, RotorState};
use crate::trajectory::{is_silent, EnsembleSpec, SplitStep, NORM_DRIFT_FAIL};
use crate::LEAKAGE_BUDGET;

/// Health-check cadence for the stepped (trajectory) environment.
const CHECK_EVERY: usize = 64;
/// Number of deterministic reduction batches for ensemble averages.
const BATCHES: usize = 16;
/// Windows narrower than this are exempt from the edge monitor (they are
/// deliberately clamped few-level models).
const MONITOR_MIN_SITES: usize = 7;

/// Joint electronic basis of the two ions, ordered `SS, SD, DS, DD`.
///
/// The first letter is ion 1, the second ion 2; `S` is the ground level and
/// `D` the excited one. This ordering is the single convention used by every
/// pulse table, channel array, and probability readout in the module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InternalBasis {
    SS = 0,
    SD = 1,
    DS = 2,
    DD = 3,
}

impl InternalBasis {
    /// All four labels in storage order.
    pub const ALL: [InternalBasis; 4] =
        [InternalBasis::SS, InternalBasis::SD, InternalBasis::DS, InternalBasis::DD];

    /// Channel index in the fixed ordering.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Number of ions in the excited level.
    pub fn excited_count(self) -> i64 {
        EXCITED[self as usize]
    }
}

/// Excited-ion count per channel, in `InternalBasis` order.
const EXCITED: [i64; 4] = [0, 1, 1, 2];

/// Pure state of the pair: four internal channels over one ladder window.
#[derive(Debug, Clone)]
pub struct CompositeState {
    window: LadderWindow,
    channels: [Vec<C64>; 4],
}

impl CompositeState {
    /// Both ions in the ground level, sharing the given rotor state.
    pub fn from_rotor(psi: &RotorState) -> Self {
        let n = psi.window().len();
        let zero = vec![C64::new(0.0, 0.0); n];
        Self {
            window: psi.window(),
            channels: [psi.amplitudes().to_vec(), zero.clone(), zero.clone(), zero],
        }
    }

    /// Assemble from explicit channels; the joint norm must be within 1e-10
    /// of one.
    pub fn from_channels(window: LadderWindow, channels: [Vec<C64>; 4]) -> Result<Self> {
        for ch in &channels {
            if ch.len() != window.len() {
                return Err(Error::Domain(format!(
                    "channel length {} does not match the window ({} sites)",
                    ch.len(),
                    window.len()
                )));
            }
        }
        let state = Self { window, channels };
        let norm = state.norm();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::NormDrift(format!(
                "composite state norm {norm} is not 1 within 1e-10"
            )));
        }
        Ok(state)
    }

    /// The shared angular-momentum window.
    pub fn window(&self) -> LadderWindow {
        self.window
    }

    /// Amplitudes of one internal channel, indexed like the window.
    pub fn channel(&self, which: InternalBasis) -> &[C64] {
        &self.channels[which.index()]
    }

    /// Joint norm across all four channels.
    pub fn norm(&self) -> f64 {
        self.channels
            .iter()
            .map(|ch| ch.iter().map(|a| a.norm_sqr()).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Probability of each internal outcome, in `InternalBasis` order.
    pub fn probabilities(&self) -> [f64; 4] {
        let mut p = [0.0; 4];
        for (dst, ch) in p.iter_mut().zip(&self.channels) {
            *dst = ch.iter().map(|a| a.norm_sqr()).sum();
        }
        p
    }

    /// Mean excitation probability: `Prob(DD) + (Prob(DS) + Prob(SD)) / 2`.
    pub fn p_excited(&self) -> f64 {
        let p = self.probabilities();
        p[3] + 0.5 * (p[1] + p[2])
    }
}

/// Pulse flavor: a single sideband pulse of half or full area.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PulseKind {
    /// Splits population evenly between the ladder branches.
    HalfPi,
    /// Swaps the branches (the echo pulse).
    Pi,
}

/// One instantaneous, resonant sideband pulse.
#[derive(Debug, Clone, Copy)]
pub struct PulseSpec {
    /// Sideband order: the angular-momentum kick per excited ion.
    pub delta_ell: u32,
    /// Pulse area.
    pub kind: PulseKind,
    /// Laser phase; each raising quantum carries `exp(i laser_phase)`.
    pub laser_phase: f64,
}

impl PulseSpec {
    /// Validate and construct; the sideband order must be at least one.
    pub fn new(delta_ell: u32, kind: PulseKind, laser_phase: f64) -> Result<Self> {
        if delta_ell == 0 {
            return Err(Error::Domain("sideband order must be at least 1".into()));
        }
        if !laser_phase.is_finite() {
            return Err(Error::Domain("laser phase must be finite".into()));
        }
        Ok(Self { delta_ell, kind, laser_phase })
    }

    /// `(-1)^{delta_ell}`: the sign that decides whether the half pulse
    /// creates the even or the odd two-ion superposition.
    pub fn parity_sign(&self) -> f64 {
        if self.delta_ell % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// One matrix element family of a pulse: `coeff * |to, l + shift><from, l|`
/// for every ladder site `l`.
#[derive(Debug, Clone, Copy)]
struct PulseTerm {
    to: usize,
    from: usize,
    shift: i64,
    coeff: C64,
}

/// Term table of the half-area pulse.
///
/// Each ion couples to the shared sideband, ion 2 with the extra parity sign
/// `s = (-1)^{delta_ell}`; a raising quantum carries `e^{i phi}` and shifts
/// the ladder by `+delta_ell`. The sixteen families are: the identity half
/// on every channel, eight single-ion flips, the two double flips at
/// `+-2 delta_ell`, and the two zero-shift exchange terms.
fn half_pi_terms(delta_ell: i64, phi: f64) -> Vec<PulseTerm> {
    let s = if delta_ell % 2 == 0 { 1.0 } else { -1.0 };
    let e = C64::from_polar(1.0, phi);
    let ec = e.conj();
    let d = delta_ell;
    let t = |to: InternalBasis, from: InternalBasis, shift: i64, coeff: C64| PulseTerm {
        to: to.index(),
        from: from.index(),
        shift,
        coeff,
    };
    use InternalBasis::{DD, DS, SD, SS};
    let h = C64::new(0.5, 0.0);
    vec![
        // identity half
        t(SS, SS, 0, h),
        t(SD, SD, 0, h),
        t(DS, DS, 0, h),
        t(DD, DD, 0, h),
        // ion 1 raising / lowering
        t(DS, SS, d, -0.5 * e),
        t(DD, SD, d, -0.5 * e),
        t(SS, DS, -d, 0.5 * ec),
        t(SD, DD, -d, 0.5 * ec),
        // ion 2 raising / lowering (parity-signed)
        t(SD, SS, d, -0.5 * s * e),
        t(DD, DS, d, -0.5 * s * e),
        t(SS, SD, -d, 0.5 * s * ec),
        t(DS, DD, -d, 0.5 * s * ec),
        // both ions flip together
        t(DD, SS, 2 * d, 0.5 * s * e * e),
        t(SS, DD, -2 * d, 0.5 * s * ec * ec),
        // excitation exchange (no net kick, no net phase)
        t(DS, SD, 0, C64::new(-0.5 * s, 0.0)),
        t(SD, DS, 0, C64::new(-0.5 * s, 0.0)),
    ]
}

/// Term table of the full-area (echo) pulse: it swaps `SS <-> DD` with a
/// `2 delta_ell` kick and exchanges `SD <-> DS` in place.
fn pi_terms(delta_ell: i64, phi: f64) -> Vec<PulseTerm> {
    let s = if delta_ell % 2 == 0 { 1.0 } else { -1.0 };
    let e2 = C64::from_polar(1.0, 2.0 * phi);
    let d = delta_ell;
    use InternalBasis::{DD, DS, SD, SS};
    vec![
        PulseTerm { to: DD.index(), from: SS.index(), shift: 2 * d, coeff: s * e2 },
        PulseTerm { to: SS.index(), from: DD.index(), shift: -2 * d, coeff: s * e2.conj() },
        PulseTerm { to: DS.index(), from: SD.index(), shift: 0, coeff: C64::new(-s, 0.0) },
        PulseTerm { to: SD.index(), from: DS.index(), shift: 0, coeff: C64::new(-s, 0.0) },
    ]
}

fn terms_for(spec: &PulseSpec) -> Vec<PulseTerm> {
    match spec.kind {
        PulseKind::HalfPi => half_pi_terms(spec.delta_ell as i64, spec.laser_phase),
        PulseKind::Pi => pi_terms(spec.delta_ell as i64, spec.laser_phase),
    }
}

/// A pulse realized as a shift-and-add operator over the window.
///
/// On states supported at least `2 delta_ell` sites away from both window
/// edges the operator is exactly unitary; closer to an edge the kicked
/// amplitude is clipped, and [`PulseOperator::apply`] rejects the pulse once
/// the clipped probability exceeds the crate leakage budget.
#[derive(Debug, Clone)]
pub struct PulseOperator {
    delta_ell: i64,
    terms: Vec<PulseTerm>,
}

/// Build the unitary for one pulse.
pub fn pulse_operator(spec: &PulseSpec) -> PulseOperator {
    PulseOperator { delta_ell: spec.delta_ell as i64, terms: terms_for(spec) }
}

impl PulseOperator {
    /// Apply to a composite state. The clipped probability (weight kicked
    /// past a window edge) must stay within the leakage budget.
    pub fn apply(&self, state: &CompositeState) -> Result<CompositeState> {
        let (channels, clipped) =
            apply_terms(&state.channels, state.window.len(), self.delta_ell, &self.terms);
        if clipped > LEAKAGE_BUDGET {
            return Err(Error::Truncation(format!(
                "pulse clipped {clipped:.3e} of the probability at the window edge; \
                 enlarge the window by at least {} sites per side",
                2 * self.delta_ell
            )));
        }
        Ok(CompositeState { window: state.window, channels })
    }
}

/// Shift-and-add a pulse term table into fresh channels, accumulating on a
/// margin of `2 delta_ell` sites per side so that interfering contributions
/// outside the window are counted exactly. Returns the trimmed channels and
/// the clipped probability.
fn apply_terms(
    channels: &[Vec<C64>; 4],
    len: usize,
    delta_ell: i64,
    terms: &[PulseTerm],
) -> ([Vec<C64>; 4], f64) {
    let margin = (2 * delta_ell) as usize;
    let ext = len + 2 * margin;
    let mut out: [Vec<C64>; 4] = std::array::from_fn(|_| vec![C64::new(0.0, 0.0); ext]);
    for term in terms {
        let src = &channels[term.from];
        let dst = &mut out[term.to];
        let off = margin as i64 + term.shift;
        for (i, v) in src.iter().enumerate() {
            dst[(i as i64 + off) as usize] += term.coeff * v;
        }
    }
    let mut clipped = 0.0;
    let trimmed: [Vec<C64>; 4] = std::array::from_fn(|c| {
        let e = &out[c];
        clipped += e[..margin].iter().chain(&e[margin + len..]).map(|a| a.norm_sqr()).sum::<f64>();
        e[margin..margin + len].to_vec()
    });
    (trimmed, clipped)
}

/// What acts on the rotor between the pulses.
#[derive(Debug, Clone)]
pub enum Environment {
    /// Exact free evolution; the dispersion-free reference.
    None,
    /// The diffusion master equation with coefficient `diffusion`
    /// (hbar^2/ms), solved in closed form per coherence order.
    Lindblad { diffusion: f64 },
    /// Split-step noise trajectories, ensemble averaged; the spec carries
    /// the drive statistics, step, trajectory count, and master seed
    /// (its `t_max_ms` is not used — the sequence time is `tau_ms`).
    Trajectory(EnsembleSpec),
}

/// The full three-pulse echo sequence and its measurement scan.
#[derive(Debug, Clone)]
pub struct SequenceSpec {
    /// Total interrogation time (ms); the echo pulse sits exactly at
    /// `tau_ms / 2`.
    pub tau_ms: f64,
    /// Sideband order shared by all three pulses.
    pub delta_ell: u32,
    /// Phase added to every pulse; a pure bookkeeping offset that must not
    /// change the fringe contrast.
    pub laser_offset: f64,
    /// Environment acting between the pulses.
    pub environment: Environment,
    /// Final-pulse phases at which `P(D)` is recorded.
    pub phase_scan: Vec<f64>,
}

impl SequenceSpec {
    /// Validate and construct with zero laser offset.
    pub fn new(
        tau_ms: f64,
        delta_ell: u32,
        environment: Environment,
        phase_scan: Vec<f64>,
    ) -> Result<Self> {
        if !(tau_ms > 0.0) || !tau_ms.is_finite() {
            return Err(Error::Domain(format!(
                "interrogation time must be positive and finite, got {tau_ms} ms"
            )));
        }
        if delta_ell == 0 {
            return Err(Error::Domain("sideband order must be at least 1".into()));
        }
        if phase_scan.is_empty() || phase_scan.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("phase scan must be a non-empty list of finite phases".into()));
        }
        Ok(Self { tau_ms, delta_ell, laser_offset: 0.0, environment, phase_scan })
    }

    /// Uniform scan of `n` phases covering one full turn (endpoint excluded).
    pub fn default_phase_scan(n: usize) -> Vec<f64> {
        (0..n).map(|j| 2.0 * PI * j as f64 / n as f64).collect()
    }
}

/// `P(D)` versus final-pulse phase for one interrogation time.
#[derive(Debug, Clone)]
pub struct PhaseScan {
    /// Interrogation time the scan belongs to (ms).
    pub tau_ms: f64,
    /// Scanned final-pulse phases (rad).
    pub phases: Vec<f64>,
    /// Mean excitation probability at each phase.
    pub p_excited: Vec<f64>,
    /// Standard error per phase; zero for the deterministic environments.
    pub p_excited_se: Vec<f64>,
}

impl PhaseScan {
    /// Sinusoid fit of the scan; see [`contrast`].
    pub fn contrast(&self) -> Result<ContrastFit> {
        contrast(&self.phases, &self.p_excited)
    }

    /// CSV rows `phi_L_rad,P_D`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phi_L_rad,P_D\n");
        for (phi, p) in self.phases.iter().zip(&self.p_excited) {
            out.push_str(&format!("{phi:.9e},{p:.9e}\n"));
        }
        out
    }
}

/// Run the echo sequence and record `P(D)` over the phase scan.
///
/// `rotor` supplies the rotational constant (and, for the trajectory
/// environment, the frame and coupling); `psi0` is the prepared rotor state
/// whose window must admit two sideband kicks per side. The master-equation
/// route needs only the populations of `psi0`: every pulse term kicks the
/// ladder by `delta_ell` per excitation quantum, so the coherence order
/// minus `delta_ell` times the excitation imbalance is conserved, and the
/// measured traces descend exclusively from the initial populations.
pub fn run_sequence(
    seq: &SequenceSpec,
    rotor: &RotorParams,
    psi0: &RotorState,
) -> Result<PhaseScan> {
    let window = psi0.window();
    let dl = seq.delta_ell as i64;
    if (window.len() as i64) <= 4 * dl {
        return Err(Error::Domain(format!(
            "window of {} sites cannot admit two sideband kicks of order {dl}",
            window.len()
        )));
    }
    match &seq.environment {
        Environment::None => run_exact(seq, rotor, psi0),
        Environment::Lindblad { diffusion } => run_master_equation(seq, rotor, psi0, *diffusion),
        Environment::Trajectory(spec) => run_trajectory_env(seq, rotor, psi0, spec),
    }
}

/// Half-pulse / echo / half-pulse with exact free phases in between.
fn run_exact(seq: &SequenceSpec, rotor: &RotorParams, psi0: &RotorState) -> Result<PhaseScan> {
    let dl = seq.delta_ell;
    let half = 0.5 * seq.tau_ms;
    let free = |state: &mut CompositeState| {
        for ch in &mut state.channels {
            for (a, ell) in ch.iter_mut().zip(state.window.iter()) {
                let x = ell as f64;
                *a *= C64::from_polar(1.0, -rotor.omega_r * x * x * half);
            }
        }
    };
    let mut state = CompositeState::from_rotor(psi0);
    state = pulse_operator(&PulseSpec::new(dl, PulseKind::HalfPi, seq.laser_offset)?)
        .apply(&state)?;
    free(&mut state);
    state = pulse_operator(&PulseSpec::new(dl, PulseKind::Pi, seq.laser_offset)?).apply(&state)?;
    free(&mut state);
    let mut p_excited = Vec::with_capacity(seq.phase_scan.len());
    for &phi in &seq.phase_scan {
        let closed = pulse_operator(&PulseSpec::new(dl, PulseKind::HalfPi, phi + seq.laser_offset)?)
            .apply(&state)?;
        p_excited.push(closed.p_excited());
    }
    Ok(PhaseScan {
        tau_ms: seq.tau_ms,
        phases: seq.phase_scan.clone(),
        p_excited_se: vec![0.0; seq.phase_scan.len()],
        p_excited,
    })
}

// ---------------------------------------------------------------------------
// Master-equation route: block density with one live coherence order per
// internal block.
// ---------------------------------------------------------------------------

/// Composite density restricted to the sector reachable from a populations-
/// only start.
///
/// Block `(s, u)` stores the rotor operator `<s| rho |u>`. Because every
/// pulse term shifts the ladder by exactly `delta_ell` per excitation
/// quantum, a block's rotor part stays confined to the single coherence
/// order `k(s, u) = delta_ell * (excited(s) - excited(u))`; `diag[i]` holds
/// `rho_{l, l-k}` with `l = ell_min + max(k, 0) + i`.
struct BlockDensity {
    window: LadderWindow,
    delta_ell: i64,
    /// Sixteen diagonals indexed `s * 4 + u`.
    blocks: Vec<Vec<C64>>,
}

impl BlockDensity {
    fn order(&self, s: usize, u: usize) -> i64 {
        self.delta_ell * (EXCITED[s] - EXCITED[u])
    }

    /// Ground-pair density with the given ladder populations.
    fn from_populations(window: LadderWindow, delta_ell: i64, pops: &[f64]) -> Self {
        let mut bd = Self { window, delta_ell, blocks: Vec::with_capacity(16) };
        for s in 0..4 {
            for u in 0..4 {
                let k = delta_ell * (EXCITED[s] - EXCITED[u]);
                let len = window.len() - k.unsigned_abs() as usize;
                bd.blocks.push(vec![C64::new(0.0, 0.0); len]);
            }
        }
        for (dst, &p) in bd.blocks[0].iter_mut().zip(pops) {
            *dst = C64::new(p, 0.0);
        }
        bd
    }

    /// Apply `U rho U^dagger` for a pulse term table. Contributions kicked
    /// past the window edges accumulate on an exact margin first; the
    /// returned scalar is their squared Frobenius mass.
    fn apply_pulse(&self, terms: &[PulseTerm]) -> (Self, f64) {
        let l = self.window.len() as i64;
        let margin = 4 * self.delta_ell;
        let mut ext: Vec<Vec<C64>> = (0..16)
            .map(|b| {
                let k = self.delta_ell * (EXCITED[b / 4] - EXCITED[b % 4]);
                vec![C64::new(0.0, 0.0); (l - k.abs() + 2 * margin) as usize]
            })
            .collect();
        for ket in terms {
            for bra in terms {
                let coeff = ket.coeff * bra.coeff.conj();
                let k_in = self.order(ket.from, bra.from);
                let k_out = self.order(ket.to, bra.to);
                // The kick-per-quantum rule makes this an identity, not an
                // assumption; it is what confines each block to one order.
                debug_assert_eq!(k_out, k_in + ket.shift - bra.shift);
                let shift = k_in.max(0) + ket.shift - k_out.max(0) + margin;
                let src = &self.blocks[ket.from * 4 + bra.from];
                let dst = &mut ext[ket.to * 4 + bra.to];
                for (i, v) in src.iter().enumerate() {
                    dst[(i as i64 + shift) as usize] += coeff * v;
                }
            }
        }
        let mut clipped = 0.0;
        let blocks: Vec<Vec<C64>> = ext
            .iter()
            .enumerate()
            .map(|(b, e)| {
                let k = self.delta_ell * (EXCITED[b / 4] - EXCITED[b % 4]);
                let len = (l - k.abs()) as usize;
                let m = margin as usize;
                clipped +=
                    e[..m].iter().chain(&e[m + len..]).map(|x| x.norm_sqr()).sum::<f64>();
                e[m..m + len].to_vec()
            })
            .collect();
        (Self { window: self.window, delta_ell: self.delta_ell, blocks }, clipped)
    }

    /// Evolve every block through a free segment of length `t`; returns the
    /// probability-scale mass absorbed at the window edges.
    fn evolve_segment(
        &mut self,
        omega_r: f64,
        d4: f64,
        t: f64,
        planner: &mut FftPlanner<f64>,
    ) -> f64 {
        let mut leaked = 0.0;
        for s in 0..4 {
            for u in 0..4 {
                let k = self.order(s, u);
                let ell0 = self.window.ell_min + k.max(0);
                leaked +=
                    spectral_segment(&mut self.blocks[s * 4 + u], k, ell0, omega_r, d4, t, planner);
            }
        }
        leaked
    }

    fn trace(&self) -> f64 {
        (0..4).map(|s| self.blocks[s * 4 + s].iter().map(|x| x.re).sum::<f64>()).sum()
    }

    fn p_excited(&self) -> f64 {
        let pop = |s: usize| self.blocks[s * 4 + s].iter().map(|x| x.re).sum::<f64>();
        pop(3) + 0.5 * (pop(1) + pop(2))
    }
}

/// Closed-form propagation of one stored diagonal through a free segment.
///
/// Along a diagonal of order `k` the master equation reads
/// `d rho_i / dt = -i w_r k (2 l_i - k) rho_i
///  + d4 (rho_{i+2} + rho_{i-2} - 2 rho_i)`;
/// the even and odd sublattices decouple, and on a sublattice the phase is
/// linear in the index, so the generating function `f(theta) = sum_j rho_j
/// e^{-i j theta}` obeys a first-order transport equation solved exactly by
///
/// `f(theta, t) = f(theta + a t, 0) *
///    exp(-i b t - 2 d4 t + 2 d4 [sin(theta + a t) - sin(theta)] / a)`
///
/// with `a = 4 w_r k` and `b` the phase rate at the sublattice origin. The
/// translation is a pre-twist of the coefficients, the kernel is a cyclic
/// multiplier on an FFT ring padded by six standard deviations of the hop
/// spread; mass reaching the pad is absorbed and returned (probability
/// scale), emulating the absorbing window edges of the stepped integrator.
fn spectral_segment(
    diag: &mut [C64],
    k: i64,
    ell0: i64,
    omega_r: f64,
    d4: f64,
    t: f64,
    planner: &mut FftPlanner<f64>,
) -> f64 {
    if diag.is_empty() || t == 0.0 {
        return 0.0;
    }
    if d4 == 0.0 {
        for (i, v) in diag.iter_mut().enumerate() {
            let rate = omega_r * k as f64 * (2 * (ell0 + i as i64) - k) as f64;
            *v *= C64::from_polar(1.0, -rate * t);
        }
        return 0.0;
    }
    let alpha = 4.0 * omega_r * k as f64;
    let delta = alpha * t;
    let guard = (6.0 * (2.0 * d4 * t).sqrt()).ceil() as usize + 4;
    let mut leaked = 0.0;
    for p in 0..2.min(diag.len()) {
        let m = (diag.len() - p).div_ceil(2);
        let n = (m + 2 * guard).next_power_of_two();
        let beta = omega_r * k as f64 * (2 * (ell0 + p as i64) - k) as f64;
        let mut buf = vec![C64::new(0.0, 0.0); n];
        for j in 0..m {
            buf[j] = diag[p + 2 * j] * C64::from_polar(1.0, -(j as f64) * delta);
        }
        planner.plan_fft_forward(n).process(&mut buf);
        let phase = C64::from_polar(1.0, -beta * t);
        for (q, v) in buf.iter_mut().enumerate() {
            let theta = 2.0 * PI * q as f64 / n as f64;
            let hop_integral = if alpha == 0.0 {
                t * theta.cos()
            } else {
                ((theta + delta).sin() - theta.sin()) / alpha
            };
            *v *= phase * (2.0 * d4 * (hop_integral - t)).exp();
        }
        planner.plan_fft_inverse(n).process(&mut buf);
        let scale = 1.0 / n as f64;
        for j in 0..m {
            diag[p + 2 * j] = buf[j] * scale;
        }
        leaked += buf[m..].iter().map(|x| x.norm() * scale).sum::<f64>();
    }
    leaked
}

/// Echo sequence under the diffusion master equation.
fn run_master_equation(
    seq: &SequenceSpec,
    rotor: &RotorParams,
    psi0: &RotorState,
    diffusion: f64,
) -> Result<PhaseScan> {
    if !(diffusion >= 0.0) || !diffusion.is_finite() {
        return Err(Error::Domain(format!(
            "diffusion coefficient must be nonnegative, got {diffusion}"
        )));
    }
    let dl = seq.delta_ell as i64;
    let d4 = 0.25 * diffusion;
    let half = 0.5 * seq.tau_ms;
    let pops: Vec<f64> = psi0.amplitudes().iter().map(|a| a.norm_sqr()).collect();
    let mut planner = FftPlanner::new();
    let mut defect = 0.0;
    let check = |defect: f64| -> Result<()> {
        if defect > LEAKAGE_BUDGET {
            return Err(Error::Truncation(format!(
                "sequence lost {defect:.3e} of the state past the window; enlarge the window"
            )));
        }
        Ok(())
    };

    let bd = BlockDensity::from_populations(psi0.window(), dl, &pops);
    let (mut bd, clip) =
        bd.apply_pulse(&half_pi_terms(dl, seq.laser_offset));
    defect += clip;
    defect += bd.evolve_segment(rotor.omega_r, d4, half, &mut planner);
    let (mut bd, clip) = bd.apply_pulse(&pi_terms(dl, seq.laser_offset));
    defect += clip;
    defect += bd.evolve_segment(rotor.omega_r, d4, half, &mut planner);
    check(defect)?;
    let trace = bd.trace();
    if (trace - 1.0).abs() > 100.0 * defect + 1e-9 {
        return Err(Error::Stability(format!(
            "trace drifted to {trace} against a loss budget of {defect:.3e}"
        )));
    }

    let mut p_excited = Vec::with_capacity(seq.phase_scan.len());
    for &phi in &seq.phase_scan {
        let (closed, clip) = bd.apply_pulse(&half_pi_terms(dl, phi + seq.laser_offset));
        check(defect + clip)?;
        p_excited.push(closed.p_excited());
    }
    Ok(PhaseScan {
        tau_ms: seq.tau_ms,
        phases: seq.phase_scan.clone(),
        p_excited_se: vec![0.0; seq.phase_scan.len()],
        p_excited,
    })
}

// ---------------------------------------------------------------------------
// Trajectory route.
// ---------------------------------------------------------------------------

/// Phase the pulse table must gain per sideband quantum when the state is
/// carried in the corotating frame: the frame map multiplies site `l` by
/// `exp(i w_rot l t)`, so a kick of `a` quanta picks up `exp(i w_rot a t)`.
fn frame_phase_rate(rotor: &RotorParams) -> f64 {
    match rotor.frame {
        Frame::Lab => 0.0,
        Frame::Corotating => rotor.omega_rot(),
    }
}

/// Echo sequence under split-step noise trajectories, ensemble averaged.
fn run_trajectory_env(
    seq: &SequenceSpec,
    rotor: &RotorParams,
    psi0: &RotorState,
    spec: &EnsembleSpec,
) -> Result<PhaseScan> {
    if spec.rotor != *rotor {
        return Err(Error::Domain(
            "the ensemble spec carries different rotor parameters than the sequence".into(),
        ));
    }
    let window = psi0.window();
    spec.validate(&window)?;
    let dl = seq.delta_ell as i64;
    let half = 0.5 * seq.tau_ms;
    let n_half = ((half / spec.dt_ms - 1e-9).ceil() as usize).max(1);
    let dt = half / n_half as f64;
    let steps_total = 2 * n_half;
    let mut noise_spec = spec.noise.clone();
    noise_spec.seed = spec.master_seed;
    noise_spec.dt_ms = 0.5 * dt;
    let span = steps_total as f64 * dt;
    let phases = &seq.phase_scan;
    // per-quantum phase offsets that translate the lab-frame pulse table
    // into the integrator's frame at the three pulse times
    let comp = frame_phase_rate(rotor) * dl as f64;
    let echo_terms = pi_terms(dl, seq.laser_offset + comp * half);
    let final_terms: Vec<Vec<PulseTerm>> = phases
        .iter()
        .map(|&phi| half_pi_terms(dl, phi + seq.laser_offset + comp * seq.tau_ms))
        .collect();

    struct Batch {
        count: usize,
        sums: Vec<f64>,
    }
    let batches: Vec<Result<Batch>> = (0..BATCHES)
        .into_par_iter()
        .map(|b| {
            let mut acc = Batch { count: 0, sums: vec![0.0; phases.len()] };
            let mut i = b;
            while i < spec.n_traj {
                let noise = if is_silent(&noise_spec) {
                    NoiseTrajectory::from_samples(
                        noise_spec.dt_ms,
                        vec![C64::new(0.0, 0.0); 2 * steps_total + 1],
                    )?
                } else {
                    generate_with_stream(&noise_spec, span, i as u64 + 1)?
                };
                let p = one_echo_run(
                    seq, rotor, psi0, &noise, dt, n_half, &echo_terms, &final_terms,
                )?;
                for (dst, v) in acc.sums.iter_mut().zip(&p) {
                    *dst += v;
                }
                acc.count += 1;
                i += BATCHES;
            }
            Ok(acc)
        })
        .collect();
    let mut accs = Vec::with_capacity(BATCHES);
    for b in batches {
        accs.push(b?);
    }

    let n_traj = spec.n_traj as f64;
    let live: Vec<&Batch> = accs.iter().filter(|a| a.count > 0).collect();
    let mut p_excited = Vec::with_capacity(phases.len());
    let mut p_se = Vec::with_capacity(phases.len());
    for j in 0..phases.len() {
        let mean = accs.iter().map(|a| a.sums[j]).sum::<f64>() / n_traj;
        p_excited.push(mean);
        let se = if live.len() >= 2 {
            let bm: Vec<f64> = live.iter().map(|a| a.sums[j] / a.count as f64).collect();
            let avg = bm.iter().sum::<f64>() / bm.len() as f64;
            (bm.iter().map(|x| (x - avg) * (x - avg)).sum::<f64>()
                / (bm.len() * (bm.len() - 1)) as f64)
                .sqrt()
        } else {
            0.0
        };
        p_se.push(se);
    }
    Ok(PhaseScan {
        tau_ms: seq.tau_ms,
        phases: phases.clone(),
        p_excited,
        p_excited_se: p_se,
    })
}

/// One noise realization of the echo sequence: pulse, `n_half` split steps,
/// echo, `n_half` more steps, then every final pulse of the scan on clones.
/// Returns `P(D)` per scanned phase.
#[allow(clippy::too_many_arguments)]
fn one_echo_run(
    seq: &SequenceSpec,
    rotor: &RotorParams,
    psi0: &RotorState,
    noise: &NoiseTrajectory,
    dt: f64,
    n_half: usize,
    echo_terms: &[PulseTerm],
    final_terms: &[Vec<PulseTerm>],
) -> Result<Vec<f64>> {
    let window = psi0.window();
    let n = window.len();
    let dl = seq.delta_ell as i64;
    let dt_noise = noise.dt_ms();
    let samples = noise.samples();
    let steps_total = 2 * n_half;
    let last_mid = (steps_total as f64 - 0.5) * dt;
    if (last_mid / dt_noise).round() as usize >= samples.len() {
        return Err(Error::Domain(format!(
            "noise record covers {:.6} ms but the sequence needs samples up to {:.6} ms",
            (samples.len() - 1) as f64 * dt_noise,
            last_mid
        )));
    }

    let state = CompositeState::from_rotor(psi0);
    let (mut channels, mut clipped) =
        apply_terms(&state.channels, n, dl, &half_pi_terms(dl, seq.laser_offset));
    let budget = |clipped: f64| -> Result<()> {
        if clipped > LEAKAGE_BUDGET {
            return Err(Error::Truncation(format!(
                "pulses clipped {clipped:.3e} of the probability at the window edge"
            )));
        }
        Ok(())
    };
    budget(clipped)?;

    let monitor_edges = n >= MONITOR_MIN_SITES;
    let mut stepper = SplitStep::new(rotor, window, dt);
    let health = |channels: &[Vec<C64>; 4], clipped: f64, t: f64| -> Result<()> {
        let norm2: f64 =
            channels.iter().map(|ch| ch.iter().map(|a| a.norm_sqr()).sum::<f64>()).sum();
        let drift = (norm2.sqrt() - (1.0 - clipped).sqrt()).abs();
        if drift > NORM_DRIFT_FAIL {
            return Err(Error::NormDrift(format!(
                "norm drifted by {drift:.3e} at t = {t:.6} ms"
            )));
        }
        if monitor_edges {
            let edge: f64 = channels
                .iter()
                .map(|ch| ch[..2].iter().chain(&ch[n - 2..]).map(|a| a.norm_sqr()).sum::<f64>())
                .sum();
            if edge > LEAKAGE_BUDGET {
                return Err(Error::Truncation(format!(
                    "window breach: {edge:.3e} of the probability sits on the outermost \
                     sites at t = {t:.6} ms"
                )));
            }
        }
        Ok(())
    };

    let advance_segment = |channels: &mut [Vec<C64>; 4],
                           stepper: &mut SplitStep,
                           from_step: usize,
                           clipped: f64|
     -> Result<()> {
        for j in from_step..from_step + n_half {
            let t = j as f64 * dt;
            let idx = ((t + 0.5 * dt) / dt_noise).round() as usize;
            let eps = samples[idx];
            for ch in channels.iter_mut() {
                stepper.advance(ch, t, eps);
            }
            let done = j + 1;
            if done % CHECK_EVERY == 0 || done == from_step + n_half {
                health(channels, clipped, done as f64 * dt)?;
            }
        }
        Ok(())
    };

    advance_segment(&mut channels, &mut stepper, 0, clipped)?;
    let (mut channels2, clip2) = apply_terms(&channels, n, dl, echo_terms);
    clipped += clip2;
    budget(clipped)?;
    advance_segment(&mut channels2, &mut stepper, n_half, clipped)?;

    let mut out = Vec::with_capacity(final_terms.len());
    for terms in final_terms {
        let (closed, clip3) = apply_terms(&channels2, n, dl, terms);
        budget(clipped + clip3)?;
        let p: [f64; 4] =
            std::array::from_fn(|c| closed[c].iter().map(|a| a.norm_sqr()).sum());
        out.push(p[3] + 0.5 * (p[1] + p[2]));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Contrast extraction and closed-form references.
// ---------------------------------------------------------------------------

/// Result of fitting `P(D)(phi) = offset - (contrast / 2) cos(phi - fringe_phase)`.
#[derive(Debug, Clone, Copy)]
pub struct ContrastFit {
    /// Peak-to-peak fringe amplitude; 1 for a perfect interferometer.
    pub contrast: f64,
    /// Standard error of the contrast from the fit residuals.
    pub contrast_se: f64,
    /// Phase of the fringe minimum (rad).
    pub fringe_phase: f64,
    /// Mean level of the scan.
    pub offset: f64,
    /// Set when the scan is constant to numerical precision; the contrast
    /// is then exactly zero and the fringe phase meaningless.
    pub degenerate: bool,
}

/// Solve a 3x3 linear system by Gaussian elimination with partial pivoting.
fn solve3(mut m: [[f64; 3]; 3], mut r: [f64; 3]) -> Result<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())
            .unwrap();
        if m[pivot][col].abs() < 1e-12 {
            return Err(Error::Domain("phase-scan design matrix is singular".into()));
        }
        m.swap(col, pivot);
        r.swap(col, pivot);
        for row in (col + 1)..3 {
            let f = m[row][col] / m[col][col];
            for c in col..3 {
                m[row][c] -= f * m[col][c];
            }
            r[row] -= f * r[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = r[row];
        for c in (row + 1)..3 {
            acc -= m[row][c] * x[c];
        }
        x[row] = acc / m[row][row];
    }
    Ok(x)
}

/// Least-squares sinusoid through a phase scan.
///
/// Fits `p = m + A cos(phi) + B sin(phi)` and reports the fringe as
/// `contrast = 2 sqrt(A^2 + B^2)` with `fringe_phase = atan2(-B, -A)`, so
/// that `p = m - (contrast / 2) cos(phi - fringe_phase)` and the ideal scan
/// `1/2 - cos(phi)/2` yields contrast 1 at phase 0. Requires at least eight
/// points whose span covers the full turn (up to one grid spacing for
/// endpoint-exclusive grids). The standard error comes from the residual
/// variance through the normal-equation covariance; a constant scan is
/// reported as contrast 0 with the `degenerate` flag set.
pub fn contrast(phases: &[f64], p_values: &[f64]) -> Result<ContrastFit> {
    let n = phases.len();
    if n != p_values.len() {
        return Err(Error::Domain(format!(
            "phase and probability lists differ in length ({n} vs {})",
            p_values.len()
        )));
    }
    if n < 8 {
        return Err(Error::InsufficientLength(format!(
            "contrast extraction needs at least 8 phase points, got {n}"
        )));
    }
    let lo = phases.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = phases.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 2.0 * PI * (1.0 - 1.0 / n as f64) - 1e-9 {
        return Err(Error::Domain(format!(
            "phase scan spans only {:.3} rad; a full turn is required",
            hi - lo
        )));
    }

    let (mut sc, mut ss, mut scc, mut sss, mut scs) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut sy, mut syc, mut sys) = (0.0, 0.0, 0.0);
    for (&phi, &y) in phases.iter().zip(p_values) {
        let (s, c) = phi.sin_cos();
        sc += c;
        ss += s;
        scc += c * c;
        sss += s * s;
        scs += c * s;
        sy += y;
        syc += y * c;
        sys += y * s;
    }
    let m = [[n as f64, sc, ss], [sc, scc, scs], [ss, scs, sss]];
    let [offset, a, b] = solve3(m, [sy, syc, sys])?;

    let ssr: f64 = phases
        .iter()
        .zip(p_values)
        .map(|(&phi, &y)| {
            let r = y - offset - a * phi.cos() - b * phi.sin();
            r * r
        })
        .sum();
    let sigma2 = ssr / (n - 3) as f64;
    // covariance columns of the normal matrix
    let ca = solve3(m, [0.0, 1.0, 0.0])?;
    let cb = solve3(m, [0.0, 0.0, 1.0])?;
    let (var_a, var_b, cov_ab) = (sigma2 * ca[1], sigma2 * cb[2], sigma2 * ca[2]);

    let r2 = a * a + b * b;
    let contrast = 2.0 * r2.sqrt();
    if contrast < 1e-10 {
        return Ok(ContrastFit {
            contrast: 0.0,
            contrast_se: 2.0 * (var_a.max(0.0) + var_b.max(0.0)).sqrt(),
            fringe_phase: 0.0,
            offset,
            degenerate: true,
        });
    }
    let se =
        (4.0 * (a * a * var_a + b * b * var_b + 2.0 * a * b * cov_ab) / r2).max(0.0).sqrt();
    Ok(ContrastFit {
        contrast,
        contrast_se: se,
        fringe_phase: (-b).atan2(-a),
        offset,
        degenerate: false,
    })
}

/// CSV rows `tau_ms,contrast,contrast_se,fringe_phase` for a decay profile.
pub fn contrast_csv(rows: &[(f64, ContrastFit)]) -> String {
    let mut out = String::from("tau_ms,contrast,contrast_se,fringe_phase\n");
    for (tau, fit) in rows {
        out.push_str(&format!(
            "{tau:.9e},{:.9e},{:.9e},{:.9e}\n",
            fit.contrast, fit.contrast_se, fit.fringe_phase
        ));
    }
    out
}

/// Closed-form fringe-contrast reduction from angular-momentum diffusion:
/// `exp(-(D tau / 2) [1 - sinc(2 w_r dl tau)])`.
///
/// The echo cancels packet dispersion, so the decay involves only the
/// relative angle accumulated between branches `dl` apart; at early times it
/// follows `exp(-(gamma tau)^3)` with the rate from [`analytic_gamma`], and
/// at late times the plain exponential envelope `exp(-D tau / 2)`.
pub fn analytic_contrast(diffusion: f64, omega_r: f64, delta_ell: u32, tau_ms: f64) -> Result<f64> {
    check_rates(diffusion, omega_r, delta_ell)?;
    if !(tau_ms >= 0.0) || !tau_ms.is_finite() {
        return Err(Error::Domain(format!("tau must be nonnegative, got {tau_ms} ms")));
    }
    let x = 2.0 * omega_r * delta_ell as f64 * tau_ms;
    Ok((-0.5 * diffusion * tau_ms * (1.0 - sinc(x))).exp())
}

/// Coherence decay rate `(w_r^2 dl^2 D / 3)^{1/3}` (1/ms) of the early-time
/// `exp(-(gamma tau)^3)` contrast profile.
pub fn analytic_gamma(diffusion: f64, omega_r: f64, delta_ell: u32) -> Result<f64> {
    check_rates(diffusion, omega_r, delta_ell)?;
    Ok((omega_r * omega_r * (delta_ell * delta_ell) as f64 * diffusion / 3.0).cbrt())
}

fn check_rates(diffusion: f64, omega_r: f64, delta_ell: u32) -> Result<()> {
    if !(diffusion >= 0.0) || !diffusion.is_finite() {
        return Err(Error::Domain(format!("diffusion must be nonnegative, got {diffusion}")));
    }
    if !(omega_r > 0.0) || !omega_r.is_finite() {
        return Err(Error::Domain(format!("omega_r must be positive, got {omega_r}")));
    }
    if delta_ell == 0 {
        return Err(Error::Domain("sideband order must be at least 1".into()));
    }
    Ok(())
}

/// Predicted echo signal at zero final-pulse phase:
/// `P(D) = 1/2 - cos(w_r tau dl^2) C(tau) / 2`.
///
/// The cosine is the beat between the two coherences `dl` apart that the
/// sequence reads out; it forces contrast nodes at
/// `tau = pi / (2 dl^2 w_r)` regardless of the diffusion strength.
pub fn full_signal(diffusion: f64, omega_r: f64, delta_ell: u32, tau_ms: f64) -> Result<f64> {
    let c = analytic_contrast(diffusion, omega_r, delta_ell, tau_ms)?;
    let beat = (omega_r * tau_ms * (delta_ell * delta_ell) as f64).cos();
    Ok(0.5 - 0.5 * beat * c)
}

/// Sideband coupling of a beam crossing the rotor plane at polar angle
/// `theta`: `g = g0 (-i)^{delta_ell} J_{delta_ell}(k r sin(theta))`.
///
/// Used only to report relative sideband strengths — the sequence treats the
/// pulses as ideal. The axial propagation phase depends on the ion height
/// and is a global factor, so it is evaluated in the plane of the rotor.
pub fn bessel_coupling(g0: f64, k: f64, r: f64, theta: f64, delta_ell: u32) -> Result<C64> {
    if !(theta > 0.0 && theta <= 0.5 * PI) {
        return Err(Error::Domain(format!(
            "beam angle must lie in (0, pi/2], got {theta} rad"
        )));
    }
    if !(g0 >= 0.0) || !(k > 0.0) || !(r > 0.0) {
        return Err(Error::Domain(
            "coupling, wavenumber, and radius must be positive".into(),
        ));
    }
    let amp = g0 * bessel_j(delta_ell as i64, k * r * theta.sin());
    let quarter_turns = match delta_ell % 4 {
        0 => C64::new(1.0, 0.0),
        1 => C64::new(0.0, -1.0),
        2 => C64::new(-1.0, 0.0),
        _ => C64::new(0.0, 1.0),
    };
    Ok(amp * quarter_turns)
}

/// Window half-width that keeps an echo sequence within the leakage budget:
/// six standard deviations of the diffusion-broadened packet plus room for
/// two sideband kicks and a safety rim.
pub fn sequence_halfwidth(
    sigma_ell: f64,
    diffusion: f64,
    tau_ms: f64,
    delta_ell: u32,
) -> usize {
    let spread = (sigma_ell * sigma_ell + 2.0 * diffusion * tau_ms).sqrt();
    (6.0 * spread).ceil() as usize + 4 * delta_ell as usize + 8
}
