//! States, density operators, and kinematics of a planar rotor on a truncated
//! angular-momentum window.
//!
//! The rotor lives on the integer ladder `|l>` with wavefunctions
//! `<phi|l> = exp(i l phi) / sqrt(2 pi)`. Free evolution multiplies `|l>` by
//! `exp(-i omega_r l^2 t)`. Because experiments prepare wavepackets centered
//! at a large mean `l_bar`, two frames are supported:
//!
//! - [`Frame::Lab`]: phases use the bare `l^2`;
//! - [`Frame::Corotating`]: the part of the phase linear in `m = l - l_bar`
//!   is absorbed into the resonance condition of any drive, leaving
//!   `exp(-i omega_r m^2 t)`. This removes the ~1e5 rad/ms phase rates that
//!   appear at `l_bar ~ 6000` and would otherwise dominate integrator error.
//!
//! Density operators are stored by coherence order: the `k`-th diagonal holds
//! the matrix elements `rho_{l, l-k}`. Both the free Hamiltonian and the
//! momentum-diffusion dissipator preserve `k`, so this layout is also the
//! natural one for the propagators built on top of it. Only `k >= 0` is
//! stored; `k < 0` follows from Hermiticity.

use std::collections::BTreeMap;

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::math::hermitian_is_psd;
use crate::LEAKAGE_BUDGET;

/// Phase convention for free evolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    /// Bare phases `exp(-i omega_r l^2 t)`.
    Lab,
    /// Phases `exp(-i omega_r (l - l_bar)^2 t)`; the linear part is absorbed
    /// into the sideband resonance of any coherent drive.
    Corotating,
}

/// Static parameters of the rotor and of the prepared wavepacket.
#[derive(Debug, Clone, PartialEq)]
pub struct RotorParams {
    /// Rotational constant `hbar / 2I` in rad/ms.
    pub omega_r: f64,
    /// Mean angular momentum of the prepared state (units of hbar).
    pub ell_bar: i64,
    /// RMS spread of the prepared state (units of hbar).
    pub sigma_ell: f64,
    /// Half-width of the angular-momentum window kept around `ell_bar`.
    pub halfwidth: usize,
    /// Quadrupole coupling strength: the interaction is
    /// `kappa * (eps(t) L+^2 + conj(eps(t)) L-^2)` in rad/ms per unit of the
    /// dimensionless noise amplitude `eps`.
    pub kappa: f64,
    /// Phase convention used by the propagators.
    pub frame: Frame,
}

impl RotorParams {
    /// Validate and construct. Requirements: `omega_r > 0`, `sigma_ell >= 1`
    /// (narrower packets are not resolvable on the integer ladder),
    /// `kappa >= 0`, and a window at least wide enough to hold the prepared
    /// packet out to six standard deviations.
    pub fn new(
        omega_r: f64,
        ell_bar: i64,
        sigma_ell: f64,
        halfwidth: usize,
        kappa: f64,
        frame: Frame,
    ) -> Result<Self> {
        if !(omega_r > 0.0) || !omega_r.is_finite() {
            return Err(Error::Domain(format!(
                "omega_r must be positive and finite, got {omega_r}"
            )));
        }
        if !(sigma_ell >= 1.0) || !sigma_ell.is_finite() {
            return Err(Error::Domain(format!(
                "sigma_ell must be >= 1 (one ladder step), got {sigma_ell}"
            )));
        }
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::Domain(format!("kappa must be >= 0, got {kappa}")));
        }
        let needed = (6.0 * sigma_ell).ceil() as usize;
        if halfwidth < needed {
            return Err(Error::Domain(format!(
                "window halfwidth {halfwidth} is below the 6-sigma support {needed}"
            )));
        }
        Ok(Self { omega_r, ell_bar, sigma_ell, halfwidth, kappa, frame })
    }

    /// Rotation rate of the prepared packet, `omega_rot = 2 omega_r ell_bar`
    /// (rad/ms).
    pub fn omega_rot(&self) -> f64 {
        2.0 * self.omega_r * self.ell_bar as f64
    }

    /// The angular-momentum window `ell_bar +/- halfwidth`.
    pub fn window(&self) -> LadderWindow {
        LadderWindow::centered(self.ell_bar, self.halfwidth)
    }

    /// Whether the packet sits deep on the ladder (`ell_bar >= 10 sigma_ell`),
    /// where the corotating treatment of the drive resonance is accurate.
    /// Callers that accept shallow packets should surface this as a warning.
    pub fn is_deep_rotor(&self) -> bool {
        (self.ell_bar.unsigned_abs() as f64) >= 10.0 * self.sigma_ell
    }
}

/// Contiguous range of angular-momentum quantum numbers, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LadderWindow {
    pub ell_min: i64,
    pub ell_max: i64,
}

impl LadderWindow {
    /// Window `center +/- halfwidth`.
    pub fn centered(center: i64, halfwidth: usize) -> Self {
        Self { ell_min: center - halfwidth as i64, ell_max: center + halfwidth as i64 }
    }

    /// Number of ladder sites in the window.
    pub fn len(&self) -> usize {
        (self.ell_max - self.ell_min + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.ell_max < self.ell_min
    }

    pub fn contains(&self, ell: i64) -> bool {
        (self.ell_min..=self.ell_max).contains(&ell)
    }

    /// Storage index of `ell`; the caller must ensure containment.
    pub fn index(&self, ell: i64) -> usize {
        debug_assert!(self.contains(ell));
        (ell - self.ell_min) as usize
    }

    /// Quantum number at storage index `i`.
    pub fn ell_at(&self, i: usize) -> i64 {
        self.ell_min + i as i64
    }

    pub fn iter(&self) -> impl Iterator<Item = i64> {
        self.ell_min..=self.ell_max
    }
}

/// Pure state on a ladder window, stored as normalized amplitudes.
#[derive(Debug, Clone)]
pub struct RotorState {
    window: LadderWindow,
    amps: Vec<C64>,
}

impl RotorState {
    /// Build from raw amplitudes, normalizing. Errors if the norm is zero.
    pub fn from_amplitudes(window: LadderWindow, mut amps: Vec<C64>) -> Result<Self> {
        if amps.len() != window.len() {
            return Err(Error::Domain(format!(
                "amplitude vector length {} does not match window length {}",
                amps.len(),
                window.len()
            )));
        }
        let n2: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
        if !(n2 > 0.0) || !n2.is_finite() {
            return Err(Error::Domain("state has zero or non-finite norm".into()));
        }
        let inv = 1.0 / n2.sqrt();
        for a in &mut amps {
            *a *= inv;
        }
        Ok(Self { window, amps })
    }

    /// Normalized delta state at a single ladder site.
    pub fn delta(window: LadderWindow, ell: i64) -> Result<Self> {
        if !window.contains(ell) {
            return Err(Error::Domain(format!("site {ell} outside window")));
        }
        let mut amps = vec![C64::new(0.0, 0.0); window.len()];
        amps[window.index(ell)] = C64::new(1.0, 0.0);
        Ok(Self { window, amps })
    }

    pub fn window(&self) -> LadderWindow {
        self.window
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    /// Assemble without copying; `amps` must already be normalized.
    pub(crate) fn from_normalized(window: LadderWindow, amps: Vec<C64>) -> Self {
        debug_assert_eq!(window.len(), amps.len());
        Self { window, amps }
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Mean and variance of `Lz` (units of hbar and hbar^2).
    pub fn moments(&self) -> (f64, f64) {
        let c = self.window.ell_min + self.window.len() as i64 / 2;
        let mut p_tot = 0.0;
        let mut m1 = 0.0;
        for (i, a) in self.amps.iter().enumerate() {
            let p = a.norm_sqr();
            p_tot += p;
            m1 += p * (self.window.ell_at(i) - c) as f64;
        }
        let mean_rel = m1 / p_tot;
        let mut m2 = 0.0;
        for (i, a) in self.amps.iter().enumerate() {
            let d = (self.window.ell_at(i) - c) as f64 - mean_rel;
            m2 += a.norm_sqr() * d * d;
        }
        (c as f64 + mean_rel, m2 / p_tot)
    }
}

/// Gaussian wavepacket `c_l ~ exp(-(l - ell_bar)^2 / (4 sigma^2))` with a flat
/// phase profile, on the window from `params`.
///
/// Fails with a truncation error if the window cannot hold the packet out to
/// six standard deviations (guaranteed by [`RotorParams::new`], re-checked
/// here for windows constructed by other means).
pub fn build_coherent_state(params: &RotorParams) -> Result<RotorState> {
    let window = params.window();
    let margin = (6.0 * params.sigma_ell).ceil() as i64;
    if params.ell_bar - margin < window.ell_min || params.ell_bar + margin > window.ell_max {
        return Err(Error::Truncation(format!(
            "window [{}, {}] does not contain ell_bar +/- 6 sigma",
            window.ell_min, window.ell_max
        )));
    }
    let s2 = params.sigma_ell * params.sigma_ell;
    let amps: Vec<C64> = window
        .iter()
        .map(|ell| {
            let d = (ell - params.ell_bar) as f64;
            C64::new((-d * d / (4.0 * s2)).exp(), 0.0)
        })
        .collect();
    RotorState::from_amplitudes(window, amps)
}

/// Apply `L+^power` (or `L-^|power|` for negative `power`) to a state.
///
/// On the planar-rotor ladder these operators are unit-norm shifts, so the
/// result is renormalized and the probability retained inside the window is
/// reported alongside it. If more than [`LEAKAGE_BUDGET`] of the probability
/// would be pushed past the window edge, the shift fails with a truncation
/// error instead of silently clipping the state.
pub fn apply_ladder(state: &RotorState, power: i64) -> Result<(RotorState, f64)> {
    let window = state.window();
    let n = window.len();
    let mut shifted = vec![C64::new(0.0, 0.0); n];
    let mut retained = 0.0;
    for (i, &a) in state.amplitudes().iter().enumerate() {
        let j = i as i64 + power;
        if j >= 0 && (j as usize) < n {
            shifted[j as usize] = a;
            retained += a.norm_sqr();
        }
    }
    if 1.0 - retained > LEAKAGE_BUDGET {
        return Err(Error::Truncation(format!(
            "ladder shift by {power} would push {:.3e} of the probability past the window edge",
            1.0 - retained
        )));
    }
    Ok((RotorState::from_amplitudes(window, shifted)?, retained))
}

/// Diagonal free-evolution phase factors over the window of `params`:
/// `exp(-i omega_r x^2 t)` with `x = l` in the lab frame and `x = l - ell_bar`
/// in the corotating frame.
pub fn free_evolution_phases(params: &RotorParams, t: f64) -> Vec<C64> {
    let window = params.window();
    window
        .iter()
        .map(|ell| {
            let x = match params.frame {
                Frame::Lab => ell as f64,
                Frame::Corotating => (ell - params.ell_bar) as f64,
            };
            C64::from_polar(1.0, -params.omega_r * x * x * t)
        })
        .collect()
}

/// Density operator on a ladder window, stored by coherence order.
///
/// `diag(k)[i]` holds `rho_{l, l-k}` with `l = ell_min + k + i`; only
/// `k >= 0` is stored and the negative orders follow from Hermiticity, so the
/// representation is Hermitian by construction. The `k = 0` diagonal is kept
/// real.
#[derive(Debug, Clone)]
pub struct RotorDensity {
    window: LadderWindow,
    diags: BTreeMap<i64, Vec<C64>>,
}

impl RotorDensity {
    /// Length of the `k`-th stored diagonal for a window of `n` sites.
    fn diag_len(n: usize, k: i64) -> usize {
        n - k as usize
    }

    /// Projector onto a pure state.
    pub fn from_pure(state: &RotorState) -> Self {
        let window = state.window();
        let n = window.len();
        let a = state.amplitudes();
        let mut diags = BTreeMap::new();
        for k in 0..n as i64 {
            let len = Self::diag_len(n, k);
            let mut v = Vec::with_capacity(len);
            for i in 0..len {
                let row = k as usize + i;
                let col = i;
                v.push(a[row] * a[col].conj());
            }
            if k == 0 {
                for x in &mut v {
                    *x = C64::new(x.re, 0.0);
                }
            }
            if v.iter().any(|x| x.norm_sqr() > 0.0) {
                diags.insert(k, v);
            }
        }
        Self { window, diags }
    }

    /// Classical mixture with the given populations (normalized internally).
    pub fn from_populations(window: LadderWindow, pops: &[f64]) -> Result<Self> {
        if pops.len() != window.len() {
            return Err(Error::Domain("population vector length mismatch".into()));
        }
        let tot: f64 = pops.iter().sum();
        if !(tot > 0.0) || pops.iter().any(|p| *p < 0.0) {
            return Err(Error::Domain("populations must be nonnegative with positive sum".into()));
        }
        let v: Vec<C64> = pops.iter().map(|p| C64::new(p / tot, 0.0)).collect();
        let mut diags = BTreeMap::new();
        diags.insert(0, v);
        Ok(Self { window, diags })
    }

    /// Build from explicit `k >= 0` diagonals (lengths must match the window).
    pub fn from_diagonals(window: LadderWindow, diags: BTreeMap<i64, Vec<C64>>) -> Result<Self> {
        let n = window.len();
        for (&k, v) in &diags {
            if k < 0 || k as usize >= n {
                return Err(Error::Domain(format!("coherence order {k} outside [0, {n})")));
            }
            if v.len() != Self::diag_len(n, k) {
                return Err(Error::Domain(format!("diagonal {k} has wrong length")));
            }
            if k == 0 && v.iter().any(|x| x.im != 0.0) {
                return Err(Error::Domain("k = 0 diagonal must be real".into()));
            }
        }
        Ok(Self { window, diags })
    }

    pub fn window(&self) -> LadderWindow {
        self.window
    }

    /// Stored coherence orders (all `>= 0`), ascending.
    pub fn orders(&self) -> impl Iterator<Item = i64> + '_ {
        self.diags.keys().copied()
    }

    /// The `k`-th stored diagonal, if present.
    pub fn diagonal(&self, k: i64) -> Option<&[C64]> {
        self.diags.get(&k).map(|v| v.as_slice())
    }

    pub(crate) fn diagonals_mut(&mut self) -> &mut BTreeMap<i64, Vec<C64>> {
        &mut self.diags
    }

    /// Matrix element `rho_{l, l'}` (zero outside stored orders).
    pub fn entry(&self, ell: i64, ell_p: i64) -> C64 {
        if !self.window.contains(ell) || !self.window.contains(ell_p) {
            return C64::new(0.0, 0.0);
        }
        let k = ell - ell_p;
        if k >= 0 {
            match self.diags.get(&k) {
                Some(v) => v[(ell_p - self.window.ell_min) as usize],
                None => C64::new(0.0, 0.0),
            }
        } else {
            self.entry(ell_p, ell).conj()
        }
    }

    pub fn trace(&self) -> f64 {
        self.diags.get(&0).map_or(0.0, |v| v.iter().map(|x| x.re).sum())
    }

    /// Populations (the `k = 0` diagonal), indexed like the window.
    pub fn populations(&self) -> Vec<f64> {
        match self.diags.get(&0) {
            Some(v) => v.iter().map(|x| x.re).collect(),
            None => vec![0.0; self.window.len()],
        }
    }

    /// Dense matrix (row-major), for validation on moderate windows.
    pub fn to_dense(&self) -> Vec<C64> {
        let n = self.window.len();
        let mut m = vec![C64::new(0.0, 0.0); n * n];
        for (&k, v) in &self.diags {
            for (i, &x) in v.iter().enumerate() {
                let row = k as usize + i;
                let col = i;
                m[row * n + col] = x;
                if k > 0 {
                    m[col * n + row] = x.conj();
                }
            }
        }
        m
    }

    /// Check positive semidefiniteness down to `-tol` via Cholesky of the
    /// dense matrix. Intended for validation runs; cost is O(n^3).
    pub fn is_positive_semidefinite(&self, tol: f64) -> bool {
        let n = self.window.len();
        hermitian_is_psd(&self.to_dense(), n, tol)
    }
}

/// Mean and variance of `Lz` for a density operator (units of hbar, hbar^2).
///
/// Moments are accumulated relative to the window center, so the cancellation
/// error stays small even at `l_bar ~ 6000` where `l^2 ~ 4e7`.
pub fn moments(rho: &RotorDensity) -> (f64, f64) {
    let window = rho.window();
    let pops = rho.populations();
    let c = window.ell_min + window.len() as i64 / 2;
    let tot: f64 = pops.iter().sum();
    let mut m1 = 0.0;
    for (i, p) in pops.iter().enumerate() {
        m1 += p * (window.ell_at(i) - c) as f64;
    }
    let mean_rel = m1 / tot;
    let mut m2 = 0.0;
    for (i, p) in pops.iter().enumerate() {
        let d = (window.ell_at(i) - c) as f64 - mean_rel;
        m2 += p * d * d;
    }
    (c as f64 + mean_rel, m2 / tot)
}

/// Angular coherence `<phi| rho |phi'>` with `<phi|l> = exp(i l phi)/sqrt(2 pi)`:
///
/// `A(phi, phi') = (1/2pi) sum_{l,l'} rho_{l,l'} exp(i l phi - i l' phi')`.
///
/// Evaluated per coherence order, which keeps the cost linear in the number
/// of stored diagonals.
pub fn angle_coherence(rho: &RotorDensity, phi: f64, phi_p: f64) -> C64 {
    let window = rho.window();
    let mut sum = C64::new(0.0, 0.0);
    for k in rho.orders().collect::<Vec<_>>() {
        let v = rho.diagonal(k).unwrap();
        for (i, &x) in v.iter().enumerate() {
            let row = window.ell_min + k + i as i64; // l
            let col = row - k; // l'
            let ph = row as f64 * phi - col as f64 * phi_p;
            sum += x * C64::from_polar(1.0, ph);
            if k > 0 {
                // mirrored element rho_{l', l} = conj(rho_{l, l'})
                let ph = col as f64 * phi - row as f64 * phi_p;
                sum += x.conj() * C64::from_polar(1.0, ph);
            }
        }
    }
    sum / (2.0 * std::f64::consts::PI)
}

/// Fractional correction to the rigid-rotor picture from centrifugal
/// stretching in a harmonic radial trap: `2 omega_rot^2 / omega_x^2`.
/// Both frequencies must be positive with `omega_rot < omega_x`.
pub fn centrifugal_correction(omega_rot: f64, omega_x: f64) -> Result<f64> {
    if !(omega_rot > 0.0) || !(omega_x > 0.0) {
        return Err(Error::Domain("frequencies must be positive".into()));
    }
    if omega_rot >= omega_x {
        return Err(Error::Domain(format!(
            "rotation rate {omega_rot} must lie below the radial trap frequency {omega_x}"
        )));
    }
    let r = omega_rot / omega_x;
    Ok(2.0 * r * r)
}
