//! Stochastic wavefunction integration under the random quadrupolar drive.
//!
//! Each realization of the noise record drives a Schroedinger equation with
//! the Hamiltonian `H0 + kappa (eps_t L+^2 + conj(eps_t) L-^2)`; averaging
//! the projectors `|psi><psi|` over realizations converges to the density
//! operator evolved by the momentum-diffusion master equation. One step of
//! the integrator is a Strang split:
//!
//! 1. half-step of the exact diagonal free phases,
//! 2. the interaction kick, applied as the Cayley map
//!    `(1 - i V dt/2)(1 + i V dt/2)^{-1}` of the band-2 coupling,
//! 3. another free half-step.
//!
//! The Cayley map is exactly unitary for Hermitian `V`, so norm is conserved
//! to round-off and the quoted drift tolerances are genuine health checks
//! rather than renormalization knobs. Because `V` only couples sites two
//! apart, it splits into two independent tridiagonal systems on the even and
//! odd sublattices, each solved in O(n) by elimination (the systems are
//! diagonally dominant, so no pivoting is needed).
//!
//! Ensembles assign one independent substream of the master seed to each
//! trajectory and accumulate results into a fixed set of 16 batches by
//! trajectory index, merged in batch order afterwards. The reduction is
//! therefore bitwise reproducible under any thread count, and the batch
//! spread doubles as the standard-error estimate.

use std::collections::BTreeMap;

use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::noise::{generate_with_stream, AmplitudeTarget, NoiseSpec, NoiseTrajectory};
use crate::rotor::{build_coherent_state, Frame, LadderWindow, RotorDensity, RotorParams, RotorState};
use crate::LEAKAGE_BUDGET;

/// Norm drift that the unitarity contract promises to stay under.
pub const NORM_DRIFT_WARN: f64 = 1e-8;
/// Norm drift treated as an integration failure.
pub const NORM_DRIFT_FAIL: f64 = 1e-6;
/// Steps between health checks (norm and window-edge occupancy).
const CHECK_EVERY: usize = 64;
/// Number of reduction batches; fixed so that results are independent of the
/// number of worker threads.
const BATCHES: usize = 16;
/// Windows narrower than this are treated as deliberately clamped few-level
/// models (for example a two-level restriction of the ladder) and exempted
/// from the edge-occupancy monitor, which would otherwise flag the physics
/// itself as a breach.
const MONITOR_MIN_SITES: usize = 7;

/// Parameters of a trajectory ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    /// Number of noise realizations to average over.
    pub n_traj: usize,
    /// Statistics of the drive; its `seed` and `dt_ms` are overridden by
    /// `master_seed` and half the integrator step when the ensemble draws
    /// its own records.
    pub noise: NoiseSpec,
    /// Rotor constants, frame, and coupling.
    pub rotor: RotorParams,
    /// Integrator step (ms). Must resolve the drive band and, depending on
    /// the frame, either the `2 omega_rot` oscillation or the residual
    /// quadratic phases across the window; see [`EnsembleSpec::validate`].
    pub dt_ms: f64,
    /// Total integration time (ms).
    pub t_max_ms: f64,
    /// Seed from which every per-trajectory noise substream is derived.
    pub master_seed: u64,
    /// Number of recorded time points (including `t = 0`).
    pub snapshots: usize,
}

impl EnsembleSpec {
    /// Construct with the default nine snapshots. `n_traj >= 2` is required
    /// for any statistical use (standard errors need at least two batches);
    /// a single-trajectory ensemble is still constructible because it is a
    /// useful purity diagnostic, but [`EnsembleSpec::validate`] rejects it.
    pub fn new(
        n_traj: usize,
        noise: NoiseSpec,
        rotor: RotorParams,
        dt_ms: f64,
        t_max_ms: f64,
        master_seed: u64,
    ) -> Result<Self> {
        if n_traj == 0 {
            return Err(Error::Domain("ensemble needs at least one trajectory".into()));
        }
        if !(dt_ms > 0.0) || !dt_ms.is_finite() {
            return Err(Error::Domain(format!("dt must be positive and finite, got {dt_ms}")));
        }
        if !(t_max_ms >= dt_ms) {
            return Err(Error::Domain(format!(
                "t_max = {t_max_ms} ms must be at least one step dt = {dt_ms} ms"
            )));
        }
        Ok(Self { n_traj, noise, rotor, dt_ms, t_max_ms, master_seed, snapshots: 9 })
    }

    /// Step count and the refined step that divides `t_max` exactly.
    fn step_grid(&self) -> (f64, usize) {
        let steps = ((self.t_max_ms / self.dt_ms - 1e-9).ceil() as usize).max(1);
        (self.t_max_ms / steps as f64, steps)
    }

    /// Frame-dependent phase-resolution rule: twenty steps per period of the
    /// fastest coherent scale the splitting has to track. In the lab frame
    /// that is the `2 omega_rot` rotation of the packet; in the corotating
    /// frame it is the residual quadratic phase at the edge of the window.
    fn check_phase_resolution(&self, window: &LadderWindow) -> Result<()> {
        let rate = match self.rotor.frame {
            Frame::Lab => 2.0 * self.rotor.omega_rot().abs(),
            Frame::Corotating => {
                let reach = (window.ell_min - self.rotor.ell_bar)
                    .abs()
                    .max((window.ell_max - self.rotor.ell_bar).abs()) as f64;
                self.rotor.omega_r * reach * reach
            }
        };
        let bound = 2.0 * std::f64::consts::PI / (20.0 * rate);
        if rate > 0.0 && self.dt_ms > bound * (1.0 + 1e-9) {
            return Err(Error::Domain(format!(
                "dt = {} ms does not resolve the fastest frame phase ({rate} rad/ms); \
                 need dt <= {bound} ms",
                self.dt_ms
            )));
        }
        Ok(())
    }

    /// Noise-resolution rule: the kick samples the drive at step midpoints,
    /// so the step itself must stay below the band's sampling limit. A
    /// silent spec (zero target amplitude and no ambient floor) has no band
    /// to resolve and is exempt.
    fn check_noise_resolution(&self) -> Result<()> {
        if is_silent(&self.noise) {
            return Ok(());
        }
        let bound = NoiseSpec::max_dt_ms(self.noise.center_khz, self.noise.fwhm_khz);
        if self.dt_ms > bound * (1.0 + 1e-9) {
            return Err(Error::Domain(format!(
                "dt = {} ms undersamples the noise band; need dt <= {bound} ms",
                self.dt_ms
            )));
        }
        Ok(())
    }

    /// Full precondition check for statistical runs on the given window:
    /// at least two trajectories, and both step-resolution rules.
    pub fn validate(&self, window: &LadderWindow) -> Result<()> {
        if self.n_traj < 2 {
            return Err(Error::Domain(
                "ensemble statistics need n_traj >= 2 (standard errors are undefined \
                 for a single realization)"
                    .into(),
            ));
        }
        self.check_phase_resolution(window)?;
        self.check_noise_resolution()
    }
}

/// One Strang step of the split integrator on a fixed window.
///
/// Shared by the single-trajectory driver below and by the interferometer
/// module, which advances several internal-state channels under the same
/// rotor Hamiltonian and drive.
pub(crate) struct SplitStep {
    window: LadderWindow,
    /// Diagonal free-evolution factors for half a step.
    half: Vec<C64>,
    kappa: f64,
    /// Angular rate of the drive phase `exp(i drive_rate t)` restored by the
    /// corotating transformation; zero in the lab frame.
    drive_rate: f64,
    dt: f64,
    denom: Vec<f64>,
    fwd: Vec<C64>,
}

impl SplitStep {
    pub(crate) fn new(rotor: &RotorParams, window: LadderWindow, dt: f64) -> Self {
        let half: Vec<C64> = window
            .iter()
            .map(|ell| {
                let x = match rotor.frame {
                    Frame::Lab => ell as f64,
                    Frame::Corotating => (ell - rotor.ell_bar) as f64,
                };
                C64::from_polar(1.0, -rotor.omega_r * x * x * 0.5 * dt)
            })
            .collect();
        let drive_rate = match rotor.frame {
            Frame::Lab => 0.0,
            Frame::Corotating => 2.0 * rotor.omega_rot(),
        };
        let nsub = window.len().div_ceil(2);
        Self {
            window,
            half,
            kappa: rotor.kappa,
            drive_rate,
            dt,
            denom: vec![0.0; nsub],
            fwd: vec![C64::new(0.0, 0.0); nsub],
        }
    }

    /// Advance one channel from time `t` to `t + dt` using the drive sample
    /// at the step midpoint.
    pub(crate) fn advance(&mut self, amps: &mut [C64], t: f64, eps_mid: C64) {
        debug_assert_eq!(amps.len(), self.window.len());
        for (a, h) in amps.iter_mut().zip(&self.half) {
            *a *= *h;
        }
        let drive = if self.drive_rate == 0.0 {
            eps_mid
        } else {
            eps_mid * C64::from_polar(1.0, self.drive_rate * (t + 0.5 * self.dt))
        };
        // subdiagonal of (1 + i dt/2 V) on a sublattice: i kappa dt/2 * drive
        let g = C64::new(0.0, 0.5 * self.kappa * self.dt) * drive;
        if g.norm_sqr() > 0.0 {
            self.kick(amps, g);
        }
        for (a, h) in amps.iter_mut().zip(&self.half) {
            *a *= *h;
        }
    }

    /// Cayley map of the band-2 coupling: solve `(1 + i dt/2 V) y = c` on
    /// each stride-2 sublattice by tridiagonal elimination, then map
    /// `c -> 2y - c`. The elimination denominators `1 + |g|^2 / d` are real
    /// and at least one, so the solve is unconditionally stable.
    fn kick(&mut self, amps: &mut [C64], g: C64) {
        let n = amps.len();
        let b = -g.conj(); // superdiagonal element
        let gb = -g.norm_sqr(); // product of off-diagonal elements, real
        for p in 0..2usize.min(n) {
            let m = (n - p).div_ceil(2);
            self.denom[0] = 1.0;
            self.fwd[0] = amps[p];
            for j in 1..m {
                let w = g / self.denom[j - 1];
                self.denom[j] = 1.0 - gb / self.denom[j - 1];
                self.fwd[j] = amps[p + 2 * j] - w * self.fwd[j - 1];
            }
            let mut next = self.fwd[m - 1] / self.denom[m - 1];
            let last = p + 2 * (m - 1);
            amps[last] = 2.0 * next - amps[last];
            for j in (0..m - 1).rev() {
                let x = (self.fwd[j] - b * next) / self.denom[j];
                let site = p + 2 * j;
                amps[site] = 2.0 * x - amps[site];
                next = x;
            }
        }
    }
}

/// Whether a spec produces the identically-zero record.
pub(crate) fn is_silent(noise: &NoiseSpec) -> bool {
    noise.ambient_psd == 0.0
        && match noise.target {
            AmplitudeTarget::PeakPsd(p) => p == 0.0,
            AmplitudeTarget::Diffusion { d, .. } => d == 0.0,
        }
}

/// Snapshot indices: `want` points spread evenly over `0..=steps`.
fn snapshot_indices(steps: usize, want: usize) -> Vec<usize> {
    let want = want.max(2);
    let mut out: Vec<usize> = (0..want)
        .map(|j| ((j * steps) as f64 / (want - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Core driver: advance `psi0` for `steps` of size `dt`, calling
/// `on_snapshot(snapshot_index, t, amplitudes)` at the requested indices
/// (which must be ascending and include only values in `0..=steps`).
///
/// Returns the largest observed norm drift. Health checks run every
/// [`CHECK_EVERY`] steps and at every snapshot: norm drift beyond
/// [`NORM_DRIFT_FAIL`] and, for windows of at least [`MONITOR_MIN_SITES`]
/// sites, more than [`LEAKAGE_BUDGET`] of the probability on the outermost
/// two sites per edge are both fatal.
fn integrate_with<F>(
    psi0: &RotorState,
    noise: &NoiseTrajectory,
    rotor: &RotorParams,
    dt: f64,
    steps: usize,
    snaps: &[usize],
    mut on_snapshot: F,
) -> Result<f64>
where
    F: FnMut(usize, f64, &[C64]),
{
    let window = psi0.window();
    let n = window.len();
    if n < 3 {
        return Err(Error::Domain(format!(
            "window of {n} sites cannot carry the band-2 coupling; need at least 3"
        )));
    }
    let dt_noise = noise.dt_ms();
    let samples = noise.samples();
    let last_mid = (steps as f64 - 0.5) * dt;
    if (last_mid / dt_noise).round() as usize >= samples.len() {
        return Err(Error::Domain(format!(
            "noise record covers {:.6} ms but the run needs samples up to {:.6} ms",
            (samples.len() - 1) as f64 * dt_noise,
            last_mid
        )));
    }
    let monitor_edges = n >= MONITOR_MIN_SITES;
    let mut amps = psi0.amplitudes().to_vec();
    let mut stepper = SplitStep::new(rotor, window, dt);
    let mut max_drift = 0.0f64;
    let mut pending = snaps.iter().copied().peekable();
    let mut snap_no = 0usize;
    if pending.peek() == Some(&0) {
        on_snapshot(snap_no, 0.0, &amps);
        pending.next();
        snap_no += 1;
    }
    for j in 0..steps {
        let t = j as f64 * dt;
        let idx = ((t + 0.5 * dt) / dt_noise).round() as usize;
        stepper.advance(&mut amps, t, samples[idx]);
        let done = j + 1;
        let at_snapshot = pending.peek() == Some(&done);
        if done % CHECK_EVERY == 0 || done == steps || at_snapshot {
            let norm2: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
            let drift = (norm2.sqrt() - 1.0).abs();
            max_drift = max_drift.max(drift);
            if drift > NORM_DRIFT_FAIL {
                return Err(Error::NormDrift(format!(
                    "norm drifted by {drift:.3e} at t = {:.6} ms",
                    done as f64 * dt
                )));
            }
            if monitor_edges {
                let edge: f64 =
                    amps[..2].iter().chain(&amps[n - 2..]).map(|a| a.norm_sqr()).sum();
                if edge > LEAKAGE_BUDGET {
                    return Err(Error::Truncation(format!(
                        "window breach: {edge:.3e} of the probability sits on the outermost \
                         sites at t = {:.6} ms",
                        done as f64 * dt
                    )));
                }
            }
        }
        if at_snapshot {
            on_snapshot(snap_no, done as f64 * dt, &amps);
            pending.next();
            snap_no += 1;
        }
    }
    Ok(max_drift)
}

/// Pure-state history of a single noise realization.
#[derive(Debug, Clone)]
pub struct StateSeries {
    /// Snapshot times (ms), starting at zero.
    pub times: Vec<f64>,
    /// State at each snapshot time.
    pub states: Vec<RotorState>,
    max_norm_drift: f64,
}

impl StateSeries {
    pub fn final_state(&self) -> &RotorState {
        self.states.last().expect("series holds at least the initial state")
    }

    /// Largest `|norm - 1|` seen at any health check.
    pub fn max_norm_drift(&self) -> f64 {
        self.max_norm_drift
    }
}

/// Integrate a single realization of the drive.
///
/// The noise record must cover `t_max`; its own sample spacing is used to
/// look up the midpoint drive values, so records are typically generated at
/// half the integrator step. The step must satisfy the frame resolution rule
/// of the spec; statistical preconditions (`n_traj`) do not apply here.
pub fn run_trajectory(
    psi0: &RotorState,
    noise: &NoiseTrajectory,
    spec: &EnsembleSpec,
) -> Result<StateSeries> {
    spec.check_phase_resolution(&psi0.window())?;
    let (dt, steps) = spec.step_grid();
    let snaps = snapshot_indices(steps, spec.snapshots);
    let mut times = Vec::with_capacity(snaps.len());
    let mut states = Vec::with_capacity(snaps.len());
    let drift = integrate_with(psi0, noise, &spec.rotor, dt, steps, &snaps, |_, t, amps| {
        times.push(t);
        states.push(RotorState::from_normalized(psi0.window(), amps.to_vec()));
    })?;
    Ok(StateSeries { times, states, max_norm_drift: drift })
}

/// Per-batch accumulator: projector sums for every snapshot (flattened over
/// the stored coherence orders) plus first and second moment sums.
struct BatchAcc {
    count: usize,
    sums: Vec<Vec<C64>>,
    m1: Vec<f64>,
    m2: Vec<f64>,
}

impl BatchAcc {
    fn new(snapshots: usize, n: usize) -> Self {
        let tri = n * (n + 1) / 2;
        Self {
            count: 0,
            sums: vec![vec![C64::new(0.0, 0.0); tri]; snapshots],
            m1: vec![0.0; snapshots],
            m2: vec![0.0; snapshots],
        }
    }

    /// Add the projector of `amps` and its moments to snapshot `s`. Moments
    /// are accumulated relative to the window center to keep the large-mean
    /// cancellation out of the sums.
    fn add(&mut self, s: usize, amps: &[C64], window: &LadderWindow) {
        let n = amps.len();
        let tri = &mut self.sums[s];
        let mut off = 0usize;
        for k in 0..n {
            let len = n - k;
            let (head, shifted) = (&amps[..len], &amps[k..]);
            for i in 0..len {
                tri[off + i] += shifted[i] * head[i].conj();
            }
            off += len;
        }
        let c = window.ell_min + (window.len() as i64 - 1) / 2;
        let mut p_tot = 0.0;
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for (i, a) in amps.iter().enumerate() {
            let p = a.norm_sqr();
            let x = (window.ell_at(i) - c) as f64;
            p_tot += p;
            s1 += p * x;
            s2 += p * x * x;
        }
        self.m1[s] += s1 / p_tot;
        self.m2[s] += s2 / p_tot;
    }
}

/// Ensemble-averaged density history with batch-based standard errors.
#[derive(Debug, Clone)]
pub struct EnsembleSeries {
    /// Snapshot times (ms).
    pub times: Vec<f64>,
    densities: Vec<RotorDensity>,
    entry_se: Vec<BTreeMap<i64, Vec<f64>>>,
    /// Ensemble mean of `Lz` per snapshot (units of hbar).
    pub mean_lz: Vec<f64>,
    /// Ensemble variance of `Lz` per snapshot (units of hbar^2), i.e. the
    /// variance of the averaged density, not the average of per-trajectory
    /// variances.
    pub var_lz: Vec<f64>,
    /// Batch-spread standard error of `mean_lz`.
    pub mean_lz_se: Vec<f64>,
    /// Batch-spread standard error of `var_lz`.
    pub var_lz_se: Vec<f64>,
    /// Number of trajectories averaged.
    pub n_traj: usize,
    /// `var_lz` restricted to each nonempty batch, indexed `[batch][time]`;
    /// the raw material for uncertainty estimates of derived fits.
    batch_var_lz: Vec<Vec<f64>>,
}

impl EnsembleSeries {
    pub fn densities(&self) -> &[RotorDensity] {
        &self.densities
    }

    pub fn final_density(&self) -> &RotorDensity {
        self.densities.last().expect("series holds at least the initial snapshot")
    }

    /// Standard error of each stored matrix element (complex modulus) at
    /// snapshot `j`, keyed and indexed like the density diagonals. Zero when
    /// fewer than two batches carry trajectories.
    pub fn entry_se(&self, j: usize) -> &BTreeMap<i64, Vec<f64>> {
        &self.entry_se[j]
    }

    /// Variance-growth rate fitted over the whole history: `(D, D_se)` with
    /// `D` half the pooled least-squares slope. The standard error comes
    /// from the spread of per-batch slopes, which, unlike the residuals of
    /// the pooled fit, are statistically independent.
    pub fn diffusion_fit(&self) -> Result<(f64, f64)> {
        let (slope, _) = linear_slope(&self.times, &self.var_lz)?;
        let b = self.batch_var_lz.len();
        let se = if b >= 2 {
            let mut slopes = Vec::with_capacity(b);
            for series in &self.batch_var_lz {
                slopes.push(linear_slope(&self.times, series)?.0);
            }
            let avg = slopes.iter().sum::<f64>() / b as f64;
            (slopes.iter().map(|s| (s - avg) * (s - avg)).sum::<f64>()
                / (b * (b - 1)) as f64)
                .sqrt()
        } else {
            0.0
        };
        Ok((0.5 * slope, 0.5 * se))
    }

    /// CSV dump: `t_ms,var_Lz,var_Lz_se,mean_Lz`.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.times.len() * 56 + 40);
        out.push_str("t_ms,var_Lz,var_Lz_se,mean_Lz\n");
        for (i, t) in self.times.iter().enumerate() {
            out.push_str(&format!(
                "{:.9e},{:.9e},{:.9e},{:.9e}\n",
                t, self.var_lz[i], self.var_lz_se[i], self.mean_lz[i]
            ));
        }
        out
    }
}

/// Average the projector over `spec.n_traj` independent noise realizations.
///
/// Realization `i` draws the substream `i + 1` of `master_seed`; results are
/// reduced into [`BATCHES`] accumulators by `i mod BATCHES` and merged in
/// batch order, so the outcome is bitwise independent of thread scheduling.
/// A single-trajectory ensemble is allowed (it is the pure projector of that
/// realization) and reports zero standard errors.
pub fn ensemble_density(spec: &EnsembleSpec, psi0: &RotorState) -> Result<EnsembleSeries> {
    let window = psi0.window();
    spec.check_phase_resolution(&window)?;
    spec.check_noise_resolution()?;
    let (dt, steps) = spec.step_grid();
    let snaps = snapshot_indices(steps, spec.snapshots);
    let n = window.len();
    let mut noise_spec = spec.noise.clone();
    noise_spec.seed = spec.master_seed;
    noise_spec.dt_ms = 0.5 * dt;
    let span = steps as f64 * dt;

    let batches: Vec<Result<BatchAcc>> = (0..BATCHES)
        .into_par_iter()
        .map(|b| {
            let mut acc = BatchAcc::new(snaps.len(), n);
            let mut i = b;
            while i < spec.n_traj {
                let noise = if is_silent(&noise_spec) {
                    // bypass the band machinery: the record is exactly zero
                    NoiseTrajectory::from_samples(
                        noise_spec.dt_ms,
                        vec![C64::new(0.0, 0.0); 2 * steps + 1],
                    )?
                } else {
                    generate_with_stream(&noise_spec, span, i as u64 + 1)?
                };
                integrate_with(psi0, &noise, &spec.rotor, dt, steps, &snaps, |s, _, amps| {
                    acc.add(s, amps, &window)
                })?;
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
    let c = window.ell_min + (window.len() as i64 - 1) / 2;
    let live: Vec<&BatchAcc> = accs.iter().filter(|a| a.count > 0).collect();
    let n_live = live.len();

    let mut times = Vec::with_capacity(snaps.len());
    let mut densities = Vec::with_capacity(snaps.len());
    let mut entry_se = Vec::with_capacity(snaps.len());
    let mut mean_lz = Vec::with_capacity(snaps.len());
    let mut var_lz = Vec::with_capacity(snaps.len());
    let mut mean_se = Vec::with_capacity(snaps.len());
    let mut var_se = Vec::with_capacity(snaps.len());
    let mut batch_var: Vec<Vec<f64>> = vec![Vec::with_capacity(snaps.len()); n_live];

    for (s, &step) in snaps.iter().enumerate() {
        times.push(step as f64 * dt);

        // pooled sums, merged in fixed batch order
        let tri_len = n * (n + 1) / 2;
        let mut tri = vec![C64::new(0.0, 0.0); tri_len];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for a in &accs {
            for (dst, src) in tri.iter_mut().zip(&a.sums[s]) {
                *dst += *src;
            }
            m1 += a.m1[s];
            m2 += a.m2[s];
        }

        let mean_rel = m1 / n_traj;
        mean_lz.push(c as f64 + mean_rel);
        var_lz.push(m2 / n_traj - mean_rel * mean_rel);

        // batch-mean spread as the standard error (batches are treated as
        // equally weighted; their sizes differ by at most one trajectory)
        let bm: Vec<f64> = live.iter().map(|a| a.m1[s] / a.count as f64).collect();
        let bv: Vec<f64> = live
            .iter()
            .map(|a| {
                let m = a.m1[s] / a.count as f64;
                a.m2[s] / a.count as f64 - m * m
            })
            .collect();
        for (series, v) in batch_var.iter_mut().zip(&bv) {
            series.push(*v);
        }
        let (mut se_mean, mut se_var) = (0.0, 0.0);
        if n_live >= 2 {
            let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let spread = |v: &[f64]| {
                let a = avg(v);
                (v.iter().map(|x| (x - a) * (x - a)).sum::<f64>()
                    / (v.len() * (v.len() - 1)) as f64)
                    .sqrt()
            };
            se_mean = spread(&bm);
            se_var = spread(&bv);
        }
        mean_se.push(se_mean);
        var_se.push(se_var);

        let mut diags = BTreeMap::new();
        let mut ses = BTreeMap::new();
        let mut off = 0usize;
        for k in 0..n as i64 {
            let len = n - k as usize;
            let mean: Vec<C64> = tri[off..off + len].iter().map(|x| *x / n_traj).collect();
            if n_live >= 2 {
                let mut se = vec![0.0; len];
                for a in &live {
                    let inv = 1.0 / a.count as f64;
                    for (i, x) in a.sums[s][off..off + len].iter().enumerate() {
                        se[i] += (x * inv - mean[i]).norm_sqr();
                    }
                }
                let scale = 1.0 / (n_live * (n_live - 1)) as f64;
                for v in &mut se {
                    *v = (*v * scale).sqrt();
                }
                ses.insert(k, se);
            } else {
                ses.insert(k, vec![0.0; len]);
            }
            diags.insert(k, mean);
            off += len;
        }
        densities.push(RotorDensity::from_diagonals(window, diags)?);
        entry_se.push(ses);
    }

    Ok(EnsembleSeries {
        times,
        densities,
        entry_se,
        mean_lz,
        var_lz,
        mean_lz_se: mean_se,
        var_lz_se: var_se,
        n_traj: spec.n_traj,
        batch_var_lz: batch_var,
    })
}

/// Frobenius distance between two densities on the same window, counting the
/// unstored negative orders through Hermitian symmetry.
pub fn frobenius_distance(a: &RotorDensity, b: &RotorDensity) -> Result<f64> {
    if a.window() != b.window() {
        return Err(Error::Domain("densities live on different windows".into()));
    }
    let orders: std::collections::BTreeSet<i64> = a.orders().chain(b.orders()).collect();
    let mut sum = 0.0;
    for k in orders {
        let weight = if k == 0 { 1.0 } else { 2.0 };
        let za = a.diagonal(k);
        let zb = b.diagonal(k);
        let len = za.or(zb).map_or(0, |v| v.len());
        for i in 0..len {
            let xa = za.map_or(C64::new(0.0, 0.0), |v| v[i]);
            let xb = zb.map_or(C64::new(0.0, 0.0), |v| v[i]);
            sum += weight * (xa - xb).norm_sqr();
        }
    }
    Ok(sum.sqrt())
}

/// One point of a resonance scan.
#[derive(Debug, Clone, Copy)]
pub struct ScanPoint {
    /// Filter center (kHz).
    pub fc_khz: f64,
    /// Diffusion coefficient fitted from the variance growth (hbar^2/ms).
    pub d_fit: f64,
    /// Standard error of the fit slope, halved like the slope itself.
    pub d_se: f64,
}

/// CSV dump of a scan: `fc_kHz,D_fit,D_se`.
pub fn scan_to_csv(points: &[ScanPoint]) -> String {
    let mut out = String::with_capacity(points.len() * 42 + 24);
    out.push_str("fc_kHz,D_fit,D_se\n");
    for p in points {
        out.push_str(&format!("{:.9e},{:.9e},{:.9e}\n", p.fc_khz, p.d_fit, p.d_se));
    }
    out
}

/// Unweighted least-squares slope of `y` on `x` with its standard error.
fn linear_slope(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let m = x.len();
    if m < 3 || y.len() != m {
        return Err(Error::Domain("slope fit needs at least three points".into()));
    }
    let xm = x.iter().sum::<f64>() / m as f64;
    let ym = y.iter().sum::<f64>() / m as f64;
    let sxx: f64 = x.iter().map(|v| (v - xm) * (v - xm)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("slope fit needs distinct abscissas".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(u, v)| (u - xm) * (v - ym)).sum();
    let slope = sxy / sxx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(u, v)| {
            let r = v - ym - slope * (u - xm);
            r * r
        })
        .sum();
    let se = (ss_res / (m - 2) as f64 / sxx).sqrt();
    Ok((slope, se))
}

/// Sweep the filter center across `centers_khz` at fixed drive variance and
/// fit the diffusion coefficient at each point.
///
/// Holding the *peak spectral density* fixed at fixed linewidth is the same
/// as holding the total drive variance fixed (both scale as the drive
/// intensity over the squared center frequency), so the scan resolves the
/// filter lineshape rather than a recalibrated plateau. All centers reuse
/// the same master seed, which correlates their statistical errors and
/// sharpens the fitted lineshape.
pub fn resonance_scan(spec: &EnsembleSpec, centers_khz: &[f64]) -> Result<Vec<ScanPoint>> {
    if centers_khz.is_empty() {
        return Err(Error::Domain("scan needs at least one center frequency".into()));
    }
    let psi0 = build_coherent_state(&spec.rotor)?;
    let window = psi0.window();
    let peak = match spec.noise.target {
        AmplitudeTarget::PeakPsd(p) => p,
        AmplitudeTarget::Diffusion { d, omega_rot, kappa } => {
            match crate::noise::calibrate(&spec.noise, d, omega_rot, kappa)?.target {
                AmplitudeTarget::PeakPsd(p) => p,
                AmplitudeTarget::Diffusion { .. } => unreachable!("calibrate resolves the target"),
            }
        }
    };
    let mut out = Vec::with_capacity(centers_khz.len());
    for &fc in centers_khz {
        let mut point = spec.clone();
        point.noise.center_khz = fc;
        point.noise.target = AmplitudeTarget::PeakPsd(peak);
        point.validate(&window)?;
        let series = ensemble_density(&point, &psi0)?;
        let (d_fit, d_se) = series.diffusion_fit()?;
        out.push(ScanPoint { fc_khz: fc, d_fit, d_se });
    }
    Ok(out)
}
