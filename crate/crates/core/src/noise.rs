//! Synthesis and spectral analysis of the band-limited gradient noise.
//!
//! The physical noise record is modeled as `eps(t) = exp(i chi) * v(t)` with
//! `v` a real, stationary, zero-mean Gaussian process: white noise passed
//! through a second-order resonator
//!
//! `v'' + gamma v' + omega0^2 v = xi(t)`,   `E[xi(t) xi(t')] = q delta(t-t')`.
//!
//! Its two-sided power spectral density,
//!
//! `S(omega) = q / [ (omega0^2 - omega^2)^2 + gamma^2 omega^2 ]`,
//!
//! is Lorentzian near resonance with full width at half maximum `gamma` and
//! peak value `q / (gamma^2 omega0^2)`. Records are produced by the *exact*
//! discretization of the resonator (matrix exponential plus the exact
//! per-step noise covariance), so the sampled process has the continuous-time
//! statistics at any step size; the step-size bound below exists to resolve
//! the band in later quadrature demodulation, not for generator stability.
//!
//! Conventions: `S` is two-sided in angular frequency (rad/ms), normalized so
//! that `integral S(omega) d omega / 2 pi = Var(v)`. For this phase-times-real
//! model `S` is even in `omega`. The angular-momentum diffusion coefficient
//! follows as `D = 4 kappa^2 S(2 omega_rot)` (units hbar^2/ms).

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// How the drive strength of the synthesized record is fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AmplitudeTarget {
    /// Prescribe the spectral-density peak value `S(omega0)` directly
    /// (units: ms, i.e. 1/(rad/ms)). Zero yields an all-zero record.
    PeakPsd(f64),
    /// Prescribe the diffusion coefficient `d` (hbar^2/ms) produced at the
    /// quadrupole resonance `2 omega_rot` (rad/ms) for coupling `kappa`
    /// (rad/ms per unit amplitude). See [`calibrate`].
    Diffusion { d: f64, omega_rot: f64, kappa: f64 },
}

/// Non-fatal conditions noted while generating a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseWarning {
    /// Record shorter than `10 / fwhm`; spectral estimates on it will resolve
    /// the line poorly.
    InsufficientLength,
}

/// Recipe for a noise record.
#[derive(Debug, Clone)]
pub struct NoiseSpec {
    /// Filter center frequency in kHz (cycles per ms).
    pub center_khz: f64,
    /// Full width at half maximum of the spectral line, in kHz.
    pub fwhm_khz: f64,
    /// Sample spacing in ms.
    pub dt_ms: f64,
    /// Seed of the deterministic generator.
    pub seed: u64,
    /// Fixed complex phase `chi` multiplying the real process.
    pub fixed_phase: f64,
    /// Drive-strength prescription.
    pub target: AmplitudeTarget,
    /// Optional flat (white) background added to the spectral density,
    /// same units as `PeakPsd`. Models broadband ambient pickup.
    pub ambient_psd: f64,
}

impl NoiseSpec {
    /// Largest admissible sample spacing for a given band: twenty samples per
    /// period of the highest relevant frequency `center + fwhm`.
    pub fn max_dt_ms(center_khz: f64, fwhm_khz: f64) -> f64 {
        1.0 / (20.0 * (center_khz + fwhm_khz))
    }

    /// Spec with the default 19 kHz linewidth, the coarsest admissible step,
    /// zero fixed phase, and no ambient background.
    pub fn new(center_khz: f64, target: AmplitudeTarget, seed: u64) -> Self {
        let fwhm_khz = 19.0;
        Self {
            center_khz,
            fwhm_khz,
            dt_ms: Self::max_dt_ms(center_khz, fwhm_khz),
            seed,
            fixed_phase: 0.0,
            target,
            ambient_psd: 0.0,
        }
    }

    /// Filter center in rad/ms.
    pub fn omega0(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.center_khz
    }

    /// Line width in rad/ms.
    pub fn gamma(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.fwhm_khz
    }

    fn validate(&self) -> Result<()> {
        if !(self.center_khz > 0.0) || !(self.fwhm_khz > 0.0) {
            return Err(Error::Domain("center and fwhm must be positive".into()));
        }
        if self.fwhm_khz >= self.center_khz {
            return Err(Error::Domain(format!(
                "linewidth {} kHz must stay below the center frequency {} kHz for a \
                 resonant band",
                self.fwhm_khz, self.center_khz
            )));
        }
        let max_dt = Self::max_dt_ms(self.center_khz, self.fwhm_khz);
        if !(self.dt_ms > 0.0) || self.dt_ms > max_dt * (1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "dt = {} ms undersamples the band; need dt <= {max_dt} ms",
                self.dt_ms
            )));
        }
        if self.ambient_psd < 0.0 {
            return Err(Error::Domain("ambient PSD must be nonnegative".into()));
        }
        let ok_target = match self.target {
            AmplitudeTarget::PeakPsd(s) => s >= 0.0,
            AmplitudeTarget::Diffusion { d, omega_rot, kappa } => {
                d >= 0.0 && omega_rot > 0.0 && kappa > 0.0
            }
        };
        if !ok_target {
            return Err(Error::Domain("amplitude target has a negative or zero member".into()));
        }
        Ok(())
    }

    /// White-noise intensity `q` of the resonator drive implied by the target.
    fn drive_intensity(&self) -> Result<f64> {
        let w0 = self.omega0();
        let g = self.gamma();
        match self.target {
            AmplitudeTarget::PeakPsd(s) => Ok(s * g * g * w0 * w0),
            AmplitudeTarget::Diffusion { d, omega_rot, kappa } => {
                let om = 2.0 * omega_rot;
                if (om - w0).abs() > 5.0 * g {
                    return Err(Error::Domain(format!(
                        "evaluation frequency {om} rad/ms lies more than five linewidths \
                         from the filter center {w0} rad/ms; the target is unreachable \
                         without an unphysical drive"
                    )));
                }
                let s_needed = d / (4.0 * kappa * kappa);
                let denom = (w0 * w0 - om * om).powi(2) + g * g * om * om;
                Ok(s_needed * denom)
            }
        }
    }

    /// Analytic spectral density of the specified record (resonator line plus
    /// ambient background) at angular frequency `omega` (rad/ms).
    pub fn analytic_psd(&self, omega: f64) -> Result<f64> {
        let q = self.drive_intensity()?;
        let w0 = self.omega0();
        let g = self.gamma();
        let denom = (w0 * w0 - omega * omega).powi(2) + g * g * omega * omega;
        Ok(q / denom + self.ambient_psd)
    }
}

/// A sampled complex noise record.
#[derive(Debug, Clone)]
pub struct NoiseTrajectory {
    dt_ms: f64,
    samples: Vec<C64>,
    warnings: Vec<NoiseWarning>,
}

impl NoiseTrajectory {
    /// Wrap an externally produced record (used by tests and file import).
    pub fn from_samples(dt_ms: f64, samples: Vec<C64>) -> Result<Self> {
        if !(dt_ms > 0.0) || samples.is_empty() {
            return Err(Error::Domain("need a positive dt and at least one sample".into()));
        }
        Ok(Self { dt_ms, samples, warnings: Vec::new() })
    }

    pub fn dt_ms(&self) -> f64 {
        self.dt_ms
    }

    pub fn samples(&self) -> &[C64] {
        &self.samples
    }

    pub fn warnings(&self) -> &[NoiseWarning] {
        &self.warnings
    }

    pub fn duration_ms(&self) -> f64 {
        self.dt_ms * (self.samples.len().saturating_sub(1)) as f64
    }

    /// Sample mean (should be statistically compatible with zero).
    pub fn mean(&self) -> C64 {
        self.samples.iter().sum::<C64>() / self.samples.len() as f64
    }

    /// CSV dump: `t_ms,re_eps,im_eps`.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.samples.len() * 48 + 32);
        out.push_str("t_ms,re_eps,im_eps\n");
        for (i, s) in self.samples.iter().enumerate() {
            out.push_str(&format!("{:.9e},{:.9e},{:.9e}\n", i as f64 * self.dt_ms, s.re, s.im));
        }
        out
    }
}

/// Exact one-step propagator of the damped resonator, and the stationary
/// covariance of `(v, v')` under drive intensity `q`.
fn resonator_step(w0: f64, gamma: f64, q: f64, dt: f64) -> ([[f64; 2]; 2], [f64; 2], [f64; 3]) {
    let wd = (w0 * w0 - 0.25 * gamma * gamma).sqrt(); // underdamped by validation
    let e = (-0.5 * gamma * dt).exp();
    let (s, c) = (wd * dt).sin_cos();
    let m = [
        [e * (c + 0.5 * gamma / wd * s), e * s / wd],
        [-e * w0 * w0 * s / wd, e * (c - 0.5 * gamma / wd * s)],
    ];
    // stationary covariance: diag(q / (2 gamma w0^2), q / (2 gamma))
    let pxx = q / (2.0 * gamma * w0 * w0);
    let pvv = q / (2.0 * gamma);
    // per-step noise covariance Q = P - M P M^T, lower Cholesky (l00, l10, l11)
    let qxx = (pxx - (m[0][0] * m[0][0] * pxx + m[0][1] * m[0][1] * pvv)).max(0.0);
    let qxv = -(m[0][0] * m[1][0] * pxx + m[0][1] * m[1][1] * pvv);
    let qvv = (pvv - (m[1][0] * m[1][0] * pxx + m[1][1] * m[1][1] * pvv)).max(0.0);
    let l00 = qxx.sqrt();
    let l10 = if l00 > 0.0 { qxv / l00 } else { 0.0 };
    let l11 = (qvv - l10 * l10).max(0.0).sqrt();
    (m, [pxx.sqrt(), pvv.sqrt()], [l00, l10, l11])
}

/// Generate a record of length `duration_ms` from `spec`, reproducibly.
///
/// Identical `(spec, stream)` always yield the identical record. The `stream`
/// index selects an independent substream of the same seed; ensembles assign
/// one stream per trajectory so that results do not depend on scheduling.
pub fn generate_with_stream(
    spec: &NoiseSpec,
    duration_ms: f64,
    stream: u64,
) -> Result<NoiseTrajectory> {
    spec.validate()?;
    if !(duration_ms > 0.0) {
        return Err(Error::Domain("duration must be positive".into()));
    }
    let n = (duration_ms / spec.dt_ms).floor() as usize + 1;
    let q = spec.drive_intensity()?;
    let (m, p_sqrt, l) = resonator_step(spec.omega0(), spec.gamma(), q, spec.dt_ms);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);

    let phase = C64::from_polar(1.0, spec.fixed_phase);
    let sigma_amb = (spec.ambient_psd / spec.dt_ms).sqrt();
    let mut samples = Vec::with_capacity(n);
    // start in the stationary state so the record has no transient
    let mut x = p_sqrt[0] * rng.sample::<f64, _>(StandardNormal);
    let mut v = p_sqrt[1] * rng.sample::<f64, _>(StandardNormal);
    for _ in 0..n {
        let amb = if sigma_amb > 0.0 {
            sigma_amb * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        samples.push(phase * (x + amb));
        let (g1, g2): (f64, f64) =
            (rng.sample(StandardNormal), rng.sample(StandardNormal));
        let xn = m[0][0] * x + m[0][1] * v + l[0] * g1;
        let vn = m[1][0] * x + m[1][1] * v + l[1] * g1 + l[2] * g2;
        x = xn;
        v = vn;
    }

    let mut warnings = Vec::new();
    if duration_ms < 10.0 / spec.fwhm_khz {
        warnings.push(NoiseWarning::InsufficientLength);
    }
    Ok(NoiseTrajectory { dt_ms: spec.dt_ms, samples, warnings })
}

/// [`generate_with_stream`] on the default stream 0.
pub fn generate(spec: &NoiseSpec, duration_ms: f64) -> Result<NoiseTrajectory> {
    generate_with_stream(spec, duration_ms, 0)
}

/// Two-sided spectral density estimate on an ascending angular-frequency grid.
#[derive(Debug, Clone)]
pub struct Psd {
    /// Angular frequencies, rad/ms, ascending and evenly spaced.
    pub omega: Vec<f64>,
    /// Density values, normalized so `sum(values) * d omega / 2 pi = Var`.
    pub values: Vec<f64>,
}

impl Psd {
    /// Grid spacing in rad/ms.
    pub fn domega(&self) -> f64 {
        self.omega[1] - self.omega[0]
    }

    /// Linear interpolation of the density at `omega`; errors outside the grid.
    pub fn value_at(&self, omega: f64) -> Result<f64> {
        let (lo, hi) = (self.omega[0], *self.omega.last().unwrap());
        if omega < lo || omega > hi {
            return Err(Error::Range(format!(
                "frequency {omega} rad/ms outside the estimated grid [{lo}, {hi}]"
            )));
        }
        let step = self.domega();
        let pos = (omega - lo) / step;
        let i = (pos.floor() as usize).min(self.omega.len() - 2);
        let f = pos - i as f64;
        Ok(self.values[i] * (1.0 - f) + self.values[i + 1] * f)
    }

    /// `integral S d omega / 2 pi`, which should match the record variance.
    pub fn integrated_variance(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.domega() / (2.0 * std::f64::consts::PI)
    }

    /// Integrated power in `[omega_lo, omega_hi]` (same normalization).
    pub fn band_power(&self, omega_lo: f64, omega_hi: f64) -> f64 {
        let step = self.domega() / (2.0 * std::f64::consts::PI);
        self.omega
            .iter()
            .zip(&self.values)
            .filter(|(w, _)| **w >= omega_lo && **w <= omega_hi)
            .map(|(_, v)| v * step)
            .sum()
    }

    /// CSV dump: `omega_rad_per_ms,S_eps`.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.omega.len() * 32 + 32);
        out.push_str("omega_rad_per_ms,S_eps\n");
        for (w, v) in self.omega.iter().zip(&self.values) {
            out.push_str(&format!("{w:.9e},{v:.9e}\n"));
        }
        out
    }
}

/// Welch estimate of the two-sided spectral density of a complex record.
///
/// Hann-windowed segments at 50% overlap, each mean-subtracted, periodograms
/// normalized by the window power and averaged. `nperseg` defaults to the
/// largest power of two allowing at least eight segments. Errors if fewer
/// than eight segments fit.
pub fn estimate_psd(traj: &NoiseTrajectory, nperseg: Option<usize>) -> Result<Psd> {
    let n = traj.samples.len();
    let nper = match nperseg {
        Some(p) => p,
        None => {
            let mut p = 32usize;
            while p * 2 <= ((n as f64) / 4.5) as usize {
                p *= 2;
            }
            p
        }
    };
    if nper < 32 || nper % 2 != 0 {
        return Err(Error::Domain(format!("segment length {nper} must be even and >= 32")));
    }
    if n < nper {
        return Err(Error::InsufficientLength(format!(
            "record has {n} samples, need at least {nper}"
        )));
    }
    let step = nper / 2;
    let nseg = (n - nper) / step + 1;
    if nseg < 8 {
        return Err(Error::InsufficientLength(format!(
            "only {nseg} averaging segments fit; at least 8 are required"
        )));
    }

    // periodic Hann window and its power normalization
    let window: Vec<f64> = (0..nper)
        .map(|j| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * j as f64 / nper as f64).cos()))
        .collect();
    let wpow: f64 = window.iter().map(|w| w * w).sum();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(nper);
    let mut acc = vec![0.0f64; nper];
    let mut buf = vec![C64::new(0.0, 0.0); nper];
    for s in 0..nseg {
        let seg = &traj.samples[s * step..s * step + nper];
        let mean = seg.iter().sum::<C64>() / nper as f64;
        for (b, (x, w)) in buf.iter_mut().zip(seg.iter().zip(&window)) {
            *b = (x - mean) * *w;
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
    }
    let scale = traj.dt_ms / (wpow * nseg as f64);

    // reorder to an ascending frequency axis: bins [nper/2, nper) are the
    // negative frequencies
    let half = nper / 2;
    let domega = 2.0 * std::f64::consts::PI / (nper as f64 * traj.dt_ms);
    let mut omega = Vec::with_capacity(nper);
    let mut values = Vec::with_capacity(nper);
    for i in 0..nper {
        let bin = (i + half) % nper; // start from the most negative frequency
        let freq_index = bin as i64 - if bin >= half { nper as i64 } else { 0 };
        omega.push(freq_index as f64 * domega);
        values.push(acc[bin] * scale);
    }
    Ok(Psd { omega, values })
}

/// Diffusion coefficient implied by a spectral density estimate:
/// `D = 4 kappa^2 S(2 omega_rot)` (hbar^2/ms). Errors if `2 omega_rot` lies
/// outside the estimated grid.
pub fn diffusion_from_psd(psd: &Psd, omega_rot: f64, kappa: f64) -> Result<f64> {
    if !(omega_rot > 0.0) || !(kappa > 0.0) {
        return Err(Error::Domain("omega_rot and kappa must be positive".into()));
    }
    Ok(4.0 * kappa * kappa * psd.value_at(2.0 * omega_rot)?)
}

/// Resolve a diffusion target into an explicit drive strength.
///
/// Returns a copy of `spec` whose target is the [`AmplitudeTarget::PeakPsd`]
/// that makes the analytic density obey `4 kappa^2 S(2 omega_rot) = d`.
/// The round trip generate -> estimate -> [`diffusion_from_psd`] then
/// reproduces `d` (within estimation error) when `2 omega_rot` lies in the
/// band; a target more than five linewidths off-resonant is rejected.
pub fn calibrate(spec: &NoiseSpec, d: f64, omega_rot: f64, kappa: f64) -> Result<NoiseSpec> {
    let mut out = spec.clone();
    out.target = AmplitudeTarget::Diffusion { d, omega_rot, kappa };
    out.validate()?;
    let q = out.drive_intensity()?;
    let (w0, g) = (out.omega0(), out.gamma());
    out.target = AmplitudeTarget::PeakPsd(q / (g * g * w0 * w0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

    fn band_spec(center_khz: f64, peak: f64, seed: u64) -> NoiseSpec {
        NoiseSpec::new(center_khz, AmplitudeTarget::PeakPsd(peak), seed)
    }

    #[test]
    fn zero_target_gives_zero_record() {
        let traj = generate(&band_spec(288.0, 0.0, 42), 5.0).unwrap();
        assert!(traj.samples().iter().all(|s| s.norm() == 0.0));
    }

    #[test]
    fn identical_specs_reproduce_identical_records() {
        let a = generate(&band_spec(288.0, 3.0e-4, 7), 2.0).unwrap();
        let b = generate(&band_spec(288.0, 3.0e-4, 7), 2.0).unwrap();
        assert_eq!(a.samples().len(), b.samples().len());
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert_eq!(x, y);
        }
        // a different stream decorrelates but stays deterministic
        let c = generate_with_stream(&band_spec(288.0, 3.0e-4, 7), 2.0, 1).unwrap();
        assert!(c.samples()[10] != a.samples()[10]);
    }

    #[test]
    fn fixed_phase_leaves_psd_unchanged() {
        let mut spec = band_spec(288.0, 2.0e-4, 3);
        let a = estimate_psd(&generate(&spec, 40.0).unwrap(), None).unwrap();
        spec.fixed_phase = 1.1;
        let b = estimate_psd(&generate(&spec, 40.0).unwrap(), None).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1e-30));
        }
    }

    #[test]
    fn psd_peak_sits_at_center_with_expected_width() {
        let spec = band_spec(288.0, 5.0e-4, 11);
        let traj = generate(&spec, 80.0).unwrap();
        assert!(traj.warnings().is_empty());
        // short segments buy ~120 averages so per-bin scatter stays below 10%
        let psd = estimate_psd(&traj, Some(8192)).unwrap();
        // locate the positive-frequency peak
        let (mut best_i, mut best) = (0, 0.0);
        for (i, (&w, &v)) in psd.omega.iter().zip(&psd.values).enumerate() {
            if w > 0.0 && v > best {
                best = v;
                best_i = i;
            }
        }
        let w_peak = psd.omega[best_i];
        assert!(
            (w_peak - TWO_PI * 288.0).abs() < 0.05 * TWO_PI * 288.0,
            "peak at {w_peak}, expected near {}",
            TWO_PI * 288.0
        );
        // half-maximum crossings bracket a width near gamma = 2 pi * 19
        let half = best / 2.0;
        let mut lo = best_i;
        while lo > 0 && psd.values[lo] > half {
            lo -= 1;
        }
        let mut hi = best_i;
        while hi + 1 < psd.values.len() && psd.values[hi] > half {
            hi += 1;
        }
        let width = psd.omega[hi] - psd.omega[lo];
        assert!(
            (width - TWO_PI * 19.0).abs() < 0.25 * TWO_PI * 19.0,
            "width {width}, expected near {}",
            TWO_PI * 19.0
        );
    }

    #[test]
    fn parseval_and_stationary_variance() {
        let spec = band_spec(288.0, 4.0e-4, 5);
        let traj = generate(&spec, 80.0).unwrap();
        let var_t: f64 = {
            let m = traj.mean();
            traj.samples().iter().map(|s| (s - m).norm_sqr()).sum::<f64>()
                / traj.samples().len() as f64
        };
        let psd = estimate_psd(&traj, None).unwrap();
        let var_f = psd.integrated_variance();
        assert!(
            (var_f - var_t).abs() / var_t < 0.03,
            "Parseval mismatch: time {var_t} vs frequency {var_f}"
        );
        // stationary variance of the resonator: q / (2 gamma w0^2)
        let q = 4.0e-4 * spec.gamma().powi(2) * spec.omega0().powi(2);
        let var_exp = q / (2.0 * spec.gamma() * spec.omega0().powi(2));
        assert!(
            (var_t - var_exp).abs() / var_exp < 0.15,
            "variance {var_t} vs expected {var_exp}"
        );
    }

    #[test]
    fn sinusoid_integrated_peak_power_recovers_amplitude() {
        // A cos(w0 t) carries A^2/2 of variance split over the +/- w0 lines
        let amp = 0.7;
        let w0 = TWO_PI * 250.0;
        let dt = 1.0 / (20.0 * 300.0);
        let n = 200_000;
        let samples: Vec<C64> = (0..n)
            .map(|i| C64::new(amp * (w0 * i as f64 * dt).cos(), 0.0))
            .collect();
        let traj = NoiseTrajectory::from_samples(dt, samples).unwrap();
        let psd = estimate_psd(&traj, Some(8192)).unwrap();
        let half_window = 10.0 * psd.domega();
        let power =
            psd.band_power(w0 - half_window, w0 + half_window)
                + psd.band_power(-w0 - half_window, -w0 + half_window);
        assert!(
            (power - amp * amp / 2.0).abs() / (amp * amp / 2.0) < 0.02,
            "integrated peak power {power} vs {}",
            amp * amp / 2.0
        );
    }

    #[test]
    fn autocovariance_decays_on_the_filter_timescale() {
        // envelope of R(tau) for the resonator is exp(-gamma tau / 2)
        let spec = band_spec(288.0, 4.0e-4, 19);
        let traj = generate(&spec, 80.0).unwrap();
        let xs: Vec<f64> = traj.samples().iter().map(|s| s.re).collect();
        let n = xs.len();
        let r = |lag: usize| -> f64 {
            xs[..n - lag].iter().zip(&xs[lag..]).map(|(a, b)| a * b).sum::<f64>()
                / (n - lag) as f64
        };
        let r0 = r(0);
        let gamma = spec.gamma();
        // at tau = 2/gamma the envelope is down to 1/e; sample the envelope as
        // the RMS of R over one carrier period around that lag
        let tau = 2.0 / gamma;
        let lag = (tau / traj.dt_ms()).round() as usize;
        let period = (TWO_PI / spec.omega0() / traj.dt_ms()).round() as usize;
        let env = (lag..lag + period.max(1))
            .map(|l| r(l).powi(2))
            .sum::<f64>()
            .sqrt()
            * (2.0 / period.max(1) as f64).sqrt();
        let expect = r0 * (-1.0f64).exp();
        assert!(
            (env - expect).abs() < 0.4 * expect,
            "envelope {env} vs expected {expect}"
        );
    }

    #[test]
    fn record_mean_is_statistically_small() {
        let spec = band_spec(288.0, 4.0e-4, 23);
        let traj = generate(&spec, 40.0).unwrap();
        let n = traj.samples().len() as f64;
        let sigma = (traj.samples().iter().map(|s| s.norm_sqr()).sum::<f64>() / n).sqrt();
        // correlated samples: inflate the independent-sample bound by the
        // number of samples per correlation time
        let corr = (2.0 / spec.gamma() / traj.dt_ms()).ceil();
        assert!(traj.mean().norm() < 5.0 * sigma * (corr / n).sqrt() * 3.0);
    }

    #[test]
    fn undersampled_spec_is_rejected() {
        let mut spec = band_spec(288.0, 1.0e-4, 1);
        spec.dt_ms = 1.0 / (5.0 * 288.0);
        assert!(matches!(generate(&spec, 1.0), Err(Error::Domain(_))));
        spec.dt_ms = -1.0;
        assert!(matches!(generate(&spec, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn short_record_warns_and_tiny_record_fails_estimation() {
        let spec = band_spec(288.0, 1.0e-4, 2);
        let traj = generate(&spec, 0.3).unwrap(); // < 10 / 19 kHz
        assert_eq!(traj.warnings(), &[NoiseWarning::InsufficientLength]);
        assert!(matches!(
            estimate_psd(&traj, Some(4096)),
            Err(Error::InsufficientLength(_))
        ));
    }

    #[test]
    fn calibration_round_trip_recovers_diffusion() {
        let omega_rot = TWO_PI * 144.0; // rad/ms
        let kappa = 1.0;
        let d_target = 156.0;
        let base = band_spec(288.0, 0.0, 31);
        let spec = calibrate(&base, d_target, omega_rot, kappa).unwrap();
        let traj = generate(&spec, 100.0).unwrap();
        // the read-off happens at a single interpolated bin, so push the
        // segment count high enough that its scatter sits well inside 10%
        let psd = estimate_psd(&traj, Some(4096)).unwrap();
        let d = diffusion_from_psd(&psd, omega_rot, kappa).unwrap();
        assert!(
            (d - d_target).abs() / d_target < 0.10,
            "round trip d = {d} vs target {d_target}"
        );
    }

    #[test]
    fn doubling_the_target_psd_exactly_doubles_the_spectrum() {
        // the generator is linear in the drive, so scaling is deterministic
        let a = estimate_psd(&generate(&band_spec(288.0, 2.0e-4, 9), 20.0).unwrap(), None)
            .unwrap();
        let b = estimate_psd(&generate(&band_spec(288.0, 4.0e-4, 9), 20.0).unwrap(), None)
            .unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((y - 2.0 * x).abs() <= 1e-9 * x.abs().max(1e-30) + 1e-300);
        }
    }

    #[test]
    fn off_grid_evaluation_is_a_range_error() {
        let psd = Psd { omega: vec![-1.0, 0.0, 1.0], values: vec![1.0, 2.0, 1.0] };
        assert!(matches!(psd.value_at(1.5), Err(Error::Range(_))));
        assert!((psd.value_at(0.5).unwrap() - 1.5).abs() < 1e-15);
        assert!(matches!(
            diffusion_from_psd(&psd, 3.0, 1.0),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn far_off_resonant_calibration_is_rejected() {
        let base = band_spec(288.0, 0.0, 1);
        // 2 omega_rot at 2 pi * 100 kHz is far below a 288 kHz center
        assert!(matches!(
            calibrate(&base, 10.0, TWO_PI * 50.0, 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn ambient_background_adds_a_flat_floor() {
        let mut spec = band_spec(288.0, 3.0e-4, 13);
        spec.ambient_psd = 1.0e-5;
        let psd = estimate_psd(&generate(&spec, 60.0).unwrap(), None).unwrap();
        // far from the line the density should sit near the floor
        let far = psd.value_at(-TWO_PI * 500.0).unwrap();
        // average a far-side stretch to beat estimator variance
        let stretch = psd.band_power(-TWO_PI * 900.0, -TWO_PI * 500.0)
            / ((TWO_PI * 400.0) / (2.0 * std::f64::consts::PI));
        assert!(far > 0.0);
        assert!(
            (stretch - 1.0e-5).abs() < 0.3e-5,
            "floor estimate {stretch} vs 1e-5"
        );
    }
}
