//! The five commands: simulation pipelines wired from a [`RunConfig`] to
//! CSV artifacts plus a stdout summary.
//!
//! Every artifact starts with `# config_hash=<hex> seed=<seed>` so a result
//! can always be traced to the exact configuration that produced it, and
//! every pipeline is deterministic given that pair — including under any
//! worker-thread count, because the engines reduce their ensembles in fixed
//! batch order.

use std::path::{Path, PathBuf};

use rotorsim::error::Error as CoreError;
use rotorsim::fit::{
    fit_lorentzian, fit_powerlaw, fit_stretched_exp, fit_variance_growth,
    format_with_uncertainty, modulation_is_resolved,
};
use rotorsim::lindblad::{evolve, LindbladParams};
use rotorsim::noise::{calibrate, generate, generate_with_stream, AmplitudeTarget, NoiseSpec};
use rotorsim::ramsey::{
    analytic_contrast, analytic_gamma, bessel_coupling, contrast_csv, full_signal,
    pulse_operator, run_sequence, sequence_halfwidth, CompositeState, ContrastFit, Environment,
    PulseKind, PulseSpec, SequenceSpec,
};
use rotorsim::rotor::{
    build_coherent_state, centrifugal_correction, Frame, RotorDensity, RotorParams, RotorState,
};
use rotorsim::trajectory::{ensemble_density, resonance_scan, scan_to_csv, EnsembleSpec};

use crate::config::{Engine, RunConfig};

/// Failure classes, mapped to exit codes by `main`.
#[derive(Debug)]
pub enum AppError {
    /// Bad configuration or environment (exit 2).
    Config(String),
    /// A simulation or fit failed after a valid setup (exit 3).
    Numerical(String),
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Config(m) => write!(f, "config error: {m}"),
            AppError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

/// Engine errors sort themselves by variant: parameter-domain problems are
/// configuration mistakes, everything else happened while integrating.
fn from_core(e: CoreError) -> AppError {
    match e {
        CoreError::Domain(_) | CoreError::Range(_) | CoreError::InsufficientLength(_) => {
            AppError::Config(e.to_string())
        }
        _ => AppError::Numerical(e.to_string()),
    }
}

fn io_error(path: &Path, e: std::io::Error) -> AppError {
    AppError::Config(format!("{}: {e}", path.display()))
}

/// Output sink stamping the provenance header onto every artifact.
struct Artifacts {
    dir: PathBuf,
    header: String,
}

impl Artifacts {
    fn new(cfg: &RunConfig, out_override: Option<&Path>) -> Self {
        let dir = out_override.map_or_else(|| PathBuf::from(&cfg.out_dir), Path::to_path_buf);
        let header = format!("# config_hash={} seed={}\n", cfg.hash(), cfg.master_seed);
        Artifacts { dir, header }
    }

    fn write(&self, name: &str, body: &str) -> Result<PathBuf, AppError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| io_error(&self.dir, e))?;
        let path = self.dir.join(name);
        std::fs::write(&path, format!("{}{}", self.header, body))
            .map_err(|e| io_error(&path, e))?;
        println!("wrote {}", path.display());
        Ok(path)
    }
}

/// Window half-width holding a packet that spreads to `sigma^2 + 2 D t`.
fn spread_halfwidth(cfg: &RunConfig, diffusion: f64, t_ms: f64) -> usize {
    cfg.halfwidth.unwrap_or_else(|| {
        let s2 = cfg.sigma_ell * cfg.sigma_ell + 2.0 * diffusion.max(0.0) * t_ms;
        (6.0 * s2.sqrt()).ceil() as usize + 8
    })
}

fn rotor_with(cfg: &RunConfig, halfwidth: usize) -> Result<RotorParams, AppError> {
    RotorParams::new(
        cfg.omega_r(),
        cfg.ell_bar,
        cfg.sigma_ell,
        halfwidth,
        cfg.kappa_rad_per_ms,
        cfg.frame,
    )
    .map_err(from_core)
}

/// Drive statistics from the configuration. A zero diffusion target with no
/// ambient floor is the silent drive.
fn noise_spec(cfg: &RunConfig) -> NoiseSpec {
    let target = if cfg.d_target > 0.0 {
        AmplitudeTarget::Diffusion {
            d: cfg.d_target,
            omega_rot: cfg.omega_rot(),
            kappa: cfg.kappa_rad_per_ms,
        }
    } else {
        AmplitudeTarget::PeakPsd(0.0)
    };
    let mut spec = NoiseSpec::new(cfg.drive_center_khz(), target, cfg.master_seed);
    spec.fwhm_khz = cfg.noise_fwhm_khz;
    spec.ambient_psd = cfg.ambient_psd_ms;
    spec.dt_ms = NoiseSpec::max_dt_ms(spec.center_khz, spec.fwhm_khz);
    spec
}

/// Integrator step obeying both resolution rules with a 10% safety margin:
/// the frame's fastest coherent phase and the top of the noise band
/// (`max_center_khz` is the highest filter center the run will visit).
fn ensemble_dt(cfg: &RunConfig, halfwidth: usize, max_center_khz: f64) -> f64 {
    if let Some(dt) = cfg.dt_ms {
        return dt;
    }
    let frame_rate = match cfg.frame {
        Frame::Lab => 2.0 * cfg.omega_rot().abs(),
        Frame::Corotating => cfg.omega_r() * (halfwidth * halfwidth) as f64,
    };
    let mut dt = cfg.t_max_ms;
    if frame_rate > 0.0 {
        dt = dt.min(2.0 * std::f64::consts::PI / (20.0 * frame_rate));
    }
    let drive_is_silent = cfg.d_target == 0.0 && cfg.ambient_psd_ms == 0.0;
    if !drive_is_silent {
        dt = dt.min(NoiseSpec::max_dt_ms(max_center_khz, cfg.noise_fwhm_khz));
    }
    0.9 * dt
}

/// Gaussian populations of the configured packet over the rotor window.
fn packet_populations(rotor: &RotorParams) -> Vec<f64> {
    let window = rotor.window();
    let s2 = rotor.sigma_ell * rotor.sigma_ell;
    let raw: Vec<f64> = window
        .iter()
        .map(|ell| {
            let d = (ell - rotor.ell_bar) as f64;
            (-d * d / (2.0 * s2)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

// ---------------------------------------------------------------------------
// diffusion
// ---------------------------------------------------------------------------

/// Measure the angular-momentum diffusion coefficient: evolve the configured
/// packet under the configured environment, record `Var(L_z)(t)`, fit its
/// linear growth, and compare against the configured target.
pub fn cmd_diffusion(cfg: &RunConfig, out: Option<&Path>) -> Result<(), AppError> {
    let artifacts = Artifacts::new(cfg, out);
    let halfwidth = spread_halfwidth(cfg, cfg.d_target, cfg.t_max_ms);
    let rotor = rotor_with(cfg, halfwidth)?;

    let (series_csv, variance, d_fitted): (String, Vec<(f64, f64)>, (f64, f64)) =
        match cfg.engine {
            Engine::Lindblad => {
                let rho0 =
                    RotorDensity::from_populations(rotor.window(), &packet_populations(&rotor))
                        .map_err(from_core)?;
                let dt = cfg.dt_ms.unwrap_or_else(|| {
                    if cfg.d_target > 0.0 {
                        (0.9 * 0.05 / cfg.d_target).min(cfg.t_max_ms)
                    } else {
                        cfg.t_max_ms / 64.0
                    }
                });
                let mut params = LindbladParams::new(cfg.d_target, rotor, dt, cfg.t_max_ms)
                    .map_err(from_core)?;
                params.snapshots = cfg.snapshots.unwrap_or(65);
                let series = evolve(&rho0, &params).map_err(from_core)?;
                let pts: Vec<(f64, f64)> = series
                    .times
                    .iter()
                    .zip(series.states.iter())
                    .map(|(&t, rho)| (t, rotorsim::rotor::moments(rho).1))
                    .collect();
                let mut csv = String::from("t_ms,var_Lz,var_Lz_se,mean_Lz\n");
                for ((&t, rho), &(_, var)) in
                    series.times.iter().zip(series.states.iter()).zip(&pts)
                {
                    let (mean, _) = rotorsim::rotor::moments(rho);
                    csv.push_str(&format!("{t:.9e},{var:.9e},{:.9e},{mean:.9e}\n", 0.0));
                }
                (csv, pts, (f64::NAN, 0.0))
            }
            Engine::Trajectory => {
                let psi0 = build_coherent_state(&rotor).map_err(from_core)?;
                let dt = ensemble_dt(cfg, halfwidth, cfg.drive_center_khz());
                let mut spec = EnsembleSpec::new(
                    cfg.n_traj,
                    noise_spec(cfg),
                    rotor,
                    dt,
                    cfg.t_max_ms,
                    cfg.master_seed,
                )
                .map_err(from_core)?;
                if let Some(s) = cfg.snapshots {
                    spec.snapshots = s;
                }
                spec.validate(&psi0.window())
                    .map_err(|e| AppError::Config(e.to_string()))?;
                let series = ensemble_density(&spec, &psi0).map_err(from_core)?;
                let pts: Vec<(f64, f64)> =
                    series.times.iter().copied().zip(series.var_lz.iter().copied()).collect();
                let fitted = series.diffusion_fit().map_err(from_core)?;
                (series.to_csv(), pts, fitted)
            }
        };

    artifacts.write("diffusion_series.csv", &series_csv)?;

    let fit = fit_variance_growth(&variance, None).map_err(from_core)?;
    let sigma0_sq = fit.value("sigma0_sq").map_err(from_core)?;
    let sigma0_se = fit.uncertainty("sigma0_sq").map_err(from_core)?;
    // the trajectory engine's batch-spread error is the honest uncertainty;
    // the pooled-residual one underestimates correlated snapshots
    let (d_value, d_se) = if d_fitted.0.is_finite() {
        d_fitted
    } else {
        (
            fit.value("d").map_err(from_core)?,
            fit.uncertainty("d").map_err(from_core)?,
        )
    };

    let mut fit_csv = String::from("param,value,uncertainty,unit\n");
    fit_csv.push_str(&format!("sigma0_sq,{sigma0_sq:.9e},{sigma0_se:.9e},hbar^2\n"));
    fit_csv.push_str(&format!("d,{d_value:.9e},{d_se:.9e},hbar^2/ms\n"));
    artifacts.write("diffusion_fit.csv", &fit_csv)?;

    println!(
        "D = {} hbar^2/ms (target {}), sigma0^2 = {} hbar^2",
        format_with_uncertainty(d_value, d_se),
        cfg.d_target,
        format_with_uncertainty(sigma0_sq, sigma0_se),
    );
    for flag in &fit.flags {
        println!("note: {flag:?}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// resonance
// ---------------------------------------------------------------------------

/// Sweep the drive filter center across the quadrupole resonance at fixed
/// peak spectral density and fit the resulting `D(f_c)` line shape.
pub fn cmd_resonance(cfg: &RunConfig, out: Option<&Path>) -> Result<(), AppError> {
    if cfg.engine != Engine::Trajectory {
        return Err(AppError::Config(
            "the resonance protocol drives band-limited noise; run it with \
             engine = trajectory"
                .into(),
        ));
    }
    if cfg.ell_bar == 0 {
        return Err(AppError::Config(
            "the resonance sits at 2*omega_rot = 0 for ell_bar = 0; configure a \
             rotating packet"
                .into(),
        ));
    }
    if !(cfg.d_target > 0.0) {
        return Err(AppError::Config(
            "set d_target_hbar2_per_ms > 0 to give the scan a drive strength".into(),
        ));
    }
    let artifacts = Artifacts::new(cfg, out);

    let f_res = cfg.resonance_khz();
    let centers: Vec<f64> = cfg.scan_centers_khz.clone().unwrap_or_else(|| {
        (0..13)
            .map(|i| f_res + cfg.noise_fwhm_khz * (-1.5 + 3.0 * i as f64 / 12.0))
            .collect()
    });
    let lowest = centers.iter().copied().fold(f64::INFINITY, f64::min);
    if lowest <= cfg.noise_fwhm_khz {
        return Err(AppError::Config(format!(
            "scan center {lowest} kHz sits inside the {} kHz linewidth; raise ell_bar \
             or narrow the scan",
            cfg.noise_fwhm_khz
        )));
    }

    let halfwidth = spread_halfwidth(cfg, cfg.d_target, cfg.t_max_ms);
    let rotor = rotor_with(cfg, halfwidth)?;
    let psi0 = build_coherent_state(&rotor).map_err(from_core)?;
    let top = centers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let dt = ensemble_dt(cfg, halfwidth, top);

    let mut base = noise_spec(cfg);
    base.center_khz = f_res; // calibrate the drive strength on resonance
    let mut spec = EnsembleSpec::new(cfg.n_traj, base, rotor, dt, cfg.t_max_ms, cfg.master_seed)
        .map_err(from_core)?;
    if let Some(s) = cfg.snapshots {
        spec.snapshots = s;
    }
    // surface step-resolution problems as configuration errors before the
    // sweep starts; the scan revalidates each point anyway
    let mut probe = spec.clone();
    probe.noise.center_khz = top;
    probe.validate(&psi0.window()).map_err(|e| AppError::Config(e.to_string()))?;

    let points = resonance_scan(&spec, &centers).map_err(from_core)?;
    artifacts.write("resonance_scan.csv", &scan_to_csv(&points))?;

    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.fc_khz, p.d_fit)).collect();
    let fit = fit_lorentzian(&pairs).map_err(from_core)?;
    artifacts.write("resonance_fit.csv", &fit.to_csv())?;

    let center = fit.value("center").map_err(from_core)?;
    let fwhm = fit.value("fwhm").map_err(from_core)?;
    println!(
        "line center = {} kHz (resonance at {f_res:.4} kHz), fwhm = {} kHz (drive linewidth {})",
        format_with_uncertainty(center, fit.uncertainty("center").map_err(from_core)?),
        format_with_uncertainty(fwhm, fit.uncertainty("fwhm").map_err(from_core)?),
        cfg.noise_fwhm_khz,
    );
    for flag in &fit.flags {
        println!("note: {flag:?}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ramsey
// ---------------------------------------------------------------------------

/// Hold-time grid for one sideband order: configured, or 14 points out to
/// 1.4 decay times (one beat period when there is no decay to set a scale).
fn tau_grid(cfg: &RunConfig, delta_ell: u32) -> Result<Vec<f64>, AppError> {
    if let Some(taus) = &cfg.tau_grid_ms {
        return Ok(taus.clone());
    }
    let w = cfg.omega_r();
    let t_max = if cfg.d_target > 0.0 {
        1.4 / analytic_gamma(cfg.d_target, w, delta_ell).map_err(from_core)?
    } else {
        std::f64::consts::PI / (w * (delta_ell * delta_ell) as f64)
    };
    let t0 = (0.12f64).min(0.5 * t_max);
    Ok((0..14).map(|i| t0 + (t_max - t0) * i as f64 / 13.0).collect())
}

/// Contrast curve for one sideband order under the configured environment.
fn contrast_curve(
    cfg: &RunConfig,
    delta_ell: u32,
    taus: &[f64],
) -> Result<Vec<(f64, ContrastFit)>, AppError> {
    let t_max = taus.iter().copied().fold(0.0, f64::max);
    let halfwidth = cfg.halfwidth.unwrap_or_else(|| {
        sequence_halfwidth(cfg.sigma_ell, cfg.d_target, t_max, delta_ell)
    });
    let rotor = rotor_with(cfg, halfwidth)?;
    let psi0 = build_coherent_state(&rotor).map_err(from_core)?;

    let environment = |tau: f64| -> Result<Environment, AppError> {
        match cfg.engine {
            Engine::Lindblad if cfg.d_target > 0.0 => {
                Ok(Environment::Lindblad { diffusion: cfg.d_target })
            }
            Engine::Lindblad => Ok(Environment::None),
            Engine::Trajectory => {
                let dt = ensemble_dt(cfg, halfwidth, cfg.drive_center_khz()).min(0.5 * tau);
                let spec = EnsembleSpec::new(
                    cfg.n_traj,
                    noise_spec(cfg),
                    rotor.clone(),
                    dt,
                    tau.max(dt),
                    cfg.master_seed,
                )
                .map_err(from_core)?;
                Ok(Environment::Trajectory(spec))
            }
        }
    };

    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let seq = SequenceSpec::new(
            tau,
            delta_ell,
            environment(tau)?,
            SequenceSpec::default_phase_scan(cfg.phase_points),
        )
        .map_err(from_core)?;
        let scan = run_sequence(&seq, &rotor, &psi0).map_err(from_core)?;
        rows.push((tau, scan.contrast().map_err(from_core)?));
    }
    Ok(rows)
}

/// Contrast decay per sideband order with a decay-rate fit against theory.
pub fn cmd_ramsey(cfg: &RunConfig, out: Option<&Path>) -> Result<(), AppError> {
    let artifacts = Artifacts::new(cfg, out);
    let w = cfg.omega_r();

    for &dl in &cfg.delta_ells {
        let taus = tau_grid(cfg, dl)?;
        let rows = contrast_curve(cfg, dl, &taus)?;
        artifacts.write(&format!("ramsey_order_{dl}.csv"), &contrast_csv(&rows))?;

        if cfg.d_target > 0.0 {
            let gamma_theory = analytic_gamma(cfg.d_target, w, dl).map_err(from_core)?;
            let data: Vec<(f64, f64)> =
                rows.iter().map(|(t, c)| (*t, c.contrast)).collect();
            let with_mod = modulation_is_resolved(w, dl, gamma_theory);
            let fit = fit_stretched_exp(&data, with_mod, w, dl).map_err(from_core)?;
            artifacts.write(&format!("ramsey_fit_order_{dl}.csv"), &fit.to_csv())?;
            let gamma = fit.value("gamma").map_err(from_core)?;
            let se = fit.uncertainty("gamma").map_err(from_core)?;
            println!(
                "order {dl}: gamma = {} 1/ms (theory {gamma_theory:.4}, modulation {})",
                format_with_uncertainty(gamma, se),
                if with_mod { "included" } else { "unresolved" },
            );
            for flag in &fit.flags {
                println!("note: order {dl}: {flag:?}");
            }
        } else {
            println!("order {dl}: no environment; contrast is the bare beat profile");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// scaling
// ---------------------------------------------------------------------------

/// Decay rate versus diffusion strength and sideband order, with power-law
/// fits in both directions and the closed-form overlay.
pub fn cmd_scaling(cfg: &RunConfig, out: Option<&Path>) -> Result<(), AppError> {
    if cfg.engine != Engine::Lindblad {
        return Err(AppError::Config(
            "the scaling sweep uses the deterministic master-equation route; run it \
             with engine = lindblad"
                .into(),
        ));
    }
    let artifacts = Artifacts::new(cfg, out);
    let w = cfg.omega_r();

    let mut gamma_csv =
        String::from("d_hbar2_per_ms,delta_ell,gamma_fit,gamma_se,gamma_theory\n");
    let mut fitted: Vec<Vec<(f64, f64)>> = Vec::new(); // [d][order] -> (gamma, se)
    for &d in &cfg.d_list {
        let mut per_order = Vec::new();
        for &dl in &cfg.delta_ells {
            let gamma_theory = analytic_gamma(d, w, dl).map_err(from_core)?;
            let sweep_cfg = RunConfig { d_target: d, ..cfg.clone() };
            let taus = tau_grid(&sweep_cfg, dl)?;
            let rows = contrast_curve(&sweep_cfg, dl, &taus)?;
            let data: Vec<(f64, f64)> = rows.iter().map(|(t, c)| (*t, c.contrast)).collect();
            let with_mod = modulation_is_resolved(w, dl, gamma_theory);
            let fit = fit_stretched_exp(&data, with_mod, w, dl).map_err(from_core)?;
            if !fit.converged {
                return Err(AppError::Numerical(format!(
                    "decay fit did not converge at D = {d}, order {dl}"
                )));
            }
            let gamma = fit.value("gamma").map_err(from_core)?;
            let se = fit.uncertainty("gamma").map_err(from_core)?;
            gamma_csv.push_str(&format!(
                "{d:.9e},{dl},{gamma:.9e},{se:.9e},{gamma_theory:.9e}\n"
            ));
            per_order.push((gamma, se));
        }
        fitted.push(per_order);
    }
    artifacts.write("scaling_gamma.csv", &gamma_csv)?;

    let mut summary = String::from("quantity,value,uncertainty\n");

    // order exponent per diffusion value, inverse-variance averaged
    if cfg.delta_ells.len() >= 3 {
        let mut orders_csv =
            String::from("d_hbar2_per_ms,exponent,exponent_se,amplitude,amplitude_se\n");
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &d) in cfg.d_list.iter().enumerate() {
            let pts: Vec<(f64, f64)> = cfg
                .delta_ells
                .iter()
                .zip(&fitted[i])
                .map(|(&dl, &(g, _))| (dl as f64, g))
                .collect();
            let sig: Vec<f64> = fitted[i].iter().map(|&(_, s)| s.max(1e-12)).collect();
            let fit = fit_powerlaw(&pts, Some(&sig)).map_err(from_core)?;
            let p = fit.value("exponent").map_err(from_core)?;
            let p_se = fit.uncertainty("exponent").map_err(from_core)?.max(1e-6);
            let a = fit.value("amplitude").map_err(from_core)?;
            let a_se = fit.uncertainty("amplitude").map_err(from_core)?;
            orders_csv
                .push_str(&format!("{d:.9e},{p:.9e},{p_se:.9e},{a:.9e},{a_se:.9e}\n"));
            num += p / (p_se * p_se);
            den += 1.0 / (p_se * p_se);
        }
        artifacts.write("scaling_orders.csv", &orders_csv)?;
        let averaged = num / den;
        let averaged_se = (1.0 / den).sqrt();
        summary.push_str(&format!("order_exponent,{averaged:.9e},{averaged_se:.9e}\n"));
        println!(
            "order exponent = {} (theory 2/3)",
            format_with_uncertainty(averaged, averaged_se)
        );
    } else {
        println!("order exponent skipped: need at least three sideband orders");
    }

    // diffusion exponent per order
    if cfg.d_list.len() >= 3 {
        let mut dslope_csv = String::from("delta_ell,slope,slope_se\n");
        let mut slopes = Vec::new();
        for (j, &dl) in cfg.delta_ells.iter().enumerate() {
            let pts: Vec<(f64, f64)> =
                cfg.d_list.iter().enumerate().map(|(i, &d)| (d, fitted[i][j].0)).collect();
            let sig: Vec<f64> = (0..cfg.d_list.len())
                .map(|i| fitted[i][j].1.max(1e-12))
                .collect();
            let fit = fit_powerlaw(&pts, Some(&sig)).map_err(from_core)?;
            let s = fit.value("exponent").map_err(from_core)?;
            let s_se = fit.uncertainty("exponent").map_err(from_core)?;
            dslope_csv.push_str(&format!("{dl},{s:.9e},{s_se:.9e}\n"));
            slopes.push(s);
        }
        artifacts.write("scaling_diffusion.csv", &dslope_csv)?;
        let n = slopes.len() as f64;
        let mean = slopes.iter().sum::<f64>() / n;
        let spread = if slopes.len() > 1 {
            (slopes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        summary.push_str(&format!("diffusion_slope,{mean:.9e},{spread:.9e}\n"));
        println!(
            "diffusion slope = {} (theory 1/3)",
            format_with_uncertainty(mean, spread.max(1e-4))
        );
    } else {
        println!("diffusion slope skipped: need at least three diffusion values");
    }

    artifacts.write("scaling_summary.csv", &summary)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn check(name: &'static str, result: Result<(f64, f64), String>, tol: f64) -> Check {
    match result {
        Ok((got, want)) => {
            let err = (got - want).abs();
            Check {
                name,
                passed: err <= tol,
                detail: format!("|{got:.6e} - {want:.6e}| = {err:.2e} (tol {tol:.0e})"),
            }
        }
        Err(msg) => Check { name, passed: false, detail: msg },
    }
}

/// Built-in invariant suite: fast closed-form and cross-route checks run on
/// canonical parameters, independent of any configuration file.
pub fn cmd_validate() -> Result<(), AppError> {
    let w: f64 = 2.0 * std::f64::consts::PI * 0.013; // 13 Hz in rad/ms
    let mut checks: Vec<Check> = Vec::new();

    // echo pulse applied twice is the identity
    checks.push(check(
        "echo pulse involution",
        (|| {
            // wide window: the pulse clips what it shifts past the edge, so
            // the involution is exact only once the packet tail is negligible
            let rotor = RotorParams::new(w, 0, 2.0, 28, 0.0, Frame::Lab)
                .map_err(|e| e.to_string())?;
            let psi = build_coherent_state(&rotor).map_err(|e| e.to_string())?;
            let state = CompositeState::from_rotor(&psi);
            let pulse = pulse_operator(
                &PulseSpec::new(2, PulseKind::Pi, 0.45).map_err(|e| e.to_string())?,
            );
            let twice = pulse
                .apply(&state)
                .and_then(|s| pulse.apply(&s))
                .map_err(|e| e.to_string())?;
            let mut dev = 0.0f64;
            for basis in rotorsim::ramsey::InternalBasis::ALL {
                for (a, b) in state.channel(basis).iter().zip(twice.channel(basis)) {
                    dev = dev.max((a - b).norm());
                }
            }
            Ok((dev, 0.0))
        })(),
        1e-12,
    ));

    // ideal interferometer traces the closed-form fringe
    checks.push(check(
        "ideal fringe closed form",
        (|| {
            let rotor = RotorParams::new(w, 3, 1.0, 14, 0.0, Frame::Lab)
                .map_err(|e| e.to_string())?;
            let psi = RotorState::delta(rotor.window(), 3).map_err(|e| e.to_string())?;
            let tau = 0.7;
            let seq = SequenceSpec::new(tau, 2, Environment::None, SequenceSpec::default_phase_scan(12))
                .map_err(|e| e.to_string())?;
            let scan = run_sequence(&seq, &rotor, &psi).map_err(|e| e.to_string())?;
            let mut dev = 0.0f64;
            for (phi, p) in scan.phases.iter().zip(&scan.p_excited) {
                let expect = 0.5 - 0.5 * (w * 4.0 * tau).cos() * phi.cos();
                dev = dev.max((p - expect).abs());
            }
            Ok((dev, 0.0))
        })(),
        1e-9,
    ));

    // zero-diffusion master equation reduces to the exact route
    checks.push(check(
        "zero-diffusion master equation",
        (|| {
            let rotor = RotorParams::new(w, 0, 5.0, 44, 0.0, Frame::Lab)
                .map_err(|e| e.to_string())?;
            let psi = build_coherent_state(&rotor).map_err(|e| e.to_string())?;
            let scan = |env| -> Result<Vec<f64>, String> {
                let seq = SequenceSpec::new(0.9, 1, env, SequenceSpec::default_phase_scan(10))
                    .map_err(|e| e.to_string())?;
                Ok(run_sequence(&seq, &rotor, &psi).map_err(|e| e.to_string())?.p_excited)
            };
            let exact = scan(Environment::None)?;
            let master = scan(Environment::Lindblad { diffusion: 0.0 })?;
            let dev = exact
                .iter()
                .zip(&master)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            Ok((dev, 0.0))
        })(),
        1e-9,
    ));

    // master-equation contrast sits on the analytic envelope
    checks.push(check(
        "analytic contrast law",
        (|| {
            let (d, dl, tau) = (70.0, 1u32, 0.4);
            let halfwidth = sequence_halfwidth(6.0, d, tau, dl);
            let rotor = RotorParams::new(w, 0, 6.0, halfwidth, 0.0, Frame::Lab)
                .map_err(|e| e.to_string())?;
            let psi = build_coherent_state(&rotor).map_err(|e| e.to_string())?;
            let seq = SequenceSpec::new(
                tau,
                dl,
                Environment::Lindblad { diffusion: d },
                SequenceSpec::default_phase_scan(12),
            )
            .map_err(|e| e.to_string())?;
            let scan = run_sequence(&seq, &rotor, &psi).map_err(|e| e.to_string())?;
            let got = scan.contrast().map_err(|e| e.to_string())?.contrast;
            let want = analytic_contrast(d, w, dl, tau).map_err(|e| e.to_string())?
                * (w * (dl * dl) as f64 * tau).cos().abs();
            Ok((got, want))
        })(),
        1e-5,
    ));

    // beat node of the full signal
    checks.push(check(
        "beat node",
        (|| {
            let tau = std::f64::consts::PI / (2.0 * 9.0 * w);
            let p = full_signal(13.0, w, 3, tau).map_err(|e| e.to_string())?;
            Ok((p, 0.5))
        })(),
        1e-9,
    ));

    // the decay-rate formula is the cube root of the small-time envelope
    checks.push(check(
        "small-time decay rate",
        (|| {
            let (d, dl, tau) = (70.0, 1u32, 0.05);
            let gamma = analytic_gamma(d, w, dl).map_err(|e| e.to_string())?;
            let c = analytic_contrast(d, w, dl, tau).map_err(|e| e.to_string())?;
            Ok((c, (-(gamma * tau).powi(3)).exp()))
        })(),
        1e-6,
    ));

    // centrifugal correction at the published operating point
    checks.push(check(
        "centrifugal correction",
        (|| {
            let c = centrifugal_correction(144.0, 1440.0).map_err(|e| e.to_string())?;
            Ok((c, 2.0e-2))
        })(),
        1e-15,
    ));

    // sideband coupling at the calibrated beam geometry
    checks.push(check(
        "sideband coupling",
        (|| {
            let angle = 5.6_f64.to_radians();
            let g = bessel_coupling(1.0, 2.0 * std::f64::consts::PI / 0.729, 2.2, angle, 1)
                .map_err(|e| e.to_string())?;
            Ok((g.norm(), 0.58184807801210884))
        })(),
        1e-12,
    ));

    // noise generator is deterministic and stream-separated
    checks.push(check(
        "noise determinism",
        (|| {
            let spec = NoiseSpec::new(288.0, AmplitudeTarget::PeakPsd(3.0e-4), 11);
            let a = generate(&spec, 1.0).map_err(|e| e.to_string())?;
            let b = generate(&spec, 1.0).map_err(|e| e.to_string())?;
            let identical = a
                .samples()
                .iter()
                .zip(b.samples())
                .all(|(x, y)| x == y);
            let c = generate_with_stream(&spec, 1.0, 1).map_err(|e| e.to_string())?;
            let distinct = a.samples().iter().zip(c.samples()).any(|(x, y)| x != y);
            Ok((if identical && distinct { 1.0 } else { 0.0 }, 1.0))
        })(),
        0.0,
    ));

    // drive calibration: analytic density at the resonance reproduces the target
    checks.push(check(
        "drive calibration round trip",
        (|| {
            let omega_rot = std::f64::consts::PI * 50.0; // resonance at 50 kHz
            let spec = NoiseSpec::new(50.0, AmplitudeTarget::PeakPsd(1.0), 3);
            let cal = calibrate(&spec, 25.0, omega_rot, 1.0).map_err(|e| e.to_string())?;
            let s = cal.analytic_psd(2.0 * omega_rot).map_err(|e| e.to_string())?;
            Ok((4.0 * s, 25.0))
        })(),
        1e-9,
    ));

    // silent trajectory environment reduces to the exact route
    checks.push(check(
        "silent trajectory route",
        (|| {
            let rotor = RotorParams::new(w, 0, 2.0, 20, 1.0, Frame::Lab)
                .map_err(|e| e.to_string())?;
            let psi = build_coherent_state(&rotor).map_err(|e| e.to_string())?;
            let silent = NoiseSpec::new(50.0, AmplitudeTarget::PeakPsd(0.0), 5);
            let spec = EnsembleSpec::new(2, silent, rotor.clone(), 0.01, 0.4, 5)
                .map_err(|e| e.to_string())?;
            let run = |env| -> Result<Vec<f64>, String> {
                let seq = SequenceSpec::new(0.4, 1, env, SequenceSpec::default_phase_scan(8))
                    .map_err(|e| e.to_string())?;
                Ok(run_sequence(&seq, &rotor, &psi).map_err(|e| e.to_string())?.p_excited)
            };
            let exact = run(Environment::None)?;
            let traj = run(Environment::Trajectory(spec))?;
            let dev = exact
                .iter()
                .zip(&traj)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            Ok((dev, 0.0))
        })(),
        1e-6,
    ));

    let mut failures = 0;
    for c in &checks {
        let status = if c.passed { "ok  " } else { "FAIL" };
        println!("{status} {:<32} {}", c.name, c.detail);
        if !c.passed {
            failures += 1;
        }
    }
    println!("{} of {} invariant checks passed", checks.len() - failures, checks.len());
    if failures > 0 {
        return Err(AppError::Numerical(format!("{failures} invariant checks failed")));
    }
    Ok(())
}
