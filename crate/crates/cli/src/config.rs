//! Run configuration: flat `key = value` text with explicit unit suffixes.
//!
//! The format is deliberately minimal so a reader can audit the physics
//! units at a glance: one key per line, `#` comments, no sections, no
//! includes. Unknown keys, duplicates, and malformed values are rejected
//! with the offending line number. Dimensional keys carry their unit in the
//! name (`omega_r_hz`, `d_target_hbar2_per_ms`); bare counts and quantum
//! numbers do not.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rotorsim::rotor::Frame;
use sha2::{Digest, Sha256};

/// Which evolution backend a command drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    /// Deterministic master-equation route.
    Lindblad,
    /// Stochastic ensemble of noise-driven wavefunctions.
    Trajectory,
}

impl Engine {
    pub(crate) fn parse(s: &str) -> Option<Self> {
        match s {
            "lindblad" => Some(Self::Lindblad),
            "trajectory" => Some(Self::Trajectory),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Lindblad => "lindblad",
            Self::Trajectory => "trajectory",
        }
    }
}

/// Fully resolved run configuration (defaults applied, flags folded in).
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Rotational constant in Hz.
    pub omega_r_hz: f64,
    /// Mean angular momentum of the prepared packet (units of hbar).
    pub ell_bar: i64,
    /// RMS spread of the prepared packet (units of hbar).
    pub sigma_ell: f64,
    /// Quadrupole coupling in rad/ms per unit noise amplitude.
    pub kappa_rad_per_ms: f64,
    /// Angular-momentum window half-width override; commands derive one
    /// from the expected spreading when absent.
    pub halfwidth: Option<usize>,
    /// Phase convention of the propagators.
    pub frame: Frame,
    /// Noise filter center in kHz; defaults to the quadrupole resonance
    /// `2 omega_rot` of the configured packet.
    pub noise_center_khz: Option<f64>,
    /// Noise line full width at half maximum in kHz.
    pub noise_fwhm_khz: f64,
    /// Flat ambient background added to the drive spectral density (ms).
    pub ambient_psd_ms: f64,
    /// Diffusion coefficient the drive is calibrated to produce at the
    /// quadrupole resonance (hbar^2/ms). Zero means no environment.
    pub d_target: f64,
    /// Diffusion sweep values for the scaling command (hbar^2/ms).
    pub d_list: Vec<f64>,
    /// Sideband orders to run.
    pub delta_ells: Vec<u32>,
    /// Hold times in ms; commands derive a grid from the expected decay
    /// rate when absent.
    pub tau_grid_ms: Option<Vec<f64>>,
    /// Number of equally spaced analysis phases per scan.
    pub phase_points: usize,
    /// Evolution backend.
    pub engine: Engine,
    /// Ensemble size for the trajectory engine.
    pub n_traj: usize,
    /// Integrator step override in ms; derived from the resolution rules
    /// when absent.
    pub dt_ms: Option<f64>,
    /// Evolution span for the diffusion and resonance protocols (ms).
    pub t_max_ms: f64,
    /// Recorded time points override.
    pub snapshots: Option<usize>,
    /// Filter centers for the resonance command (kHz); derived around the
    /// resonance when absent.
    pub scan_centers_khz: Option<Vec<f64>>,
    /// Seed of every stochastic stream in the run.
    pub master_seed: u64,
    /// Output directory for CSV artifacts.
    pub out_dir: String,
}

/// Every key the parser accepts, kept sorted for the error message.
const KNOWN_KEYS: &[&str] = &[
    "ambient_psd_ms",
    "d_list_hbar2_per_ms",
    "d_target_hbar2_per_ms",
    "delta_ell_list",
    "dt_ms",
    "ell_bar",
    "engine",
    "frame",
    "halfwidth",
    "kappa_rad_per_ms",
    "master_seed",
    "n_traj",
    "noise_center_khz",
    "noise_fwhm_khz",
    "omega_r_hz",
    "out_dir",
    "phase_points",
    "scan_centers_khz",
    "sigma_ell",
    "snapshots",
    "t_max_ms",
    "tau_grid_ms",
];

/// Raw parse product: values with the line they came from.
struct RawConfig<'a> {
    path: &'a str,
    entries: BTreeMap<&'a str, (usize, &'a str)>,
}

impl<'a> RawConfig<'a> {
    fn fail(&self, key: &str, what: &str) -> String {
        match self.entries.get(key) {
            Some((line, value)) => {
                format!("{}:{}: {what} (got '{value}' for '{key}')", self.path, line)
            }
            None => format!("{}: {what} ('{key}' is not set)", self.path),
        }
    }

    fn take<T, F>(&self, key: &str, parse: F, what: &str) -> Result<Option<T>, String>
    where
        F: Fn(&str) -> Option<T>,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((_, value)) => match parse(value) {
                Some(v) => Ok(Some(v)),
                None => Err(self.fail(key, what)),
            },
        }
    }
}

fn parse_list<T, F: Fn(&str) -> Option<T>>(s: &str, item: F) -> Option<Vec<T>> {
    let parts: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
    if parts.is_empty() {
        return None;
    }
    parts.into_iter().map(item).collect()
}

impl RunConfig {
    /// Parse configuration text. `path` is used only in error messages.
    pub fn parse(text: &str, path: &str) -> Result<Self, String> {
        let mut entries: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(format!(
                    "{path}:{line_no}: expected 'key = value', got '{line}'"
                ));
            };
            let (key, value) = (key.trim(), value.trim());
            if !KNOWN_KEYS.contains(&key) {
                return Err(format!(
                    "{path}:{line_no}: unknown key '{key}' (known keys: {})",
                    KNOWN_KEYS.join(", ")
                ));
            }
            if let Some((first, _)) = entries.get(key) {
                return Err(format!(
                    "{path}:{line_no}: duplicate key '{key}' (first set on line {first})"
                ));
            }
            entries.insert(key, (line_no, value));
        }
        let raw = RawConfig { path, entries };

        let f64_pos = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
        let cfg = RunConfig {
            omega_r_hz: raw
                .take("omega_r_hz", f64_pos, "expected a number in Hz")?
                .ok_or_else(|| raw.fail("omega_r_hz", "required key missing"))?,
            ell_bar: raw
                .take("ell_bar", |s| s.parse::<i64>().ok(), "expected an integer")?
                .unwrap_or(0),
            sigma_ell: raw
                .take("sigma_ell", f64_pos, "expected a number")?
                .unwrap_or(6.0),
            kappa_rad_per_ms: raw
                .take("kappa_rad_per_ms", f64_pos, "expected a number in rad/ms")?
                .unwrap_or(1.0),
            halfwidth: raw.take(
                "halfwidth",
                |s| s.parse::<usize>().ok(),
                "expected a nonnegative integer",
            )?,
            frame: raw
                .take(
                    "frame",
                    |s| match s {
                        "lab" => Some(Frame::Lab),
                        "corotating" => Some(Frame::Corotating),
                        _ => None,
                    },
                    "expected 'lab' or 'corotating'",
                )?
                .unwrap_or(Frame::Lab),
            noise_center_khz: raw.take("noise_center_khz", f64_pos, "expected a number in kHz")?,
            noise_fwhm_khz: raw
                .take("noise_fwhm_khz", f64_pos, "expected a number in kHz")?
                .unwrap_or(19.0),
            ambient_psd_ms: raw
                .take("ambient_psd_ms", f64_pos, "expected a number in ms")?
                .unwrap_or(0.0),
            d_target: raw
                .take("d_target_hbar2_per_ms", f64_pos, "expected a number in hbar^2/ms")?
                .unwrap_or(0.0),
            d_list: raw
                .take(
                    "d_list_hbar2_per_ms",
                    |s| parse_list(s, f64_pos),
                    "expected a comma-separated list of numbers in hbar^2/ms",
                )?
                .unwrap_or_else(|| vec![2.1, 13.0, 70.0, 1000.0]),
            delta_ells: raw
                .take(
                    "delta_ell_list",
                    |s| parse_list(s, |p| p.parse::<u32>().ok()),
                    "expected a comma-separated list of positive integers",
                )?
                .unwrap_or_else(|| vec![1, 2, 3]),
            tau_grid_ms: raw.take(
                "tau_grid_ms",
                |s| parse_list(s, f64_pos),
                "expected a comma-separated list of times in ms",
            )?,
            phase_points: raw
                .take("phase_points", |s| s.parse::<usize>().ok(), "expected an integer")?
                .unwrap_or(12),
            engine: raw
                .take("engine", Engine::parse, "expected 'lindblad' or 'trajectory'")?
                .unwrap_or(Engine::Lindblad),
            n_traj: raw
                .take("n_traj", |s| s.parse::<usize>().ok(), "expected an integer")?
                .unwrap_or(64),
            dt_ms: raw.take("dt_ms", f64_pos, "expected a number in ms")?,
            t_max_ms: raw
                .take("t_max_ms", f64_pos, "expected a number in ms")?
                .unwrap_or(1.0),
            snapshots: raw.take(
                "snapshots",
                |s| s.parse::<usize>().ok(),
                "expected an integer >= 2",
            )?,
            scan_centers_khz: raw.take(
                "scan_centers_khz",
                |s| parse_list(s, f64_pos),
                "expected a comma-separated list of numbers in kHz",
            )?,
            master_seed: raw
                .take("master_seed", |s| s.parse::<u64>().ok(), "expected an unsigned integer")?
                .unwrap_or(20260814),
            out_dir: raw
                .take("out_dir", |s| Some(s.to_string()), "expected a path")?
                .unwrap_or_else(|| "out".to_string()),
        };
        cfg.check(&raw)?;
        Ok(cfg)
    }

    /// Semantic validation, with line-precise messages where the key was
    /// actually present in the file.
    fn check(&self, raw: &RawConfig) -> Result<(), String> {
        if !(self.omega_r_hz > 0.0) {
            return Err(raw.fail("omega_r_hz", "must be positive"));
        }
        if !(self.sigma_ell >= 1.0) {
            return Err(raw.fail("sigma_ell", "must be >= 1 (one ladder step)"));
        }
        if !(self.kappa_rad_per_ms >= 0.0) {
            return Err(raw.fail("kappa_rad_per_ms", "must be nonnegative"));
        }
        if !(self.noise_fwhm_khz > 0.0) {
            return Err(raw.fail("noise_fwhm_khz", "must be positive"));
        }
        if !(self.ambient_psd_ms >= 0.0) {
            return Err(raw.fail("ambient_psd_ms", "must be nonnegative"));
        }
        if !(self.d_target >= 0.0) {
            return Err(raw.fail("d_target_hbar2_per_ms", "must be nonnegative"));
        }
        if self.d_list.iter().any(|&d| !(d > 0.0)) {
            return Err(raw.fail("d_list_hbar2_per_ms", "entries must be positive"));
        }
        if self.delta_ells.is_empty() || self.delta_ells.iter().any(|&l| l == 0) {
            return Err(raw.fail("delta_ell_list", "orders must be >= 1"));
        }
        if let Some(taus) = &self.tau_grid_ms {
            if taus.iter().any(|&t| !(t > 0.0)) {
                return Err(raw.fail("tau_grid_ms", "times must be positive"));
            }
        }
        if self.phase_points < 8 {
            return Err(raw.fail("phase_points", "need at least 8 phases for a contrast fit"));
        }
        if self.n_traj < 2 {
            return Err(raw.fail("n_traj", "ensemble statistics need at least 2 trajectories"));
        }
        if let Some(dt) = self.dt_ms {
            if !(dt > 0.0) {
                return Err(raw.fail("dt_ms", "must be positive"));
            }
        }
        if !(self.t_max_ms > 0.0) {
            return Err(raw.fail("t_max_ms", "must be positive"));
        }
        if let Some(s) = self.snapshots {
            if s < 2 {
                return Err(raw.fail("snapshots", "need at least 2 recorded points"));
            }
        }
        if let Some(centers) = &self.scan_centers_khz {
            if centers.iter().any(|&c| !(c > self.noise_fwhm_khz)) {
                return Err(raw.fail(
                    "scan_centers_khz",
                    "every center must exceed the linewidth (the band must not touch zero)",
                ));
            }
        }
        if let Some(centers) = &self.noise_center_khz {
            if !(centers > &self.noise_fwhm_khz) {
                return Err(raw.fail(
                    "noise_center_khz",
                    "must exceed the linewidth (the band must not touch zero)",
                ));
            }
        }
        Ok(())
    }

    /// Load from a file.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("{}: cannot read config: {e}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Rotational constant in rad/ms.
    pub fn omega_r(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.omega_r_hz * 1.0e-3
    }

    /// Packet rotation rate `2 omega_r ell_bar` in rad/ms.
    pub fn omega_rot(&self) -> f64 {
        2.0 * self.omega_r() * self.ell_bar as f64
    }

    /// Quadrupole resonance `2 omega_rot` expressed in kHz.
    pub fn resonance_khz(&self) -> f64 {
        self.omega_rot() / std::f64::consts::PI
    }

    /// Drive filter center in kHz: explicit, or the quadrupole resonance.
    pub fn drive_center_khz(&self) -> f64 {
        self.noise_center_khz.unwrap_or_else(|| self.resonance_khz())
    }

    /// Canonical serialization of every effective field except the output
    /// directory (which does not influence the numbers). Fixed ordering,
    /// shortest round-trip float formatting.
    pub fn canonical(&self) -> String {
        fn list<T: std::fmt::Debug>(v: &[T]) -> String {
            v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
        }
        let mut s = String::new();
        let _ = writeln!(s, "omega_r_hz={:?}", self.omega_r_hz);
        let _ = writeln!(s, "ell_bar={}", self.ell_bar);
        let _ = writeln!(s, "sigma_ell={:?}", self.sigma_ell);
        let _ = writeln!(s, "kappa_rad_per_ms={:?}", self.kappa_rad_per_ms);
        let _ = writeln!(s, "halfwidth={:?}", self.halfwidth);
        let _ = writeln!(
            s,
            "frame={}",
            match self.frame {
                Frame::Lab => "lab",
                Frame::Corotating => "corotating",
            }
        );
        let _ = writeln!(s, "noise_center_khz={:?}", self.noise_center_khz);
        let _ = writeln!(s, "noise_fwhm_khz={:?}", self.noise_fwhm_khz);
        let _ = writeln!(s, "ambient_psd_ms={:?}", self.ambient_psd_ms);
        let _ = writeln!(s, "d_target_hbar2_per_ms={:?}", self.d_target);
        let _ = writeln!(s, "d_list_hbar2_per_ms={}", list(&self.d_list));
        let _ = writeln!(s, "delta_ell_list={}", list(&self.delta_ells));
        let _ = writeln!(s, "tau_grid_ms={}", self.tau_grid_ms.as_deref().map_or_else(|| "derived".to_string(), list));
        let _ = writeln!(s, "phase_points={}", self.phase_points);
        let _ = writeln!(s, "engine={}", self.engine.name());
        let _ = writeln!(s, "n_traj={}", self.n_traj);
        let _ = writeln!(s, "dt_ms={:?}", self.dt_ms);
        let _ = writeln!(s, "t_max_ms={:?}", self.t_max_ms);
        let _ = writeln!(s, "snapshots={:?}", self.snapshots);
        let _ = writeln!(s, "scan_centers_khz={}", self.scan_centers_khz.as_deref().map_or_else(|| "derived".to_string(), list));
        let _ = writeln!(s, "master_seed={}", self.master_seed);
        s
    }

    /// Short hex digest of [`RunConfig::canonical`], stamped into every
    /// artifact header.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
