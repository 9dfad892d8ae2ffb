//! End-to-end checks of the command-line interface: exit codes, artifact
//! headers, schema round-trips, and seed/thread determinism. Every test
//! drives the compiled binary exactly as a user would.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rotorsim::fit::fit_stretched_exp;
use rotorsim::ramsey::analytic_gamma;

const W_R: f64 = 0.08168140899333462; // 2*pi*13 Hz in rad/ms

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rotorsim"))
}

/// Fresh scratch directory under the system temp root.
fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rotorsim-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    binary().args(args).output().expect("binary should launch")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Split an artifact into its provenance header and parsed numeric rows.
fn parse_artifact(path: &Path) -> (String, Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    assert!(header.starts_with("# config_hash="), "missing provenance header in {path:?}");
    let columns: Vec<String> =
        lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect())
        .collect();
    (header, columns, rows)
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = run(&["diffusion"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("--config"));
}

#[test]
fn config_errors_carry_the_offending_line() {
    let dir = scratch("badkey");
    let cfg = write_config(&dir, "bad.cfg", "omega_r_hz = 13\nbogus_key = 1\n");
    let out = run(&["diffusion", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains(":2:") && err.contains("bogus_key"), "stderr was: {err}");

    let cfg = write_config(&dir, "bad2.cfg", "omega_r_hz = 13\n\nsigma_ell = zero\n");
    let out = run(&["ramsey", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains(":3:") && err.contains("sigma_ell"), "stderr was: {err}");
}

#[test]
fn engine_incompatible_with_the_protocol_is_rejected() {
    let dir = scratch("engine");
    let cfg = write_config(
        &dir,
        "res.cfg",
        "omega_r_hz = 13\nell_bar = 2000\nd_target_hbar2_per_ms = 300\nengine = trajectory\n",
    );
    let out = run(&["resonance", "--config", cfg.to_str().unwrap(), "--engine", "lindblad"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("trajectory"));
}

#[test]
fn validate_passes_without_a_config() {
    let out = run(&["validate"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("11 of 11 invariant checks passed"), "stdout was: {text}");
}

/// The emitted decay curve must round-trip: re-fitting the CSV numbers
/// reproduces the decay rate stored in the fit artifact.
#[test]
fn ramsey_artifacts_round_trip_through_the_fitter() {
    let dir = scratch("roundtrip");
    let cfg = write_config(
        &dir,
        "ramsey.cfg",
        "omega_r_hz = 13\nsigma_ell = 6\nd_target_hbar2_per_ms = 70\n\
         delta_ell_list = 1\nengine = lindblad\n",
    );
    let out_dir = dir.join("out");
    let out = run(&[
        "ramsey",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));

    let (header, columns, rows) = parse_artifact(&out_dir.join("ramsey_order_1.csv"));
    assert!(header.contains("seed=20260814"));
    assert_eq!(columns, ["tau_ms", "contrast", "contrast_se", "fringe_phase"]);
    let curve: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[1])).collect();

    let refit = fit_stretched_exp(&curve, false, W_R, 1).unwrap();
    let gamma_refit = refit.value("gamma").unwrap();

    let text = std::fs::read_to_string(out_dir.join("ramsey_fit_order_1.csv")).unwrap();
    let stored: f64 = text
        .lines()
        .find(|l| l.starts_with("gamma,"))
        .expect("fit artifact lists gamma")
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();

    // the curve is stored at nine significant digits, so the re-fit agrees
    // to far better than the fit uncertainty
    assert!(
        (gamma_refit - stored).abs() < 1e-6 * stored,
        "re-fit {gamma_refit} vs stored {stored}"
    );
    let theory = analytic_gamma(70.0, W_R, 1).unwrap();
    assert!((gamma_refit - theory).abs() < 0.03 * theory);
}

/// Identical seeds give byte-identical artifacts regardless of worker
/// threads; a different seed changes the draw but keeps the schema.
#[test]
fn stochastic_artifacts_are_deterministic_across_thread_counts() {
    let dir = scratch("determinism");
    let cfg = write_config(
        &dir,
        "traj.cfg",
        "omega_r_hz = 13\nell_bar = 600\nsigma_ell = 8\nd_target_hbar2_per_ms = 156\n\
         engine = trajectory\nn_traj = 32\nt_max_ms = 0.12\n",
    );
    let cfg = cfg.to_str().unwrap().to_string();

    let run_into = |tag: &str, threads: &str, seed: Option<&str>| -> PathBuf {
        let out_dir = dir.join(tag);
        let mut args = vec![
            "diffusion".to_string(),
            "--config".into(),
            cfg.clone(),
            "--out".into(),
            out_dir.to_str().unwrap().into(),
            "--threads".into(),
            threads.into(),
        ];
        if let Some(s) = seed {
            args.push("--seed".into());
            args.push(s.into());
        }
        let out = binary().args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
        out_dir
    };

    let a = run_into("a", "1", None);
    let b = run_into("b", "8", None);
    let c = run_into("c", "1", None);
    let other = run_into("d", "4", Some("7"));

    for name in ["diffusion_series.csv", "diffusion_fit.csv"] {
        let bytes_a = std::fs::read(a.join(name)).unwrap();
        assert_eq!(bytes_a, std::fs::read(b.join(name)).unwrap(), "{name} differs with threads");
        assert_eq!(bytes_a, std::fs::read(c.join(name)).unwrap(), "{name} differs on rerun");
    }
    let series_a = std::fs::read(a.join("diffusion_series.csv")).unwrap();
    let series_other = std::fs::read(other.join("diffusion_series.csv")).unwrap();
    assert_ne!(series_a, series_other, "a different seed must change the draw");
    assert!(String::from_utf8_lossy(&series_other).starts_with("# config_hash="));
}
