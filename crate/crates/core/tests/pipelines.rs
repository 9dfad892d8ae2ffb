//! End-to-end pipelines: master-equation sequences feed the fitters and the
//! fitted quantities land on their closed-form targets.

use rotorsim::fit::{fit_powerlaw, fit_stretched_exp, fit_variance_growth, modulation_is_resolved};
use rotorsim::lindblad::{evolve, LindbladParams};
use rotorsim::ramsey::{
    analytic_gamma, run_sequence, sequence_halfwidth, Environment, SequenceSpec,
};
use rotorsim::rotor::{
    build_coherent_state, moments, Frame, LadderWindow, RotorDensity, RotorParams,
};

const W_R: f64 = 0.08168140899333462; // 2 pi * 0.013 rad/ms

/// Interferometer contrast versus hold time from the deterministic
/// master-equation route, on `n` hold times linearly spaced over
/// `[0.12, span_factor / analytic gamma]`.
fn contrast_curve(diffusion: f64, delta_ell: u32, n: usize, span_factor: f64) -> Vec<(f64, f64)> {
    let gamma = analytic_gamma(diffusion, W_R, delta_ell).unwrap();
    let t0 = 0.12;
    let t_max = span_factor / gamma;
    let halfwidth = sequence_halfwidth(6.0, diffusion, t_max, delta_ell);
    let rotor = RotorParams::new(W_R, 0, 6.0, halfwidth, 0.0, Frame::Lab).unwrap();
    let psi0 = build_coherent_state(&rotor).unwrap();

    (0..n)
        .map(|i| {
            let tau = t0 + (t_max - t0) * i as f64 / (n - 1) as f64;
            let seq = SequenceSpec::new(
                tau,
                delta_ell,
                Environment::Lindblad { diffusion },
                SequenceSpec::default_phase_scan(12),
            )
            .unwrap();
            let scan = run_sequence(&seq, &rotor, &psi0).unwrap();
            (tau, scan.contrast().unwrap().contrast)
        })
        .collect()
}

/// Decay rate fitted from a simulated contrast curve, with the modulation
/// profile included per the resolvability rule.
fn fitted_gamma(diffusion: f64, delta_ell: u32) -> (f64, f64) {
    let gamma = analytic_gamma(diffusion, W_R, delta_ell).unwrap();
    let curve = contrast_curve(diffusion, delta_ell, 14, 1.4);
    let with_mod = modulation_is_resolved(W_R, delta_ell, gamma);
    let fit = fit_stretched_exp(&curve, with_mod, W_R, delta_ell).unwrap();
    assert!(fit.converged, "decay fit failed at D={diffusion}, order {delta_ell}");
    (fit.value("gamma").unwrap(), fit.uncertainty("gamma").unwrap())
}

#[test]
fn simulated_decay_rate_matches_the_analytic_gamma() {
    // second-sideband curve at the workhorse diffusion strength; the
    // resolvability rule keeps the beat profile out of this fit, whose
    // residual model error is known to stay within the tolerance
    let (diffusion, delta_ell) = (70.0, 2u32);
    let gamma = analytic_gamma(diffusion, W_R, delta_ell).unwrap();
    let curve = contrast_curve(diffusion, delta_ell, 14, 1.4);

    assert!(!modulation_is_resolved(W_R, delta_ell, gamma));
    let plain = fit_stretched_exp(&curve, false, W_R, delta_ell).unwrap();
    let got = plain.value("gamma").unwrap();
    assert!(
        (got - gamma).abs() / gamma < 0.03,
        "plain fit: {got} vs {gamma}"
    );

    // dividing the known beat back in, the profile is the small-time limit
    // of the exact envelope and the recovery tightens below one percent
    let modulated = fit_stretched_exp(&curve, true, W_R, delta_ell).unwrap();
    let got = modulated.value("gamma").unwrap();
    assert!(
        (got - gamma).abs() / gamma < 0.01,
        "modulated fit: {got} vs {gamma}"
    );
}

#[test]
fn lindblad_moments_recover_the_diffusion_coefficient() {
    // diagonal packet spreading under pure hopping: Var grows at exactly 2D
    let diffusion = 156.0;
    let rotor = RotorParams::new(W_R, 0, 6.0, 120, 0.0, Frame::Lab).unwrap();
    let window = LadderWindow::centered(0, 120);
    let pops: Vec<f64> = window
        .iter()
        .map(|ell| (-((ell * ell) as f64) / (2.0 * 36.0)).exp())
        .collect();
    let total: f64 = pops.iter().sum();
    let pops: Vec<f64> = pops.iter().map(|p| p / total).collect();
    let rho0 = RotorDensity::from_populations(window, &pops).unwrap();

    let params = LindbladParams::new(diffusion, rotor, 3.0e-4, 1.0).unwrap();
    let series = evolve(&rho0, &params).unwrap();
    assert!(series.final_leakage() < 1e-9);

    let pts: Vec<(f64, f64)> = series
        .times
        .iter()
        .zip(&series.states)
        .map(|(&t, rho)| (t, moments(rho).1))
        .collect();
    let fit = fit_variance_growth(&pts, None).unwrap();
    let d = fit.value("d").unwrap();
    assert!(
        (d - diffusion).abs() / diffusion < 0.01,
        "fitted D = {d} vs {diffusion}"
    );
    assert!(fit.flags.is_empty(), "flags: {:?}", fit.flags);
    // the packet started at width 36
    assert!((fit.value("sigma0_sq").unwrap() - 36.0).abs() < 0.5);
}

#[test]
fn scaling_sweep_lands_on_the_universal_exponents() {
    let d_values = [2.1, 13.0, 70.0, 1000.0];
    let orders = [1u32, 2, 3];

    let mut gammas = Vec::new(); // (D, order) -> (value, se)
    for &d in &d_values {
        for &dl in &orders {
            gammas.push(fitted_gamma(d, dl));
        }
    }

    // order exponent per diffusion strength, then the inverse-variance
    // average across the sweep
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &d) in d_values.iter().enumerate() {
        let pts: Vec<(f64, f64)> = orders
            .iter()
            .enumerate()
            .map(|(j, &dl)| (dl as f64, gammas[3 * i + j].0))
            .collect();
        let sig: Vec<f64> = (0..3).map(|j| gammas[3 * i + j].1.max(1e-12)).collect();
        let fit = fit_powerlaw(&pts, Some(&sig)).unwrap();
        let p = fit.value("exponent").unwrap();
        let se = fit.uncertainty("exponent").unwrap().max(1e-6);
        num += p / (se * se);
        den += 1.0 / (se * se);
        // every individual triplet stays in the published bracket
        assert!((0.55..0.75).contains(&p), "D={d}: exponent {p}");
    }
    let averaged = num / den;
    assert!(
        (averaged - 2.0 / 3.0).abs() < 0.02,
        "averaged exponent {averaged}"
    );

    // diffusion exponent: slope of ln gamma vs ln D per order, averaged
    let mut slope_sum = 0.0;
    for j in 0..3 {
        let pts: Vec<(f64, f64)> =
            d_values.iter().enumerate().map(|(i, &d)| (d, gammas[3 * i + j].0)).collect();
        let fit = fit_powerlaw(&pts, None).unwrap();
        slope_sum += fit.value("exponent").unwrap();
    }
    let slope = slope_sum / 3.0;
    assert!((slope - 1.0 / 3.0).abs() < 0.02, "diffusion slope {slope}");
}
