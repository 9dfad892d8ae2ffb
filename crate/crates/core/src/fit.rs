//! Estimation routines for the standard analysis models.
//!
//! Four fitters cover the quantities the toolkit extracts from simulated (or
//! ingested) data: the cubic-exponential contrast decay and its rate `gamma`,
//! power laws across sideband orders, the Lorentzian resonance line of the
//! diffusion coefficient versus drive frequency, and the linear growth of the
//! angular-momentum variance. All are damped least squares with analytic
//! Jacobians and a simplex fallback; positive-definite parameters (`gamma`,
//! the linewidth) are fit on a log scale so positivity never needs clamping.
//!
//! The fitters are deliberately unit-agnostic: parameters inherit the units
//! of the data axes (reported as `x`, `y`, `1/x`, ... in [`FitResult`]), so
//! rescaling the time axis rescales the parameters exactly covariantly.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Iteration cap of the damped least-squares loop.
const LM_MAX_ITER: usize = 200;
/// Iteration cap of the simplex fallback.
const NM_MAX_ITER: usize = 2000;

/// One named parameter of a fit, with its unit expressed in terms of the
/// data axes (`x` abscissa, `y` ordinate).
#[derive(Debug, Clone)]
pub struct FitParam {
    pub name: &'static str,
    pub value: f64,
    pub unit: &'static str,
}

/// Conditions worth surfacing that do not invalidate the numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitFlag {
    /// The fitted peak lies outside the sampled abscissa range or is not
    /// statistically significant; the line parameters are unreliable.
    PeakNotBracketed,
    /// The fitted variance intercept is negative (unphysical); reported
    /// anyway so the caller can judge.
    NegativeVarianceIntercept,
    /// The damped least-squares step failed (singular or non-converging
    /// normal equations) and the result comes from the simplex fallback.
    SimplexFallback,
}

/// Result of a least-squares fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Fitted parameters in the model's documented order.
    pub params: Vec<FitParam>,
    /// Covariance of the parameters, same ordering; symmetric, and positive
    /// semidefinite whenever the fit converged.
    pub covariance: Vec<Vec<f64>>,
    /// Euclidean norm of the (weighted) residual vector at the solution.
    pub residual_norm: f64,
    /// Whether the optimizer met its tolerance before the iteration cap.
    pub converged: bool,
    /// Iterations consumed.
    pub n_iter: usize,
    /// Non-fatal diagnostics.
    pub flags: Vec<FitFlag>,
}

impl FitResult {
    /// Value of a parameter by name.
    pub fn value(&self, name: &str) -> Result<f64> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.value)
            .ok_or_else(|| Error::Domain(format!("no fitted parameter named '{name}'")))
    }

    /// One-sigma uncertainty of a parameter: the square root of the
    /// corresponding covariance diagonal.
    pub fn uncertainty(&self, name: &str) -> Result<f64> {
        let i = self
            .params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::Domain(format!("no fitted parameter named '{name}'")))?;
        Ok(self.covariance[i][i].max(0.0).sqrt())
    }

    /// Human-readable block: one `name = value(uncertainty) unit` line per
    /// parameter, plus the fit diagnostics.
    pub fn report(&self) -> String {
        let mut out = String::new();
        for p in &self.params {
            let sigma = self.uncertainty(p.name).unwrap_or(0.0);
            out.push_str(&format!(
                "{} = {} {}\n",
                p.name,
                format_with_uncertainty(p.value, sigma),
                p.unit
            ));
        }
        out.push_str(&format!(
            "residual_norm = {:.6e}, converged = {}, n_iter = {}",
            self.residual_norm, self.converged, self.n_iter
        ));
        for f in &self.flags {
            out.push_str(&format!("\nflag: {f:?}"));
        }
        out
    }

    /// CSV rows `param,value,uncertainty,unit`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("param,value,uncertainty,unit\n");
        for p in &self.params {
            let sigma = self.uncertainty(p.name).unwrap_or(0.0);
            out.push_str(&format!("{},{:.9e},{:.9e},{}\n", p.name, p.value, sigma, p.unit));
        }
        out
    }

    fn flag_if(&mut self, cond: bool, flag: FitFlag) {
        if cond && !self.flags.contains(&flag) {
            self.flags.push(flag);
        }
    }
}

/// Format `value(uncertainty)` in the usual compilation style, e.g.
/// `0.71(5)`, `0.71(15)`, `1230(50)`, `156(20)`.
///
/// The uncertainty sets the precision: when its three leading digits fall
/// in 100..=354 it keeps two significant digits, in 355..=949 one, and
/// above that it rounds up to 10 at the next decade.
pub fn format_with_uncertainty(value: f64, sigma: f64) -> String {
    if !(sigma > 0.0) || !sigma.is_finite() || !value.is_finite() {
        return format!("{value:.6}");
    }
    let e = sigma.abs().log10().floor() as i32;
    let three = (sigma / 10f64.powi(e - 2)).round();
    let (k, scaled) = if three >= 950.0 {
        (e + 1, 1.0)
    } else if three < 355.0 {
        (e - 1, (sigma / 10f64.powi(e - 1)).round())
    } else {
        (e, (sigma / 10f64.powi(e)).round())
    };
    if k < 0 {
        let decimals = (-k) as usize;
        format!("{value:.decimals$}({scaled:.0})")
    } else {
        let scale = 10f64.powi(k);
        let v = (value / scale).round() * scale;
        format!("{v:.0}({:.0})", scaled * scale)
    }
}

// ---------------------------------------------------------------------------
// Small dense linear algebra (systems never exceed 4x4 here).
// ---------------------------------------------------------------------------

/// Solve `a x = b` in place by Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()
        })?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for c in (row + 1)..n {
            acc -= a[row][c] * x[c];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Inverse via column-by-column solves; `None` when singular.
fn invert_dense(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut inv = vec![vec![0.0; n]; n];
    for col in 0..n {
        let mut e = vec![0.0; n];
        e[col] = 1.0;
        let x = solve_dense(a.to_vec(), e)?;
        for row in 0..n {
            inv[row][col] = x[row];
        }
    }
    // symmetrize: the inputs here are normal matrices
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (inv[i][j] + inv[j][i]);
            inv[i][j] = s;
            inv[j][i] = s;
        }
    }
    Some(inv)
}

// ---------------------------------------------------------------------------
// Optimizers.
// ---------------------------------------------------------------------------

/// Outcome of the optimizer loop, before covariance scaling.
struct Optimum {
    x: Vec<f64>,
    cost: f64,
    n_iter: usize,
    converged: bool,
    fallback: bool,
}

/// Damped least squares with a Levenberg-style schedule. `eval` fills the
/// residual vector and, when given a buffer, the row-major `m x n` Jacobian.
/// Falls back to a simplex search when the damped normal equations stay
/// singular or the schedule stalls without meeting tolerance.
fn least_squares(
    init: &[f64],
    m: usize,
    eval: &dyn Fn(&[f64], &mut [f64], Option<&mut [f64]>),
) -> Optimum {
    let n = init.len();
    let mut x = init.to_vec();
    let mut r = vec![0.0; m];
    let mut jac = vec![0.0; m * n];
    let mut r_trial = vec![0.0; m];

    eval(&x, &mut r, Some(&mut jac));
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iters = 0;

    for iter in 1..=LM_MAX_ITER {
        iters = iter;
        // normal equations
        let mut jtj = vec![vec![0.0; n]; n];
        let mut jtr = vec![0.0; n];
        for i in 0..m {
            for p in 0..n {
                jtr[p] += jac[i * n + p] * r[i];
                for q in p..n {
                    jtj[p][q] += jac[i * n + p] * jac[i * n + q];
                }
            }
        }
        for p in 0..n {
            for q in 0..p {
                jtj[p][q] = jtj[q][p];
            }
        }
        if jtr.iter().map(|g| g.abs()).fold(0.0, f64::max) < 1e-14 * (1.0 + cost) {
            converged = true;
            break;
        }

        // try increasingly damped steps until one reduces the cost
        let mut improved = false;
        for _ in 0..12 {
            let mut damped = jtj.clone();
            for (p, row) in damped.iter_mut().enumerate() {
                row[p] += lambda * jtj[p][p].max(1e-30);
            }
            let rhs: Vec<f64> = jtr.iter().map(|g| -g).collect();
            let Some(step) = solve_dense(damped, rhs) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = x.iter().zip(&step).map(|(a, d)| a + d).collect();
            eval(&trial, &mut r_trial, None);
            let trial_cost: f64 = r_trial.iter().map(|v| v * v).sum();
            if trial_cost.is_finite() && trial_cost <= cost {
                let tiny_step = step
                    .iter()
                    .zip(&x)
                    .all(|(d, v)| d.abs() < 1e-12 * (1.0 + v.abs()));
                let tiny_gain = cost - trial_cost < 1e-14 * (1.0 + cost);
                x = trial;
                cost = trial_cost;
                std::mem::swap(&mut r, &mut r_trial);
                eval(&x, &mut r, Some(&mut jac));
                lambda = (lambda * 0.3).max(1e-14);
                improved = true;
                if tiny_step || tiny_gain {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if converged {
            break;
        }
        if !improved {
            // the schedule stalled; let the simplex have a go
            let nm = nelder_mead(&x, m, eval);
            if nm.cost < cost {
                return Optimum { fallback: true, ..nm };
            }
            return Optimum { x, cost, n_iter: iters, converged: false, fallback: true };
        }
    }
    Optimum { x, cost, n_iter: iters, converged, fallback: false }
}

/// Standard Nelder-Mead simplex on the residual sum of squares.
fn nelder_mead(
    init: &[f64],
    m: usize,
    eval: &dyn Fn(&[f64], &mut [f64], Option<&mut [f64]>),
) -> Optimum {
    let n = init.len();
    let mut r = vec![0.0; m];
    let mut cost_of = |x: &[f64]| -> f64 {
        eval(x, &mut r, None);
        let c: f64 = r.iter().map(|v| v * v).sum();
        if c.is_finite() {
            c
        } else {
            f64::MAX
        }
    };
    let mut simplex: Vec<Vec<f64>> = vec![init.to_vec()];
    for p in 0..n {
        let mut v = init.to_vec();
        v[p] += 0.05 * (1.0 + v[p].abs());
        simplex.push(v);
    }
    let mut costs: Vec<f64> = simplex.iter().map(|v| cost_of(v)).collect();
    let mut iters = 0;
    let mut converged = false;

    for iter in 1..=NM_MAX_ITER {
        iters = iter;
        // order best..worst
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| costs[a].partial_cmp(&costs[b]).unwrap());
        let ordered: Vec<Vec<f64>> = idx.iter().map(|&i| simplex[i].clone()).collect();
        let ordered_costs: Vec<f64> = idx.iter().map(|&i| costs[i]).collect();
        simplex = ordered;
        costs = ordered_costs;
        if costs[n] - costs[0] < 1e-14 * (1.0 + costs[0]) {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|p| simplex[..n].iter().map(|v| v[p]).sum::<f64>() / n as f64)
            .collect();
        let at = |t: f64| -> Vec<f64> {
            (0..n).map(|p| centroid[p] + t * (simplex[n][p] - centroid[p])).collect()
        };
        let reflected = at(-1.0);
        let c_ref = cost_of(&reflected);
        if c_ref < costs[0] {
            let expanded = at(-2.0);
            let c_exp = cost_of(&expanded);
            if c_exp < c_ref {
                simplex[n] = expanded;
                costs[n] = c_exp;
            } else {
                simplex[n] = reflected;
                costs[n] = c_ref;
            }
        } else if c_ref < costs[n - 1] {
            simplex[n] = reflected;
            costs[n] = c_ref;
        } else {
            let contracted = if c_ref < costs[n] { at(-0.5) } else { at(0.5) };
            let c_con = cost_of(&contracted);
            if c_con < costs[n].min(c_ref) {
                simplex[n] = contracted;
                costs[n] = c_con;
            } else {
                let head = simplex[0].clone();
                for v in simplex.iter_mut().skip(1) {
                    for p in 0..n {
                        v[p] = 0.5 * (v[p] + head[p]);
                    }
                }
                for (v, c) in simplex.iter().zip(costs.iter_mut()).skip(1) {
                    *c = cost_of(v);
                }
            }
        }
    }
    let best = simplex.remove(0);
    let cost = costs[0];
    Optimum { x: best, cost, n_iter: iters, converged, fallback: true }
}

/// Covariance of the parameters at the optimum: inverse normal matrix scaled
/// by the residual variance `SSR / (m - n)`. The Jacobian is rebuilt by the
/// model evaluator (analytically).
fn covariance_at(
    opt: &Optimum,
    m: usize,
    eval: &dyn Fn(&[f64], &mut [f64], Option<&mut [f64]>),
) -> Vec<Vec<f64>> {
    let n = opt.x.len();
    let mut r = vec![0.0; m];
    let mut jac = vec![0.0; m * n];
    eval(&opt.x, &mut r, Some(&mut jac));
    let mut jtj = vec![vec![0.0; n]; n];
    for i in 0..m {
        for p in 0..n {
            for q in p..n {
                jtj[p][q] += jac[i * n + p] * jac[i * n + q];
            }
        }
    }
    for p in 0..n {
        for q in 0..p {
            jtj[p][q] = jtj[q][p];
        }
    }
    let sigma2 = if m > n { opt.cost / (m - n) as f64 } else { 0.0 };
    match invert_dense(&jtj) {
        Some(inv) => inv
            .into_iter()
            .map(|row| row.into_iter().map(|v| v * sigma2).collect())
            .collect(),
        None => vec![vec![f64::NAN; n]; n],
    }
}

fn check_finite(pairs: &[(f64, f64)], what: &str) -> Result<()> {
    if pairs.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Domain(format!("{what} contain non-finite entries")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Model: cubic-exponential contrast decay.
// ---------------------------------------------------------------------------

/// Published rule of thumb for when the sideband-beat modulation is resolved
/// within the decay and must be part of the fitted profile:
/// `delta_ell^2 omega_r / (2 pi gamma) > 0.1`.
pub fn modulation_is_resolved(omega_r: f64, delta_ell: u32, gamma: f64) -> bool {
    (delta_ell * delta_ell) as f64 * omega_r / (2.0 * PI * gamma) > 0.1
}

/// Fit `C(tau) = C0 exp[-(gamma tau)^3]`, optionally multiplied by the ideal
/// beat profile `|cos(omega_r delta_ell^2 tau)|`.
///
/// Parameters (in order): `c0` (`y`), `gamma` (`1/x`). Internally the decay
/// rate is fit as `ln gamma`, which keeps it positive without constraints;
/// the reported value and covariance are transformed back. Requires at least
/// five points whose span covers one fitted `1/gamma`; `with_modulation`
/// uses the supplied `omega_r` and `delta_ell` as a fixed (not fitted)
/// profile, with `c0` absorbing any overall amplitude loss.
pub fn fit_stretched_exp(
    data: &[(f64, f64)],
    with_modulation: bool,
    omega_r: f64,
    delta_ell: u32,
) -> Result<FitResult> {
    if data.len() < 5 {
        return Err(Error::InsufficientLength(format!(
            "decay fit needs at least 5 points, got {}",
            data.len()
        )));
    }
    check_finite(data, "decay data")?;
    if data.iter().any(|&(t, _)| t < 0.0) {
        return Err(Error::Domain("decay times must be nonnegative".into()));
    }
    if with_modulation && (!(omega_r > 0.0) || delta_ell == 0) {
        return Err(Error::Domain(
            "modulated fits need omega_r > 0 and a sideband order >= 1".into(),
        ));
    }
    let beat = move |t: f64| {
        if with_modulation {
            (omega_r * (delta_ell * delta_ell) as f64 * t).cos().abs()
        } else {
            1.0
        }
    };

    // starting point: amplitude from the earliest sample, rate from the
    // first crossing of C0/e (beat divided out where it is safely nonzero)
    let mut sorted: Vec<(f64, f64)> = data.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let c0_init = sorted[0].1.abs().max(1e-12);
    let t_max = sorted.last().unwrap().0;
    let mut gamma_init = 0.5 / t_max.max(1e-12);
    for &(t, y) in &sorted {
        let b = beat(t);
        if t > 0.0 && b > 0.2 && y / (c0_init * b) < (-1.0f64).exp() {
            gamma_init = 1.0 / t;
            break;
        }
    }

    let m = data.len();
    let pts = data.to_vec();
    let eval = move |p: &[f64], r: &mut [f64], jac: Option<&mut [f64]>| {
        let (c0, lng) = (p[0], p[1]);
        let g = lng.exp();
        match jac {
            None => {
                for (i, &(t, y)) in pts.iter().enumerate() {
                    let cube = (g * t).powi(3);
                    r[i] = c0 * (-cube).exp() * beat(t) - y;
                }
            }
            Some(j) => {
                for (i, &(t, y)) in pts.iter().enumerate() {
                    let cube = (g * t).powi(3);
                    let shape = (-cube).exp() * beat(t);
                    r[i] = c0 * shape - y;
                    j[2 * i] = shape;
                    j[2 * i + 1] = -3.0 * cube * c0 * shape;
                }
            }
        }
    };

    let opt = least_squares(&[c0_init, gamma_init.ln()], m, &eval);
    let cov_internal = covariance_at(&opt, m, &eval);
    let (c0, gamma) = (opt.x[0], opt.x[1].exp());

    let span = t_max - sorted[0].0;
    if opt.converged && span * gamma < 1.0 {
        return Err(Error::Domain(format!(
            "decay data span {span:.4} is shorter than one fitted decay time {:.4}",
            1.0 / gamma
        )));
    }

    // transform (c0, ln gamma) covariance to (c0, gamma)
    let covariance = vec![
        vec![cov_internal[0][0], gamma * cov_internal[0][1]],
        vec![gamma * cov_internal[1][0], gamma * gamma * cov_internal[1][1]],
    ];
    let mut result = FitResult {
        params: vec![
            FitParam { name: "c0", value: c0, unit: "y" },
            FitParam { name: "gamma", value: gamma, unit: "1/x" },
        ],
        covariance,
        residual_norm: opt.cost.sqrt(),
        converged: opt.converged,
        n_iter: opt.n_iter,
        flags: Vec::new(),
    };
    result.flag_if(opt.fallback, FitFlag::SimplexFallback);
    Ok(result)
}

// ---------------------------------------------------------------------------
// Model: power law across sideband orders.
// ---------------------------------------------------------------------------

/// Fit `gamma = A * delta_ell^p` by weighted linear regression in log-log
/// space. Parameters (in order): `amplitude` (`y`), `exponent` (`1`).
///
/// `uncertainties`, when given, are one-sigma errors on the ordinate and set
/// the per-point weights (`sigma_ln = sigma / gamma`). Requires at least
/// three distinct abscissas; nonpositive values on either axis are domain
/// errors because of the logarithms.
pub fn fit_powerlaw(pairs: &[(f64, f64)], uncertainties: Option<&[f64]>) -> Result<FitResult> {
    check_finite(pairs, "power-law data")?;
    if pairs.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return Err(Error::Domain(
            "power-law fits need strictly positive abscissas and ordinates".into(),
        ));
    }
    let mut distinct: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::InsufficientLength(format!(
            "power-law fit needs at least 3 distinct abscissas, got {}",
            distinct.len()
        )));
    }
    if let Some(sig) = uncertainties {
        if sig.len() != pairs.len() {
            return Err(Error::Domain("one uncertainty per data point is required".into()));
        }
        if sig.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain("uncertainties must be positive and finite".into()));
        }
    }

    let logs: Vec<(f64, f64)> = pairs.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let weights: Option<Vec<f64>> = uncertainties.map(|sig| {
        sig.iter().zip(pairs).map(|(&s, &(_, y))| (y / s) * (y / s)).collect()
    });
    let lin = weighted_line(&logs, weights.as_deref())?;

    let a = lin.intercept.exp();
    // transform (ln A, p) to (A, p)
    let covariance = vec![
        vec![a * a * lin.cov[0][0], a * lin.cov[0][1]],
        vec![a * lin.cov[1][0], lin.cov[1][1]],
    ];
    Ok(FitResult {
        params: vec![
            FitParam { name: "amplitude", value: a, unit: "y" },
            FitParam { name: "exponent", value: lin.slope, unit: "1" },
        ],
        covariance,
        residual_norm: lin.residual_norm,
        converged: true,
        n_iter: 1,
        flags: Vec::new(),
    })
}

/// Weighted straight line `y = intercept + slope x`.
struct Line {
    intercept: f64,
    slope: f64,
    cov: [[f64; 2]; 2],
    residual_norm: f64,
}

fn weighted_line(pts: &[(f64, f64)], weights: Option<&[f64]>) -> Result<Line> {
    let m = pts.len();
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &(x, y)) in pts.iter().enumerate() {
        let wi = w(i);
        sw += wi;
        sx += wi * x;
        sy += wi * y;
        sxx += wi * x * x;
        sxy += wi * x * y;
    }
    let det = sw * sxx - sx * sx;
    if det.abs() < 1e-12 * sw * sxx.max(1.0) {
        return Err(Error::Domain("abscissas are degenerate; the line is undetermined".into()));
    }
    let intercept = (sxx * sy - sx * sxy) / det;
    let slope = (sw * sxy - sx * sy) / det;
    let ssr: f64 = pts
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            let r = y - intercept - slope * x;
            w(i) * r * r
        })
        .sum();
    let sigma2 = if m > 2 { ssr / (m - 2) as f64 } else { 0.0 };
    let cov = [
        [sigma2 * sxx / det, -sigma2 * sx / det],
        [-sigma2 * sx / det, sigma2 * sw / det],
    ];
    Ok(Line { intercept, slope, cov, residual_norm: ssr.sqrt() })
}

// ---------------------------------------------------------------------------
// Model: Lorentzian resonance line.
// ---------------------------------------------------------------------------

/// Fit `y = floor + peak / (1 + (2 (f - center) / fwhm)^2)`.
///
/// Parameters (in order): `center` (`x`), `fwhm` (`x`), `peak` (`y`),
/// `floor` (`y`). The width is fit as a logarithm internally. Requires at
/// least six points; when the fitted center falls outside the sampled range
/// or the peak is insignificant against its own uncertainty, the result is
/// flagged [`FitFlag::PeakNotBracketed`] rather than rejected.
pub fn fit_lorentzian(pairs: &[(f64, f64)]) -> Result<FitResult> {
    if pairs.len() < 6 {
        return Err(Error::InsufficientLength(format!(
            "line fit needs at least 6 points, got {}",
            pairs.len()
        )));
    }
    check_finite(pairs, "line data")?;
    let f_lo = pairs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let f_hi = pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if f_hi - f_lo <= 0.0 {
        return Err(Error::Domain("line fit needs a spread of abscissas".into()));
    }

    let y_lo = pairs.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let (f_peak, y_hi) = pairs
        .iter()
        .fold((0.0, f64::NEG_INFINITY), |acc, &(f, y)| if y > acc.1 { (f, y) } else { acc });
    let init = [
        f_peak,
        (0.25 * (f_hi - f_lo)).ln(),
        (y_hi - y_lo).max(1e-12 * y_hi.abs().max(1.0)),
        y_lo,
    ];

    let m = pairs.len();
    let pts = pairs.to_vec();
    let eval = move |p: &[f64], r: &mut [f64], jac: Option<&mut [f64]>| {
        let (center, lnw, peak, floor) = (p[0], p[1], p[2], p[3]);
        let w = lnw.exp();
        for (i, &(f, y)) in pts.iter().enumerate() {
            let u = 2.0 * (f - center) / w;
            let den = 1.0 + u * u;
            r[i] = floor + peak / den - y;
        }
        if let Some(j) = jac {
            for (i, &(f, _)) in pts.iter().enumerate() {
                let u = 2.0 * (f - center) / w;
                let den = 1.0 + u * u;
                let den2 = den * den;
                j[4 * i] = 4.0 * peak * u / (w * den2);
                // d/d(ln w) = w * d/dw; d(den)/dw = -2 u^2 / w
                j[4 * i + 1] = 2.0 * peak * u * u / den2;
                j[4 * i + 2] = 1.0 / den;
                j[4 * i + 3] = 1.0;
            }
        }
    };

    let opt = least_squares(&init, m, &eval);
    let cov_internal = covariance_at(&opt, m, &eval);
    let (center, fwhm, peak, floor) = (opt.x[0], opt.x[1].exp(), opt.x[2], opt.x[3]);

    // transform ln(fwhm) row/column of the covariance
    let mut covariance = cov_internal;
    for j in 0..4 {
        covariance[1][j] *= fwhm;
        covariance[j][1] *= fwhm;
    }

    let mut result = FitResult {
        params: vec![
            FitParam { name: "center", value: center, unit: "x" },
            FitParam { name: "fwhm", value: fwhm, unit: "x" },
            FitParam { name: "peak", value: peak, unit: "y" },
            FitParam { name: "floor", value: floor, unit: "y" },
        ],
        covariance,
        residual_norm: opt.cost.sqrt(),
        converged: opt.converged,
        n_iter: opt.n_iter,
        flags: Vec::new(),
    };
    let peak_se = result.uncertainty("peak")?;
    result.flag_if(
        !(f_lo..=f_hi).contains(&center) || peak.abs() <= 2.0 * peak_se || peak <= 0.0,
        FitFlag::PeakNotBracketed,
    );
    result.flag_if(opt.fallback, FitFlag::SimplexFallback);
    Ok(result)
}

// ---------------------------------------------------------------------------
// Model: linear variance growth.
// ---------------------------------------------------------------------------

/// Fit `Var(t) = sigma0_sq + 2 D t` by (optionally weighted) linear
/// regression. Parameters (in order): `sigma0_sq` (`y`), `d` (`y/x`, i.e.
/// the diffusion coefficient, half the fitted slope).
///
/// A negative fitted intercept is unphysical for a variance; it is reported
/// as-is and flagged [`FitFlag::NegativeVarianceIntercept`].
pub fn fit_variance_growth(
    pairs: &[(f64, f64)],
    uncertainties: Option<&[f64]>,
) -> Result<FitResult> {
    if pairs.len() < 3 {
        return Err(Error::InsufficientLength(format!(
            "variance-growth fit needs at least 3 times, got {}",
            pairs.len()
        )));
    }
    check_finite(pairs, "variance data")?;
    if let Some(sig) = uncertainties {
        if sig.len() != pairs.len() {
            return Err(Error::Domain("one uncertainty per data point is required".into()));
        }
        if sig.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain("uncertainties must be positive and finite".into()));
        }
    }
    let weights: Option<Vec<f64>> =
        uncertainties.map(|sig| sig.iter().map(|&s| 1.0 / (s * s)).collect());
    let lin = weighted_line(pairs, weights.as_deref())?;

    let d = 0.5 * lin.slope;
    let covariance = vec![
        vec![lin.cov[0][0], 0.5 * lin.cov[0][1]],
        vec![0.5 * lin.cov[1][0], 0.25 * lin.cov[1][1]],
    ];
    let mut result = FitResult {
        params: vec![
            FitParam { name: "sigma0_sq", value: lin.intercept, unit: "y" },
            FitParam { name: "d", value: d, unit: "y/x" },
        ],
        covariance,
        residual_norm: lin.residual_norm,
        converged: true,
        n_iter: 1,
        flags: Vec::new(),
    };
    result.flag_if(lin.intercept < 0.0, FitFlag::NegativeVarianceIntercept);
    Ok(result)
}

/// Packet width from the decay time of the first free-evolution fringe:
/// the fringe linewidth is `4 omega_r sigma_ell`, and the decay time is its
/// reciprocal, so `sigma_ell = 1 / (4 omega_r decay_time)`.
///
/// `omega_r` must be in radians per the same time unit as `decay_time`.
pub fn sigma_from_fringe_decay(decay_time: f64, omega_r: f64) -> Result<f64> {
    if !(decay_time > 0.0) {
        return Err(Error::Domain(format!(
            "decay time must be positive, got {decay_time}"
        )));
    }
    if !(omega_r > 0.0) || !omega_r.is_finite() {
        return Err(Error::Domain(format!("omega_r must be positive, got {omega_r}")));
    }
    Ok(1.0 / (4.0 * omega_r * decay_time))
}
