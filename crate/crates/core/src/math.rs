//! Small numerical utilities shared across the crate: special functions,
//! grids, and a positive-semidefiniteness check for Hermitian matrices.

use num_complex::Complex64 as C64;

/// `sin(x)/x`, continued analytically through `x = 0`.
///
/// For `|x| < 1e-4` the Taylor series `1 - x^2/6 + x^4/120` is used; its
/// omitted terms are below 1e-26 there, far under f64 resolution.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

/// Bessel function of the first kind `J_n(x)` for integer order.
///
/// Evaluated by the ascending power series
/// `J_n(x) = sum_m (-1)^m / (m! (m+n)!) (x/2)^(2m+n)`,
/// which is accurate to better than 1e-12 for the moderate arguments
/// (`|x| <= 15`) used in sideband-coupling estimates. Negative orders use
/// `J_{-n} = (-1)^n J_n`.
pub fn bessel_j(n: i64, x: f64) -> f64 {
    if n < 0 {
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        return sign * bessel_j(-n, x);
    }
    if x == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    let half = 0.5 * x;
    // term for m = 0: (x/2)^n / n!
    let mut term = 1.0;
    for j in 1..=n {
        term *= half / j as f64;
    }
    let mut sum = term;
    let neg_q = -half * half;
    for m in 1..=200i64 {
        term *= neg_q / (m as f64 * (m + n) as f64);
        sum += term;
        if term.abs() < 1e-17 * sum.abs().max(1e-30) {
            break;
        }
    }
    sum
}

/// Evenly spaced grid of `n >= 2` points covering `[a, b]` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "linspace needs at least two points");
    let step = (b - a) / (n - 1) as f64;
    (0..n).map(|i| a + step * i as f64).collect()
}

/// Check that a dense Hermitian matrix (row-major, `n x n`) has no eigenvalue
/// below `-tol`, by attempting a Cholesky factorization of `A + tol*I`.
///
/// Only the lower triangle of `a` is referenced. The shift makes the test
/// tolerant of roundoff-scale negative eigenvalues: `A + tol*I` is positive
/// definite exactly when every eigenvalue of `A` exceeds `-tol`.
pub fn hermitian_is_psd(a: &[C64], n: usize, tol: f64) -> bool {
    assert_eq!(a.len(), n * n, "matrix size mismatch");
    let mut l = vec![C64::new(0.0, 0.0); n * n];
    for j in 0..n {
        let mut d = a[j * n + j].re + tol;
        for k in 0..j {
            d -= l[j * n + k].norm_sqr();
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let djj = d.sqrt();
        l[j * n + j] = C64::new(djj, 0.0);
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k].conj();
            }
            l[i * n + j] = s / djj;
        }
    }
    true
}
