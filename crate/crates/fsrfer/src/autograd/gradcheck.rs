//! Finite-difference gradient checking used throughout the test suite.

use ndarray::ArrayD;

use super::engine::{grad, Var};

/// Central-difference step. With f64 arithmetic this gives ~1e-10 accuracy
/// on smooth functions, far below the comparison tolerance.
pub const FD_STEP: f64 = 1e-5;

/// Numerically differentiate `f` (a scalar function of one tensor) at `x`.
pub fn numerical_grad<F: Fn(&Var) -> Var>(f: F, x: &ArrayD<f64>) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(x.raw_dim());
    let flat_len = x.len();
    for i in 0..flat_len {
        let mut xp = x.clone();
        let mut xm = x.clone();
        {
            let sp = xp.as_slice_mut().unwrap();
            sp[i] += FD_STEP;
        }
        {
            let sm = xm.as_slice_mut().unwrap();
            sm[i] -= FD_STEP;
        }
        let fp = f(&Var::leaf(xp)).value();
        let fm = f(&Var::leaf(xm)).value();
        out.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * FD_STEP);
    }
    out
}

/// Analytic gradient of `f` at `x` via the reverse-mode engine.
pub fn analytic_grad<F: Fn(&Var) -> Var>(f: F, x: &ArrayD<f64>) -> ArrayD<f64> {
    let xv = Var::leaf(x.clone());
    let y = f(&xv);
    let gs = grad(&y, &[&xv], false);
    gs[0]
        .as_ref()
        .expect("function does not depend on the input")
        .data()
        .clone()
}

/// Largest relative error between two gradients. The denominator is floored
/// so that near-zero entries compare absolutely.
pub fn max_rel_error(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Assert that analytic and numerical gradients of `f` agree at `x`.
pub fn check<F: Fn(&Var) -> Var + Copy>(f: F, x: &ArrayD<f64>, tol: f64) {
    let ana = analytic_grad(f, x);
    let num = numerical_grad(f, x);
    let err = max_rel_error(&ana, &num);
    assert!(
        err < tol,
        "gradient mismatch: max relative error {err:.3e} (tol {tol:.1e})\nanalytic: {ana:?}\nnumerical: {num:?}"
    );
}
