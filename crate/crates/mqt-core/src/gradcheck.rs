//! Central finite-difference gradient checking.
//!
//! The checker only ever calls the forward pass of the function under test,
//! so it stays independent of the backward implementation it verifies.

/// Central difference of `f` with respect to `x[i]`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += eps;
    xm[i] -= eps;
    (f(&xp) - f(&xm)) / (2.0 * eps)
}

/// Relative error with a floor: values that are both numerically zero agree.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-10 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Central differences at fp64 carry ~1e-10 absolute noise (rounding in the
/// two forward evaluations plus truncation), so components smaller than this
/// floor are compared on an absolute scale rather than a relative one.
const FD_MAGNITUDE_FLOOR: f64 = 1e-4;

/// Error measure for comparing an analytic gradient against a central
/// difference: relative above [`FD_MAGNITUDE_FLOOR`], absolute-scaled below.
pub fn fd_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(FD_MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Max [`fd_err`] between `analytic` and central differences of `f` at the
/// given indices (all indices when empty).
pub fn max_rel_err(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    indices: &[usize],
) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let all: Vec<usize>;
    let idx = if indices.is_empty() {
        all = (0..x.len()).collect();
        &all
    } else {
        indices
    };
    let mut worst: f64 = 0.0;
    for &i in idx {
        let numeric = central_diff(f, x, i, eps);
        worst = worst.max(fd_err(analytic[i], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        // f(x) = sum x_i^2, df/dx_i = 2 x_i
        let x = [0.5, -1.25, 2.0];
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let mut f = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        let err = max_rel_err(&mut f, &x, &analytic, 1e-5, &[]);
        assert!(err < 1e-8, "got {err}");
    }

    #[test]
    fn rel_err_floors_tiny_values() {
        assert_eq!(rel_err(1e-13, -1e-13), 0.0);
        assert!(rel_err(1.0, 1.1) > 0.09);
    }
}
