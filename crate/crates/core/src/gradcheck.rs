//! Central finite differences, the independent oracle for every backward rule.
//!
//! Errors are reported relative to the scale of the analytic gradient:
//! `max_i |analytic_i − numeric_i| / (max_i |analytic_i| + 1e-8)`.
//! Per-element ratios blow up on entries that are zero up to rounding, where
//! the finite difference is pure noise of order `ε·|f|/h`.

use crate::tensor::Tensor;

/// Default step for 64-bit checks.
pub const STEP: f64 = 1e-5;

/// Numeric derivative of `f` w.r.t. the listed flat indices of `x`.
pub fn central_difference(
    x: &Tensor,
    indices: &[usize],
    h: f64,
    mut f: impl FnMut(&Tensor) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error between analytic entries (at `indices`) and numeric ones.
pub fn relative_error(analytic: &Tensor, indices: &[usize], numeric: &[f64]) -> f64 {
    let scale = indices
        .iter()
        .map(|&i| analytic.data()[i].abs())
        .fold(0.0, f64::max);
    let worst = indices
        .iter()
        .zip(numeric)
        .map(|(&i, n)| (analytic.data()[i] - n).abs())
        .fold(0.0, f64::max);
    worst / (scale + 1e-8)
}

/// Checks every entry of `x`.
pub fn check_all(x: &Tensor, analytic: &Tensor, f: impl FnMut(&Tensor) -> f64) -> f64 {
    let idx: Vec<usize> = (0..x.numel()).collect();
    let num = central_difference(x, &idx, STEP, f);
    relative_error(analytic, &idx, &num)
}

/// Checks up to `max` evenly spread entries of `x`.
pub fn check_sampled(x: &Tensor, analytic: &Tensor, max: usize, f: impl FnMut(&Tensor) -> f64) -> f64 {
    let n = x.numel();
    let idx: Vec<usize> = if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|k| k * n / max + (k * 7919) % (n / max).max(1)).collect()
    };
    let num = central_difference(x, &idx, STEP, f);
    relative_error(analytic, &idx, &num)
}
