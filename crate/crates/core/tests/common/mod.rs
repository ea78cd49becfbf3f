//! Helpers shared by the integration tests. The brute-force references in
//! this file never call into the library.

#![allow(dead_code)]

pub mod gradient;

use std::f64::consts::PI;

/// `sum_j w_j |x_j - c|^p`.
pub fn lp_objective(values: &[f64], weights: &[f64], p: f64, c: f64) -> f64 {
    values
        .iter()
        .zip(weights)
        .map(|(x, w)| w * (x - c).abs().powf(p))
        .sum()
}

/// Argmin of the L_p objective over an evenly spaced grid on `[lo, hi]`.
pub fn grid_minimizer(values: &[f64], weights: &[f64], p: f64, points: usize) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut best = (f64::INFINITY, lo);
    for n in 0..points {
        let c = lo + (hi - lo) * n as f64 / (points - 1) as f64;
        let f = lp_objective(values, weights, p, c);
        if f < best.0 {
            best = (f, c);
        }
    }
    best.1
}

pub fn mean(values: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    values.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / total
}

/// The L_1 minimiser lies on a candidate, so evaluate the objective at each.
pub fn median(values: &[f64], weights: &[f64]) -> f64 {
    let mut best = (f64::INFINITY, values[0]);
    for &c in values {
        let f = lp_objective(values, weights, 1.0, c);
        if f < best.0 {
            best = (f, c);
        }
    }
    best.1
}

/// Midpoint of the candidates that carry weight.
pub fn midrange(values: &[f64], weights: &[f64]) -> f64 {
    let live = values.iter().zip(weights).filter(|(_, w)| **w > 0.0).map(|(x, _)| *x);
    let (lo, hi) = live.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
    0.5 * (lo + hi)
}

/// Plain bisection to absolute tolerance `tol`.
pub fn bisect(g: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let rising = g(hi) > g(lo);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if (g(mid) > 0.0) == rising {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn normal_density(x: f64, mean: f64, scale: f64) -> f64 {
    let z = (x - mean) / scale;
    (-0.5 * z * z).exp() / (scale * (2.0 * PI).sqrt())
}

/// Exponent of the L_p problem from the weighted spread of the candidates:
/// `p = 1 / (1 - rho^k)` with `k = ln 2 / ln sqrt(pi / 2)`, unclamped.
pub fn exponent_from_shape(values: &[f64], weights: &[f64]) -> f64 {
    let mu = mean(values, weights);
    let var: f64 = values.iter().zip(weights).map(|(x, w)| w * (x - mu).powi(2)).sum();
    let mae: f64 = values.iter().zip(weights).map(|(x, w)| w * (x - mu).abs()).sum();
    let rho = mae / var.sqrt();
    let k = 2f64.ln() / (PI / 2.0).sqrt().ln();
    1.0 / (1.0 - rho.powf(k))
}

/// MAE over STD of a standard normal, `sqrt(2 / pi)`.
pub fn gaussian_rho() -> f64 {
    (2.0 / PI).sqrt()
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

/// Sample autocorrelation at `lag`.
pub fn autocorrelation(xs: &[f64], lag: usize) -> f64 {
    let (m, v) = mean_var(xs);
    let n = xs.len() - lag;
    let c: f64 = (0..n).map(|t| (xs[t] - m) * (xs[t + lag] - m)).sum::<f64>() / n as f64;
    c / v
}

pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, vx) = mean_var(xs);
    let (my, vy) = mean_var(ys);
    let c: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / xs.len() as f64;
    c / (vx * vy).sqrt()
}
