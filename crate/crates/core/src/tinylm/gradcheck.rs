//! Central-difference gradient checker.

use rand::seq::index::sample;
use serde::Serialize;

use crate::seed;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is essentially zero are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub index: usize,
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Coordinates whose relative error exceeds the tolerance.
    pub failing: Vec<GradCheckEntry>,
    /// Coordinate with the largest relative error.
    pub worst: Option<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare `analytic[i]` against `(f(x + h e_i) - f(x - h e_i)) / 2h` for
/// each `i` in `coords`.
pub fn check_gradients(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    tolerance: f64,
    name: impl Fn(usize) -> String,
) -> GradCheckReport {
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        tolerance,
        failing: Vec::new(),
        worst: None,
    };
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = rel_err(analytic[i], numeric);
        let entry = || GradCheckEntry {
            index: i,
            name: name(i),
            analytic: analytic[i],
            numeric,
            rel_err: err,
        };
        report.checked += 1;
        // NaN compares false, so record it explicitly as a failure.
        if err > report.max_rel_err || err.is_nan() {
            report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
            report.worst = Some(entry());
        }
        if !(err <= tolerance) {
            report.failing.push(entry());
        }
    }
    report
}

/// Deterministic sorted subsample of `k` coordinates out of `0..n`
/// (all of them when `k >= n`).
pub fn subsample_coords(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = seed::rng(seed::derive(seed, "gradcheck/coords", &[n as u64, k as u64]));
    let mut out = sample(&mut rng, n, k).into_vec();
    out.sort_unstable();
    out
}
