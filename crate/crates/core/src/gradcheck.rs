//! Central finite-difference check of hand-derived gradients.

use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares `gradient(point)` against `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`
/// coordinate by coordinate; relative error is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check<F, G>(value: F, gradient: G, point: &[f64], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    grad_check_with_floor(value, gradient, point, epsilon, DEFAULT_FLOOR)
}

pub fn grad_check_with_floor<F, G>(
    value: F,
    gradient: G,
    point: &[f64],
    epsilon: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon {epsilon} must be > 0")));
    }
    let analytic = gradient(point);
    if analytic.len() != point.len() {
        return Err(Error::LengthMismatch {
            left: analytic.len(),
            right: point.len(),
        });
    }
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    let mut max_rel_error = 0.0;
    let mut worst_index = None;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let up = value(&x);
        x[i] = orig - epsilon;
        let down = value(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at probe of coordinate {i}")));
        }
        let n = (up - down) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > max_rel_error || worst_index.is_none() {
            max_rel_error = rel;
            worst_index = Some(i);
        }
        numeric.push(n);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
